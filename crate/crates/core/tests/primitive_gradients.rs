//! Every differentiable primitive against central differences on random
//! inputs in [-2, 2], 100 seeds each.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saaf_core::tensor::{finite_diff_check, ParamRegistry, Tensor, TensorError};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

type Forward = dyn Fn(&[&Tensor]) -> Result<Tensor, TensorError>;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values in ±[0.5, 2], keeping a divisor away from its pole.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.5..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Checks `sum(f(inputs) ⊙ w)` for a fixed random weighting `w`, so every
/// output element carries a distinct cotangent.
fn check(seed: u64, inputs: Vec<(Vec<usize>, Vec<f64>)>, f: &Forward) {
    let mut reg = ParamRegistry::new();
    for (i, (shape, data)) in inputs.iter().enumerate() {
        reg.insert(&format!("x{i}"), shape, data.clone(), true).unwrap();
    }
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("x{i}")).collect();
    let loss = |r: &ParamRegistry| -> Result<Tensor, TensorError> {
        let ts: Vec<&Tensor> = names.iter().map(|n| r.get(n)).collect::<Result<_, _>>()?;
        let out = f(&ts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w = Tensor::new(out.shape(), uniform(&mut rng, out.numel(), -1.0, 1.0))?;
        out.mul(&w)?.sum()
    };
    let report = finite_diff_check(loss, &mut reg, H, TOL, seed).unwrap();
    assert!(report.passed, "seed {seed}: {:?}", report.entries);
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<(Vec<usize>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| (s.to_vec(), uniform(&mut rng, s.iter().product(), -2.0, 2.0))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 100,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x5aaf),
        ..ProptestConfig::default()
    })]

    #[test]
    fn add_broadcast(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[3, 4], &[4]]), &|x| x[0].add(x[1]));
    }

    #[test]
    fn mul_broadcast(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[3, 4], &[4]]), &|x| x[0].mul(x[1]));
    }

    #[test]
    fn div_broadcast(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let num = uniform(&mut rng, 12, -2.0, 2.0);
        let den = away_from_zero(&mut rng, 4);
        check(seed, vec![(vec![3, 4], num), (vec![4], den)], &|x| x[0].div(x[1]));
    }

    #[test]
    fn matmul(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[3, 4], &[4, 2]]), &|x| x[0].matmul(x[1]));
    }

    #[test]
    fn transpose_reshape(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[3, 4]]), &|x| x[0].transpose()?.reshape(&[2, 6]));
    }

    #[test]
    fn concat_slice(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[2, 3], &[2, 2]]), &|x| Tensor::concat(&[x[0], x[1]], 1)?.slice(1, 1, 4));
    }

    #[test]
    fn softmax(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[3, 5]]), &|x| x[0].softmax());
    }

    #[test]
    fn log_softmax(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[3, 5]]), &|x| x[0].log_softmax());
    }

    #[test]
    fn sigmoid(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[6]]), &|x| x[0].sigmoid());
    }

    #[test]
    fn gelu(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[6]]), &|x| x[0].gelu());
    }

    #[test]
    fn layer_norm(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[3, 5], &[5], &[5]]), &|x| x[0].layer_norm(x[1], x[2], 1e-5));
    }

    #[test]
    fn mean_sum(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[2, 3]]), &|x| x[0].mean()?.add(&x[0].scale(0.5)?.sum()?));
    }

    #[test]
    fn scale_add_scalar(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[5]]), &|x| x[0].scale(-1.7)?.add_scalar(0.3));
    }

    #[test]
    fn gather_rows_with_repeats(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[4, 3]]), &|x| x[0].gather_rows(&[2, 0, 2, 3]));
    }

    #[test]
    fn pick(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[3, 4]]), &|x| x[0].pick(&[3, 0, 1]));
    }

    #[test]
    fn upsample_bilinear(seed in any::<u64>()) {
        check(seed, inputs(seed, &[&[3, 2, 2]]), &|x| x[0].upsample_bilinear(7, 5));
    }

    #[test]
    fn bce_with_logits(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = uniform(&mut rng, 6, 0.0, 1.0);
        check(seed, inputs(seed, &[&[6]]), &move |x| x[0].bce_with_logits(&target));
    }

    #[test]
    fn attention(seed in any::<u64>(), causal in any::<bool>()) {
        check(seed, inputs(seed, &[&[5, 4], &[5, 4], &[5, 4]]), &move |x| Tensor::attention(x[0], x[1], x[2], 2, causal));
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(&[4, 7], uniform(&mut rng, 28, -50.0, 50.0)).unwrap();
        let y = x.softmax().unwrap();
        for row in y.data().chunks(7) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_sum_gradient_matches_central_differences() {
    check(3, inputs(3, &[&[3, 3], &[3, 3]]), &|x| x[0].matmul(x[1]));
}
