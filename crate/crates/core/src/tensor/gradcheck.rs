use super::{no_grad, ParamRegistry, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Coordinates probed per parameter.
const MAX_COORDS: usize = 32;

/// Absolute floor on the relative-error denominator. Below it the comparison
/// degrades to an absolute one: central differences at `h = 1e-5` on a
/// unit-scale loss resolve gradients only to ~1e-11..1e-10, so smaller
/// gradients cannot be judged relatively.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub entries: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares backpropagated gradients of every trainable parameter against
/// central differences `(L(p + h) - L(p - h)) / 2h`.
///
/// Up to 32 coordinates per parameter are drawn without replacement by a
/// `seed`ed RNG. Parameter values are restored bit-exactly afterwards and all
/// gradients are cleared.
pub fn finite_diff_check<F, E>(
    mut loss_fn: F,
    registry: &mut ParamRegistry,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<CheckReport, E>
where
    F: FnMut(&ParamRegistry) -> Result<Tensor, E>,
    E: From<TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidHyperparameter(format!("step size h = {h}")).into());
    }
    let finite = |t: &Tensor| -> Result<f64, E> {
        let v = t.item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFiniteLoss.into())
        }
    };

    registry.zero_grads();
    let loss = loss_fn(registry)?;
    finite(&loss)?;
    loss.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for name in registry.trainable_names() {
        let tensor = registry.get(&name)?.clone();
        let analytic = tensor.grad_or_zeros();
        let original = tensor.data().to_vec();
        let n = original.len();
        let coords = rand::seq::index::sample(&mut rng, n, n.min(MAX_COORDS)).into_vec();

        let mut entry =
            ParamCheck { name: name.clone(), coords_checked: coords.len(), max_rel_error: 0.0, max_abs_error: 0.0 };
        for &i in &coords {
            let mut probe = |delta: f64| -> Result<f64, E> {
                let mut values = original.clone();
                values[i] += delta;
                registry.set_data(&name, values)?;
                let l = no_grad(|| loss_fn(registry))?;
                finite(&l)
            };
            let plus = probe(h);
            let minus = plus.and_then(|p| probe(-h).map(|m| (p, m)));
            registry.set_data(&name, original.clone())?;
            let (plus, minus) = minus?;
            let numeric = (plus - minus) / (2.0 * h);
            entry.max_abs_error = entry.max_abs_error.max((analytic[i] - numeric).abs());
            entry.max_rel_error = entry.max_rel_error.max(relative_error(analytic[i], numeric));
        }
        entries.push(entry);
    }
    registry.zero_grads();

    let passed = entries.iter().all(|e| e.max_rel_error < tol);
    Ok(CheckReport { entries, tol, passed })
}
