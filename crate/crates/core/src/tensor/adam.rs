use super::{ParamRegistry, Result, TensorError};
use std::collections::BTreeMap;

/// Bias-corrected Adam moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let bad = |what: String| Err(TensorError::InvalidHyperparameter(what));
        if !(lr > 0.0 && lr.is_finite()) {
            return bad(format!("lr = {lr}"));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return bad(format!("betas = ({beta1}, {beta2})"));
        }
        if !(eps > 0.0) {
            return bad(format!("eps = {eps}"));
        }
        Ok(Self { lr, beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    /// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn with_lr(lr: f64) -> Result<Self> {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// One Adam update over the trainable parameters, then clears every gradient.
///
/// Validation happens before any mutation: a trainable parameter without a
/// gradient, or a moment buffer of the wrong size, leaves the registry and
/// the state untouched.
pub fn adam_step(registry: &mut ParamRegistry, state: &mut AdamState) -> Result<()> {
    let mut updates = Vec::new();
    for (name, p) in registry.iter().filter(|(_, p)| p.trainable) {
        let g = p.tensor.grad().ok_or_else(|| TensorError::MissingGradient(name.to_string()))?;
        let n = p.tensor.numel();
        for buf in [state.m.get(name), state.v.get(name)].into_iter().flatten() {
            if buf.len() != n {
                return Err(TensorError::ShapeMismatch(format!(
                    "optimizer state for `{name}` has {} values, parameter has {n}",
                    buf.len()
                )));
            }
        }
        updates.push((name.to_string(), g));
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, g) in updates {
        let mut values = registry.get(&name)?.data().to_vec();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        registry.set_data(&name, values)?;
    }
    registry.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_registry(trainable: bool) -> ParamRegistry {
        let mut r = ParamRegistry::new();
        r.insert("p", &[1], vec![0.0], trainable).unwrap();
        r
    }

    #[test]
    fn first_step_from_zero() {
        let mut r = scalar_registry(true);
        r.get("p").unwrap().set_grad(vec![1.0]).unwrap();
        let mut s = AdamState::with_lr(1e-4).unwrap();
        adam_step(&mut r, &mut s).unwrap();
        // m_hat = v_hat = 1 after bias correction: step = lr / (1 + eps).
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((r.get("p").unwrap().data()[0] - expected).abs() < 1e-18);
        assert!((expected + 9.9999999e-5).abs() < 1e-12);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut r = ParamRegistry::new();
        r.insert("w", &[3], vec![0.5, -1.25, 7.0], true).unwrap();
        r.get("w").unwrap().set_grad(vec![0.0; 3]).unwrap();
        let mut s = AdamState::with_lr(1e-3).unwrap();
        adam_step(&mut r, &mut s).unwrap();
        assert_eq!(r.get("w").unwrap().data(), &[0.5, -1.25, 7.0]);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut r = scalar_registry(false);
        r.insert("q", &[1], vec![1.0], true).unwrap();
        r.get("p").unwrap().set_grad(vec![5.0]).unwrap();
        r.get("q").unwrap().set_grad(vec![1.0]).unwrap();
        let before = r.get("p").unwrap().data()[0].to_bits();
        adam_step(&mut r, &mut AdamState::with_lr(0.1).unwrap()).unwrap();
        assert_eq!(r.get("p").unwrap().data()[0].to_bits(), before);
        assert!(!r.get("p").unwrap().has_grad(), "gradients are cleared");
    }

    #[test]
    fn missing_gradient_is_reported_without_mutation() {
        let mut r = scalar_registry(true);
        let mut s = AdamState::with_lr(1e-3).unwrap();
        assert_eq!(adam_step(&mut r, &mut s).unwrap_err(), TensorError::MissingGradient("p".into()));
        assert_eq!(s.t, 0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamState::new(0.0, 0.9, 0.999, 1e-8).is_err());
        assert!(AdamState::new(1e-3, 1.0, 0.999, 1e-8).is_err());
        assert!(AdamState::new(1e-3, 0.9, 0.999, 0.0).is_err());
    }

    #[test]
    fn step_counter_increments_once_per_step() {
        let mut r = scalar_registry(true);
        let mut s = AdamState::with_lr(1e-3).unwrap();
        for k in 1..=3 {
            r.get("p").unwrap().set_grad(vec![0.1]).unwrap();
            adam_step(&mut r, &mut s).unwrap();
            assert_eq!(s.t, k);
        }
    }
}
