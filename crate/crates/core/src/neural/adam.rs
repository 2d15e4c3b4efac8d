use super::{Parameters, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    name: String,
    m: Tensor,
    v: Tensor,
}

/// Step count and first/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Fails without touching `params` if
/// any gradient is non-finite.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    let grads = grads.tensors();
    for (name, g) in &grads {
        if !g.all_finite() {
            return Err(Error::NonFinite(name.clone()));
        }
    }
    let mut params = params.tensors_mut();
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.moments.is_empty() {
        state.moments = params
            .iter()
            .map(|(name, p)| Moments {
                name: name.clone(),
                m: Tensor::zeros_like(p),
                v: Tensor::zeros_like(p),
            })
            .collect();
    }
    for ((name, p), (_, g)) in params.iter().zip(&grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient of `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    for ((name, p), moments) in params.iter().zip(&state.moments) {
        if *name != moments.name || p.shape() != moments.m.shape() {
            return Err(Error::Shape(format!(
                "optimizer state for `{}` does not match parameter `{name}`",
                moments.name
            )));
        }
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let correction1 = 1.0 - beta1.powi(state.step as i32);
    let correction2 = 1.0 - beta2.powi(state.step as i32);
    for ((_, p), ((_, g), moments)) in params.iter_mut().zip(grads.iter().zip(&mut state.moments)) {
        let m = moments.m.data_mut();
        let v = moments.v.data_mut();
        for (k, (pk, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m[k] / correction1;
            let v_hat = v[k] / correction2;
            *pk -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Tensor);

    impl Parameters for Scalar {
        fn tensors(&self) -> Vec<(String, &Tensor)> {
            vec![("x".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("x".into(), &mut self.0)]
        }
    }

    fn scalar(v: f64) -> Scalar {
        Scalar(Tensor::vector(vec![v]))
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let mut state = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut p, &scalar(0.0), &mut state).unwrap();
        }
        assert_eq!(p.0.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1.0, 1e-3, -2.5] {
            let mut p = scalar(0.0);
            let mut state = AdamState::new(AdamConfig::default());
            adam_step(&mut p, &scalar(g), &mut state).unwrap();
            let step = -p.0.data()[0];
            // lr * g / (|g| + eps)
            let expected = 1e-5 * g / (g.abs() + 1e-8);
            assert!((step - expected).abs() < 1e-18, "{step} vs {expected}");
            assert!((step.abs() - 1e-5).abs() < 1e-10);
        }
    }

    #[test]
    fn repeated_positive_gradient_decreases() {
        let mut p = scalar(1.0);
        let mut state = AdamState::new(AdamConfig::default());
        adam_step(&mut p, &scalar(1.0), &mut state).unwrap();
        let after_one = p.0.data()[0];
        adam_step(&mut p, &scalar(1.0), &mut state).unwrap();
        assert!(after_one < 1.0 && p.0.data()[0] < after_one);
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn non_finite_gradient_named() {
        let mut p = scalar(1.0);
        let mut state = AdamState::new(AdamConfig::default());
        let err = adam_step(&mut p, &scalar(f64::NAN), &mut state).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref n) if n == "x"));
        assert_eq!(p.0.data(), &[1.0]);
        assert_eq!(state.step_count(), 0);
    }
}
