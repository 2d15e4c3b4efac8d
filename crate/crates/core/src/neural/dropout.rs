use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-element multipliers of an inverted-dropout pass (`0` or `1/(1-rate)`).
/// `None` means the pass was the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(Option<Vec<f64>>);

impl DropoutMask {
    pub fn identity() -> Self {
        DropoutMask(None)
    }

    pub fn sample<R: Rng>(len: usize, rate: f64, mode: Mode, rng: &mut R) -> Result<Self> {
        check_rate(rate)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(DropoutMask(None));
        }
        let keep = 1.0 / (1.0 - rate);
        Ok(DropoutMask(Some(
            (0..len)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect(),
        )))
    }

    pub fn apply(&self, values: &mut [f64]) {
        if let Some(scale) = &self.0 {
            for (v, s) in values.iter_mut().zip(scale) {
                *v *= s;
            }
        }
    }

    /// The backward pass is the same elementwise product.
    pub fn backward(&self, grad: &mut [f64]) {
        self.apply(grad)
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_none()
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; evaluation is the identity.
pub fn dropout<R: Rng>(x: &Tensor, rate: f64, mode: Mode, rng: &mut R) -> Result<(Tensor, DropoutMask)> {
    let mask = DropoutMask::sample(x.len(), rate, mode, rng)?;
    let mut out = x.clone();
    mask.apply(out.data_mut());
    Ok((out, mask))
}
