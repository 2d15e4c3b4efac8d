use rand::Rng;

use super::{axpy, dot, Parameters, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully-connected layer, `y = act(x W + b)` with `W` of shape `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Weights uniform in `[-1/sqrt(in), 1/sqrt(in)]`, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::uniform(&[input, output], 1.0 / (input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor, activation: Activation) -> Result<(Tensor, FcCache)> {
        fc_forward(x, &self.weight, &self.bias, activation)
    }

    pub fn backward(&self, cache: &FcCache, grad_out: &Tensor) -> Result<FcGrads> {
        fc_backward(cache, &self.weight, grad_out)
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Values saved by [`fc_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct FcCache {
    pub input: Tensor,
    pub output: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct FcGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn fc_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, activation: Activation) -> Result<(Tensor, FcCache)> {
    let (n, d) = x.matrix_dims()?;
    let (wd, k) = weight.matrix_dims()?;
    if wd != d || bias.shape() != [k] {
        return Err(Error::Shape(format!(
            "input {:?} is incompatible with weight {:?} and bias {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, k]);
    for r in 0..n {
        let row = out.row_mut(r);
        row.copy_from_slice(bias.data());
        for (j, &xv) in x.row(r).iter().enumerate() {
            if xv != 0.0 {
                axpy(xv, weight.row(j), row);
            }
        }
        for v in row.iter_mut() {
            *v = activation.apply(*v);
        }
    }
    let cache = FcCache {
        input: x.clone(),
        output: out.clone(),
        activation,
    };
    Ok((out, cache))
}

pub fn fc_backward(cache: &FcCache, weight: &Tensor, grad_out: &Tensor) -> Result<FcGrads> {
    if grad_out.shape() != cache.output.shape() {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match output {:?}",
            grad_out.shape(),
            cache.output.shape()
        )));
    }
    let (n, d) = cache.input.matrix_dims()?;
    let k = weight.shape()[1];
    let mut dz = grad_out.clone();
    for (g, &y) in dz.data_mut().iter_mut().zip(cache.output.data()) {
        *g *= cache.activation.derivative_from_output(y);
    }
    let mut dw = Tensor::zeros(&[d, k]);
    let mut db = Tensor::zeros(&[k]);
    let mut dx = Tensor::zeros(&[n, d]);
    for r in 0..n {
        let dz_row = dz.row(r);
        axpy(1.0, dz_row, db.data_mut());
        for (j, &xv) in cache.input.row(r).iter().enumerate() {
            if xv != 0.0 {
                axpy(xv, dz_row, dw.row_mut(j));
            }
        }
        let dx_row = dx.row_mut(r);
        for (j, v) in dx_row.iter_mut().enumerate() {
            *v = dot(weight.row(j), dz_row);
        }
    }
    Ok(FcGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let (y, _) = fc_forward(&x, &w, &Tensor::vector(vec![0.0]), Activation::None).unwrap();
        assert_eq!(y.data(), &[3.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[4, 3], 2.0, &mut rng);
        let (y, _) = fc_forward(&x, &Tensor::zeros(&[3, 5]), &Tensor::zeros(&[5]), Activation::Tanh).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::from_rows(&[vec![0.5]]).unwrap();
        let w = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let (y, _) = fc_forward(&x, &w, &Tensor::vector(vec![-1.0]), Activation::Tanh).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let x = Tensor::zeros(&[2, 3]);
        let err = fc_forward(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2]), Activation::None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn relu_clips_negative() {
        let x = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![-1.0, 1.0]]).unwrap();
        let (y, _) = fc_forward(&x, &w, &Tensor::zeros(&[2]), Activation::Relu).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0]);
    }
}
