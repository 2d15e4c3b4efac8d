//! Dense tensors and the hand-differentiated layers the models are built from.

mod adam;
mod checkpoint;
mod dropout;
mod gradcheck;
mod linear;
mod lstm;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dropout::{dropout, DropoutMask, Mode};
pub use gradcheck::{grad_check, grad_check_coords, relative_error, GradCheckReport};
pub use linear::{fc_backward, fc_forward, Activation, FcCache, FcGrads, Linear};
pub use lstm::{lstm_backward, lstm_backward_into, lstm_forward, GateParams, LstmCache, LstmGrads, LstmParams};
pub use tensor::{axpy, dot, Tensor};

/// Named access to trainable tensors, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// All values concatenated in [`Parameters::tensors`] order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`Parameters::flatten`].
    fn unflatten(&mut self, values: &[f64]) {
        let mut pos = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[pos..pos + n]);
            pos += n;
        }
        assert_eq!(pos, values.len(), "parameter vector length mismatch");
    }

    fn fill_zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.data_mut().fill(0.0);
        }
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            axpy(1.0, s.data(), dst.data_mut());
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
