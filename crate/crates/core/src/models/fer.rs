//! Single-image model: feature extractor followed by a `D -> 2` tanh layer.

use rand::Rng;

use super::extractor::{Extractor, FeatureExtractor, FrameInput};
use crate::dataset::AffectState;
use crate::error::{Error, Result};
use crate::metrics::ccc_loss_and_grad;
use crate::neural::{Activation, Checkpoint, Linear, Parameters, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FerModel {
    pub extractor: Extractor,
    pub head: Linear,
}

/// Result of one head-level loss evaluation.
#[derive(Debug, Clone)]
pub struct HeadStep {
    pub loss: f64,
    pub head_grads: Linear,
    /// `N x D` gradient with respect to the input features.
    pub feature_grads: Tensor,
}

impl FerModel {
    pub fn new<R: Rng>(extractor: Extractor, rng: &mut R) -> Self {
        let d = extractor.output_dim();
        FerModel {
            extractor,
            head: Linear::init(d, 2, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.head.input_dim()
    }

    /// `N x D` features to `N x 2` outputs in `[-1, 1]`.
    pub fn head_forward(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(features, Activation::Tanh)?.0)
    }

    /// Batch `1 - CCC` loss of the head over precomputed features.
    pub fn head_step(&self, features: &Tensor, labels: &Tensor) -> Result<HeadStep> {
        let (out, cache) = self.head.forward(features, Activation::Tanh)?;
        let (loss, grad) = ccc_loss_and_grad(&out, labels)?;
        let g = self.head.backward(&cache, &grad)?;
        Ok(HeadStep {
            loss,
            head_grads: Linear {
                weight: g.weight,
                bias: g.bias,
            },
            feature_grads: g.input,
        })
    }

    /// Predicts the affect of one frame.
    pub fn predict(&self, frame: FrameInput<'_>) -> Result<AffectState> {
        let f = self.extractor.extract(frame)?;
        self.predict_features(&f)
    }

    pub fn predict_features(&self, feature: &[f64]) -> Result<AffectState> {
        if feature.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "feature of length {} does not match head input {}",
                feature.len(),
                self.feature_dim()
            )));
        }
        let out = self.head_forward(&Tensor::new(vec![1, feature.len()], feature.to_vec())?)?;
        Ok(AffectState::clamped(out.data()[0], out.data()[1]))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.extractor.save_into(&mut ckpt);
        for (name, t) in self.head.tensors() {
            ckpt.insert(format!("head.{name}"), t.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cache: Option<super::FeatureCache>) -> Result<Self> {
        let extractor = Extractor::from_checkpoint(ckpt, cache)?;
        let weight = ckpt.require("head.weight")?.clone();
        let bias = ckpt.require("head.bias")?.clone();
        if weight.shape() != [extractor.output_dim(), 2] || bias.shape() != [2] {
            return Err(Error::Format(format!(
                "head shapes {:?} / {:?} do not fit feature dim {}",
                weight.shape(),
                bias.shape(),
                extractor.output_dim()
            )));
        }
        Ok(FerModel {
            extractor,
            head: Linear { weight, bias },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FeatureCache, TinyCnn};
    use crate::neural::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cnn_model(seed: u64) -> FerModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cnn = TinyCnn::init(8, 4, &mut rng).unwrap();
        FerModel::new(Extractor::TinyCnn(cnn), &mut rng)
    }

    #[test]
    fn zero_features_zero_head() {
        let mut m = cnn_model(0);
        m.head = Linear::zeros(4, 2);
        assert_eq!(m.predict_features(&[0.0; 4]).unwrap(), AffectState::ZERO);
    }

    #[test]
    fn outputs_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = cnn_model(1);
        m.head.weight = Tensor::uniform(&[4, 2], 50.0, &mut rng);
        let x = Tensor::uniform(&[1000, 4], 10.0, &mut rng);
        let out = m.head_forward(&x).unwrap();
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = cnn_model(2);
        let x = Tensor::uniform(&[8, 4], 1.0, &mut rng);
        let y = Tensor::uniform(&[8, 2], 1.0, &mut rng);
        let step = m.head_step(&x, &y).unwrap();
        let mut probe = m.head.clone();
        let report = grad_check(
            |p| {
                probe.unflatten(p);
                let out = probe.forward(&x, Activation::Tanh).unwrap().0;
                ccc_loss_and_grad(&out, &y).unwrap().0
            },
            &m.head.flatten(),
            &step.head_grads.flatten(),
            1e-6,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = cnn_model(4);
        let back = FerModel::from_checkpoint(&FerModel::from_checkpoint(&m.to_checkpoint(), None).unwrap().to_checkpoint(), None).unwrap();
        assert_eq!(back, m);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pre = FerModel::new(Extractor::Precomputed(FeatureCache::new(4)), &mut rng);
        let ckpt = pre.to_checkpoint();
        assert!(FerModel::from_checkpoint(&ckpt, None).is_err());
        assert_eq!(FerModel::from_checkpoint(&ckpt, Some(FeatureCache::new(4))).unwrap(), pre);
    }
}
