//! CAPNet: per-frame features integrated by an LSTM and two dense layers.

use rand::Rng;

use super::extractor::{Extractor, FeatureExtractor, FrameInput};
use super::FeatureCache;
use crate::dataset::AffectState;
use crate::error::{Error, Result};
use crate::metrics::ccc_loss_and_grad;
use crate::neural::{
    lstm_backward_into, lstm_forward, Activation, Checkpoint, DropoutMask, FcCache, Linear, LstmCache,
    LstmParams, Mode, Parameters, Tensor,
};
use crate::sampler::{Seconds, SamplerConfig};

/// LSTM over the window, then `H -> M` ReLU and `M -> 2` tanh layers.
/// Dropout is applied to the LSTM inputs and to its final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalityExtractor {
    pub lstm: LstmParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout_rate: f64,
}

/// Intermediate values of one window, for the backward pass.
#[derive(Debug, Clone)]
pub struct CapnetCache {
    input_mask: DropoutMask,
    lstm: LstmCache,
    hidden_mask: DropoutMask,
    fc1: FcCache,
    fc2: FcCache,
}

impl CapnetCache {
    /// Which units of the ReLU layer were active.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.fc1.output.data().iter().map(|&a| a > 0.0).collect()
    }
}

/// Loss and gradients of one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchStep {
    pub loss: f64,
    pub grads: CausalityExtractor,
    /// Gradient with respect to each window's `L x D` features.
    pub feature_grads: Vec<Tensor>,
    pub caches: Vec<CapnetCache>,
}

impl CausalityExtractor {
    pub fn zeros(feature_dim: usize, hidden: usize, fc_hidden: usize, dropout_rate: f64) -> Self {
        CausalityExtractor {
            lstm: LstmParams::zeros(feature_dim, hidden),
            fc1: Linear::zeros(hidden, fc_hidden),
            fc2: Linear::zeros(fc_hidden, 2),
            dropout_rate,
        }
    }

    pub fn init<R: Rng>(feature_dim: usize, hidden: usize, fc_hidden: usize, dropout_rate: f64, rng: &mut R) -> Self {
        CausalityExtractor {
            lstm: LstmParams::init(feature_dim, hidden, rng),
            fc1: Linear::init(hidden, fc_hidden, rng),
            fc2: Linear::init(fc_hidden, 2, rng),
            dropout_rate,
        }
    }

    pub fn zeros_like(&self) -> Self {
        CausalityExtractor::zeros(self.feature_dim(), self.hidden_dim(), self.fc_hidden(), self.dropout_rate)
    }

    pub fn feature_dim(&self) -> usize {
        self.lstm.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstm.hidden_dim()
    }

    pub fn fc_hidden(&self) -> usize {
        self.fc1.output_dim()
    }

    /// Runs one `L x D` window (oldest row first). `rng` drives dropout in
    /// train mode and is untouched in eval mode.
    pub fn forward<R: Rng>(&self, features: &Tensor, mode: Mode, rng: &mut R) -> Result<([f64; 2], CapnetCache)> {
        let input_mask = DropoutMask::sample(features.len(), self.dropout_rate, mode, rng)?;
        let mut x = features.clone();
        input_mask.apply(x.data_mut());
        let h = self.hidden_dim();
        let zeros = vec![0.0; h];
        let (hidden, lstm) = lstm_forward(&x, &self.lstm, &zeros, &zeros)?;
        let hidden_mask = DropoutMask::sample(h, self.dropout_rate, mode, rng)?;
        let mut hidden = hidden.into_data();
        hidden_mask.apply(&mut hidden);
        let (a1, fc1) = self.fc1.forward(&Tensor::new(vec![1, h], hidden)?, Activation::Relu)?;
        let (out, fc2) = self.fc2.forward(&a1, Activation::Tanh)?;
        let out = [out.data()[0], out.data()[1]];
        Ok((
            out,
            CapnetCache {
                input_mask,
                lstm,
                hidden_mask,
                fc1,
                fc2,
            },
        ))
    }

    /// Eval-mode prediction for one window.
    pub fn predict(&self, features: &Tensor) -> Result<AffectState> {
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let ([v, a], _) = self.forward(features, Mode::Eval, &mut unused)?;
        Ok(AffectState::clamped(v, a))
    }

    /// Adds parameter gradients for output gradient `grad_out` into `grads`
    /// and returns the gradient with respect to the window features.
    pub fn backward(&self, cache: &CapnetCache, grad_out: [f64; 2], grads: &mut CausalityExtractor) -> Result<Tensor> {
        let g2 = self.fc2.backward(&cache.fc2, &Tensor::new(vec![1, 2], grad_out.to_vec())?)?;
        add(&mut grads.fc2, &g2.weight, &g2.bias);
        let g1 = self.fc1.backward(&cache.fc1, &g2.input)?;
        add(&mut grads.fc1, &g1.weight, &g1.bias);
        let mut dh = g1.input.into_data();
        cache.hidden_mask.backward(&mut dh);
        let (mut dx, _, _) = lstm_backward_into(&self.lstm, &cache.lstm, &dh, &mut grads.lstm)?;
        cache.input_mask.backward(dx.data_mut());
        Ok(dx)
    }

    /// Forward and backward over a batch of windows with the `1 - CCC` loss.
    pub fn batch_step<R: Rng>(&self, windows: &[Tensor], labels: &Tensor, mode: Mode, rng: &mut R) -> Result<BatchStep> {
        if labels.shape() != [windows.len(), 2] {
            return Err(Error::Shape(format!(
                "labels {:?} do not match a batch of {} windows",
                labels.shape(),
                windows.len()
            )));
        }
        let mut preds = Vec::with_capacity(windows.len() * 2);
        let mut caches = Vec::with_capacity(windows.len());
        for w in windows {
            let (out, cache) = self.forward(w, mode, rng)?;
            preds.extend_from_slice(&out);
            caches.push(cache);
        }
        let preds = Tensor::new(vec![windows.len(), 2], preds)?;
        let (loss, grad) = ccc_loss_and_grad(&preds, labels)?;
        let mut grads = self.zeros_like();
        let mut feature_grads = Vec::with_capacity(windows.len());
        for (r, cache) in caches.iter().enumerate() {
            let g = grad.row(r);
            feature_grads.push(self.backward(cache, [g[0], g[1]], &mut grads)?);
        }
        Ok(BatchStep {
            loss,
            grads,
            feature_grads,
            caches,
        })
    }
}

fn add(dst: &mut Linear, weight: &Tensor, bias: &Tensor) {
    crate::neural::axpy(1.0, weight.data(), dst.weight.data_mut());
    crate::neural::axpy(1.0, bias.data(), dst.bias.data_mut());
}

impl Parameters for CausalityExtractor {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<_> = self.lstm.tensors().into_iter().map(|(n, t)| (format!("lstm.{n}"), t)).collect();
        out.extend(self.fc1.tensors().into_iter().map(|(n, t)| (format!("fc1.{n}"), t)));
        out.extend(self.fc2.tensors().into_iter().map(|(n, t)| (format!("fc2.{n}"), t)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<_> = self
            .lstm
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("lstm.{n}"), t))
            .collect();
        out.extend(self.fc1.tensors_mut().into_iter().map(|(n, t)| (format!("fc1.{n}"), t)));
        out.extend(self.fc2.tensors_mut().into_iter().map(|(n, t)| (format!("fc2.{n}"), t)));
        out
    }
}

/// Architecture and sampling settings stored next to the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelHeader {
    pub feature_dim: usize,
    pub lstm_hidden: usize,
    pub fc_hidden: usize,
    pub dropout: f64,
    pub sampler: SamplerConfig,
}

impl ModelHeader {
    pub const TENSOR: &'static str = "causality.config";

    /// `[D, H, M, w_num, w_den, s, d_num, d_den, f, dropout]`
    pub fn to_tensor(&self) -> Tensor {
        let s = &self.sampler;
        Tensor::vector(vec![
            self.feature_dim as f64,
            self.lstm_hidden as f64,
            self.fc_hidden as f64,
            *s.window().numer() as f64,
            *s.window().denom() as f64,
            s.stride() as f64,
            *s.lead().numer() as f64,
            *s.lead().denom() as f64,
            s.frame_rate() as f64,
            self.dropout,
        ])
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let v = t.data();
        if v.len() != 10 {
            return Err(Error::Format(format!("{} must hold 10 values, found {}", Self::TENSOR, v.len())));
        }
        let int = |x: f64| -> Result<i64> {
            if x.fract() != 0.0 || x < 0.0 {
                return Err(Error::Format(format!("{} holds non-integer field {x}", Self::TENSOR)));
            }
            Ok(x as i64)
        };
        if int(v[4])? == 0 || int(v[7])? == 0 {
            return Err(Error::Format(format!("{} has a zero denominator", Self::TENSOR)));
        }
        let sampler = SamplerConfig::new(
            Seconds::new(int(v[6])?, int(v[7])?),
            int(v[8])? as u32,
            Seconds::new(int(v[3])?, int(v[4])?),
            int(v[5])? as u32,
        )?;
        Ok(ModelHeader {
            feature_dim: int(v[0])? as usize,
            lstm_hidden: int(v[1])? as usize,
            fc_hidden: int(v[2])? as usize,
            dropout: v[9],
            sampler,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapNet {
    pub extractor: Extractor,
    pub causality: CausalityExtractor,
    pub sampler: SamplerConfig,
}

impl CapNet {
    pub fn new(extractor: Extractor, causality: CausalityExtractor, sampler: SamplerConfig) -> Result<Self> {
        check_dims(extractor.output_dim(), causality.feature_dim())?;
        Ok(CapNet {
            extractor,
            causality,
            sampler,
        })
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            feature_dim: self.causality.feature_dim(),
            lstm_hidden: self.causality.hidden_dim(),
            fc_hidden: self.causality.fc_hidden(),
            dropout: self.causality.dropout_rate,
            sampler: self.sampler,
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let want = self.sampler.window_len();
        if len != want {
            return Err(Error::Shape(format!("window has {len} frames, the model expects {want}")));
        }
        Ok(())
    }

    /// Eval-mode prediction from an `L x D` feature window.
    pub fn predict_features(&self, features: &Tensor) -> Result<AffectState> {
        self.check_len(features.shape().first().copied().unwrap_or(0))?;
        self.causality.predict(features)
    }

    /// Eval-mode prediction from the window frames, oldest first.
    pub fn predict(&self, frames: &[FrameInput<'_>]) -> Result<AffectState> {
        self.check_len(frames.len())?;
        let mut data = Vec::with_capacity(frames.len() * self.causality.feature_dim());
        for f in frames {
            data.extend(self.extractor.extract(*f)?);
        }
        self.causality
            .predict(&Tensor::new(vec![frames.len(), self.causality.feature_dim()], data)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.extractor.save_into(&mut ckpt);
        ckpt.insert(ModelHeader::TENSOR, self.header().to_tensor());
        for (name, t) in self.causality.tensors() {
            ckpt.insert(format!("causality.{name}"), t.clone());
        }
        ckpt
    }

    /// Reads only the causality extractor, whatever extractor the checkpoint holds.
    pub fn load_causality(ckpt: &Checkpoint) -> Result<(ModelHeader, CausalityExtractor)> {
        let header = ModelHeader::from_tensor(ckpt.require(ModelHeader::TENSOR)?)?;
        let mut c = CausalityExtractor::zeros(header.feature_dim, header.lstm_hidden, header.fc_hidden, header.dropout);
        for (name, t) in c.tensors_mut() {
            let stored = ckpt.require(&format!("causality.{name}"))?;
            if stored.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "causality.{name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(stored.data());
        }
        Ok((header, c))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cache: Option<FeatureCache>) -> Result<Self> {
        let extractor = Extractor::from_checkpoint(ckpt, cache)?;
        Self::with_extractor(ckpt, extractor)
    }

    /// Pairs the stored causality extractor with a different feature extractor of the same `D`.
    pub fn with_extractor(ckpt: &Checkpoint, extractor: Extractor) -> Result<Self> {
        let (header, causality) = Self::load_causality(ckpt)?;
        CapNet::new(extractor, causality, header.sampler)
    }
}

pub(crate) fn check_dims(extractor_dim: usize, causality_dim: usize) -> Result<()> {
    if extractor_dim != causality_dim {
        return Err(Error::Config(format!(
            "feature extractor produces D={extractor_dim} but the causality extractor expects D={causality_dim}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TinyCnn;
    use crate::neural::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_window(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Tensor {
        Tensor::uniform(&[l, d], 1.0, rng)
    }

    #[test]
    fn zero_params_zero_output() {
        let c = CausalityExtractor::zeros(4, 3, 5, 0.2);
        assert_eq!(c.predict(&Tensor::zeros(&[9, 4])).unwrap(), AffectState::ZERO);
    }

    #[test]
    fn eval_is_deterministic_and_order_sensitive() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = CausalityExtractor::init(4, 6, 5, 0.2, &mut rng);
            let w = random_window(&mut rng, 9, 4);
            let a = c.predict(&w).unwrap();
            assert_eq!(a, c.predict(&w).unwrap());
            let rows: Vec<Vec<f64>> = (0..9).rev().map(|r| w.row(r).to_vec()).collect();
            let reversed = Tensor::from_rows(&rows).unwrap();
            assert_ne!(a, c.predict(&reversed).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn train_mode_dropout_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = CausalityExtractor::init(4, 6, 5, 0.2, &mut rng);
        let w = random_window(&mut rng, 9, 4);
        let run = |seed| c.forward(&w, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().0;
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = CausalityExtractor::init(3, 4, 5, 0.2, &mut rng);
        let windows: Vec<Tensor> = (0..4).map(|_| random_window(&mut rng, 3, 3)).collect();
        let labels = Tensor::uniform(&[4, 2], 0.9, &mut rng);
        let step = c.batch_step(&windows, &labels, Mode::Eval, &mut rng).unwrap();
        let mut probe = c.clone();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let report = grad_check(
            |p| {
                probe.unflatten(p);
                probe.batch_step(&windows, &labels, Mode::Eval, &mut unused).unwrap().loss
            },
            &c.flatten(),
            &step.grads.flatten(),
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn wrong_window_length_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cnn = TinyCnn::init(8, 4, &mut rng).unwrap();
        let net = CapNet::new(
            Extractor::TinyCnn(cnn),
            CausalityExtractor::init(4, 3, 3, 0.2, &mut rng),
            SamplerConfig::default(),
        )
        .unwrap();
        assert!(net.predict_features(&Tensor::zeros(&[8, 4])).is_err());
        assert!(net.predict_features(&Tensor::zeros(&[9, 4])).is_ok());
    }

    #[test]
    fn causality_loads_across_extractor_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cnn = TinyCnn::init(8, 4, &mut rng).unwrap();
        let net = CapNet::new(
            Extractor::TinyCnn(cnn),
            CausalityExtractor::init(4, 3, 3, 0.2, &mut rng),
            SamplerConfig::default(),
        )
        .unwrap();
        let bytes = net.to_checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(CapNet::from_checkpoint(&ckpt, None).unwrap(), net);

        let swapped = CapNet::with_extractor(&ckpt, Extractor::Precomputed(FeatureCache::new(4))).unwrap();
        assert_eq!(swapped.causality, net.causality);
        assert_eq!(swapped.sampler, net.sampler);
        let err = CapNet::with_extractor(&ckpt, Extractor::Precomputed(FeatureCache::new(5))).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn header_round_trip() {
        let h = ModelHeader {
            feature_dim: 32,
            lstm_hidden: 64,
            fc_hidden: 64,
            dropout: 0.2,
            sampler: SamplerConfig::default().with_window(Seconds::from_integer(2)).unwrap(),
        };
        assert_eq!(ModelHeader::from_tensor(&h.to_tensor()).unwrap(), h);
    }
}
