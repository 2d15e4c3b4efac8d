//! Small convolutional stand-in for a pretrained image backbone.
//!
//! Three blocks of 3x3 convolution (zero padding 1), ReLU and 2x2 average
//! pooling with widths 8/16/32, then global average pooling and a linear
//! layer to `D` features. Activations are stored channel-major.

use rand::Rng;

use super::extractor::{load_frame_tensor, ExtractorKind, FeatureExtractor, FrameInput};
use crate::error::{Error, Result};
use crate::neural::{axpy, dot, Activation, Linear, Parameters, Tensor};

pub const CNN_WIDTHS: [usize; 3] = [8, 16, 32];
const MIN_SIDE: usize = 8;

/// 3x3 convolution, weight `[out, in, 3, 3]`.
#[derive(Debug, Clone, PartialEq)]
struct Conv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl Conv3x3 {
    fn zeros(input: usize, output: usize) -> Self {
        Conv3x3 {
            weight: Tensor::zeros(&[output, input, 3, 3]),
            bias: Tensor::zeros(&[output]),
        }
    }

    fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((input * 9) as f64).sqrt();
        Conv3x3 {
            weight: Tensor::uniform(&[output, input, 3, 3], bound, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    fn channels(&self) -> (usize, usize) {
        (self.weight.shape()[1], self.weight.shape()[0])
    }

    fn kernel(&self, o: usize, c: usize) -> &[f64] {
        let cin = self.weight.shape()[1];
        let at = (o * cin + c) * 9;
        &self.weight.data()[at..at + 9]
    }

    fn forward(&self, input: &[f64], side: usize) -> Vec<f64> {
        let (cin, cout) = self.channels();
        let plane = side * side;
        let mut out = vec![0.0; cout * plane];
        for o in 0..cout {
            let dst = &mut out[o * plane..(o + 1) * plane];
            dst.fill(self.bias.data()[o]);
            for c in 0..cin {
                let src = &input[c * plane..(c + 1) * plane];
                let k = self.kernel(o, c);
                for_each_tap(side, |tap, y, sy, dx, sx, n| {
                    let w = k[tap];
                    if w != 0.0 {
                        axpy(w, &src[sy * side + sx..sy * side + sx + n], &mut dst[y * side + dx..y * side + dx + n]);
                    }
                });
            }
        }
        out
    }

    /// Adds parameter gradients into `grads` and returns the input gradient.
    fn backward(&self, input: &[f64], side: usize, grad_out: &[f64], grads: &mut Conv3x3, need_input: bool) -> Vec<f64> {
        let (cin, cout) = self.channels();
        let plane = side * side;
        let mut grad_in = if need_input { vec![0.0; cin * plane] } else { Vec::new() };
        for o in 0..cout {
            let g = &grad_out[o * plane..(o + 1) * plane];
            grads.bias.data_mut()[o] += g.iter().sum::<f64>();
            for c in 0..cin {
                let src = &input[c * plane..(c + 1) * plane];
                let at = (o * cin + c) * 9;
                let mut taps = [0.0; 9];
                for_each_tap(side, |tap, y, sy, dx, sx, n| {
                    taps[tap] += dot(&g[y * side + dx..y * side + dx + n], &src[sy * side + sx..sy * side + sx + n]);
                });
                axpy(1.0, &taps, &mut grads.weight.data_mut()[at..at + 9]);
                if need_input {
                    let k = self.kernel(o, c);
                    let dst = &mut grad_in[c * plane..(c + 1) * plane];
                    for_each_tap(side, |tap, y, sy, dx, sx, n| {
                        let w = k[tap];
                        if w != 0.0 {
                            axpy(w, &g[y * side + dx..y * side + dx + n], &mut dst[sy * side + sx..sy * side + sx + n]);
                        }
                    });
                }
            }
        }
        grad_in
    }
}

/// Visits every (tap, output row) pair of a padded 3x3 convolution as a
/// contiguous run: output `[y][dx..dx+n]` reads input `[sy][sx..sx+n]`.
fn for_each_tap(side: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    for ky in 0..3 {
        for kx in 0..3 {
            let tap = ky * 3 + kx;
            // Column shift: output x reads input x + kx - 1.
            let (dx, sx, n) = match kx {
                0 => (1, 0, side - 1),
                1 => (0, 0, side),
                _ => (0, 1, side - 1),
            };
            for y in 0..side {
                let sy = y + ky;
                if sy < 1 || sy > side {
                    continue;
                }
                f(tap, y, sy - 1, dx, sx, n);
            }
        }
    }
}

fn avg_pool(input: &[f64], channels: usize, side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut out = vec![0.0; channels * half * half];
    for c in 0..channels {
        let src = &input[c * side * side..(c + 1) * side * side];
        for y in 0..half {
            for x in 0..half {
                let (r0, r1) = (2 * y * side + 2 * x, (2 * y + 1) * side + 2 * x);
                out[(c * half + y) * half + x] = 0.25 * (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]);
            }
        }
    }
    out
}

fn avg_pool_backward(grad_out: &[f64], channels: usize, side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut grad = vec![0.0; channels * side * side];
    for c in 0..channels {
        let dst = &mut grad[c * side * side..(c + 1) * side * side];
        for y in 0..half {
            for x in 0..half {
                let g = 0.25 * grad_out[(c * half + y) * half + x];
                let (r0, r1) = (2 * y * side + 2 * x, (2 * y + 1) * side + 2 * x);
                dst[r0] += g;
                dst[r0 + 1] += g;
                dst[r1] += g;
                dst[r1 + 1] += g;
            }
        }
    }
    grad
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Vec<f64>,
    side: usize,
    /// Post-ReLU activations, doubling as the ReLU mask.
    activation: Vec<f64>,
}

/// Activations saved by [`TinyCnn::forward`].
#[derive(Debug, Clone)]
pub struct CnnCache {
    blocks: Vec<BlockCache>,
    pooled_side: usize,
    fc_input: Tensor,
}

impl CnnCache {
    /// Which ReLU units were active, across all blocks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.activation.iter().map(|&a| a > 0.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyCnn {
    input_side: usize,
    convs: [Conv3x3; 3],
    pub fc: Linear,
}

impl TinyCnn {
    pub fn zeros(input_side: usize, feature_dim: usize) -> Result<Self> {
        check_side(input_side)?;
        let [a, b, c] = CNN_WIDTHS;
        Ok(TinyCnn {
            input_side,
            convs: [Conv3x3::zeros(3, a), Conv3x3::zeros(a, b), Conv3x3::zeros(b, c)],
            fc: Linear::zeros(c, feature_dim),
        })
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init<R: Rng>(input_side: usize, feature_dim: usize, rng: &mut R) -> Result<Self> {
        check_side(input_side)?;
        let [a, b, c] = CNN_WIDTHS;
        Ok(TinyCnn {
            input_side,
            convs: [Conv3x3::init(3, a, rng), Conv3x3::init(a, b, rng), Conv3x3::init(b, c, rng)],
            fc: Linear::init(c, feature_dim, rng),
        })
    }

    /// Zero-valued parameters of the same shape, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        TinyCnn::zeros(self.input_side, self.fc.output_dim()).expect("side already validated")
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    /// `image` is `[side, side, 3]` with values in `[0, 1]`.
    pub fn forward(&self, image: &Tensor) -> Result<(Vec<f64>, CnnCache)> {
        let side = self.input_side;
        if image.shape() != [side, side, 3] {
            return Err(Error::Shape(format!(
                "image {:?} does not match expected {:?}",
                image.shape(),
                [side, side, 3]
            )));
        }
        let plane = side * side;
        let mut x = vec![0.0; 3 * plane];
        for (p, px) in image.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                x[c * plane + p] = px[c];
            }
        }
        let mut side = side;
        let mut blocks = Vec::with_capacity(3);
        for conv in &self.convs {
            let mut act = conv.forward(&x, side);
            for v in act.iter_mut() {
                *v = v.max(0.0);
            }
            let pooled = avg_pool(&act, conv.channels().1, side);
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, pooled),
                side,
                activation: act,
            });
            side /= 2;
        }
        let channels = CNN_WIDTHS[2];
        let plane = side * side;
        let gap: Vec<f64> = (0..channels)
            .map(|c| x[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let fc_input = Tensor::new(vec![1, channels], gap)?;
        let (out, _) = self.fc.forward(&fc_input, Activation::None)?;
        Ok((
            out.into_data(),
            CnnCache {
                blocks,
                pooled_side: side,
                fc_input,
            },
        ))
    }

    /// Adds the parameter gradients for `grad_feature` into `grads`.
    pub fn backward(&self, cache: &CnnCache, grad_feature: &[f64], grads: &mut TinyCnn) -> Result<()> {
        let d = self.fc.output_dim();
        if grad_feature.len() != d {
            return Err(Error::Shape(format!(
                "feature gradient has length {}, expected {d}",
                grad_feature.len()
            )));
        }
        let g = Tensor::new(vec![1, d], grad_feature.to_vec())?;
        let fc_cache = crate::neural::FcCache {
            input: cache.fc_input.clone(),
            output: Tensor::zeros(&[1, d]),
            activation: Activation::None,
        };
        let fc = self.fc.backward(&fc_cache, &g)?;
        axpy(1.0, fc.weight.data(), grads.fc.weight.data_mut());
        axpy(1.0, fc.bias.data(), grads.fc.bias.data_mut());

        let side = cache.pooled_side;
        let plane = side * side;
        let mut grad: Vec<f64> = fc
            .input
            .data()
            .iter()
            .flat_map(|&gc| std::iter::repeat_n(gc / plane as f64, plane))
            .collect();
        for (b, block) in cache.blocks.iter().enumerate().rev() {
            let conv = &self.convs[b];
            let mut g_act = avg_pool_backward(&grad, conv.channels().1, block.side);
            for (gv, &a) in g_act.iter_mut().zip(&block.activation) {
                if a <= 0.0 {
                    *gv = 0.0;
                }
            }
            grad = conv.backward(&block.input, block.side, &g_act, &mut grads.convs[b], b > 0);
        }
        Ok(())
    }
}

fn check_side(side: usize) -> Result<()> {
    if side < MIN_SIDE {
        return Err(Error::Config(format!("CNN input side {side} is below the minimum {MIN_SIDE}")));
    }
    Ok(())
}

impl Parameters for TinyCnn {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &conv.weight));
            out.push((format!("conv{}.bias", i + 1), &conv.bias));
        }
        out.push(("fc.weight".into(), &self.fc.weight));
        out.push(("fc.bias".into(), &self.fc.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &mut conv.weight));
            out.push((format!("conv{}.bias", i + 1), &mut conv.bias));
        }
        out.push(("fc.weight".into(), &mut self.fc.weight));
        out.push(("fc.bias".into(), &mut self.fc.bias));
        out
    }
}

impl FeatureExtractor for TinyCnn {
    fn output_dim(&self) -> usize {
        self.fc.output_dim()
    }

    fn kind(&self) -> ExtractorKind {
        ExtractorKind::TinyCnn
    }

    fn extract(&self, frame: FrameInput<'_>) -> Result<Vec<f64>> {
        match frame {
            FrameInput::Image(image) => Ok(self.forward(image)?.0),
            FrameInput::Ref(f) => Ok(self.forward(&load_frame_tensor(f, self.input_side)?)?.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::grad_check_coords;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gray(side: usize, level: f64) -> Tensor {
        Tensor::new(vec![side, side, 3], vec![level; side * side * 3]).unwrap()
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let cnn = TinyCnn::init(16, 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let f = cnn.extract(FrameInput::Image(&gray(16, 0.0))).unwrap();
        assert_eq!(f, vec![0.0; 32]);
    }

    #[test]
    fn identical_images_identical_features() {
        let cnn = TinyCnn::init(16, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let img = Tensor::uniform(&[16, 16, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(3)).map(f64::abs);
        assert_eq!(cnn.forward(&img).unwrap().0, cnn.forward(&img.clone()).unwrap().0);
    }

    #[test]
    fn gray_levels_are_distinguished() {
        for seed in 0..10 {
            let cnn = TinyCnn::init(16, 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let a = cnn.forward(&gray(16, 0.3)).unwrap().0;
            let b = cnn.forward(&gray(16, 0.7)).unwrap().0;
            assert_ne!(a, b, "seed {seed}");
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let cnn = TinyCnn::init(16, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(cnn.forward(&gray(8, 0.5)), Err(Error::Shape(_))));
        assert!(TinyCnn::zeros(4, 4).is_err());
    }

    #[test]
    fn odd_sides_pool_with_floor() {
        let cnn = TinyCnn::init(13, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (_, cache) = cnn.forward(&gray(13, 0.5)).unwrap();
        assert_eq!(cache.pooled_side, 1);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cnn = TinyCnn::init(10, 3, &mut rng).unwrap();
        // Nonzero biases keep ReLU kinks away from the probed points.
        for (_, t) in cnn.tensors_mut() {
            if t.rank() == 1 {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.1..0.1);
                }
            }
        }
        let img = Tensor::uniform(&[10, 10, 3], 1.0, &mut rng).map(|v| v.abs());
        let weights = [0.7, -1.3, 0.4];
        let loss = |c: &TinyCnn| -> f64 {
            let f = c.forward(&img).unwrap().0;
            f.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = cnn.forward(&img).unwrap();
        let mut grads = cnn.zeros_like();
        cnn.backward(&cache, &weights, &mut grads).unwrap();
        let point = cnn.flatten();
        let analytic = grads.flatten();
        let coords: Vec<usize> = (0..point.len()).step_by(7).collect();
        let mut probe = cnn.clone();
        let report = grad_check_coords(
            |p| {
                probe.unflatten(p);
                loss(&probe)
            },
            &point,
            &analytic,
            1e-5,
            &coords,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
