//! Finite-difference gradient suites for every hand-written backward pass.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::ccc_loss_and_grad;
use crate::models::{BatchStep, CausalityExtractor, CnnCache, Extractor, FerModel, TinyCnn};
use crate::neural::{
    fc_backward, fc_forward, grad_check, relative_error, lstm_backward, lstm_forward, Activation, GradCheckReport,
    LstmParams, Mode, Parameters, Tensor,
};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Central-difference step; smaller steps lose tiny gradients to roundoff.
const STEP: f64 = 1e-4;
/// Larger step for the deep CNN stack, whose loss carries more roundoff.
const CNN_STEP: f64 = 1e-3;
const DIMS: [usize; 3] = [1, 3, 8];
const LENGTHS: [usize; 3] = [1, 2, 9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    Fc,
    Lstm,
    Ccc,
    Fer,
    Capnet,
    Cnn,
}

impl Layer {
    pub const ALL: [Layer; 6] = [Layer::Fc, Layer::Lstm, Layer::Ccc, Layer::Fer, Layer::Capnet, Layer::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Fc => "fc",
            Layer::Lstm => "lstm",
            Layer::Ccc => "ccc",
            Layer::Fer => "fer",
            Layer::Capnet => "capnet",
            Layer::Cnn => "cnn",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Layer::ALL
            .into_iter()
            .find(|l| l.name() == text)
            .ok_or_else(|| Error::Config(format!("unknown gradient suite `{text}` (expected one of fc, lstm, ccc, fer, capnet, cnn)")))
    }

    /// Parses a comma-separated list such as `fc,lstm`.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        let mut out: Vec<Layer> = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Layer::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::Config("no gradient suites selected".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub layers: Vec<Layer>,
    pub seeds: u64,
    pub tolerance: f64,
    /// Deliberately corrupts every analytic gradient; the suites must then fail.
    pub inject_fault: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            layers: Layer::ALL.to_vec(),
            seeds: 20,
            tolerance: DEFAULT_TOLERANCE,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub layer: Layer,
    /// Number of (seed, shape) cases.
    pub cases: usize,
    pub report: GradCheckReport,
    /// Case with the largest error.
    pub worst_case: String,
    pub seconds: f64,
    pub passed: bool,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<7} {}  cases={:<4} coords={:<7} max_rel_error={:.3e}  worst: {}  ({:.2}s)",
            self.layer.name(),
            if self.passed { "PASS" } else { "FAIL" },
            self.cases,
            self.report.checked,
            self.report.max_rel_error,
            self.worst_case,
            self.seconds
        )
    }
}

pub fn run_suites(config: &SuiteConfig) -> Vec<SuiteResult> {
    config.layers.iter().map(|&l| run_suite(l, config)).collect()
}

pub fn run_suite(layer: Layer, config: &SuiteConfig) -> SuiteResult {
    let start = Instant::now();
    let mut cases = 0;
    let mut total = GradCheckReport::empty();
    let mut worst_case = String::from("-");
    for seed in 0..config.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let results: Vec<(String, GradCheckReport)> = match layer {
            Layer::Fc => fc_cases(&mut rng, config.inject_fault),
            Layer::Lstm => lstm_cases(&mut rng, config.inject_fault),
            Layer::Ccc => vec![("N=8".into(), ccc_case(&mut rng, config.inject_fault))],
            Layer::Fer => vec![("N=8".into(), fer_case(&mut rng, config.inject_fault))],
            Layer::Capnet => capnet_cases(&mut rng, config.inject_fault),
            Layer::Cnn => {
                let (report, skipped) = cnn_case(&mut rng, config.inject_fault);
                vec![(format!("side=8 L=2 batch=4 kink_skips={skipped}"), report)]
            }
        };
        for (desc, report) in results {
            cases += 1;
            if report.max_rel_error > total.max_rel_error || total.checked == 0 {
                worst_case = format!("seed={seed} {desc} coord={}", report.worst_coord);
            }
            total = total.merge(report);
        }
    }
    SuiteResult {
        layer,
        cases,
        passed: total.max_rel_error < config.tolerance,
        report: total,
        worst_case,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn corrupt(mut grad: Vec<f64>, inject: bool) -> Vec<f64> {
    if inject {
        for g in &mut grad {
            *g *= 1.01;
        }
    }
    grad
}

/// Random weights for a scalar projection `sum(r * out)`.
fn projection(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn project(out: &[f64], r: &[f64]) -> f64 {
    out.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn fc_cases(rng: &mut ChaCha8Rng, inject: bool) -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    for (a, act) in [Activation::None, Activation::Tanh, Activation::Relu].into_iter().enumerate() {
        for &d in &DIMS {
            for &k in &DIMS {
                let n = 1 + (a + d + k) % 3;
                let (x, w, b) = loop {
                    let x = Tensor::uniform(&[n, d], 1.0, rng);
                    let w = Tensor::uniform(&[d, k], 1.0, rng);
                    let b = Tensor::uniform(&[k], 0.5, rng);
                    let pre = fc_forward(&x, &w, &b, Activation::None).expect("shapes agree").0;
                    // Keep ReLU inputs clear of the kink at zero.
                    if act != Activation::Relu || pre.data().iter().all(|v| v.abs() > 1e-3) {
                        break (x, w, b);
                    }
                };
                let r = projection(rng, n * k);
                let (_, cache) = fc_forward(&x, &w, &b, act).expect("shapes agree");
                let g = fc_backward(&cache, &w, &Tensor::new(vec![n, k], r.clone()).expect("shape")).expect("shapes agree");
                let mut point = x.data().to_vec();
                point.extend_from_slice(w.data());
                point.extend_from_slice(b.data());
                let mut analytic = g.input.into_data();
                analytic.extend(g.weight.into_data());
                analytic.extend(g.bias.into_data());
                let (nx, nw) = (n * d, d * k);
                let report = grad_check(
                    |p| {
                        let x = Tensor::new(vec![n, d], p[..nx].to_vec()).expect("shape");
                        let w = Tensor::new(vec![d, k], p[nx..nx + nw].to_vec()).expect("shape");
                        let b = Tensor::new(vec![k], p[nx + nw..].to_vec()).expect("shape");
                        project(fc_forward(&x, &w, &b, act).expect("shapes agree").0.data(), &r)
                    },
                    &point,
                    &corrupt(analytic, inject),
                    STEP,
                );
                out.push((format!("{act:?} N={n} D={d} K={k}"), report));
            }
        }
    }
    out
}

fn random_lstm(rng: &mut ChaCha8Rng, d: usize, h: usize) -> LstmParams {
    let mut p = LstmParams::init(d, h, rng);
    for (_, t) in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    p
}

fn lstm_cases(rng: &mut ChaCha8Rng, inject: bool) -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    for &d in &DIMS {
        for &h in &DIMS {
            for &l in &LENGTHS {
                let params = random_lstm(rng, d, h);
                let seq = Tensor::uniform(&[l, d], 1.0, rng);
                let h0: Vec<f64> = projection(rng, h);
                let c0: Vec<f64> = projection(rng, h);
                let r = projection(rng, h);
                let (_, cache) = lstm_forward(&seq, &params, &h0, &c0).expect("shapes agree");
                let g = lstm_backward(&params, &cache, &r).expect("shapes agree");

                let mut point = params.flatten();
                let np = point.len();
                point.extend_from_slice(seq.data());
                point.extend_from_slice(&h0);
                point.extend_from_slice(&c0);
                let mut analytic = g.params.flatten();
                analytic.extend_from_slice(g.input.data());
                analytic.extend_from_slice(&g.h0);
                analytic.extend_from_slice(&g.c0);
                let mut probe = params.clone();
                let report = grad_check(
                    |p| {
                        probe.unflatten(&p[..np]);
                        let s = Tensor::new(vec![l, d], p[np..np + l * d].to_vec()).expect("shape");
                        let rest = &p[np + l * d..];
                        let (hl, _) = lstm_forward(&s, &probe, &rest[..h], &rest[h..]).expect("shapes agree");
                        project(hl.data(), &r)
                    },
                    &point,
                    &corrupt(analytic, inject),
                    STEP,
                );
                out.push((format!("D={d} H={h} L={l}"), report));
            }
        }
    }
    out
}

fn ccc_case(rng: &mut ChaCha8Rng, inject: bool) -> GradCheckReport {
    let preds = Tensor::uniform(&[8, 2], 1.0, rng);
    let labels = Tensor::uniform(&[8, 2], 1.0, rng);
    let (_, grad) = ccc_loss_and_grad(&preds, &labels).expect("valid batch");
    grad_check(
        |p| {
            let t = Tensor::new(vec![8, 2], p.to_vec()).expect("shape");
            ccc_loss_and_grad(&t, &labels).expect("valid batch").0
        },
        preds.data(),
        &corrupt(grad.into_data(), inject),
        STEP,
    )
}

fn fer_case(rng: &mut ChaCha8Rng, inject: bool) -> GradCheckReport {
    let d = DIMS[rng.gen_range(0..DIMS.len())];
    let cnn = TinyCnn::zeros(8, d).expect("valid side");
    let model = FerModel::new(Extractor::TinyCnn(cnn), rng);
    let x = Tensor::uniform(&[8, d], 1.0, rng);
    let y = Tensor::uniform(&[8, 2], 1.0, rng);
    let step = model.head_step(&x, &y).expect("shapes agree");
    let mut point = model.head.flatten();
    let np = point.len();
    point.extend_from_slice(x.data());
    let mut analytic = step.head_grads.flatten();
    analytic.extend_from_slice(step.feature_grads.data());
    let mut probe = model.clone();
    grad_check(
        |p| {
            probe.head.unflatten(&p[..np]);
            let x = Tensor::new(vec![8, d], p[np..].to_vec()).expect("shape");
            probe.head_step(&x, &y).expect("shapes agree").loss
        },
        &point,
        &corrupt(analytic, inject),
        STEP,
    )
}

fn random_causality(rng: &mut ChaCha8Rng, d: usize, h: usize, m: usize) -> CausalityExtractor {
    let mut c = CausalityExtractor::init(d, h, m, 0.2, rng);
    for (_, t) in c.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    c
}

/// Loss and gradients of a causality extractor with dropout bypassed.
fn capnet_loss(c: &CausalityExtractor, windows: &[Tensor], labels: &Tensor) -> BatchStep {
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    c.batch_step(windows, labels, Mode::Eval, &mut unused).expect("shapes agree")
}

fn capnet_cases(rng: &mut ChaCha8Rng, inject: bool) -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    for &l in &LENGTHS {
        let d = DIMS[rng.gen_range(0..DIMS.len())];
        let h = DIMS[rng.gen_range(0..DIMS.len())];
        let m = DIMS[rng.gen_range(0..DIMS.len())];
        let c = random_causality(rng, d, h, m);
        let windows: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[l, d], 1.0, rng)).collect();
        let labels = Tensor::uniform(&[4, 2], 0.9, rng);
        let step = capnet_loss(&c, &windows, &labels);
        let mut point = c.flatten();
        let np = point.len();
        let mut analytic = step.grads.flatten();
        for (w, g) in windows.iter().zip(&step.feature_grads) {
            point.extend_from_slice(w.data());
            analytic.extend_from_slice(g.data());
        }
        let base: Vec<bool> = step.caches.iter().flat_map(|k| k.relu_pattern()).collect();
        let mut probe_c = c.clone();
        let mut probe = |p: &[f64]| {
            probe_c.unflatten(&p[..np]);
            let ws: Vec<Tensor> = p[np..]
                .chunks(l * d)
                .map(|chunk| Tensor::new(vec![l, d], chunk.to_vec()).expect("shape"))
                .collect();
            let step = capnet_loss(&probe_c, &ws, &labels);
            let pattern = step.caches.iter().flat_map(|k| k.relu_pattern()).collect();
            (step.loss, pattern)
        };
        let coords: Vec<usize> = (0..point.len()).collect();
        let (report, skipped) = kink_aware_check(&mut probe, &point, &corrupt(analytic, inject), &base, STEP, &coords);
        out.push((format!("D={d} H={h} M={m} L={l} batch=4 kink_skips={skipped}"), report));
    }
    out
}

/// TinyCnn -> causality extractor -> `1 - CCC` over a 4-window batch.
fn cnn_case(rng: &mut ChaCha8Rng, inject: bool) -> (GradCheckReport, usize) {
    let (side, d, l) = (8, 3, 2);
    let mut cnn = TinyCnn::init(side, d, rng).expect("valid side");
    // Doubled weights keep the gradients well above roundoff; random biases
    // move ReLU inputs off zero.
    for (_, t) in cnn.tensors_mut() {
        if t.rank() == 1 {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        } else {
            for v in t.data_mut() {
                *v *= 2.0;
            }
        }
    }
    let c = random_causality(rng, d, 4, 5);
    let images: Vec<Vec<Tensor>> = (0..4)
        .map(|_| {
            (0..l)
                .map(|_| Tensor::uniform(&[side, side, 3], 1.0, rng).map(f64::abs))
                .collect()
        })
        .collect();
    let labels = Tensor::uniform(&[4, 2], 0.9, rng);
    // Loss plus the on/off state of every ReLU unit.
    let eval = |cnn: &TinyCnn, c: &CausalityExtractor| -> (BatchStep, Vec<Vec<CnnCache>>, Vec<bool>) {
        let mut caches = Vec::new();
        let mut windows = Vec::new();
        let mut pattern = Vec::new();
        for frames in &images {
            let mut data = Vec::new();
            let mut per = Vec::new();
            for img in frames {
                let (f, cache) = cnn.forward(img).expect("shape");
                pattern.extend(cache.relu_pattern());
                data.extend(f);
                per.push(cache);
            }
            windows.push(Tensor::new(vec![l, d], data).expect("shape"));
            caches.push(per);
        }
        let step = capnet_loss(c, &windows, &labels);
        pattern.extend(step.caches.iter().flat_map(|k| k.relu_pattern()));
        (step, caches, pattern)
    };
    let (step, caches, base_pattern) = eval(&cnn, &c);
    let mut cnn_grads = cnn.zeros_like();
    for (per, g) in caches.iter().zip(&step.feature_grads) {
        for (r, cache) in per.iter().enumerate() {
            cnn.backward(cache, g.row(r), &mut cnn_grads).expect("shape");
        }
    }
    let mut point = cnn.flatten();
    let nc = point.len();
    point.extend(c.flatten());
    let mut analytic = cnn_grads.flatten();
    analytic.extend(step.grads.flatten());
    let analytic = corrupt(analytic, inject);

    let (mut probe_cnn, mut probe_c) = (cnn.clone(), c.clone());
    let mut probe = |p: &[f64]| {
        probe_cnn.unflatten(&p[..nc]);
        probe_c.unflatten(&p[nc..]);
        let (step, _, pattern) = eval(&probe_cnn, &probe_c);
        (step.loss, pattern)
    };
    let coords: Vec<usize> = (rng.gen_range(0..11)..point.len()).step_by(11).collect();
    kink_aware_check(&mut probe, &point, &analytic, &base_pattern, CNN_STEP, &coords)
}

/// Central differences at `coords`, skipping probes whose ReLU pattern
/// differs from `base`: those straddle a kink where the loss is not
/// differentiable. Returns the report and the number of skipped coordinates.
fn kink_aware_check(
    probe: &mut impl FnMut(&[f64]) -> (f64, Vec<bool>),
    point: &[f64],
    analytic: &[f64],
    base: &[bool],
    step: f64,
    coords: &[usize],
) -> (GradCheckReport, usize) {
    let mut report = GradCheckReport::empty();
    let mut skipped = 0;
    let mut x = point.to_vec();
    for &k in coords {
        x[k] = point[k] + step;
        let (plus, pp) = probe(&x);
        x[k] = point[k] - step;
        let (minus, pm) = probe(&x);
        x[k] = point[k];
        if pp != base || pm != base {
            skipped += 1;
            continue;
        }
        let err = relative_error(analytic[k], (plus - minus) / (2.0 * step));
        report = report.merge(GradCheckReport {
            max_rel_error: err,
            worst_coord: k,
            checked: 1,
        });
    }
    (report, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_lists_parse() {
        assert_eq!(Layer::parse_list("lstm").unwrap(), vec![Layer::Lstm]);
        assert_eq!(Layer::parse_list("lstm, fc,lstm").unwrap(), vec![Layer::Fc, Layer::Lstm]);
        assert!(Layer::parse_list("conv").unwrap_err().is_config());
        assert!(Layer::parse_list("").is_err());
    }

    #[test]
    fn small_suites_pass_and_fault_fails() {
        let config = SuiteConfig {
            seeds: 2,
            ..SuiteConfig::default()
        };
        for r in run_suites(&config) {
            assert!(r.passed, "{r}");
        }
        let faulty = SuiteConfig {
            inject_fault: true,
            layers: vec![Layer::Ccc, Layer::Lstm],
            ..config
        };
        assert!(run_suites(&faulty).iter().all(|r| !r.passed));
    }
}
