//! Concordance correlation coefficient (CCC), the `1 - CCC` loss and
//! evaluation reports.
//!
//! `CCC = 2 k / max(var_pred + var_label + (mean_pred - mean_label)^2, eps)`
//! with covariance `k`, population moments by default and `eps = 1e-8`.

use std::fmt::Write as _;

use crate::dataset::AffectState;
use crate::error::{Error, Result};
use crate::neural::Tensor;

/// Denominator floor; makes the all-constant case well defined (CCC = 0)
/// without perturbing any other value.
pub const CCC_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// Divide second moments by `n`.
    #[default]
    Population,
    /// Divide second moments by `n - 1`.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CccStats {
    pub mean_pred: f64,
    pub mean_label: f64,
    pub var_pred: f64,
    pub var_label: f64,
    pub covariance: f64,
    pub ccc: f64,
    pub n: usize,
}

impl CccStats {
    /// Pearson correlation of the same pair, for debugging.
    pub fn pearson(&self) -> f64 {
        self.covariance / (self.var_pred * self.var_label).sqrt().max(CCC_EPS)
    }
}

/// Single-pass co-moment accumulator; two accumulators merge exactly.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CccAccumulator {
    n: usize,
    mean_pred: f64,
    mean_label: f64,
    m2_pred: f64,
    m2_label: f64,
    co_moment: f64,
}

impl CccAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pred: f64, label: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dp = pred - self.mean_pred;
        self.mean_pred += dp / n;
        let dl = label - self.mean_label;
        self.mean_label += dl / n;
        self.m2_pred += dp * (pred - self.mean_pred);
        self.m2_label += dl * (label - self.mean_label);
        self.co_moment += dp * (label - self.mean_label);
    }

    pub fn merge(&mut self, other: &CccAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let dp = other.mean_pred - self.mean_pred;
        let dl = other.mean_label - self.mean_label;
        self.mean_pred += dp * nb / n;
        self.mean_label += dl * nb / n;
        self.m2_pred += other.m2_pred + dp * dp * na * nb / n;
        self.m2_label += other.m2_label + dl * dl * na * nb / n;
        self.co_moment += other.co_moment + dp * dl * na * nb / n;
        self.n += other.n;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn stats(&self, mode: VarianceMode) -> Result<CccStats> {
        if self.n < 2 {
            return Err(Error::Metric(format!("CCC needs at least 2 samples, got {}", self.n)));
        }
        let div = match mode {
            VarianceMode::Population => self.n as f64,
            VarianceMode::Sample => (self.n - 1) as f64,
        };
        let var_pred = self.m2_pred / div;
        let var_label = self.m2_label / div;
        let covariance = self.co_moment / div;
        let shift = self.mean_pred - self.mean_label;
        let ccc = 2.0 * covariance / (var_pred + var_label + shift * shift).max(CCC_EPS);
        Ok(CccStats {
            mean_pred: self.mean_pred,
            mean_label: self.mean_label,
            var_pred,
            var_label,
            covariance,
            ccc,
            n: self.n,
        })
    }
}

fn check_pair(pred: &[f64], label: &[f64]) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::Metric(format!(
            "prediction and label lengths differ ({} vs {})",
            pred.len(),
            label.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Metric(format!("CCC needs at least 2 samples, got {}", pred.len())));
    }
    if pred.iter().chain(label).any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite value in CCC input".into()));
    }
    Ok(())
}

pub fn ccc(pred: &[f64], label: &[f64]) -> Result<CccStats> {
    ccc_with_mode(pred, label, VarianceMode::Population)
}

pub fn ccc_with_mode(pred: &[f64], label: &[f64], mode: VarianceMode) -> Result<CccStats> {
    check_pair(pred, label)?;
    let mut acc = CccAccumulator::new();
    for (&p, &l) in pred.iter().zip(label) {
        acc.push(p, l);
    }
    acc.stats(mode)
}

/// CCC of one column and its derivative with respect to every prediction.
fn ccc_and_grad(pred: &[f64], label: &[f64], mode: VarianceMode) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let div = match mode {
        VarianceMode::Population => n,
        VarianceMode::Sample => n - 1.0,
    };
    let mp = pred.iter().sum::<f64>() / n;
    let ml = label.iter().sum::<f64>() / n;
    let mut sp = 0.0;
    let mut sl = 0.0;
    let mut spl = 0.0;
    for (&p, &l) in pred.iter().zip(label) {
        sp += (p - mp) * (p - mp);
        sl += (l - ml) * (l - ml);
        spl += (p - mp) * (l - ml);
    }
    let (vp, vl, k) = (sp / div, sl / div, spl / div);
    let shift = mp - ml;
    let num = 2.0 * k;
    let raw_den = vp + vl + shift * shift;
    let floored = raw_den < CCC_EPS;
    let den = raw_den.max(CCC_EPS);
    let grad = pred
        .iter()
        .zip(label)
        .map(|(&p, &l)| {
            let d_num = 2.0 * (l - ml) / div;
            let d_den = if floored { 0.0 } else { 2.0 * (p - mp) / div + 2.0 * shift / n };
            (d_num * den - num * d_den) / (den * den)
        })
        .collect();
    (num / den, grad)
}

/// `1 - (ccc_valence + ccc_arousal) / 2` over an `N x 2` batch, and its gradient.
pub fn ccc_loss_and_grad(preds: &Tensor, labels: &Tensor) -> Result<(f64, Tensor)> {
    ccc_loss_and_grad_with_mode(preds, labels, VarianceMode::Population)
}

pub fn ccc_loss_and_grad_with_mode(preds: &Tensor, labels: &Tensor, mode: VarianceMode) -> Result<(f64, Tensor)> {
    let (n, cols) = preds.matrix_dims()?;
    if cols != 2 || labels.shape() != preds.shape() {
        return Err(Error::Shape(format!(
            "CCC loss needs matching N x 2 tensors, got {:?} and {:?}",
            preds.shape(),
            labels.shape()
        )));
    }
    let column = |t: &Tensor, c: usize| -> Vec<f64> { (0..n).map(|r| t.data()[r * 2 + c]).collect() };
    let mut grad = Tensor::zeros(&[n, 2]);
    let mut loss = 1.0;
    for c in 0..2 {
        let (p, l) = (column(preds, c), column(labels, c));
        check_pair(&p, &l)?;
        let (value, g) = ccc_and_grad(&p, &l, mode);
        loss -= value / 2.0;
        for (r, gv) in g.into_iter().enumerate() {
            grad.data_mut()[r * 2 + c] = -gv / 2.0;
        }
    }
    Ok((loss, grad))
}

/// Valence and arousal CCC over a whole evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CccReport {
    pub valence: CccStats,
    pub arousal: CccStats,
    pub mean_ccc: f64,
}

impl CccReport {
    pub fn from_accumulators(valence: &CccAccumulator, arousal: &CccAccumulator, mode: VarianceMode) -> Result<Self> {
        let valence = valence.stats(mode)?;
        let arousal = arousal.stats(mode)?;
        Ok(CccReport {
            valence,
            arousal,
            mean_ccc: (valence.ccc + arousal.ccc) / 2.0,
        })
    }

    /// `valence / arousal / mean` with three decimals, e.g. `0.510 / 0.483 / 0.497`.
    pub fn row(&self) -> String {
        format!("{:.3} / {:.3} / {:.3}", self.valence.ccc, self.arousal.ccc, self.mean_ccc)
    }
}

/// Anything carrying a ground-truth affect label.
pub trait Labeled {
    fn label(&self) -> AffectState;
}

impl Labeled for crate::sampler::SampleWindow {
    fn label(&self) -> AffectState {
        self.label
    }
}

impl Labeled for (crate::dataset::FrameRef, AffectState) {
    fn label(&self) -> AffectState {
        self.1
    }
}

impl<T: Labeled> Labeled for &T {
    fn label(&self) -> AffectState {
        (*self).label()
    }
}

impl Labeled for AffectState {
    fn label(&self) -> AffectState {
        *self
    }
}

pub trait Predictor<I> {
    fn predict_batch(&mut self, items: &[I]) -> Result<Vec<AffectState>>;
}

/// Returns each item's own label.
#[derive(Debug, Clone, Copy, Default)]
pub struct LabelOracle;

impl<I: Labeled> Predictor<I> for LabelOracle {
    fn predict_batch(&mut self, items: &[I]) -> Result<Vec<AffectState>> {
        Ok(items.iter().map(Labeled::label).collect())
    }
}

/// Predicts the same state for everything.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub AffectState);

impl<I> Predictor<I> for ConstantPredictor {
    fn predict_batch(&mut self, items: &[I]) -> Result<Vec<AffectState>> {
        Ok(vec![self.0; items.len()])
    }
}

/// Runs the predictor over all items in batches and computes one global CCC
/// per dimension (not an average of per-batch values).
pub fn evaluate<I, P>(predictor: &mut P, items: impl IntoIterator<Item = I>, batch: usize) -> Result<CccReport>
where
    I: Labeled,
    P: Predictor<I>,
{
    let batch = batch.max(1);
    let mut valence = CccAccumulator::new();
    let mut arousal = CccAccumulator::new();
    let mut pending = Vec::with_capacity(batch);
    let mut flush = |pending: &mut Vec<I>| -> Result<()> {
        let preds = predictor.predict_batch(pending)?;
        if preds.len() != pending.len() {
            return Err(Error::Metric("predictor returned the wrong number of outputs".into()));
        }
        for (item, pred) in pending.iter().zip(preds) {
            let label = item.label();
            if !(pred.valence.is_finite() && pred.arousal.is_finite()) {
                return Err(Error::Metric("non-finite prediction".into()));
            }
            valence.push(pred.valence, label.valence);
            arousal.push(pred.arousal, label.arousal);
        }
        pending.clear();
        Ok(())
    };
    for item in items {
        pending.push(item);
        if pending.len() == batch {
            flush(&mut pending)?;
        }
    }
    if !pending.is_empty() {
        flush(&mut pending)?;
    }
    if valence.is_empty() {
        return Err(Error::Empty("evaluation stream has no items".into()));
    }
    CccReport::from_accumulators(&valence, &arousal, VarianceMode::Population)
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    /// `None` for single-image models.
    pub window_seconds: Option<String>,
    pub report: CccReport,
}

impl ReportRow {
    fn input(&self) -> &'static str {
        if self.window_seconds.is_some() {
            "sequence"
        } else {
            "single"
        }
    }

    fn window(&self) -> &str {
        self.window_seconds.as_deref().unwrap_or("-")
    }
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:<8}  {:>11}  {:>7}  {:>7}  {:>7}",
        "Model", "Input", "window size", "Valence", "Arousal", "Mean"
    );
    let _ = writeln!(out, "{:<width$}  {:<8}  {:>11}", "", "", "(seconds)");
    for row in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:<8}  {:>11}  {:>7.3}  {:>7.3}  {:>7.3}",
            row.model,
            row.input(),
            row.window(),
            row.report.valence.ccc,
            row.report.arousal.ccc,
            row.report.mean_ccc
        );
    }
    out
}

pub const REPORT_CSV_HEADER: &str = "model,window,valence_ccc,arousal_ccc,mean_ccc";

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.model,
            row.window(),
            row.report.valence.ccc,
            row.report.arousal.ccc,
            row.report.mean_ccc
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_agreement() {
        let s = ccc(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((s.ccc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_fixtures() {
        let s = ccc(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((s.covariance + 0.25).abs() < 1e-15);
        assert!((s.ccc + 1.0).abs() < 1e-12);
        let s = ccc(&[0.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((s.mean_pred - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.var_pred - 2.0 / 9.0).abs() < 1e-15);
        assert!((s.var_label - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.covariance - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.ccc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sample_mode_differs() {
        let p = [0.0, 1.0, 1.0];
        let l = [0.0, 1.0, 2.0];
        let pop = ccc_with_mode(&p, &l, VarianceMode::Population).unwrap().ccc;
        let smp = ccc_with_mode(&p, &l, VarianceMode::Sample).unwrap().ccc;
        // sample: vp=1/3, vl=1, k=1/2, shift^2 = 1/9 -> 1 / (13/9)
        assert!((smp - 9.0 / 13.0).abs() < 1e-7);
        assert!(smp > pop);
    }

    #[test]
    fn errors() {
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
        let p = Tensor::zeros(&[1, 2]);
        assert!(ccc_loss_and_grad(&p, &p).is_err());
    }

    #[test]
    fn loss_at_equality_and_constant() {
        let labels = Tensor::from_rows(&[vec![0.1, -0.3], vec![0.5, 0.2], vec![-0.4, 0.9]]).unwrap();
        let (loss, grad) = ccc_loss_and_grad(&labels, &labels).unwrap();
        assert!(loss.abs() < 1e-7);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-6), "{grad:?}");
        let constant = Tensor::from_rows(&[vec![0.2, 0.2], vec![0.2, 0.2], vec![0.2, 0.2]]).unwrap();
        let (loss, _) = ccc_loss_and_grad(&constant, &labels).unwrap();
        assert_eq!(loss, 1.0);
        let (loss, grad) = ccc_loss_and_grad(&constant, &constant).unwrap();
        assert_eq!(loss, 1.0);
        assert!(grad.all_finite());
    }

    #[test]
    fn merge_equals_sequential() {
        let xs: Vec<(f64, f64)> = (0..37).map(|i| ((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
        let mut whole = CccAccumulator::new();
        let mut a = CccAccumulator::new();
        let mut b = CccAccumulator::new();
        for (i, &(p, l)) in xs.iter().enumerate() {
            whole.push(p, l);
            if i < 15 { a.push(p, l) } else { b.push(p, l) }
        }
        a.merge(&b);
        let (s1, s2) = (whole.stats(VarianceMode::Population).unwrap(), a.stats(VarianceMode::Population).unwrap());
        assert!((s1.ccc - s2.ccc).abs() < 1e-14);
        assert_eq!(s1.n, s2.n);
    }

    #[test]
    fn evaluate_oracles() {
        let labels: Vec<AffectState> = (0..50)
            .map(|i| AffectState::clamped((i as f64 * 0.3).sin(), (i as f64 * 0.7).cos()))
            .collect();
        let r = evaluate(&mut LabelOracle, labels.clone(), 8).unwrap();
        assert!((r.mean_ccc - 1.0).abs() < 1e-7);
        let r = evaluate(&mut ConstantPredictor(AffectState::ZERO), labels, 8).unwrap();
        assert!(r.mean_ccc.abs() < 1e-12);
        assert!(evaluate(&mut LabelOracle, Vec::<AffectState>::new(), 8).is_err());
    }

    #[test]
    fn report_formats() {
        let stats = |c: f64| CccStats {
            mean_pred: 0.0,
            mean_label: 0.0,
            var_pred: 1.0,
            var_label: 1.0,
            covariance: c,
            ccc: c,
            n: 10,
        };
        let report = CccReport {
            valence: stats(0.5101),
            arousal: stats(0.4832),
            mean_ccc: (0.5101 + 0.4832) / 2.0,
        };
        assert_eq!(report.row(), "0.510 / 0.483 / 0.497");
        let rows = vec![ReportRow {
            model: "CAPNet".into(),
            window_seconds: Some("3".into()),
            report,
        }];
        let table = render_table(&rows);
        assert!(table.contains("window size") && table.contains("sequence"));
        let csv = render_csv(&rows);
        assert!(csv.starts_with(REPORT_CSV_HEADER));
        assert!(csv.contains("CAPNet,3,0.5101,0.4832,"));
    }
}
