//! Mini-batch training with Adam on the `1 - CCC` loss, early stopping on
//! the mean validation CCC and best-epoch checkpoint selection.

use std::borrow::Borrow;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{AffectState, FrameRef};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, CccReport, Predictor};
use crate::models::{load_frame_tensor, CapNet, CnnCache, Extractor, FeatureExtractor, FeatureTable, FerModel, TinyCnn};
use crate::neural::{adam_step, AdamConfig, AdamState, Mode, Tensor};
use crate::sampler::SampleWindow;

/// A labelled single frame.
pub type FramePair = (FrameRef, AffectState);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Keep the feature extractor fixed and train only the layers after it.
    pub freeze_extractor: bool,
    /// Worker threads for feature extraction.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 1e-5,
            patience: 4,
            max_epochs: 200,
            seed: 0,
            freeze_extractor: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "train.batch_size = {} but the CCC loss needs at least 2 samples per batch",
                self.batch_size
            )));
        }
        if self.patience < 1 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("train.max_epochs must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr = {} must be positive", self.lr)));
        }
        if self.threads < 1 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: CccReport,
    pub seconds: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_valence,val_arousal,val_mean,seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.validation.valence.ccc,
            self.validation.arousal.ccc,
            self.validation.mean_ccc,
            self.seconds
        )
    }
}

pub fn render_epoch_log(records: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Stops after `patience` consecutive epochs without a strictly better metric.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, metric: f64) -> Observation {
        let improved = match self.best {
            None => true,
            Some(b) => metric > b,
        };
        if improved {
            self.best = Some(metric);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation {
            improved,
            stop: self.stale >= self.patience,
        }
    }
}

/// A model plus its data, driven one epoch at a time by [`run_training`].
pub trait Trainee {
    type Snapshot;
    /// Trains one epoch and returns the mean batch loss.
    fn train_epoch(&mut self, epoch: usize, rng: &mut ChaCha8Rng) -> Result<f64>;
    fn validate(&mut self) -> Result<CccReport>;
    fn snapshot(&self) -> Self::Snapshot;
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub best: S,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Generator for epoch `epoch`: one ChaCha stream per epoch under the run seed.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Shuffled full batches of `0..n`; the incomplete tail is dropped.
pub fn batch_order(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn run_training<T: Trainee>(trainee: &mut T, config: &TrainConfig) -> Result<TrainOutcome<T::Snapshot>> {
    run_training_with(trainee, config, |_| {})
}

/// [`run_training`] calling `on_epoch` after each epoch.
pub fn run_training_with<T: Trainee>(
    trainee: &mut T,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T::Snapshot>> {
    config.validate()?;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut records = Vec::new();
    let mut best = None;
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let mut rng = epoch_rng(config.seed, epoch);
        let train_loss = trainee.train_epoch(epoch, &mut rng)?;
        let validation = trainee.validate()?;
        let record = EpochRecord {
            epoch,
            train_loss,
            validation,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.5} val {} ({:.1}s)",
            validation.row(),
            record.seconds
        );
        on_epoch(&record);
        records.push(record);
        let obs = stopper.observe(validation.mean_ccc);
        if obs.improved || best.is_none() {
            best = Some((epoch, trainee.snapshot()));
        }
        if obs.stop {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        best,
        best_epoch,
        records,
        stopped_early,
    })
}

/// Evaluates a model on precomputed features.
#[derive(Debug, Clone, Copy)]
pub struct TablePredictor<'a, M> {
    pub model: &'a M,
    pub table: &'a FeatureTable,
}

impl<I: Borrow<FramePair>> Predictor<I> for TablePredictor<'_, FerModel> {
    fn predict_batch(&mut self, items: &[I]) -> Result<Vec<AffectState>> {
        items
            .iter()
            .map(|p| {
                let f = &p.borrow().0;
                self.model.predict_features(self.table.get(&f.video_id, f.frame_index)?)
            })
            .collect()
    }
}

impl<I: Borrow<SampleWindow>> Predictor<I> for TablePredictor<'_, CapNet> {
    fn predict_batch(&mut self, items: &[I]) -> Result<Vec<AffectState>> {
        items
            .iter()
            .map(|w| self.model.predict_features(&self.table.sequence(&w.borrow().slots)?))
            .collect()
    }
}

/// Frames referenced by a set of windows.
pub fn window_frames(windows: &[SampleWindow]) -> impl Iterator<Item = &FrameRef> {
    windows.iter().flat_map(|w| w.slots.iter())
}

fn require_nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Empty(format!("{what} set is empty")));
    }
    Ok(())
}

fn require_batch(n: usize, batch: usize) -> Result<()> {
    if n < batch {
        return Err(Error::Config(format!(
            "training set has {n} samples, fewer than one batch of {batch}"
        )));
    }
    Ok(())
}

fn labels_tensor<'a>(labels: impl Iterator<Item = &'a AffectState>) -> Result<Tensor> {
    let data: Vec<f64> = labels.flat_map(|l| l.to_array()).collect();
    Tensor::new(vec![data.len() / 2, 2], data)
}

fn unfrozen_cnn(extractor: &Extractor) -> Result<&TinyCnn> {
    extractor
        .as_cnn()
        .ok_or_else(|| Error::Config("only a CNN extractor can be trained; set freeze_extractor".into()))
}

/// Trains the single-image model.
pub struct FerTrainer {
    pub model: FerModel,
    train: Vec<FramePair>,
    val: Vec<FramePair>,
    config: TrainConfig,
    head_adam: AdamState,
    cnn_adam: AdamState,
    /// Features of all frames while the extractor is frozen.
    table: Option<FeatureTable>,
}

impl FerTrainer {
    pub fn new(model: FerModel, train: Vec<FramePair>, val: Vec<FramePair>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        require_nonempty(&train, "training")?;
        require_nonempty(&val, "validation")?;
        require_batch(train.len(), config.batch_size)?;
        let table = if config.freeze_extractor {
            let frames = train.iter().chain(&val).map(|p| &p.0);
            Some(FeatureTable::build(&model.extractor, frames, config.threads)?)
        } else {
            unfrozen_cnn(&model.extractor)?;
            None
        };
        let adam = AdamState::new(AdamConfig::with_lr(config.lr));
        Ok(FerTrainer {
            model,
            train,
            val,
            config,
            head_adam: adam.clone(),
            cnn_adam: adam,
            table,
        })
    }

    fn frozen_batch(&mut self, batch: &[usize]) -> Result<f64> {
        let table = self.table.as_ref().expect("frozen trainer has features");
        let mut data = Vec::with_capacity(batch.len() * self.model.feature_dim());
        for &i in batch {
            let f = &self.train[i].0;
            data.extend_from_slice(table.get(&f.video_id, f.frame_index)?);
        }
        let x = Tensor::new(vec![batch.len(), self.model.feature_dim()], data)?;
        let y = labels_tensor(batch.iter().map(|&i| &self.train[i].1))?;
        let step = self.model.head_step(&x, &y)?;
        adam_step(&mut self.model.head, &step.head_grads, &mut self.head_adam)?;
        Ok(step.loss)
    }

    fn end_to_end_batch(&mut self, batch: &[usize]) -> Result<f64> {
        let cnn = unfrozen_cnn(&self.model.extractor)?;
        let mut caches: Vec<CnnCache> = Vec::with_capacity(batch.len());
        let mut data = Vec::new();
        for &i in batch {
            let image = load_frame_tensor(&self.train[i].0, cnn.input_side())?;
            let (f, cache) = cnn.forward(&image)?;
            data.extend(f);
            caches.push(cache);
        }
        let x = Tensor::new(vec![batch.len(), self.model.feature_dim()], data)?;
        let y = labels_tensor(batch.iter().map(|&i| &self.train[i].1))?;
        let step = self.model.head_step(&x, &y)?;
        let mut cnn_grads = cnn.zeros_like();
        for (r, cache) in caches.iter().enumerate() {
            cnn.backward(cache, step.feature_grads.row(r), &mut cnn_grads)?;
        }
        adam_step(&mut self.model.head, &step.head_grads, &mut self.head_adam)?;
        let cnn = self.model.extractor.as_cnn_mut().expect("checked above");
        adam_step(cnn, &cnn_grads, &mut self.cnn_adam)?;
        Ok(step.loss)
    }
}

impl Trainee for FerTrainer {
    type Snapshot = FerModel;

    fn train_epoch(&mut self, _epoch: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let batches = batch_order(self.train.len(), self.config.batch_size, rng);
        let mut total = 0.0;
        for batch in &batches {
            total += if self.table.is_some() {
                self.frozen_batch(batch)?
            } else {
                self.end_to_end_batch(batch)?
            };
        }
        Ok(total / batches.len() as f64)
    }

    fn validate(&mut self) -> Result<CccReport> {
        let fresh;
        let table = match &self.table {
            Some(t) => t,
            None => {
                fresh = FeatureTable::build(&self.model.extractor, self.val.iter().map(|p| &p.0), self.config.threads)?;
                &fresh
            }
        };
        let mut predictor = TablePredictor {
            model: &self.model,
            table,
        };
        evaluate(&mut predictor, self.val.iter(), self.config.batch_size)
    }

    fn snapshot(&self) -> FerModel {
        self.model.clone()
    }
}

/// Trains CAPNet's causality extractor, and the CNN too when unfrozen.
pub struct CapnetTrainer {
    pub net: CapNet,
    train: Vec<SampleWindow>,
    val: Vec<SampleWindow>,
    config: TrainConfig,
    causality_adam: AdamState,
    cnn_adam: AdamState,
    table: Option<FeatureTable>,
}

impl CapnetTrainer {
    pub fn new(net: CapNet, train: Vec<SampleWindow>, val: Vec<SampleWindow>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        require_nonempty(&train, "training")?;
        require_nonempty(&val, "validation")?;
        require_batch(train.len(), config.batch_size)?;
        let want = net.sampler.window_len();
        if let Some(w) = train.iter().chain(&val).find(|w| w.slots.len() != want) {
            return Err(Error::Config(format!(
                "window for ({}, {}) has {} frames but the model expects {want}",
                w.video_id,
                w.target_frame,
                w.slots.len()
            )));
        }
        let table = if config.freeze_extractor {
            let frames = window_frames(&train).chain(window_frames(&val));
            Some(FeatureTable::build(&net.extractor, frames, config.threads)?)
        } else {
            unfrozen_cnn(&net.extractor)?;
            None
        };
        Ok(Self::with_table(net, train, val, config, table))
    }

    /// Uses features computed elsewhere; they must cover every window frame.
    pub fn with_features(
        net: CapNet,
        train: Vec<SampleWindow>,
        val: Vec<SampleWindow>,
        config: TrainConfig,
        table: FeatureTable,
    ) -> Result<Self> {
        config.validate()?;
        require_nonempty(&train, "training")?;
        require_nonempty(&val, "validation")?;
        require_batch(train.len(), config.batch_size)?;
        crate::models::check_dims(table.dim(), net.causality.feature_dim())?;
        let want = net.sampler.window_len();
        if let Some(w) = train.iter().chain(&val).find(|w| w.slots.len() != want) {
            return Err(Error::Config(format!(
                "window for ({}, {}) has {} frames but the model expects {want}",
                w.video_id,
                w.target_frame,
                w.slots.len()
            )));
        }
        let config = TrainConfig {
            freeze_extractor: true,
            ..config
        };
        Ok(Self::with_table(net, train, val, config, Some(table)))
    }

    fn with_table(
        net: CapNet,
        train: Vec<SampleWindow>,
        val: Vec<SampleWindow>,
        config: TrainConfig,
        table: Option<FeatureTable>,
    ) -> Self {
        let adam = AdamState::new(AdamConfig::with_lr(config.lr));
        CapnetTrainer {
            net,
            train,
            val,
            config,
            causality_adam: adam.clone(),
            cnn_adam: adam,
            table,
        }
    }

    fn frozen_batch(&mut self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<f64> {
        let table = self.table.as_ref().expect("frozen trainer has features");
        let windows = batch
            .iter()
            .map(|&i| table.sequence(&self.train[i].slots))
            .collect::<Result<Vec<_>>>()?;
        let y = labels_tensor(batch.iter().map(|&i| &self.train[i].label))?;
        let step = self.net.causality.batch_step(&windows, &y, Mode::Train, rng)?;
        adam_step(&mut self.net.causality, &step.grads, &mut self.causality_adam)?;
        Ok(step.loss)
    }

    fn end_to_end_batch(&mut self, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<f64> {
        let cnn = unfrozen_cnn(&self.net.extractor)?;
        let d = cnn.output_dim();
        let mut windows = Vec::with_capacity(batch.len());
        let mut caches: Vec<Vec<CnnCache>> = Vec::with_capacity(batch.len());
        for &i in batch {
            let mut data = Vec::new();
            let mut per_frame = Vec::new();
            for frame in &self.train[i].slots {
                let (f, cache) = cnn.forward(&load_frame_tensor(frame, cnn.input_side())?)?;
                data.extend(f);
                per_frame.push(cache);
            }
            windows.push(Tensor::new(vec![per_frame.len(), d], data)?);
            caches.push(per_frame);
        }
        let y = labels_tensor(batch.iter().map(|&i| &self.train[i].label))?;
        let step = self.net.causality.batch_step(&windows, &y, Mode::Train, rng)?;
        let mut cnn_grads = cnn.zeros_like();
        for (window_caches, g) in caches.iter().zip(&step.feature_grads) {
            for (r, cache) in window_caches.iter().enumerate() {
                cnn.backward(cache, g.row(r), &mut cnn_grads)?;
            }
        }
        adam_step(&mut self.net.causality, &step.grads, &mut self.causality_adam)?;
        let cnn = self.net.extractor.as_cnn_mut().expect("checked above");
        adam_step(cnn, &cnn_grads, &mut self.cnn_adam)?;
        Ok(step.loss)
    }
}

impl Trainee for CapnetTrainer {
    type Snapshot = CapNet;

    fn train_epoch(&mut self, _epoch: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let batches = batch_order(self.train.len(), self.config.batch_size, rng);
        let mut total = 0.0;
        for batch in &batches {
            total += if self.table.is_some() {
                self.frozen_batch(batch, rng)?
            } else {
                self.end_to_end_batch(batch, rng)?
            };
        }
        Ok(total / batches.len() as f64)
    }

    fn validate(&mut self) -> Result<CccReport> {
        let fresh;
        let table = match &self.table {
            Some(t) => t,
            None => {
                fresh = FeatureTable::build(&self.net.extractor, window_frames(&self.val), self.config.threads)?;
                &fresh
            }
        };
        let mut predictor = TablePredictor { model: &self.net, table };
        evaluate(&mut predictor, self.val.iter(), self.config.batch_size)
    }

    fn snapshot(&self) -> CapNet {
        self.net.clone()
    }
}

pub fn train_fer(
    model: FerModel,
    train: Vec<FramePair>,
    val: Vec<FramePair>,
    config: &TrainConfig,
) -> Result<TrainOutcome<FerModel>> {
    let mut trainer = FerTrainer::new(model, train, val, config.clone())?;
    run_training(&mut trainer, config)
}

pub fn train_capnet(
    net: CapNet,
    train: Vec<SampleWindow>,
    val: Vec<SampleWindow>,
    config: &TrainConfig,
) -> Result<TrainOutcome<CapNet>> {
    let mut trainer = CapnetTrainer::new(net, train, val, config.clone())?;
    run_training(&mut trainer, config)
}
