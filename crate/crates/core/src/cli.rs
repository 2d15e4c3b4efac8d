//! The `capnet` command line.
//!
//! Every command resolves a [`RunConfig`] from defaults, the
//! `CAPNET_DATA_ROOT` environment variable, an optional `key = value` config
//! file and finally command-line flags (flags win), echoes it to stderr and
//! runs. Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{generate_synthetic, scan_video_dir, LabeledVideo, StimulusLaw, SyntheticSpec};
use crate::diagnostics::{run_suites, Layer, SuiteConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, render_csv, render_table, LabelOracle, ReportRow};
use crate::models::{
    CapNet, CausalityExtractor, Extractor, FeatureCache, FeatureExtractor, FeatureTable, FerModel, ModelConfig,
    ModelHeader, TinyCnn,
};
use crate::neural::Checkpoint;
use crate::sampler::{enumerate_single_pairs, enumerate_windows, parse_seconds, Seconds, SamplerConfig};
use crate::streaming::{render_trace, run_stream_sim, Pace, StreamEngine};
use crate::training::{
    run_training_with, window_frames, CapnetTrainer, EpochRecord, FerTrainer, FramePair,
    TablePredictor, TrainConfig, EPOCH_LOG_HEADER,
};

pub const DATA_ROOT_ENV: &str = "CAPNET_DATA_ROOT";
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

const ECHO_HEADER: &str = "# capnet resolved configuration";

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    /// Number of videos (last in id order) held out for validation.
    pub val_videos: usize,
    pub seed: u64,
    pub threads: usize,
    pub lead: Seconds,
    pub frame_rate: u32,
    pub window: Seconds,
    pub stride: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Whether `train-fer` keeps the extractor fixed.
    pub fer_freeze_extractor: bool,
    pub synth_num_videos: usize,
    pub synth_frames_per_video: u32,
    pub synth_law: StimulusLaw,
    pub synth_image_side: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampler = SamplerConfig::default();
        let synth = SyntheticSpec::default();
        RunConfig {
            data_root: PathBuf::from("data"),
            val_videos: 1,
            seed: 0,
            threads: 1,
            lead: sampler.lead(),
            frame_rate: sampler.frame_rate(),
            window: sampler.window(),
            stride: sampler.stride(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fer_freeze_extractor: false,
            synth_num_videos: synth.num_videos,
            synth_frames_per_video: synth.frames_per_video,
            synth_law: synth.stimulus_law,
            synth_image_side: synth.image_side,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "data.root",
    "data.val_videos",
    "fer.freeze_extractor",
    "model.dropout",
    "model.fc_hidden",
    "model.feature_dim",
    "model.image_size",
    "model.lstm_hidden",
    "sampler.d",
    "sampler.f",
    "sampler.s",
    "sampler.w",
    "seed",
    "synth.frames_per_video",
    "synth.image_side",
    "synth.law",
    "synth.num_videos",
    "threads",
    "train.batch_size",
    "train.freeze_extractor",
    "train.lr",
    "train.max_epochs",
    "train.patience",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Defaults with `data.root` taken from `CAPNET_DATA_ROOT` when set.
    pub fn from_env() -> Self {
        let mut config = RunConfig::default();
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            config.data_root = PathBuf::from(root);
        }
        config
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data.root" => self.data_root = PathBuf::from(v),
            "data.val_videos" => self.val_videos = parse_value(key, v)?,
            "fer.freeze_extractor" => self.fer_freeze_extractor = parse_value(key, v)?,
            "model.dropout" => self.model.dropout = parse_value(key, v)?,
            "model.fc_hidden" => self.model.fc_hidden = parse_value(key, v)?,
            "model.feature_dim" => self.model.feature_dim = parse_value(key, v)?,
            "model.image_size" => self.model.image_size = parse_value(key, v)?,
            "model.lstm_hidden" => self.model.lstm_hidden = parse_value(key, v)?,
            "sampler.d" => self.lead = parse_seconds(v)?,
            "sampler.f" => self.frame_rate = parse_value(key, v)?,
            "sampler.s" => self.stride = parse_value(key, v)?,
            "sampler.w" => self.window = parse_seconds(v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "synth.frames_per_video" => self.synth_frames_per_video = parse_value(key, v)?,
            "synth.image_side" => self.synth_image_side = parse_value(key, v)?,
            "synth.law" => {
                self.synth_law = StimulusLaw::parse(v)
                    .ok_or_else(|| Error::Config(format!("unknown synth.law `{v}` (window_mean or lagged_step)")))?
            }
            "synth.num_videos" => self.synth_num_videos = parse_value(key, v)?,
            "threads" => self.threads = parse_value(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, v)?,
            "train.freeze_extractor" => self.train.freeze_extractor = parse_value(key, v)?,
            "train.lr" => self.train.lr = parse_value(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse_value(key, v)?,
            "train.patience" => self.train.patience = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Parses a config text over the defaults (without the environment).
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply_text(text)?;
        Ok(config)
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        self.set(key, value)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data.root" => self.data_root.display().to_string(),
            "data.val_videos" => self.val_videos.to_string(),
            "fer.freeze_extractor" => self.fer_freeze_extractor.to_string(),
            "model.dropout" => self.model.dropout.to_string(),
            "model.fc_hidden" => self.model.fc_hidden.to_string(),
            "model.feature_dim" => self.model.feature_dim.to_string(),
            "model.image_size" => self.model.image_size.to_string(),
            "model.lstm_hidden" => self.model.lstm_hidden.to_string(),
            "sampler.d" => self.lead.to_string(),
            "sampler.f" => self.frame_rate.to_string(),
            "sampler.s" => self.stride.to_string(),
            "sampler.w" => self.window.to_string(),
            "seed" => self.seed.to_string(),
            "synth.frames_per_video" => self.synth_frames_per_video.to_string(),
            "synth.image_side" => self.synth_image_side.to_string(),
            "synth.law" => self.synth_law.name().to_string(),
            "synth.num_videos" => self.synth_num_videos.to_string(),
            "threads" => self.threads.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.freeze_extractor" => self.train.freeze_extractor.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.max_epochs" => self.train.max_epochs.to_string(),
            "train.patience" => self.train.patience.to_string(),
            _ => return None,
        })
    }

    /// Every key with its value, one `key = value` line each. Parsing the
    /// result gives back an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::from(ECHO_HEADER);
        out.push('\n');
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        SamplerConfig::new(self.lead, self.frame_rate, self.window, self.stride)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            threads: self.threads,
            ..self.train.clone()
        }
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        Ok(SyntheticSpec {
            num_videos: self.synth_num_videos,
            frames_per_video: self.synth_frames_per_video,
            frame_rate: self.frame_rate,
            seed: self.seed,
            stimulus_law: self.synth_law,
            sampler: self.sampler()?,
            image_side: self.synth_image_side,
        })
    }

    /// Re-checks the constraints of every housed configuration.
    pub fn validate(&self) -> Result<()> {
        self.sampler()?;
        self.model.validate()?;
        self.train_config().validate()?;
        self.synthetic_spec()?.validate()?;
        Ok(())
    }
}

/// Path of the config file written next to a checkpoint.
pub fn config_sidecar(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".cfg");
    PathBuf::from(name)
}

#[derive(Debug, Parser)]
#[command(name = "capnet", version, about = "Causal affect prediction from past facial frames")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default, Clone)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for feature extraction.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Dataset root (defaults to $CAPNET_DATA_ROOT, then `data`).
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known causal labels.
    SynthGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        num_videos: Option<usize>,
        #[arg(long)]
        frames_per_video: Option<u32>,
        /// window_mean or lagged_step.
        #[arg(long)]
        law: Option<String>,
    },
    /// Write the window manifest (`video_id,T,idx_1..idx_L,valence,arousal`).
    PreparePairs {
        #[command(flatten)]
        common: Common,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Single-image pairs (`video_id,T,valence,arousal`) instead of windows.
        #[arg(long)]
        single: bool,
    },
    /// Train the single-image model.
    TrainFer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train CAPNet's causality extractor.
    TrainCapnet {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Take the feature extractor from this single-image checkpoint.
        #[arg(long)]
        fer_checkpoint: Option<PathBuf>,
    },
    /// Report CCC of a checkpoint (or the label oracle) on the validation videos.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Evaluate the identity label oracle instead of a model.
        #[arg(long)]
        oracle: bool,
        /// Evaluate on every video, not only the held-out ones.
        #[arg(long)]
        all_videos: bool,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Model name shown in the report.
        #[arg(long)]
        name: Option<String>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Comma-separated suites: fc, lstm, ccc, fer, capnet, cnn.
        #[arg(long, default_value = "fc,lstm,ccc,fer,capnet,cnn")]
        layers: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Corrupt the analytic gradients (negative control; must fail).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Replay a video through the streaming engine and write a latency trace.
    StreamSim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Video id; the first video when absent.
        #[arg(long)]
        video: Option<String>,
        /// Trace CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pace frames at the frame rate instead of as fast as possible.
        #[arg(long)]
        realtime: bool,
    },
}

#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    /// Checkpoint written with the best epoch's weights.
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log CSV; `<out>.log.csv` when absent.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Precomputed feature cache used as the extractor.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Continue from a checkpoint; its saved config is the base config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthGen { common, .. }
            | Command::PreparePairs { common, .. }
            | Command::TrainFer { common, .. }
            | Command::TrainCapnet { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::StreamSim { common, .. } => common,
        }
    }

    fn resume(&self) -> Option<&Path> {
        match self {
            Command::TrainFer { train, .. } | Command::TrainCapnet { train, .. } => train.resume.as_deref(),
            _ => None,
        }
    }
}

/// Resolves the configuration of a parsed command line.
pub fn resolve_config(command: &Command) -> Result<RunConfig> {
    let mut config = RunConfig::from_env();
    if let Some(ckpt) = command.resume() {
        let path = config_sidecar(ckpt);
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        config = RunConfig::parse(&text)?;
    }
    let common = command.common();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        config.apply_text(&text)?;
    }
    for pair in &common.overrides {
        config.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(threads) = common.threads {
        config.threads = threads;
    }
    if let Some(root) = &common.data_root {
        config.data_root = root.clone();
    }
    match command {
        Command::SynthGen {
            num_videos,
            frames_per_video,
            law,
            ..
        } => {
            if let Some(n) = num_videos {
                config.synth_num_videos = *n;
            }
            if let Some(n) = frames_per_video {
                config.synth_frames_per_video = *n;
            }
            if let Some(law) = law {
                config.set("synth.law", law)?;
            }
        }
        Command::TrainFer { train, .. } | Command::TrainCapnet { train, .. } => {
            if let Some(e) = train.epochs {
                config.train.max_epochs = e;
            }
            if let Some(lr) = train.lr {
                config.train.lr = lr;
            }
            if let Some(b) = train.batch_size {
                config.train.batch_size = b;
            }
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_FAILURE
            }
        }
    }
}

pub fn run(command: &Command) -> Result<i32> {
    let config = resolve_config(command)?;
    eprint!("{}", config.to_text());
    match command {
        Command::SynthGen { .. } => synth_gen(&config),
        Command::PreparePairs { out, single, .. } => prepare_pairs(&config, out.as_deref(), *single),
        Command::TrainFer { train, .. } => train_fer_cmd(&config, train),
        Command::TrainCapnet {
            train, fer_checkpoint, ..
        } => train_capnet_cmd(&config, train, fer_checkpoint.as_deref()),
        Command::Evaluate {
            checkpoint,
            features,
            oracle,
            all_videos,
            csv,
            name,
            ..
        } => evaluate_cmd(
            &config,
            &EvalArgs {
                checkpoint: checkpoint.as_deref(),
                features: features.as_deref(),
                oracle: *oracle,
                all_videos: *all_videos,
                csv: csv.as_deref(),
                name: name.as_deref(),
            },
        ),
        Command::Gradcheck {
            layers,
            seeds,
            inject_fault,
            ..
        } => gradcheck_cmd(layers, *seeds, *inject_fault),
        Command::StreamSim {
            checkpoint,
            features,
            video,
            out,
            realtime,
            ..
        } => stream_sim_cmd(&config, checkpoint, features.as_deref(), video.as_deref(), out.as_deref(), *realtime),
    }
}

fn synth_gen(config: &RunConfig) -> Result<i32> {
    let spec = config.synthetic_spec()?;
    let videos = generate_synthetic(&spec, &config.data_root)?;
    let frames: usize = videos.iter().map(|v| v.frames.len()).sum();
    println!(
        "wrote {} videos ({frames} frames) to {}",
        videos.len(),
        config.data_root.display()
    );
    Ok(EXIT_OK)
}

fn load_videos(config: &RunConfig) -> Result<Vec<LabeledVideo>> {
    let report = scan_video_dir(&config.data_root, config.frame_rate)?;
    if report.skipped_files > 0 {
        eprintln!("skipped {} files with unexpected names", report.skipped_files);
    }
    if report.videos.is_empty() {
        return Err(Error::Dataset(format!("no videos found under {}", config.data_root.display())));
    }
    Ok(report.videos)
}

/// Splits videos into training and validation sets (the last `val_videos` ids).
fn split_videos(config: &RunConfig, videos: Vec<LabeledVideo>) -> Result<(Vec<LabeledVideo>, Vec<LabeledVideo>)> {
    if config.val_videos == 0 || config.val_videos >= videos.len() {
        return Err(Error::Config(format!(
            "data.val_videos = {} but there are {} videos; need at least one for each split",
            config.val_videos,
            videos.len()
        )));
    }
    let mut train = videos;
    let val = train.split_off(train.len() - config.val_videos);
    Ok((train, val))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(Error::io(p)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(Error::io("<stdout>")),
    }
}

fn prepare_pairs(config: &RunConfig, out: Option<&Path>, single: bool) -> Result<i32> {
    let videos = load_videos(config)?;
    let sampler = config.sampler()?;
    let mut text = String::new();
    let mut lines = 0;
    for video in &videos {
        if single {
            for (frame, label) in enumerate_single_pairs(video) {
                let _ = writeln!(
                    text,
                    "{},{},{},{}",
                    frame.video_id, frame.frame_index, label.valence, label.arousal
                );
                lines += 1;
            }
        } else {
            for window in enumerate_windows(video, &sampler)? {
                let _ = writeln!(text, "{}", window.manifest_line());
                lines += 1;
            }
        }
    }
    write_output(out, &text)?;
    eprintln!("{lines} pairs from {} videos", videos.len());
    Ok(EXIT_OK)
}

fn fer_pairs(videos: &[LabeledVideo]) -> Vec<FramePair> {
    videos.iter().flat_map(enumerate_single_pairs).collect()
}

fn windows_of(videos: &[LabeledVideo], sampler: &SamplerConfig) -> Result<Vec<crate::sampler::SampleWindow>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(enumerate_windows(v, sampler)?);
    }
    Ok(out)
}

fn load_cache(path: Option<&Path>) -> Result<Option<FeatureCache>> {
    path.map(FeatureCache::load).transpose()
}

/// The extractor for a fresh model: a feature cache when given, otherwise a
/// newly initialized CNN.
fn fresh_extractor(config: &RunConfig, features: Option<&Path>, rng: &mut ChaCha8Rng) -> Result<Extractor> {
    match load_cache(features)? {
        Some(cache) => Ok(Extractor::Precomputed(cache)),
        None => Ok(Extractor::TinyCnn(TinyCnn::init(
            config.model.image_size,
            config.model.feature_dim,
            rng,
        )?)),
    }
}

fn check_feature_dim(config: &RunConfig, extractor: &Extractor) -> Result<()> {
    if extractor.output_dim() != config.model.feature_dim {
        return Err(Error::Config(format!(
            "extractor produces D={} but model.feature_dim={}",
            extractor.output_dim(),
            config.model.feature_dim
        )));
    }
    Ok(())
}

struct EpochLog {
    path: PathBuf,
}

impl EpochLog {
    fn create(path: PathBuf) -> Result<Self> {
        fs::write(&path, format!("{EPOCH_LOG_HEADER}\n")).map_err(Error::io(&path))?;
        Ok(EpochLog { path })
    }

    fn append(&self, record: &EpochRecord) {
        let line = format!("{}\n", record.csv_row());
        let result = fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .and_then(|mut f| f.write_all(line.as_bytes()));
        if let Err(e) = result {
            log::warn!("could not append to {}: {e}", self.path.display());
        }
    }
}

fn log_path(train: &TrainArgs) -> PathBuf {
    train.log.clone().unwrap_or_else(|| {
        let mut name = train.out.as_os_str().to_owned();
        name.push(".log.csv");
        PathBuf::from(name)
    })
}

fn on_epoch(log: &EpochLog) -> impl FnMut(&EpochRecord) + '_ {
    move |r: &EpochRecord| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val {}  ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.validation.row(),
            r.seconds
        );
        log.append(r);
    }
}

fn save_checkpoint(ckpt: &Checkpoint, config: &RunConfig, out: &Path) -> Result<()> {
    ckpt.save(out)?;
    let sidecar = config_sidecar(out);
    fs::write(&sidecar, config.to_text()).map_err(Error::io(&sidecar))
}

fn train_fer_cmd(config: &RunConfig, train: &TrainArgs) -> Result<i32> {
    let (train_videos, val_videos) = split_videos(config, load_videos(config)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = match &train.resume {
        Some(path) => FerModel::from_checkpoint(&Checkpoint::load(path)?, load_cache(train.features.as_deref())?)?,
        None => {
            let extractor = fresh_extractor(config, train.features.as_deref(), &mut rng)?;
            FerModel::new(extractor, &mut rng)
        }
    };
    check_feature_dim(config, &model.extractor)?;
    let train_config = TrainConfig {
        freeze_extractor: config.fer_freeze_extractor || matches!(model.extractor, Extractor::Precomputed(_)),
        ..config.train_config()
    };
    let mut trainer = FerTrainer::new(model, fer_pairs(&train_videos), fer_pairs(&val_videos), train_config.clone())?;
    let log = EpochLog::create(log_path(train))?;
    let outcome = run_training_with(&mut trainer, &train_config, on_epoch(&log))?;
    save_checkpoint(&outcome.best.to_checkpoint(), config, &train.out)?;
    let best = &outcome.records[outcome.best_epoch - 1];
    println!(
        "best epoch {} of {}: val {}",
        outcome.best_epoch,
        outcome.records.len(),
        best.validation.row()
    );
    Ok(EXIT_OK)
}

fn train_capnet_cmd(config: &RunConfig, train: &TrainArgs, fer_checkpoint: Option<&Path>) -> Result<i32> {
    let sampler = config.sampler()?;
    let (train_videos, val_videos) = split_videos(config, load_videos(config)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cache = load_cache(train.features.as_deref())?;
    let net = match (&train.resume, fer_checkpoint) {
        (Some(path), _) => {
            let ckpt = Checkpoint::load(path)?;
            let net = CapNet::from_checkpoint(&ckpt, cache)?;
            if net.sampler != sampler {
                return Err(Error::Config(format!(
                    "checkpoint was trained with sampler {} but the config has {sampler}",
                    net.sampler
                )));
            }
            net
        }
        (None, Some(fer)) => {
            let extractor = match cache {
                Some(cache) => Extractor::Precomputed(cache),
                None => FerModel::from_checkpoint(&Checkpoint::load(fer)?, None)?.extractor,
            };
            check_feature_dim(config, &extractor)?;
            let causality = new_causality(config, &mut rng);
            CapNet::new(extractor, causality, sampler)?
        }
        (None, None) => {
            let extractor = match cache {
                Some(cache) => Extractor::Precomputed(cache),
                None => fresh_extractor(config, None, &mut rng)?,
            };
            check_feature_dim(config, &extractor)?;
            let causality = new_causality(config, &mut rng);
            CapNet::new(extractor, causality, sampler)?
        }
    };
    let train_config = config.train_config();
    let train_windows = windows_of(&train_videos, &sampler)?;
    let val_windows = windows_of(&val_videos, &sampler)?;
    eprintln!(
        "{} training windows, {} validation windows",
        train_windows.len(),
        val_windows.len()
    );
    let mut trainer = CapnetTrainer::new(net, train_windows, val_windows, train_config.clone())?;
    let log = EpochLog::create(log_path(train))?;
    let outcome = run_training_with(&mut trainer, &train_config, on_epoch(&log))?;
    save_checkpoint(&outcome.best.to_checkpoint(), config, &train.out)?;
    let best = &outcome.records[outcome.best_epoch - 1];
    println!(
        "best epoch {} of {}: val {}",
        outcome.best_epoch,
        outcome.records.len(),
        best.validation.row()
    );
    Ok(EXIT_OK)
}

fn new_causality(config: &RunConfig, rng: &mut ChaCha8Rng) -> CausalityExtractor {
    CausalityExtractor::init(
        config.model.feature_dim,
        config.model.lstm_hidden,
        config.model.fc_hidden,
        config.model.dropout,
        rng,
    )
}

struct EvalArgs<'a> {
    checkpoint: Option<&'a Path>,
    features: Option<&'a Path>,
    oracle: bool,
    all_videos: bool,
    csv: Option<&'a Path>,
    name: Option<&'a str>,
}

fn evaluate_cmd(config: &RunConfig, args: &EvalArgs<'_>) -> Result<i32> {
    let videos = load_videos(config)?;
    let videos = if args.all_videos {
        videos
    } else {
        split_videos(config, videos)?.1
    };
    let batch = config.train.batch_size;
    let row = match (args.checkpoint, args.oracle) {
        (None, true) => {
            let sampler = config.sampler()?;
            let windows = windows_of(&videos, &sampler)?;
            ReportRow {
                model: args.name.unwrap_or("oracle").to_string(),
                window_seconds: Some(sampler.window().to_string()),
                report: evaluate(&mut LabelOracle, windows.iter(), batch)?,
            }
        }
        (Some(path), false) => {
            let ckpt = Checkpoint::load(path)?;
            let cache = load_cache(args.features)?;
            if ckpt.contains(ModelHeader::TENSOR) {
                let net = CapNet::from_checkpoint(&ckpt, cache)?;
                let windows = windows_of(&videos, &net.sampler)?;
                let table = FeatureTable::build(&net.extractor, window_frames(&windows), config.threads)?;
                let mut predictor = TablePredictor { model: &net, table: &table };
                ReportRow {
                    model: args.name.unwrap_or("CAPNet").to_string(),
                    window_seconds: Some(net.sampler.window().to_string()),
                    report: evaluate(&mut predictor, windows.iter(), batch)?,
                }
            } else {
                let model = FerModel::from_checkpoint(&ckpt, cache)?;
                let pairs = fer_pairs(&videos);
                let table = FeatureTable::build(&model.extractor, pairs.iter().map(|p| &p.0), config.threads)?;
                let mut predictor = TablePredictor {
                    model: &model,
                    table: &table,
                };
                ReportRow {
                    model: args.name.unwrap_or("FER").to_string(),
                    window_seconds: None,
                    report: evaluate(&mut predictor, pairs.iter(), batch)?,
                }
            }
        }
        _ => {
            return Err(Error::Config("evaluate needs exactly one of --checkpoint or --oracle".into()));
        }
    };
    let rows = [row];
    print!("{}", render_table(&rows));
    if let Some(path) = args.csv {
        fs::write(path, render_csv(&rows)).map_err(Error::io(path))?;
    }
    Ok(EXIT_OK)
}

fn gradcheck_cmd(layers: &str, seeds: u64, inject_fault: bool) -> Result<i32> {
    let config = SuiteConfig {
        layers: Layer::parse_list(layers)?,
        seeds,
        inject_fault,
        ..SuiteConfig::default()
    };
    let results = run_suites(&config);
    let mut all_passed = true;
    for r in &results {
        println!("{r}");
        all_passed &= r.passed;
    }
    let worst = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    println!(
        "gradcheck {}: max relative error {worst:.3e} (tolerance {:.0e})",
        if all_passed { "passed" } else { "FAILED" },
        config.tolerance
    );
    Ok(if all_passed { EXIT_OK } else { EXIT_FAILURE })
}

fn stream_sim_cmd(
    config: &RunConfig,
    checkpoint: &Path,
    features: Option<&Path>,
    video: Option<&str>,
    out: Option<&Path>,
    realtime: bool,
) -> Result<i32> {
    let net = CapNet::from_checkpoint(&Checkpoint::load(checkpoint)?, load_cache(features)?)?;
    let videos = load_videos(config)?;
    let video = match video {
        Some(id) => videos
            .iter()
            .find(|v| v.video_id == id)
            .ok_or_else(|| Error::Dataset(format!("no video `{id}` under {}", config.data_root.display())))?,
        None => &videos[0],
    };
    let engine = StreamEngine::new(net);
    let pace = if realtime { Pace::RealTime } else { Pace::AsFastAsPossible };
    let report = run_stream_sim(video, &engine, pace)?;
    write_output(out, &render_trace(&report.rows))?;
    let ready = report.ready_count();
    let mean_micros = report.rows.iter().map(|r| r.micros).sum::<u64>() as f64 / report.rows.len().max(1) as f64;
    eprintln!(
        "{}: {} targets, {ready} predicted, {} insufficient; buffer peak {} of {}; mean {mean_micros:.1} us/prediction",
        video.video_id,
        report.rows.len(),
        report.rows.len() - ready,
        report.max_buffered,
        engine.capacity()
    );
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_reparses_identically() {
        let mut c = RunConfig::default();
        c.set("sampler.w", "2").unwrap();
        c.set("train.lr", "0.001").unwrap();
        c.set("synth.law", "lagged_step").unwrap();
        c.set("data.root", "/tmp/some data").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_round_trips() {
        let c = RunConfig::default();
        for key in CONFIG_KEYS {
            let mut d = RunConfig::default();
            d.set(key, &c.get(key).unwrap()).unwrap();
            assert_eq!(d, c, "{key}");
        }
    }

    #[test]
    fn unknown_and_bad_keys_are_config_errors() {
        assert!(RunConfig::parse("nope = 1").unwrap_err().is_config());
        assert!(RunConfig::parse("seed = x").unwrap_err().is_config());
        assert!(RunConfig::parse("seed 3").unwrap_err().is_config());
        let c = RunConfig::parse("sampler.w = 2.5").unwrap();
        assert!(c.validate().unwrap_err().is_config());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "seed = 5\ntrain.lr = 0.01\n").unwrap();
        let cli = Cli::try_parse_from([
            "capnet".as_ref(),
            "prepare-pairs".as_ref(),
            "--config".as_ref(),
            path.as_os_str(),
            "--seed".as_ref(),
            "9".as_ref(),
            "--set".as_ref(),
            "train.lr=0.5".as_ref(),
        ])
        .unwrap();
        let c = resolve_config(&cli.command).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.lr, 0.5);
    }
}
