//! Trains CAPNet and the single-image head on a synthetic task whose labels
//! depend only on past frames. The image features are extracted once by a
//! randomly initialized CNN and kept frozen.
//!
//! cargo run --release --example train_capnet

use capnet::dataset::{generate_synthetic, SyntheticSpec};
use capnet::metrics::{evaluate, render_table, ReportRow};
use capnet::models::{CapNet, CausalityExtractor, Extractor, FeatureTable, FerModel, TinyCnn};
use capnet::sampler::{enumerate_single_pairs, enumerate_windows};
use capnet::training::{run_training_with, CapnetTrainer, FerTrainer, TablePredictor, TrainConfig};
use capnet::{LabeledVideo, SampleWindow, SamplerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn windows(videos: &[LabeledVideo], sampler: &SamplerConfig) -> capnet::Result<Vec<SampleWindow>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(enumerate_windows(v, sampler)?);
    }
    Ok(out)
}

fn main() -> capnet::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SyntheticSpec {
        num_videos: 8,
        frames_per_video: 300,
        ..SyntheticSpec::default()
    };
    let videos = generate_synthetic(&spec, dir.path())?;
    let (train_videos, val_videos) = videos.split_at(6);

    // A small input side keeps extraction fast; the CNN is the same at any side.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cnn = TinyCnn::init(32, 32, &mut rng)?;
    let table = FeatureTable::build(&cnn, videos.iter().flat_map(|v| v.frames.values()), 1)?;
    println!("extracted {} frame features", table.len());

    let config = TrainConfig {
        batch_size: 32,
        lr: 1e-3,
        max_epochs: 40,
        ..TrainConfig::default()
    };
    let sampler = SamplerConfig::default();
    let causality = CausalityExtractor::init(32, 64, 64, 0.2, &mut rng);
    let net = CapNet::new(Extractor::TinyCnn(cnn.clone()), causality, sampler)?;
    let val_windows = windows(val_videos, &sampler)?;
    let mut trainer = CapnetTrainer::with_features(
        net,
        windows(train_videos, &sampler)?,
        val_windows.clone(),
        config.clone(),
        table.clone(),
    )?;
    let outcome = run_training_with(&mut trainer, &config, |r| {
        println!("capnet epoch {:>2}: loss {:.4}  val {}", r.epoch, r.train_loss, r.validation.row())
    })?;
    let capnet = outcome.best;

    let pairs = |vs: &[LabeledVideo]| vs.iter().flat_map(enumerate_single_pairs).collect::<Vec<_>>();
    let fer = FerModel::new(Extractor::TinyCnn(cnn), &mut rng);
    let mut fer_trainer = FerTrainer::new(fer, pairs(train_videos), pairs(val_videos), config.clone())?;
    let fer = run_training_with(&mut fer_trainer, &config, |_| {})?.best;

    let val_pairs = pairs(val_videos);
    let rows = [
        ReportRow {
            model: "single image".into(),
            window_seconds: None,
            report: evaluate(&mut TablePredictor { model: &fer, table: &table }, val_pairs.iter(), 256)?,
        },
        ReportRow {
            model: "CAPNet".into(),
            window_seconds: Some(sampler.window().to_string()),
            report: evaluate(&mut TablePredictor { model: &capnet, table: &table }, val_windows.iter(), 256)?,
        },
    ];
    print!("{}", render_table(&rows));
    Ok(())
}
