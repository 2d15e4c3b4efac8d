//! Fine-tunes the single-image model end to end (CNN and head) for a few
//! epochs on synthetic frames, then saves and reloads the best checkpoint.
//! These labels depend on past frames only, so a single image cannot predict
//! them and the validation CCC stays near zero; see `train_capnet` for the
//! contrast.
//!
//! cargo run --release --example train_fer

use capnet::dataset::{generate_synthetic, StimulusLaw, SyntheticSpec};
use capnet::models::{Extractor, FerModel, FrameInput, TinyCnn};
use capnet::neural::Checkpoint;
use capnet::sampler::enumerate_single_pairs;
use capnet::training::{render_epoch_log, train_fer, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> capnet::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SyntheticSpec {
        num_videos: 3,
        frames_per_video: 150,
        stimulus_law: StimulusLaw::LaggedStep,
        ..SyntheticSpec::default()
    };
    let videos = generate_synthetic(&spec, &dir.path().join("data"))?;
    let train: Vec<_> = videos[..2].iter().flat_map(enumerate_single_pairs).collect();
    let val: Vec<_> = enumerate_single_pairs(&videos[2]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = FerModel::new(Extractor::TinyCnn(TinyCnn::init(16, 8, &mut rng)?), &mut rng);
    let config = TrainConfig {
        batch_size: 16,
        lr: 1e-3,
        max_epochs: 3,
        freeze_extractor: false,
        ..TrainConfig::default()
    };
    let outcome = train_fer(model, train, val, &config)?;
    print!("{}", render_epoch_log(&outcome.records));
    println!("best epoch {}", outcome.best_epoch);

    let path = dir.path().join("fer.ckpt");
    outcome.best.to_checkpoint().save(&path)?;
    let reloaded = FerModel::from_checkpoint(&Checkpoint::load(&path)?, None)?;
    let frame = &videos[2].frames[&100];
    let a = outcome.best.predict(FrameInput::Ref(frame))?;
    let b = reloaded.predict(FrameInput::Ref(frame))?;
    println!("prediction for frame 100: {a:?} (reloaded model agrees: {})", a == b);
    Ok(())
}
