//! Saving and loading models and feature caches, and swapping a CNN for a
//! precomputed cache without retraining the causality extractor.
//!
//! cargo run --example checkpoints

use capnet::models::{CapNet, CausalityExtractor, Extractor, FeatureCache, FeatureTable, FrameInput, TinyCnn};
use capnet::neural::{Checkpoint, Tensor};
use capnet::{LabeledVideo, SamplerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> capnet::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cnn = TinyCnn::init(16, 32, &mut rng)?;
    let causality = CausalityExtractor::init(32, 64, 64, 0.2, &mut rng);
    let net = CapNet::new(Extractor::TinyCnn(cnn.clone()), causality, SamplerConfig::default())?;

    let ckpt_path = dir.path().join("capnet.ckpt");
    net.to_checkpoint().save(&ckpt_path)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    println!("checkpoint: {} tensors, {} bytes", ckpt.len(), ckpt.to_bytes().len());
    for name in ckpt.names().take(4) {
        println!("  {name} {:?}", ckpt.require(name)?.shape());
    }
    println!("header: {:?}", CapNet::load_causality(&ckpt)?.0);

    // Features of a frame-handle video, as if computed elsewhere.
    let video = LabeledVideo::with_frames("clip", 30, 1..=100);
    let images: Vec<Tensor> = (1..=100)
        .map(|i| Tensor::new(vec![16, 16, 3], vec![i as f64 / 100.0; 16 * 16 * 3]))
        .collect::<capnet::Result<_>>()?;
    let mut table = FeatureTable::new(32);
    for (&i, image) in video.frames.keys().zip(&images) {
        table.insert("clip", i, cnn.forward(image)?.0);
    }
    let cache = FeatureCache::from_table(&table);
    let cache_path = dir.path().join("clip.capf");
    cache.save(&cache_path)?;
    let on_disk = std::fs::metadata(&cache_path).map(|m| m.len()).unwrap_or(0);
    println!("feature cache: {} frames, {on_disk} bytes on disk", cache.len());

    // Same causality weights, precomputed features instead of the CNN.
    let cached = CapNet::with_extractor(&ckpt, Extractor::Precomputed(FeatureCache::load(&cache_path)?))?;
    let slots: Vec<u32> = (0..9).map(|k| 11 + 10 * k).collect();
    let by_ref: Vec<FrameInput> = slots.iter().map(|i| FrameInput::Ref(&video.frames[i])).collect();
    let by_image: Vec<FrameInput> = slots.iter().map(|&i| FrameInput::Image(&images[i as usize - 1])).collect();
    println!("from cached features: {:?}", cached.predict(&by_ref)?);
    // The cache stores 32-bit floats, so the two agree to about 1e-7.
    println!("from images via CNN:  {:?}", net.predict(&by_image)?);
    Ok(())
}
