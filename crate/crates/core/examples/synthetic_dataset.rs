//! Generates a small synthetic dataset on disk, scans it back and shows how
//! the labels follow the past stimulus.
//!
//! cargo run --example synthetic_dataset

use capnet::dataset::{generate_synthetic, read_stimulus_log, scan_video_dir, StimulusLaw, SyntheticSpec, STIMULUS_LOG};
use capnet::sampler::enumerate_windows;
use capnet::SamplerConfig;

fn main() -> capnet::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SyntheticSpec {
        num_videos: 2,
        frames_per_video: 150,
        stimulus_law: StimulusLaw::WindowMean,
        ..SyntheticSpec::default()
    };
    let videos = generate_synthetic(&spec, dir.path())?;
    println!("generated {} videos under {}", videos.len(), dir.path().display());

    let scanned = scan_video_dir(dir.path(), spec.frame_rate)?;
    assert_eq!(scanned.videos, videos);
    for v in &scanned.videos {
        let labeled = v.labels.values().filter(|l| l.valid().is_some()).count();
        println!("{}: {} frames, {labeled} valid labels", v.video_id, v.frames.len());
    }

    // The first labeled target averages the stimulus over its nine slots.
    let video = &videos[0];
    let stimulus = read_stimulus_log(&dir.path().join(&video.video_id).join(STIMULUS_LOG))?;
    let sampler = SamplerConfig::default();
    let window = enumerate_windows(video, &sampler)?.next().expect("a full window");
    let slot_u: Vec<f64> = window
        .slot_indices()
        .iter()
        .map(|&i| stimulus[i as usize - 1].1)
        .collect();
    let mean = slot_u.iter().sum::<f64>() / slot_u.len() as f64;
    println!(
        "target {} reads frames {:?}\n  label valence {:.4}, mean of slot stimuli {mean:.4}",
        window.target_frame,
        window.slot_indices(),
        window.label.valence
    );
    Ok(())
}
