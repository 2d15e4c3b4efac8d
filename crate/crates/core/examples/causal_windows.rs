//! Causal window construction: slot offsets for each window size, and the
//! fallback to older frames when a slot's frame is missing.
//!
//! cargo run --example causal_windows

use capnet::dataset::Label;
use capnet::sampler::{enumerate_windows, parse_seconds, sample_slots};
use capnet::{LabeledVideo, SamplerConfig};

fn main() -> capnet::Result<()> {
    for w in ["1", "2", "3"] {
        let sampler = SamplerConfig::default().with_window(parse_seconds(w)?)?;
        println!("w={w}s: {} slots at offsets {:?}", sampler.window_len(), sampler.offsets());
    }

    // A 300-frame video with every frame present and labeled.
    let mut video = LabeledVideo::with_frames("demo", 30, 1..=300);
    for t in 1..=300 {
        video.labels.insert(t, Label::from_pair(0.0, 0.0));
    }
    let sampler = SamplerConfig::default();
    println!("complete video: {} windows", enumerate_windows(&video, &sampler)?.count());

    // Drop a few frames: newer slots fall back to the nearest older frame
    // within one stride, the oldest slot cannot.
    for missing in [190, 189, 188, 110] {
        video.frames.remove(&missing);
    }
    for target in [200, 201] {
        match sample_slots(&video, target, &sampler)? {
            Some(slots) => println!("target {target}: slots {slots:?}"),
            None => println!("target {target}: insufficient"),
        }
    }
    let first = enumerate_windows(&video, &sampler)?.next().expect("windows remain");
    println!("manifest line: {}", first.manifest_line());
    Ok(())
}
