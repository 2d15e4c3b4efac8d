//! Frame-by-frame inference: a producer thread pushes frames while the main
//! thread asks for the current affect, then a full replay writes the trace CSV.
//!
//! cargo run --example streaming

use std::sync::Arc;

use capnet::dataset::Label;
use capnet::models::{CapNet, CausalityExtractor, Extractor, FeatureCache, FrameInput};
use capnet::streaming::{render_trace, run_stream_sim, Pace, StreamEngine, StreamState};
use capnet::{LabeledVideo, SamplerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> capnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Every fifth frame after 120 is missing, as after a face-detection dropout.
    let mut video = LabeledVideo::with_frames("live", 30, (1..=240).filter(|i| *i <= 120 || i % 5 != 0));
    for t in 1..=240 {
        video.labels.insert(t, Label::from_pair(0.0, 0.0));
    }
    let dim = 8;
    let mut cache = FeatureCache::new(dim);
    for &i in video.frames.keys() {
        cache.insert("live", i, (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    let causality = CausalityExtractor::init(dim, 16, 16, 0.2, &mut rng);
    let net = CapNet::new(Extractor::Precomputed(cache), causality, SamplerConfig::default())?;

    let engine = Arc::new(StreamEngine::new(net.clone()));
    let producer = {
        let engine = Arc::clone(&engine);
        let video = video.clone();
        std::thread::spawn(move || -> capnet::Result<()> {
            for (&i, frame) in &video.frames {
                engine.push_frame(i, FrameInput::Ref(frame))?;
            }
            Ok(())
        })
    };
    producer.join().expect("producer thread")?;
    println!("buffer holds {} of {} frames", engine.buffer_len(), engine.capacity());
    for target in [239, 240] {
        let p = engine.predict_at(target)?;
        match p.state {
            StreamState::Ready(state) => println!("affect at frame {target}: {state:?} from frames {:?}", p.frames_used),
            // The oldest slot (frame 150) was dropped and has no fallback.
            StreamState::Insufficient => println!("frame {target}: insufficient"),
        }
    }
    // Frames older than the buffer are gone.
    println!("frame 100 after the stream moved on: {:?}", engine.predict_at(100)?.state);

    let report = run_stream_sim(&video, &StreamEngine::new(net), Pace::AsFastAsPossible)?;
    println!("replay: {} targets, {} predicted", report.rows.len(), report.ready_count());
    let trace = render_trace(&report.rows);
    for line in trace.lines().take(3).chain(trace.lines().skip(91).take(2)) {
        println!("{line}");
    }
    Ok(())
}
