//! Real-time causal inference over a stream of frames.
//!
//! Frames arrive in increasing index order (gaps allowed). Each frame's
//! features are computed once on arrival and kept in a bounded ring. A
//! prediction for target `T` builds its window with the offline sampler rules
//! over the buffered indices, so it only ever reads frames `<= T - f*d`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::RwLock;
use std::time::{Duration, Instant};

use crate::dataset::{AffectState, LabeledVideo};
use crate::error::{Error, Result};
use crate::models::{CapNet, FeatureExtractor, FrameInput};
use crate::neural::Tensor;

/// Ring of `(frame_index, feature)` entries with strictly increasing indices.
#[derive(Debug, Clone)]
pub struct StreamBuffer {
    capacity: usize,
    entries: VecDeque<(u32, Vec<f64>)>,
}

impl StreamBuffer {
    pub fn new(capacity: usize) -> Self {
        StreamBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn newest(&self) -> Option<u32> {
        self.entries.back().map(|e| e.0)
    }

    pub fn indices(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.0).collect()
    }

    fn check_order(&self, frame_index: u32) -> Result<()> {
        match self.newest() {
            Some(newest) if frame_index <= newest => Err(Error::OutOfOrder {
                newest,
                got: frame_index,
            }),
            _ => Ok(()),
        }
    }

    /// Appends a frame, evicting the oldest entry when full.
    pub fn push(&mut self, frame_index: u32, feature: Vec<f64>) -> Result<()> {
        self.check_order(frame_index)?;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((frame_index, feature));
        Ok(())
    }

    pub fn get(&self, frame_index: u32) -> Option<&[f64]> {
        let (a, b) = self.entries.as_slices();
        let find = |s: &'_ [(u32, Vec<f64>)]| s.binary_search_by_key(&frame_index, |e| e.0).ok();
        if let Some(i) = find(a) {
            return Some(&a[i].1);
        }
        find(b).map(|i| b[i].1.as_slice())
    }

    pub fn contains(&self, frame_index: u32) -> bool {
        self.get(frame_index).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StreamState {
    Ready(AffectState),
    /// The window could not be filled from the buffered frames.
    Insufficient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamPrediction {
    pub target_frame: u32,
    pub state: StreamState,
    /// Slot frame indices, oldest first; empty when insufficient.
    pub frames_used: Vec<u32>,
}

/// One producer may push while a consumer predicts; each prediction sees a
/// consistent snapshot of the buffer.
#[derive(Debug)]
pub struct StreamEngine {
    net: CapNet,
    buffer: RwLock<StreamBuffer>,
}

impl StreamEngine {
    /// Buffer capacity is `f*w + s` frames.
    pub fn new(net: CapNet) -> Self {
        let capacity = (net.sampler.window_frames() + net.sampler.stride()) as usize;
        StreamEngine {
            net,
            buffer: RwLock::new(StreamBuffer::new(capacity)),
        }
    }

    pub fn net(&self) -> &CapNet {
        &self.net
    }

    pub fn buffer_len(&self) -> usize {
        self.read().len()
    }

    pub fn capacity(&self) -> usize {
        self.read().capacity()
    }

    pub fn buffered_indices(&self) -> Vec<u32> {
        self.read().indices()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, StreamBuffer> {
        self.buffer.read().unwrap_or_else(|e| e.into_inner())
    }

    /// Extracts the frame's features and buffers them.
    pub fn push_frame(&self, frame_index: u32, frame: FrameInput<'_>) -> Result<()> {
        self.read().check_order(frame_index)?;
        let feature = self.net.extractor.extract(frame)?;
        self.push_feature(frame_index, feature)
    }

    /// Buffers an already extracted feature vector.
    pub fn push_feature(&self, frame_index: u32, feature: Vec<f64>) -> Result<()> {
        let d = self.net.causality.feature_dim();
        if feature.len() != d {
            return Err(Error::Shape(format!("feature of length {} pushed, expected {d}", feature.len())));
        }
        self.buffer
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .push(frame_index, feature)
    }

    pub fn predict_at(&self, target: u32) -> Result<StreamPrediction> {
        let (slots, window) = {
            let buffer = self.read();
            match self.net.sampler.fill_slots(target, |i| buffer.contains(i)) {
                None => {
                    return Ok(StreamPrediction {
                        target_frame: target,
                        state: StreamState::Insufficient,
                        frames_used: Vec::new(),
                    })
                }
                Some(slots) => {
                    let d = self.net.causality.feature_dim();
                    let mut data = Vec::with_capacity(slots.len() * d);
                    for &i in &slots {
                        data.extend_from_slice(buffer.get(i).expect("slot was found in the buffer"));
                    }
                    let window = Tensor::new(vec![slots.len(), d], data)?;
                    (slots, window)
                }
            }
        };
        let state = self.net.predict_features(&window)?;
        Ok(StreamPrediction {
            target_frame: target,
            state: StreamState::Ready(state),
            frames_used: slots,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub frame: u32,
    pub prediction: Option<AffectState>,
    pub micros: u64,
}

pub const TRACE_HEADER: &str = "frame,valence,arousal,insufficient_flag,micros_per_prediction";

/// Insufficient rows leave valence and arousal empty.
pub fn render_trace(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = match r.prediction {
            Some(p) => writeln!(out, "{},{},{},0,{}", r.frame, p.valence, p.arousal, r.micros),
            None => writeln!(out, "{},,,1,{}", r.frame, r.micros),
        };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pace {
    /// No waiting between frames.
    #[default]
    AsFastAsPossible,
    /// Frames are spaced `1/f` seconds apart.
    RealTime,
}

#[derive(Debug, Clone)]
pub struct StreamSimReport {
    pub rows: Vec<TraceRow>,
    /// Largest buffer size observed during the replay.
    pub max_buffered: usize,
}

impl StreamSimReport {
    pub fn ready_count(&self) -> usize {
        self.rows.iter().filter(|r| r.prediction.is_some()).count()
    }
}

/// Replays a video frame by frame: at each index `T` the frame (if present)
/// is pushed, then the affect at `T` is predicted. Targets run from 1 to the
/// last frame or label index.
pub fn run_stream_sim(video: &LabeledVideo, engine: &StreamEngine, pace: Pace) -> Result<StreamSimReport> {
    let last = video
        .frames
        .keys()
        .next_back()
        .copied()
        .max(video.labels.keys().next_back().copied())
        .unwrap_or(0);
    let period = Duration::from_secs_f64(1.0 / engine.net.sampler.frame_rate() as f64);
    let start = Instant::now();
    let mut rows = Vec::with_capacity(last as usize);
    let mut max_buffered = 0;
    for t in 1..=last {
        if pace == Pace::RealTime {
            let due = start + period * (t - 1);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        if let Some(frame) = video.frames.get(&t) {
            engine.push_frame(t, FrameInput::Ref(frame))?;
        }
        max_buffered = max_buffered.max(engine.buffer_len());
        let clock = Instant::now();
        let p = engine.predict_at(t)?;
        let micros = clock.elapsed().as_micros() as u64;
        rows.push(TraceRow {
            frame: t,
            prediction: match p.state {
                StreamState::Ready(s) => Some(s),
                StreamState::Insufficient => None,
            },
            micros,
        });
    }
    Ok(StreamSimReport { rows, max_buffered })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_keeps_newest() {
        let mut b = StreamBuffer::new(10);
        for i in 1..=100 {
            b.push(i, vec![i as f64]).unwrap();
        }
        assert_eq!(b.indices(), (91..=100).collect::<Vec<_>>());
        assert_eq!(b.get(95), Some(&[95.0][..]));
        assert!(!b.contains(90));
    }

    #[test]
    fn gaps_allowed_repeats_rejected() {
        let mut b = StreamBuffer::new(10);
        for i in [1, 2, 4] {
            b.push(i, vec![]).unwrap();
        }
        assert_eq!(b.indices(), vec![1, 2, 4]);
        let mut c = StreamBuffer::new(10);
        c.push(5, vec![]).unwrap();
        assert!(matches!(c.push(5, vec![]), Err(Error::OutOfOrder { newest: 5, got: 5 })));
        assert!(c.push(3, vec![]).is_err());
    }

    #[test]
    fn trace_format() {
        let rows = vec![
            TraceRow {
                frame: 1,
                prediction: None,
                micros: 3,
            },
            TraceRow {
                frame: 2,
                prediction: Some(AffectState::ZERO),
                micros: 4,
            },
        ];
        assert_eq!(render_trace(&rows), format!("{TRACE_HEADER}\n1,,,1,3\n2,0,0,0,4\n"));
    }
}
