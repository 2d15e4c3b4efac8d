//! Causal window sampling.
//!
//! For a target frame `T` the window holds frames at offsets
//! `-(f*d + n)` for `n = f*(w - d), ..., 2s, s, 0`, oldest first, where `d` is
//! the prediction lead and `w` the window span (both in seconds), `f` the
//! frame rate and `s` the stride in frames. The newest usable frame is
//! therefore `T - f*d`.
//!
//! A missing slot frame is replaced by the nearest existing earlier frame,
//! searching down to `nominal - (s - 1)`, so a slot never reaches the range
//! of the next older slot. The oldest slot has no fallback.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;

use crate::dataset::{AffectState, FrameRef, LabeledVideo};
use crate::error::{Error, Result};

/// Exact non-negative rational number of seconds.
pub type Seconds = Ratio<i64>;

/// Parses `"1/3"`, `"3"` or a finite decimal such as `"0.5"` into an exact rational.
pub fn parse_seconds(text: &str) -> Result<Seconds> {
    let text = text.trim();
    if let Ok(r) = Seconds::from_str(text) {
        return Ok(r);
    }
    let bad = || Error::Config(format!("`{text}` is not a rational number of seconds"));
    let (int, frac) = text.split_once('.').ok_or_else(bad)?;
    if frac.is_empty() || frac.len() > 12 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let negative = int.starts_with('-');
    let int: i64 = if int.is_empty() || int == "-" { 0 } else { int.parse().map_err(|_| bad())? };
    let den = 10i64.pow(frac.len() as u32);
    let num: i64 = frac.parse().map_err(|_| bad())?;
    let value = Seconds::from_integer(int.abs()) + Seconds::new(num, den);
    Ok(if negative { -value } else { value })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    lead: Seconds,
    frame_rate: u32,
    window: Seconds,
    stride: u32,
}

impl Default for SamplerConfig {
    /// Lead of one third of a second, 30 fps, 3 s window, stride 10.
    fn default() -> Self {
        SamplerConfig::new(Seconds::new(1, 3), 30, Seconds::from_integer(3), 10)
            .expect("default sampler configuration is valid")
    }
}

impl fmt::Display for SamplerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "d={} f={} w={} s={}",
            self.lead, self.frame_rate, self.window, self.stride
        )
    }
}

impl SamplerConfig {
    pub fn new(lead: Seconds, frame_rate: u32, window: Seconds, stride: u32) -> Result<Self> {
        if frame_rate == 0 {
            return Err(Error::Config("frame rate f must be positive".into()));
        }
        if stride == 0 {
            return Err(Error::Config("stride s must be positive".into()));
        }
        if lead < Seconds::from_integer(0) {
            return Err(Error::Config(format!("lead d={lead} must be non-negative")));
        }
        if lead > window {
            return Err(Error::Config(format!("lead d={lead} exceeds window w={window}")));
        }
        let f = Seconds::from_integer(frame_rate as i64);
        if !(f * lead).is_integer() {
            return Err(Error::Config(format!(
                "f*d must be an integer frame count (f={frame_rate}, d={lead})"
            )));
        }
        if !(f * window).is_integer() {
            return Err(Error::Config(format!(
                "f*w must be an integer frame count (f={frame_rate}, w={window})"
            )));
        }
        let span = (f * (window - lead)).to_integer();
        if span % stride as i64 != 0 {
            return Err(Error::Config(format!(
                "f*(w-d) = {span} frames is not divisible by stride s={stride}"
            )));
        }
        Ok(SamplerConfig {
            lead,
            frame_rate,
            window,
            stride,
        })
    }

    /// Same lead, rate and stride with a different window span.
    pub fn with_window(&self, window: Seconds) -> Result<Self> {
        SamplerConfig::new(self.lead, self.frame_rate, window, self.stride)
    }

    pub fn lead(&self) -> Seconds {
        self.lead
    }

    pub fn window(&self) -> Seconds {
        self.window
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    /// `f * d`
    pub fn lead_frames(&self) -> u32 {
        (self.lead * self.frame_rate as i64).to_integer() as u32
    }

    /// `f * w`
    pub fn window_frames(&self) -> u32 {
        (self.window * self.frame_rate as i64).to_integer() as u32
    }

    /// `f * (w - d)`, the frame distance between the oldest and newest slot.
    pub fn span_frames(&self) -> u32 {
        self.window_frames() - self.lead_frames()
    }

    /// Number of slots: `f*(w-d)/s + 1`.
    pub fn window_len(&self) -> usize {
        (self.span_frames() / self.stride) as usize + 1
    }

    /// Slot offsets relative to the target frame, oldest first. The last one is `-f*d`.
    pub fn offsets(&self) -> Vec<i64> {
        let lead = self.lead_frames() as i64;
        let span = self.span_frames() as i64;
        (0..=span)
            .rev()
            .step_by(self.stride as usize)
            .map(|n| -(lead + n))
            .collect()
    }

    /// Resolves the slot frame indices for `target`, given which frames exist.
    ///
    /// Only indices `<= target - f*d` are ever probed. Returns `None` when a
    /// slot cannot be filled.
    pub fn fill_slots(&self, target: u32, has_frame: impl Fn(u32) -> bool) -> Option<Vec<u32>> {
        let stride = self.stride as i64;
        let offsets = self.offsets();
        let mut slots = Vec::with_capacity(offsets.len());
        for (k, offset) in offsets.into_iter().enumerate() {
            let nominal = target as i64 + offset;
            let lowest = if k == 0 { nominal } else { nominal - (stride - 1) };
            let found = (lowest.max(1)..=nominal)
                .rev()
                .map(|i| i as u32)
                .find(|&i| has_frame(i))?;
            slots.push(found);
        }
        Some(slots)
    }
}

/// Past frames paired with the label of the target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub video_id: String,
    pub target_frame: u32,
    /// Chronological, oldest first.
    pub slots: Vec<FrameRef>,
    pub label: AffectState,
}

impl SampleWindow {
    pub fn slot_indices(&self) -> Vec<u32> {
        self.slots.iter().map(|f| f.frame_index).collect()
    }

    /// `video_id,T,idx_1,...,idx_L,valence,arousal`
    pub fn manifest_line(&self) -> String {
        let mut line = format!("{},{}", self.video_id, self.target_frame);
        for slot in &self.slots {
            line.push_str(&format!(",{}", slot.frame_index));
        }
        line.push_str(&format!(",{},{}", self.label.valence, self.label.arousal));
        line
    }
}

fn check_rate(video: &LabeledVideo, config: &SamplerConfig) -> Result<()> {
    if video.frame_rate != config.frame_rate {
        return Err(Error::Config(format!(
            "video {} has {} fps but the sampler expects {}",
            video.video_id, video.frame_rate, config.frame_rate
        )));
    }
    Ok(())
}

/// Slot indices for `target` regardless of its label.
pub fn sample_slots(video: &LabeledVideo, target: u32, config: &SamplerConfig) -> Result<Option<Vec<u32>>> {
    check_rate(video, config)?;
    Ok(config.fill_slots(target, |i| video.has_frame(i)))
}

/// Builds the window for `target`, or `None` when it is insufficient
/// (unfillable slot, or missing/invalid label).
pub fn sample_window(video: &LabeledVideo, target: u32, config: &SamplerConfig) -> Result<Option<SampleWindow>> {
    check_rate(video, config)?;
    Ok(window_at(video, target, config))
}

fn window_at(video: &LabeledVideo, target: u32, config: &SamplerConfig) -> Option<SampleWindow> {
    let label = video.label(target)?;
    let indices = config.fill_slots(target, |i| video.has_frame(i))?;
    Some(SampleWindow {
        video_id: video.video_id.clone(),
        target_frame: target,
        slots: indices.iter().map(|i| video.frames[i].clone()).collect(),
        label,
    })
}

/// Every fillable window of the video, in ascending target order.
pub fn enumerate_windows<'a>(
    video: &'a LabeledVideo,
    config: &'a SamplerConfig,
) -> Result<impl Iterator<Item = SampleWindow> + 'a> {
    check_rate(video, config)?;
    Ok(video
        .labels
        .keys()
        .filter_map(move |&t| window_at(video, t, config)))
}

/// Frames that have both an image and a valid label (lead and span of zero).
pub fn enumerate_single_pairs(video: &LabeledVideo) -> impl Iterator<Item = (FrameRef, AffectState)> + '_ {
    video
        .frames
        .iter()
        .filter_map(|(idx, frame)| video.label(*idx).map(|label| (frame.clone(), label)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;

    fn cfg(d: (i64, i64), w: (i64, i64), s: u32) -> Result<SamplerConfig> {
        SamplerConfig::new(Seconds::new(d.0, d.1), 30, Seconds::new(w.0, w.1), s)
    }

    fn complete(n: u32) -> LabeledVideo {
        let mut v = LabeledVideo::with_frames("v", 30, 1..=n);
        for t in 1..=n {
            v.labels.insert(t, Label::from_pair(0.1, -0.1));
        }
        v
    }

    #[test]
    fn offsets_examples() {
        let c = cfg((1, 3), (3, 1), 10).unwrap();
        assert_eq!(c.offsets(), vec![-90, -80, -70, -60, -50, -40, -30, -20, -10]);
        assert_eq!(c.window_len(), 9);
        let c = cfg((1, 3), (1, 1), 10).unwrap();
        assert_eq!(c.offsets(), vec![-30, -20, -10]);
        let c = cfg((1, 3), (1, 3), 10).unwrap();
        assert_eq!(c.offsets(), vec![-10]);
        assert_eq!(c.window_len(), 1);
    }

    #[test]
    fn config_errors_name_constraint() {
        let e = cfg((1, 3), (3, 1), 7).unwrap_err().to_string();
        assert!(e.contains("divisible"), "{e}");
        let e = SamplerConfig::new(Seconds::new(1, 7), 30, Seconds::from_integer(3), 10)
            .unwrap_err()
            .to_string();
        assert!(e.contains("f*d"), "{e}");
        let e = SamplerConfig::new(Seconds::new(1, 3), 30, Seconds::new(1, 7), 10)
            .unwrap_err()
            .to_string();
        assert!(e.contains("exceeds") || e.contains("f*w"), "{e}");
        assert!(cfg((1, 1), (1, 2), 10).is_err());
        assert!(SamplerConfig::new(Seconds::new(1, 3), 30, Seconds::from_integer(3), 0).is_err());
    }

    #[test]
    fn parse_seconds_forms() {
        assert_eq!(parse_seconds("1/3").unwrap(), Seconds::new(1, 3));
        assert_eq!(parse_seconds("3").unwrap(), Seconds::from_integer(3));
        assert_eq!(parse_seconds("0.5").unwrap(), Seconds::new(1, 2));
        assert_eq!(parse_seconds("2.25").unwrap(), Seconds::new(9, 4));
        assert!(parse_seconds("abc").is_err());
        assert!(parse_seconds("1.").is_err());
    }

    #[test]
    fn full_video_window() {
        let v = complete(300);
        let c = SamplerConfig::default();
        let w = sample_window(&v, 100, &c).unwrap().unwrap();
        assert_eq!(w.slot_indices(), vec![10, 20, 30, 40, 50, 60, 70, 80, 90]);
    }

    #[test]
    fn newest_slot_falls_back() {
        let mut v = complete(300);
        v.frames.remove(&90);
        let w = sample_window(&v, 100, &SamplerConfig::default()).unwrap().unwrap();
        assert_eq!(w.slot_indices(), vec![10, 20, 30, 40, 50, 60, 70, 80, 89]);
    }

    #[test]
    fn fallback_stops_one_short_of_next_slot() {
        let mut v = complete(300);
        for i in 81..=90 {
            v.frames.remove(&i);
        }
        assert!(sample_window(&v, 100, &SamplerConfig::default()).unwrap().is_none());
        v.insert_frame(81);
        let w = sample_window(&v, 100, &SamplerConfig::default()).unwrap().unwrap();
        assert_eq!(*w.slot_indices().last().unwrap(), 81);
    }

    #[test]
    fn oldest_slot_has_no_fallback() {
        let mut v = complete(300);
        v.frames.remove(&10);
        assert!(sample_window(&v, 100, &SamplerConfig::default()).unwrap().is_none());
    }

    #[test]
    fn invalid_label_is_insufficient() {
        let mut v = complete(300);
        v.labels.insert(100, Label::INVALID);
        assert!(sample_window(&v, 100, &SamplerConfig::default()).unwrap().is_none());
        v.labels.remove(&100);
        assert!(sample_window(&v, 100, &SamplerConfig::default()).unwrap().is_none());
    }

    #[test]
    fn rate_mismatch_is_error() {
        let v = LabeledVideo::with_frames("v", 25, 1..=10);
        assert!(sample_window(&v, 5, &SamplerConfig::default()).is_err());
        assert!(enumerate_windows(&v, &SamplerConfig::default()).is_err());
    }

    #[test]
    fn window_counts() {
        let v = complete(300);
        let c = SamplerConfig::default();
        let targets: Vec<u32> = enumerate_windows(&v, &c).unwrap().map(|w| w.target_frame).collect();
        assert_eq!(targets.len(), 210);
        assert_eq!(targets.first(), Some(&91));
        assert_eq!(targets.last(), Some(&300));
        let c2 = c.with_window(Seconds::from_integer(2)).unwrap();
        let targets: Vec<u32> = enumerate_windows(&v, &c2).unwrap().map(|w| w.target_frame).collect();
        assert_eq!(targets.len(), 240);
        assert_eq!(targets.first(), Some(&61));
        assert_eq!(enumerate_windows(&complete(50), &c).unwrap().count(), 0);
    }

    #[test]
    fn single_pairs() {
        let v = complete(300);
        assert_eq!(enumerate_single_pairs(&v).count(), 300);
        let mut v2 = v.clone();
        v2.labels.insert(5, Label::INVALID);
        assert_eq!(enumerate_single_pairs(&v2).count(), 299);
        let mut v3 = LabeledVideo::with_frames("v", 30, [1, 3]);
        for t in 1..=3 {
            v3.labels.insert(t, Label::from_pair(0.0, 0.0));
        }
        let idx: Vec<u32> = enumerate_single_pairs(&v3).map(|(f, _)| f.frame_index).collect();
        assert_eq!(idx, vec![1, 3]);
    }

    #[test]
    fn manifest_line_format() {
        let v = complete(300);
        let c = SamplerConfig::new(Seconds::new(1, 3), 30, Seconds::from_integer(1), 10).unwrap();
        let w = sample_window(&v, 40, &c).unwrap().unwrap();
        assert_eq!(w.manifest_line(), "v,40,10,20,30,0.1,-0.1");
    }
}
