//! Frame-indexed video datasets.
//!
//! On-disk layout (one entry per video):
//!
//! ```text
//! <root>/<video_id>.txt          annotation file, "valence,arousal" header
//! <root>/<video_id>/00001.ppm    frames, 1-based, zero-padded to 5 digits
//! <root>/<video_id>/stimulus.csv synthetic videos only
//! ```

mod annotations;
mod ppm;
mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use annotations::{load_annotations, read_annotation_file, write_annotations};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm, Image};
pub use synthetic::{generate_synthetic, read_stimulus_log, StimulusLaw, SyntheticSpec};

/// Name of the per-video stimulus log written by the synthetic generator.
pub const STIMULUS_LOG: &str = "stimulus.csv";

/// Valence and arousal, each in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffectState {
    pub valence: f64,
    pub arousal: f64,
}

impl AffectState {
    /// Builds a state, rejecting components outside `[-1, 1]` or non-finite.
    pub fn new(valence: f64, arousal: f64) -> Option<Self> {
        let ok = |x: f64| (-1.0..=1.0).contains(&x);
        (ok(valence) && ok(arousal)).then_some(AffectState { valence, arousal })
    }

    /// Builds a state by clamping both components into `[-1, 1]`.
    pub fn clamped(valence: f64, arousal: f64) -> Self {
        AffectState {
            valence: valence.clamp(-1.0, 1.0),
            arousal: arousal.clamp(-1.0, 1.0),
        }
    }

    pub const ZERO: AffectState = AffectState {
        valence: 0.0,
        arousal: 0.0,
    };

    pub fn to_array(self) -> [f64; 2] {
        [self.valence, self.arousal]
    }
}

/// Per-frame annotation. Any component outside `[-1, 1]` makes the frame
/// invalid; the raw values are kept so the file can be written back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Valid(AffectState),
    Invalid([f64; 2]),
}

impl Label {
    pub fn from_pair(valence: f64, arousal: f64) -> Self {
        match AffectState::new(valence, arousal) {
            Some(state) => Label::Valid(state),
            None => Label::Invalid([valence, arousal]),
        }
    }

    /// The conventional marker for an unusable frame.
    pub const INVALID: Label = Label::Invalid([-5.0, -5.0]);

    pub fn valid(&self) -> Option<AffectState> {
        match self {
            Label::Valid(state) => Some(*state),
            Label::Invalid(_) => None,
        }
    }

    pub fn raw(&self) -> [f64; 2] {
        match self {
            Label::Valid(state) => state.to_array(),
            Label::Invalid(raw) => *raw,
        }
    }
}

/// Where the pixels of a frame live.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FrameLocator {
    File(PathBuf),
    /// Frame known only by index (in-memory datasets, precomputed features).
    Handle,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FrameRef {
    pub video_id: String,
    /// 1-based.
    pub frame_index: u32,
    pub locator: FrameLocator,
}

impl FrameRef {
    pub fn handle(video_id: impl Into<String>, frame_index: u32) -> Self {
        FrameRef {
            video_id: video_id.into(),
            frame_index,
            locator: FrameLocator::Handle,
        }
    }
}

/// A video with sparse frames and sparse labels, both keyed by 1-based frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVideo {
    pub video_id: String,
    pub frame_rate: u32,
    pub frames: BTreeMap<u32, FrameRef>,
    pub labels: BTreeMap<u32, Label>,
}

impl LabeledVideo {
    pub fn new(video_id: impl Into<String>, frame_rate: u32) -> Self {
        LabeledVideo {
            video_id: video_id.into(),
            frame_rate,
            frames: BTreeMap::new(),
            labels: BTreeMap::new(),
        }
    }

    /// In-memory video whose frames are the given indices, all with handle locators.
    pub fn with_frames(
        video_id: impl Into<String>,
        frame_rate: u32,
        frames: impl IntoIterator<Item = u32>,
    ) -> Self {
        let mut video = LabeledVideo::new(video_id, frame_rate);
        for idx in frames {
            video.insert_frame(idx);
        }
        video
    }

    pub fn insert_frame(&mut self, frame_index: u32) {
        assert!(frame_index >= 1, "frame indices are 1-based");
        let frame = FrameRef::handle(self.video_id.clone(), frame_index);
        self.frames.insert(frame_index, frame);
    }

    pub fn has_frame(&self, frame_index: u32) -> bool {
        self.frames.contains_key(&frame_index)
    }

    pub fn label(&self, frame_index: u32) -> Option<AffectState> {
        self.labels.get(&frame_index).and_then(Label::valid)
    }
}

/// Result of scanning a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanReport {
    pub videos: Vec<LabeledVideo>,
    /// Files inside frame directories whose names are not `%05d.ppm`.
    pub skipped_files: usize,
}

/// Parses a frame file name of the form `00042.ppm`.
pub fn parse_frame_file_name(name: &str) -> Option<u32> {
    let stem = name.strip_suffix(".ppm")?;
    if stem.len() != 5 || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let idx: u32 = stem.parse().ok()?;
    (idx >= 1).then_some(idx)
}

pub fn frame_file_name(frame_index: u32) -> String {
    format!("{frame_index:05}.ppm")
}

/// Loads every `<video_id>.txt` annotation under `root` together with its frame directory.
pub fn scan_video_dir(root: &Path, frame_rate: u32) -> Result<ScanReport> {
    if frame_rate == 0 {
        return Err(Error::Config("frame_rate must be positive".into()));
    }
    let mut annotation_files = Vec::new();
    for entry in fs::read_dir(root).map_err(Error::io(root))? {
        let entry = entry.map_err(Error::io(root))?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            annotation_files.push(path);
        }
    }
    annotation_files.sort();

    let mut report = ScanReport {
        videos: Vec::with_capacity(annotation_files.len()),
        skipped_files: 0,
    };
    for ann_path in annotation_files {
        let video_id = ann_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("bad annotation name {}", ann_path.display())))?
            .to_string();
        let frame_dir = root.join(&video_id);
        if !frame_dir.is_dir() {
            return Err(Error::Dataset(format!(
                "annotation {} has no frame directory {}",
                ann_path.display(),
                frame_dir.display()
            )));
        }
        let mut video = LabeledVideo::new(video_id.clone(), frame_rate);
        video.labels = read_annotation_file(&ann_path)?;
        for entry in fs::read_dir(&frame_dir).map_err(Error::io(&frame_dir))? {
            let entry = entry.map_err(Error::io(&frame_dir))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if name == STIMULUS_LOG {
                continue;
            }
            match parse_frame_file_name(&name) {
                Some(idx) => {
                    video.frames.insert(
                        idx,
                        FrameRef {
                            video_id: video_id.clone(),
                            frame_index: idx,
                            locator: FrameLocator::File(entry.path()),
                        },
                    );
                }
                None => {
                    log::warn!("skipping {}: not a frame file name", entry.path().display());
                    report.skipped_files += 1;
                }
            }
        }
        report.videos.push(video);
    }
    Ok(report)
}
