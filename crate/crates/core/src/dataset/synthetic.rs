use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{frame_file_name, write_annotations, write_ppm, FrameLocator, FrameRef, Image, Label, LabeledVideo, STIMULUS_LOG};
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;

/// How labels are derived from the per-frame stimulus `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StimulusLaw {
    /// Valence is the mean of `u` over the window slots of the target; arousal
    /// the mean over the older half (`ceil(L/2)` oldest slots).
    WindowMean,
    /// Valence is `u` at the newest slot; arousal is `+1`/`-1` by the sign of
    /// `u` at the oldest slot.
    LaggedStep,
}

impl StimulusLaw {
    pub fn name(self) -> &'static str {
        match self {
            StimulusLaw::WindowMean => "window_mean",
            StimulusLaw::LaggedStep => "lagged_step",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "window_mean" => Some(StimulusLaw::WindowMean),
            "lagged_step" => Some(StimulusLaw::LaggedStep),
            _ => None,
        }
    }

    /// Label for one target given the stimulus at its slots (oldest first).
    pub fn label(self, slot_stimulus: &[f64]) -> (f64, f64) {
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        match self {
            StimulusLaw::WindowMean => {
                let older = slot_stimulus.len().div_ceil(2);
                (mean(slot_stimulus), mean(&slot_stimulus[..older]))
            }
            StimulusLaw::LaggedStep => {
                let newest = slot_stimulus[slot_stimulus.len() - 1];
                let step = if slot_stimulus[0] >= 0.0 { 1.0 } else { -1.0 };
                (newest, step)
            }
        }
    }
}

/// Synthetic dataset whose labels depend only on past stimuli.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub frames_per_video: u32,
    pub frame_rate: u32,
    pub seed: u64,
    pub stimulus_law: StimulusLaw,
    /// Window whose slots define the labels.
    pub sampler: SamplerConfig,
    /// Side of the square frames written to disk.
    pub image_side: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_videos: 4,
            frames_per_video: 300,
            frame_rate: 30,
            seed: 0,
            stimulus_law: StimulusLaw::WindowMean,
            sampler: SamplerConfig::default(),
            image_side: 16,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 {
            return Err(Error::Config("num_videos must be positive".into()));
        }
        if self.image_side == 0 {
            return Err(Error::Config("image_side must be positive".into()));
        }
        if self.sampler.frame_rate() != self.frame_rate {
            return Err(Error::Config(format!(
                "sampler frame rate {} differs from video frame rate {}",
                self.sampler.frame_rate(),
                self.frame_rate
            )));
        }
        let min = self.sampler.window_frames() + 1;
        if self.frames_per_video < min {
            return Err(Error::Config(format!(
                "frames_per_video = {} is too small: need at least f*w + 1 = {min} for one valid window",
                self.frames_per_video
            )));
        }
        Ok(())
    }

    pub fn video_id(index: usize) -> String {
        format!("synth_{index:03}")
    }

    /// Labels for frames `1..=n` from the stimulus `u[t - 1]`.
    pub fn labels_for(&self, stimulus: &[f64]) -> BTreeMap<u32, Label> {
        let offsets = self.sampler.offsets();
        (1..=stimulus.len() as u32)
            .map(|t| {
                let slots: Option<Vec<f64>> = offsets
                    .iter()
                    .map(|o| {
                        let idx = t as i64 + o;
                        (idx >= 1).then(|| stimulus[idx as usize - 1])
                    })
                    .collect();
                let label = match slots {
                    Some(u) => {
                        let (v, a) = self.stimulus_law.label(&u);
                        Label::Valid(super::AffectState::clamped(v, a))
                    }
                    None => Label::INVALID,
                };
                (t, label)
            })
            .collect()
    }
}

/// 8-bit gray level encoding stimulus `u` in `[-1, 1]`.
pub fn stimulus_gray_level(u: f64) -> u8 {
    (((u + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes the dataset under `root` (which is created if needed) and returns the videos.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<Vec<LabeledVideo>> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(Error::io(root))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut videos = Vec::with_capacity(spec.num_videos);
    for v in 0..spec.num_videos {
        let video_id = SyntheticSpec::video_id(v);
        let dir = root.join(&video_id);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;

        let stimulus: Vec<f64> = (0..spec.frames_per_video)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();

        let log_path = dir.join(STIMULUS_LOG);
        let mut log = BufWriter::new(File::create(&log_path).map_err(Error::io(&log_path))?);
        writeln!(log, "frame,u").map_err(Error::io(&log_path))?;
        for (i, u) in stimulus.iter().enumerate() {
            writeln!(log, "{},{u}", i + 1).map_err(Error::io(&log_path))?;
        }
        log.flush().map_err(Error::io(&log_path))?;

        let mut video = LabeledVideo::new(video_id.clone(), spec.frame_rate);
        for (i, &u) in stimulus.iter().enumerate() {
            let idx = i as u32 + 1;
            let path = dir.join(frame_file_name(idx));
            write_ppm(&path, &Image::filled(spec.image_side, spec.image_side, stimulus_gray_level(u)))?;
            video.frames.insert(
                idx,
                FrameRef {
                    video_id: video_id.clone(),
                    frame_index: idx,
                    locator: FrameLocator::File(path),
                },
            );
        }

        video.labels = spec.labels_for(&stimulus);
        let ann_path = root.join(format!("{video_id}.txt"));
        let file = File::create(&ann_path).map_err(Error::io(&ann_path))?;
        write_annotations(&video.labels, BufWriter::new(file))?;
        videos.push(video);
    }
    Ok(videos)
}

/// Reads `frame,u` rows written by [`generate_synthetic`].
pub fn read_stimulus_log(path: &Path) -> Result<Vec<(u32, f64)>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if i == 0 {
            if line != "frame,u" {
                return Err(Error::Format(format!("{}: bad stimulus header", path.display())));
            }
            continue;
        }
        let bad = || Error::Parse {
            line: i + 1,
            msg: format!("bad stimulus row `{line}`"),
        };
        let (frame, u) = line.split_once(',').ok_or_else(bad)?;
        rows.push((frame.parse().map_err(|_| bad())?, u.parse().map_err(|_| bad())?));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{read_annotation_file, scan_video_dir, AffectState};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_videos: 2,
            frames_per_video: 120,
            image_side: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn constant_stimulus_labels() {
        let spec = SyntheticSpec::default();
        for (u, expected) in [(0.0, 0.0), (1.0, 1.0)] {
            let labels = spec.labels_for(&vec![u; 300]);
            for t in 1..=300 {
                match labels[&t] {
                    Label::Valid(s) => {
                        assert!(t > 90);
                        assert_eq!(s, AffectState { valence: expected, arousal: expected });
                    }
                    Label::Invalid(_) => assert!(t <= 90),
                }
            }
        }
    }

    #[test]
    fn lagged_step_law() {
        let (v, a) = StimulusLaw::LaggedStep.label(&[-0.2, 0.3, 0.7]);
        assert_eq!((v, a), (0.7, -1.0));
    }

    #[test]
    fn rejects_short_videos() {
        let spec = SyntheticSpec { frames_per_video: 90, ..SyntheticSpec::default() };
        let err = spec.validate().unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("frames_per_video"));
    }

    #[test]
    fn written_dataset_scans_back() {
        let dir = tempfile::tempdir().unwrap();
        let videos = generate_synthetic(&small_spec(), dir.path()).unwrap();
        let scanned = scan_video_dir(dir.path(), 30).unwrap();
        assert_eq!(scanned.skipped_files, 0);
        assert_eq!(scanned.videos, videos);
        let labels = read_annotation_file(&dir.path().join("synth_000.txt")).unwrap();
        assert_eq!(labels.len(), 120);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&small_spec(), a.path()).unwrap();
        generate_synthetic(&small_spec(), b.path()).unwrap();
        for name in ["synth_000.txt", "synth_001/stimulus.csv", "synth_001/00077.ppm"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn gray_levels() {
        assert_eq!(stimulus_gray_level(-1.0), 0);
        assert_eq!(stimulus_gray_level(1.0), 255);
        assert_eq!(stimulus_gray_level(0.0), 128);
    }
}
