use std::collections::HashMap;

use super::{FeatureCache, TinyCnn};
use crate::dataset::{read_ppm, FrameLocator, FrameRef};
use crate::error::{Error, Result};
use crate::neural::{Checkpoint, Parameters, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorKind {
    TinyCnn,
    Precomputed,
}

impl ExtractorKind {
    pub fn code(self) -> f64 {
        match self {
            ExtractorKind::TinyCnn => 0.0,
            ExtractorKind::Precomputed => 1.0,
        }
    }

    pub fn from_code(code: f64) -> Result<Self> {
        match code as i64 {
            0 => Ok(ExtractorKind::TinyCnn),
            1 => Ok(ExtractorKind::Precomputed),
            _ => Err(Error::Format(format!("unknown extractor kind code {code}"))),
        }
    }
}

/// What a feature extractor is asked to encode.
#[derive(Debug, Clone, Copy)]
pub enum FrameInput<'a> {
    /// Normalized `[side, side, 3]` image.
    Image(&'a Tensor),
    /// A frame of a dataset, loaded or looked up by the extractor.
    Ref(&'a FrameRef),
}

/// Maps one frame to a fixed-length feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn output_dim(&self) -> usize;
    fn kind(&self) -> ExtractorKind;
    fn extract(&self, frame: FrameInput<'_>) -> Result<Vec<f64>>;
}

/// The extractors shipped with the crate.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Extractor {
    TinyCnn(TinyCnn),
    Precomputed(FeatureCache),
}

impl Extractor {
    pub fn as_cnn(&self) -> Option<&TinyCnn> {
        match self {
            Extractor::TinyCnn(cnn) => Some(cnn),
            Extractor::Precomputed(_) => None,
        }
    }

    pub fn as_cnn_mut(&mut self) -> Option<&mut TinyCnn> {
        match self {
            Extractor::TinyCnn(cnn) => Some(cnn),
            Extractor::Precomputed(_) => None,
        }
    }

    /// Stores the extractor kind, its configuration and, for the CNN, its
    /// weights under the `extractor.` prefix.
    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.insert("extractor.kind", Tensor::vector(vec![self.kind().code()]));
        let side = self.as_cnn().map_or(0, |c| c.input_side());
        ckpt.insert(
            "extractor.config",
            Tensor::vector(vec![side as f64, self.output_dim() as f64]),
        );
        if let Some(cnn) = self.as_cnn() {
            for (name, t) in cnn.tensors() {
                ckpt.insert(format!("extractor.{name}"), t.clone());
            }
        }
    }

    /// Rebuilds the extractor saved by [`Extractor::save_into`]. A
    /// precomputed extractor stores no data, so its cache is passed in.
    pub fn from_checkpoint(ckpt: &Checkpoint, cache: Option<FeatureCache>) -> Result<Self> {
        let kind = ExtractorKind::from_code(scalar(ckpt, "extractor.kind")?)?;
        let config = ckpt.require("extractor.config")?.data();
        if config.len() != 2 {
            return Err(Error::Format("extractor.config must hold (side, dim)".into()));
        }
        let (side, dim) = (config[0] as usize, config[1] as usize);
        match kind {
            ExtractorKind::TinyCnn => {
                let mut cnn = TinyCnn::zeros(side, dim)?;
                for (name, t) in cnn.tensors_mut() {
                    let stored = ckpt.require(&format!("extractor.{name}"))?;
                    if stored.shape() != t.shape() {
                        return Err(Error::Format(format!(
                            "extractor.{name} has shape {:?}, expected {:?}",
                            stored.shape(),
                            t.shape()
                        )));
                    }
                    t.data_mut().copy_from_slice(stored.data());
                }
                Ok(Extractor::TinyCnn(cnn))
            }
            ExtractorKind::Precomputed => {
                let cache = cache.ok_or_else(|| {
                    Error::Config("checkpoint uses precomputed features; a feature cache is required".into())
                })?;
                if cache.output_dim() != dim {
                    return Err(Error::Config(format!(
                        "feature cache dim {} does not match checkpoint dim {dim}",
                        cache.output_dim()
                    )));
                }
                Ok(Extractor::Precomputed(cache))
            }
        }
    }
}

pub(crate) fn scalar(ckpt: &Checkpoint, name: &str) -> Result<f64> {
    match ckpt.require(name)?.data() {
        [v] => Ok(*v),
        other => Err(Error::Format(format!("{name} should hold one value, found {}", other.len()))),
    }
}

impl FeatureExtractor for Extractor {
    fn output_dim(&self) -> usize {
        match self {
            Extractor::TinyCnn(e) => e.output_dim(),
            Extractor::Precomputed(e) => e.output_dim(),
        }
    }

    fn kind(&self) -> ExtractorKind {
        match self {
            Extractor::TinyCnn(_) => ExtractorKind::TinyCnn,
            Extractor::Precomputed(_) => ExtractorKind::Precomputed,
        }
    }

    fn extract(&self, frame: FrameInput<'_>) -> Result<Vec<f64>> {
        match self {
            Extractor::TinyCnn(e) => e.extract(frame),
            Extractor::Precomputed(e) => e.extract(frame),
        }
    }
}

/// Loads a frame file as a normalized `[side, side, 3]` tensor.
pub fn load_frame_tensor(frame: &FrameRef, side: usize) -> Result<Tensor> {
    match &frame.locator {
        FrameLocator::File(path) => Ok(read_ppm(path)?.to_tensor(side)),
        FrameLocator::Handle => Err(Error::Dataset(format!(
            "frame ({}, {}) has no image file",
            frame.video_id, frame.frame_index
        ))),
    }
}

/// In-memory features keyed by `(video_id, frame_index)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    dim: usize,
    features: HashMap<(String, u32), Vec<f64>>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        FeatureTable {
            dim,
            features: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn insert(&mut self, video_id: &str, frame_index: u32, feature: Vec<f64>) {
        assert_eq!(feature.len(), self.dim, "feature width must match the table");
        self.features.insert((video_id.to_string(), frame_index), feature);
    }

    pub fn get(&self, video_id: &str, frame_index: u32) -> Result<&[f64]> {
        self.features
            .get(&(video_id.to_string(), frame_index))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingFeature {
                video_id: video_id.to_string(),
                frame_index,
            })
    }

    /// Stacks the features of `frames` into an `L x D` tensor.
    pub fn sequence<'a>(&self, frames: impl IntoIterator<Item = &'a FrameRef>) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        for f in frames {
            data.extend_from_slice(self.get(&f.video_id, f.frame_index)?);
            rows += 1;
        }
        Tensor::new(vec![rows, self.dim], data)
    }

    /// Keys sorted by video and frame.
    pub fn keys(&self) -> Vec<(String, u32)> {
        let mut keys: Vec<_> = self.features.keys().cloned().collect();
        keys.sort();
        keys
    }

    /// Extracts every distinct frame once, split across `threads` workers.
    /// The result does not depend on the thread count.
    pub fn build<'a, E: FeatureExtractor + ?Sized>(
        extractor: &E,
        frames: impl IntoIterator<Item = &'a FrameRef>,
        threads: usize,
    ) -> Result<Self> {
        let mut unique: Vec<&FrameRef> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for f in frames {
            if seen.insert((f.video_id.as_str(), f.frame_index)) {
                unique.push(f);
            }
        }
        let threads = threads.max(1).min(unique.len().max(1));
        let chunk = unique.len().div_ceil(threads).max(1);
        let results: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = unique
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|f| extractor.extract(FrameInput::Ref(f)))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("feature worker panicked"))
                .collect()
        });
        let mut table = FeatureTable::new(extractor.output_dim());
        let mut frames = unique.into_iter();
        for part in results {
            for feature in part? {
                let f = frames.next().expect("one feature per frame");
                table.insert(&f.video_id, f.frame_index, feature);
            }
        }
        Ok(table)
    }
}
