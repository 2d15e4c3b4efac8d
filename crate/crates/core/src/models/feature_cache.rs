//! Precomputed per-frame features.
//!
//! Binary file:
//!
//! ```text
//! "CAPF"  u32 version  u32 dim  u32 count
//! count x { u32 frame_key, dim x f32 }
//! ```
//!
//! Little-endian throughout. `frame_key` is the running record index; the
//! sidecar manifest (`<file>.manifest`) has one `video_id,frame_index` line per key.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::extractor::{ExtractorKind, FeatureExtractor, FeatureTable, FrameInput};
use crate::error::{Error, Result};

pub const FEATURE_CACHE_MAGIC: &[u8; 4] = b"CAPF";
pub const FEATURE_CACHE_VERSION: u32 = 1;
const HEADER_BYTES: usize = 16;

pub fn manifest_path(cache_path: &Path) -> PathBuf {
    let mut name = cache_path.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    dim: usize,
    keys: Vec<(String, u32)>,
    index: HashMap<(String, u32), usize>,
    values: Vec<f32>,
}

impl FeatureCache {
    pub fn new(dim: usize) -> Self {
        FeatureCache {
            dim,
            keys: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
        }
    }

    /// Stores features in table key order, narrowed to `f32`.
    pub fn from_table(table: &FeatureTable) -> Self {
        let mut cache = FeatureCache::new(table.dim());
        for (video, idx) in table.keys() {
            let feature = table.get(&video, idx).expect("key from table");
            cache.insert(&video, idx, feature.iter().map(|&v| v as f32).collect());
        }
        cache
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn insert(&mut self, video_id: &str, frame_index: u32, feature: Vec<f32>) {
        assert_eq!(feature.len(), self.dim, "feature width must match the cache");
        let key = (video_id.to_string(), frame_index);
        match self.index.get(&key) {
            Some(&slot) => self.values[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(&feature),
            None => {
                self.index.insert(key.clone(), self.keys.len());
                self.keys.push(key);
                self.values.extend_from_slice(&feature);
            }
        }
    }

    pub fn get(&self, video_id: &str, frame_index: u32) -> Result<&[f32]> {
        let slot = self
            .index
            .get(&(video_id.to_string(), frame_index))
            .ok_or_else(|| Error::MissingFeature {
                video_id: video_id.to_string(),
                frame_index,
            })?;
        Ok(&self.values[slot * self.dim..(slot + 1) * self.dim])
    }

    /// `16 + count * (4 + 4 * dim)` bytes.
    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.len() * (4 + 4 * self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(FEATURE_CACHE_MAGIC);
        out.extend_from_slice(&FEATURE_CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (k, row) in self.values.chunks_exact(self.dim.max(1)).enumerate().take(self.len()) {
            out.extend_from_slice(&(k as u32).to_le_bytes());
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn manifest_text(&self) -> String {
        self.keys.iter().map(|(v, i)| format!("{v},{i}\n")).collect()
    }

    pub fn from_parts(bytes: &[u8], manifest: &str) -> Result<Self> {
        if bytes.len() < HEADER_BYTES || &bytes[..4] != FEATURE_CACHE_MAGIC {
            return Err(Error::Format("not a feature cache (bad magic)".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let version = word(4) as u32;
        if version != FEATURE_CACHE_VERSION {
            return Err(Error::Format(format!("unsupported feature cache version {version}")));
        }
        let (dim, count) = (word(8), word(12));
        if bytes.len() != HEADER_BYTES + count * (4 + 4 * dim) {
            return Err(Error::Format(format!(
                "feature cache size {} does not match {count} records of dim {dim}",
                bytes.len()
            )));
        }
        let mut manifest_keys = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            let bad = || Error::Parse {
                line: i + 1,
                msg: format!("bad manifest entry `{line}`"),
            };
            let (video, idx) = line.rsplit_once(',').ok_or_else(bad)?;
            manifest_keys.push((video.to_string(), idx.parse::<u32>().map_err(|_| bad())?));
        }
        let mut cache = FeatureCache::new(dim);
        let mut pos = HEADER_BYTES;
        for _ in 0..count {
            let key = word(pos);
            pos += 4;
            let (video, idx) = manifest_keys
                .get(key)
                .ok_or_else(|| Error::Format(format!("frame key {key} missing from manifest")))?;
            let feature = bytes[pos..pos + 4 * dim]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * dim;
            cache.insert(video, *idx, feature);
        }
        Ok(cache)
    }

    /// Writes the cache and its manifest sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))?;
        let manifest = manifest_path(path);
        fs::write(&manifest, self.manifest_text()).map_err(Error::io(&manifest))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        let manifest = manifest_path(path);
        let text = fs::read_to_string(&manifest).map_err(Error::io(&manifest))?;
        Self::from_parts(&bytes, &text)
    }
}

impl FeatureExtractor for FeatureCache {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> ExtractorKind {
        ExtractorKind::Precomputed
    }

    fn extract(&self, frame: FrameInput<'_>) -> Result<Vec<f64>> {
        match frame {
            FrameInput::Ref(f) => Ok(self.get(&f.video_id, f.frame_index)?.iter().map(|&v| v as f64).collect()),
            FrameInput::Image(_) => Err(Error::Dataset(
                "a precomputed extractor needs a frame reference, not raw pixels".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FrameRef;

    fn sample_cache() -> FeatureCache {
        let mut cache = FeatureCache::new(32);
        for v in ["a", "b"] {
            for i in 1..=100u32 {
                cache.insert(v, i, (0..32).map(|k| (i as f32) * 0.5 - k as f32 / 7.0).collect());
            }
        }
        cache
    }

    #[test]
    fn size_is_closed_form() {
        let cache = sample_cache();
        assert_eq!(cache.to_bytes().len(), 16 + 200 * (4 + 32 * 4));
        assert_eq!(cache.encoded_len(), 26_416);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.capf");
        let cache = sample_cache();
        cache.save(&path).unwrap();
        let back = FeatureCache::load(&path).unwrap();
        assert_eq!(back, cache);
        assert_eq!(fs::read(&path).unwrap().len(), cache.encoded_len());
        let got = back.extract(FrameInput::Ref(&FrameRef::handle("b", 7))).unwrap();
        let want: Vec<f64> = cache.get("b", 7).unwrap().iter().map(|&v| v as f64).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn missing_frame_names_key() {
        let cache = sample_cache();
        let err = cache.extract(FrameInput::Ref(&FrameRef::handle("c", 3))).unwrap_err();
        assert!(matches!(err, Error::MissingFeature { ref video_id, frame_index: 3 } if video_id == "c"));
    }

    #[test]
    fn rejects_truncation() {
        let cache = sample_cache();
        let bytes = cache.to_bytes();
        assert!(FeatureCache::from_parts(&bytes[..bytes.len() - 4], &cache.manifest_text()).is_err());
        assert!(FeatureCache::from_parts(&bytes, "").is_err());
    }
}
