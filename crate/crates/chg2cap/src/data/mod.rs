//! Bitemporal feature ingestion: binary feature files, dataset manifests,
//! and the deterministic synthetic dataset used for desk-scale runs.
//!
//! A feature file stores one bitemporal pair in little-endian binary:
//! magic `CGFT`, u32 version (1), u32 h, u32 w, u32 C, then the f1 payload
//! followed by the f2 payload, each `h*w*C` f32 values row-major
//! (spatial-major, channel-minor).

mod synthetic;

pub use synthetic::{
    class_band, gen_synthetic, gen_synthetic_labeled, toy_extract, toy_extract_pair,
    ChangeType, LabeledRecord, Quadrant, SyntheticConfig, ToyExtractorConfig,
    NO_CHANGE_TEMPLATES, SIGNAL_AMPLITUDE,
};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::tokenize;

const FEATURE_MAGIC: &[u8; 4] = b"CGFT";
const FEATURE_VERSION: u32 = 1;

/// Deep features for the two acquisitions of one scene, each `[h, w, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    f1: Tensor,
    f2: Tensor,
}

impl FeaturePair {
    pub fn new(f1: Tensor, f2: Tensor) -> Result<Self> {
        if f1.shape() != f2.shape() {
            return Err(Error::ShapeMismatch {
                op: "feature_pair",
                lhs: f1.shape().to_vec(),
                rhs: f2.shape().to_vec(),
            });
        }
        match f1.shape() {
            [h, w, c] if h * w >= 2 && *c >= 2 => Ok(FeaturePair { f1, f2 }),
            _ => Err(Error::ShapeMismatch {
                op: "feature_pair",
                lhs: f1.shape().to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn f1(&self) -> &Tensor {
        &self.f1
    }

    pub fn f2(&self) -> &Tensor {
        &self.f2
    }

    /// (h, w, C) of both feature maps.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.f1.shape();
        (s[0], s[1], s[2])
    }
}

/// One dataset entry: a feature pair plus its reference captions (words).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub features: FeaturePair,
    pub captions: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Manifest row: JSON array elements of the dataset manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_file: String,
    pub captions: Vec<String>,
    pub split: Split,
}

pub fn write_feature_file(path: &Path, pair: &FeaturePair) -> Result<()> {
    let (h, w, c) = pair.dims();
    let mut bytes = Vec::with_capacity(20 + 2 * h * w * c * 4);
    bytes.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, h as u32, w as u32, c as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for tensor in [pair.f1(), pair.f2()] {
        for &v in tensor.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_feature_file(path: &Path) -> Result<FeaturePair> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_feature_bytes(&bytes)
}

fn parse_feature_bytes(bytes: &[u8]) -> Result<FeaturePair> {
    if bytes.len() < 20 {
        return Err(Error::Parse(format!(
            "feature file: header needs 20 bytes, got {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::Parse(format!(
            "feature file: bad magic {:?}, expected {:?}",
            &bytes[0..4],
            FEATURE_MAGIC
        )));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::Parse(format!(
            "feature file: unsupported version {version}"
        )));
    }
    let (h, w, c) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let numel = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(c))
        .ok_or_else(|| Error::Parse("feature file: dimension overflow".into()))?;
    let expected = 20 + 2 * numel * 4;
    if bytes.len() != expected {
        return Err(Error::Parse(format!(
            "feature file: payload for {h}x{w}x{c} needs {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let read_payload = |start: usize| -> Tensor {
        let data: Vec<f64> = (0..numel)
            .map(|i| {
                let off = start + i * 4;
                f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64
            })
            .collect();
        Tensor::new(vec![h, w, c], data).expect("payload length checked above")
    };
    FeaturePair::new(read_payload(20), read_payload(20 + numel * 4))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let json = serde_json::to_string_pretty(entries)
        .map_err(|e| Error::Parse(format!("manifest serialization: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest json: {e}")))
}

/// Load every manifest record, resolving feature paths relative to the
/// manifest's directory and tokenizing the captions.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<(DatasetRecord, Split)>> {
    let entries = load_manifest(manifest_path)?;
    let base: PathBuf = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    entries
        .into_iter()
        .map(|entry| {
            let feature_path = base.join(&entry.feature_file);
            let features = load_feature_file(&feature_path)?;
            let captions: Vec<Vec<String>> =
                entry.captions.iter().map(|c| tokenize(c)).collect();
            if captions.is_empty() {
                return Err(Error::Parse(format!(
                    "manifest record {} has no captions",
                    entry.id
                )));
            }
            Ok((
                DatasetRecord {
                    id: entry.id,
                    features,
                    captions,
                },
                entry.split,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn temp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("chg2cap_data_tests").join(name);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn random_pair(h: usize, w: usize, c: usize, rng: &mut Rng) -> FeaturePair {
        let quantized = |rng: &mut Rng| -> Vec<f64> {
            (0..h * w * c).map(|_| rng.normal() as f32 as f64).collect()
        };
        FeaturePair::new(
            Tensor::new(vec![h, w, c], quantized(rng)).unwrap(),
            Tensor::new(vec![h, w, c], quantized(rng)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn feature_file_round_trip_is_bitwise() {
        let mut rng = Rng::new(3);
        let pair = random_pair(4, 4, 32, &mut rng);
        let path = temp_dir("roundtrip").join("pair.cgft");
        write_feature_file(&path, &pair).unwrap();
        let loaded = load_feature_file(&path).unwrap();
        assert_eq!(loaded.dims(), (4, 4, 32));
        assert_eq!(pair.f1().data(), loaded.f1().data());
        assert_eq!(pair.f2().data(), loaded.f2().data());
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let mut rng = Rng::new(4);
        let pair = random_pair(2, 2, 4, &mut rng);
        let path = temp_dir("truncated").join("pair.cgft");
        write_feature_file(&path, &pair).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&path, &bytes).unwrap();
        match load_feature_file(&path) {
            Err(Error::Parse(msg)) => {
                assert!(msg.contains("148"), "expected byte count in: {msg}");
                assert!(msg.contains("141"), "actual byte count in: {msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_bad_version_are_distinct_errors() {
        let mut bytes = vec![0u8; 20];
        bytes[0..4].copy_from_slice(b"NOPE");
        assert!(matches!(parse_feature_bytes(&bytes), Err(Error::Parse(m)) if m.contains("magic")));

        let mut bytes = vec![0u8; 20];
        bytes[0..4].copy_from_slice(FEATURE_MAGIC);
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(
            matches!(parse_feature_bytes(&bytes), Err(Error::Parse(m)) if m.contains("version"))
        );
    }

    #[test]
    fn dimension_payload_mismatch_is_rejected() {
        let mut rng = Rng::new(5);
        let pair = random_pair(2, 2, 4, &mut rng);
        let path = temp_dir("mismatch").join("pair.cgft");
        write_feature_file(&path, &pair).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Claim one more row than the payload carries.
        bytes[8..12].copy_from_slice(&3u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_feature_file(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn manifest_round_trip_and_dataset_loading() {
        let dir = temp_dir("manifest");
        let mut rng = Rng::new(6);
        let pair = random_pair(2, 2, 4, &mut rng);
        write_feature_file(&dir.join("rec0.cgft"), &pair).unwrap();
        let entries = vec![ManifestEntry {
            id: "rec0".into(),
            feature_file: "rec0.cgft".into(),
            captions: vec!["A road is built.".into(), "new road appears".into()],
            split: Split::Train,
        }];
        write_manifest(&dir.join("manifest.json"), &entries).unwrap();
        let dataset = load_dataset(&dir.join("manifest.json")).unwrap();
        assert_eq!(dataset.len(), 1);
        let (record, split) = &dataset[0];
        assert_eq!(*split, Split::Train);
        assert_eq!(record.captions[0], vec!["a", "road", "is", "built"]);
        assert_eq!(record.features.f1().data(), pair.f1().data());
    }

    #[test]
    fn feature_pair_validates_shapes() {
        let a = Tensor::zeros(vec![2, 2, 4]);
        let b = Tensor::zeros(vec![2, 2, 5]);
        assert!(FeaturePair::new(a.clone(), b).is_err());
        assert!(FeaturePair::new(a.clone(), a.clone()).is_ok());
        // C must be at least 2
        let thin = Tensor::zeros(vec![2, 2, 1]);
        assert!(FeaturePair::new(thin.clone(), thin).is_err());
    }
}
