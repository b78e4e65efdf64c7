//! Domain manifests and raw `.f64` signal files.
//!
//! A manifest is JSON:
//!
//! ```json
//! { "domain_id": "D0", "class_count": 6,
//!   "entries": [ { "path": "class_0.f64", "label": 0 } ] }
//! ```
//!
//! Relative entry paths resolve against the manifest's directory. Signal
//! files are bare little-endian `f64` streams.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{prepare_domain, prepare_domain_split, DomainDataset, SplitPair};
use super::pipeline::{window, DEFAULT_STRIDE, WINDOW_LEN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain_id: String,
    pub class_count: usize,
    pub entries: Vec<ManifestEntry>,
    /// Window hop in samples; defaults to non-overlapping windows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

/// One raw recording.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawSignal {
    pub samples: Vec<f64>,
    pub channel: String,
    pub metadata: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        m.validate(path)?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |detail: &str| Error::Manifest {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if self.domain_id.is_empty() {
            return Err(bad("empty domain_id"));
        }
        if self.class_count == 0 {
            return Err(bad("class_count must be positive"));
        }
        if self.entries.is_empty() {
            return Err(bad("no entries"));
        }
        let labeled = self.entries.iter().filter(|e| e.label.is_some()).count();
        if labeled != 0 && labeled != self.entries.len() {
            return Err(bad("entries must be all labeled or all unlabeled"));
        }
        if self.stride == Some(0) {
            return Err(bad("stride must be at least 1"));
        }
        for e in &self.entries {
            if let Some(l) = e.label {
                if l >= self.class_count {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        class_count: self.class_count,
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn read_signal(path: &Path) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            detail: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect())
}

pub fn write_signal(path: &Path, samples: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and windows every entry of a manifest.
pub fn read_windows(
    manifest_path: &Path,
) -> Result<(Manifest, Vec<Vec<f64>>, Option<Vec<usize>>)> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let stride = manifest.stride.unwrap_or(DEFAULT_STRIDE);
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    for e in &manifest.entries {
        let p = resolve(&base, &e.path);
        let samples = read_signal(&p)?;
        if samples.len() < WINDOW_LEN {
            return Err(Error::LengthMismatch {
                path: p,
                detail: format!("{} samples is shorter than one {}-sample window", samples.len(), WINDOW_LEN),
            });
        }
        let w = window(&samples, WINDOW_LEN, stride)?;
        if let Some(l) = e.label {
            labels.extend(std::iter::repeat_n(l, w.len()));
        }
        windows.extend(w);
    }
    let labels = (!labels.is_empty()).then_some(labels);
    Ok((manifest, windows, labels))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// window → zscore (fitted on every window) → fft_magnitude.
pub fn load_domain(manifest_path: &Path) -> Result<DomainDataset> {
    let (m, windows, labels) = read_windows(manifest_path)?;
    prepare_domain(&m.domain_id, m.class_count, &windows, labels)
}

/// Like [`load_domain`] but splits windows first and fits the z-score on
/// the training windows only.
pub fn load_domain_split(manifest_path: &Path, fraction: f64, seed: u64) -> Result<SplitPair> {
    let (m, windows, labels) = read_windows(manifest_path)?;
    Ok(prepare_domain_split(&m.domain_id, m.class_count, &windows, labels, fraction, seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, label: Option<usize>, class_count: usize, samples: usize) -> PathBuf {
        let sig: Vec<f64> = (0..samples).map(|i| (i as f64 * 0.37).sin()).collect();
        write_signal(&dir.join("a.f64"), &sig).unwrap();
        let m = Manifest {
            domain_id: "D9".into(),
            class_count,
            entries: vec![ManifestEntry {
                path: "a.f64".into(),
                label,
            }],
            stride: None,
        };
        let p = dir.join("manifest.json");
        m.write(&p).unwrap();
        p
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), Some(1), 3, 3 * 1024 + 100);
        let ds = load_domain(&p).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels, Some(vec![1, 1, 1]));
        assert_eq!(ds.features.shape(), &[3, 1, 512]);
        assert_eq!(load_domain(&p).unwrap(), ds);
    }

    #[test]
    fn distinct_error_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), Some(3), 3, 2048);
        let e = load_domain(&p).unwrap_err();
        assert!(matches!(e, Error::LabelOutOfRange { label: 3, .. }));

        let missing = load_domain(&dir.path().join("nope.json")).unwrap_err();
        assert!(matches!(missing, Error::MissingFile(_)));

        let p = fixture(dir.path(), Some(0), 3, 1000);
        let short = load_domain(&p).unwrap_err();
        assert!(matches!(short, Error::LengthMismatch { .. }));

        fs::write(dir.path().join("a.f64"), [0u8; 8 * 1024 + 3]).unwrap();
        let ragged = load_domain(&p).unwrap_err();
        assert!(matches!(ragged, Error::LengthMismatch { .. }));

        fs::remove_file(dir.path().join("a.f64")).unwrap();
        assert!(matches!(load_domain(&p).unwrap_err(), Error::MissingFile(_)));

        let codes = [e.code(), missing.code(), short.code()];
        assert_eq!(codes.len(), {
            let mut c = codes.to_vec();
            c.dedup();
            c.len()
        });
    }

    #[test]
    fn mixed_labels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(
            &p,
            r#"{"domain_id":"x","class_count":2,"entries":[{"path":"a","label":0},{"path":"b"}]}"#,
        )
        .unwrap();
        assert!(matches!(Manifest::read(&p), Err(Error::Manifest { .. })));
    }

    #[test]
    fn split_loading_partitions_windows() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture(dir.path(), None, 2, 10 * 1024);
        let sp = load_domain_split(&p, 0.8, 3).unwrap();
        assert_eq!((sp.train.len(), sp.test.len()), (8, 2));
        assert!(!sp.train.is_labeled());
    }
}
