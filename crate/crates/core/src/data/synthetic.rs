//! Deterministic multi-domain signal corpora.
//!
//! Class `c` in domain `d` is a sum of sinusoids at class-specific
//! frequencies, all scaled by `1 + shift · δ_d` with `δ_d` evenly spaced in
//! `[0, 1]`, plus white Gaussian noise. Frequencies are in cycles per
//! 1024-sample window. Each window gets fresh random phases.
//!
//! Every class is a carrier with two weaker sidebands. Carriers grow
//! geometrically, so a scale shift of up to 30% never moves one class onto
//! another, and there are no integer harmonics for a shifted class to land
//! on. The sidebands sit close enough to interfere, which varies the
//! spectrum from window to window; together they stay weaker than the
//! carrier, so they never cancel it.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{prepare_domain, prepare_domain_split, DomainDataset, SplitPair};
use super::manifest::{write_signal, Manifest, ManifestEntry, RawSignal};
use super::pipeline::WINDOW_LEN;
use crate::error::{contract_err, Error, Result};
use crate::rng::{stream_rng, Stream};

/// Carrier of class 0 and the ratio between consecutive class carriers.
const BASE_FREQ: f64 = 6.0;
const CLASS_RATIO: f64 = 1.7;
/// Tones relative to the carrier and their amplitudes.
const TONES: [(f64, f64); 3] = [(0.98, 0.35), (1.0, 1.0), (1.02, 0.35)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_domains: usize,
    pub num_classes: usize,
    pub shift: f64,
    pub noise_std: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_domains: 4,
            num_classes: 6,
            shift: 0.3,
            noise_std: 0.1,
            samples_per_class: 200,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "synthetic corpus needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_domains == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("domains and samples per class must be positive".into()));
        }
        if !(self.shift >= 0.0) || !self.shift.is_finite() {
            return Err(Error::Config(format!("shift {} must be ≥ 0", self.shift)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std {} must be ≥ 0", self.noise_std)));
        }
        let top = SyntheticConfig::tones(self.num_classes - 1)
            .map(|(f, _)| f)
            .fold(0.0, f64::max)
            * (1.0 + self.shift);
        if top >= (WINDOW_LEN / 2) as f64 {
            return Err(Error::Config(format!(
                "{} classes at shift {} put tones above the Nyquist bin",
                self.num_classes, self.shift
            )));
        }
        Ok(())
    }

    pub fn domain_id(d: usize) -> String {
        format!("D{d}")
    }

    /// `δ_d`, evenly spaced in `[0, 1]`.
    pub fn domain_offset(&self, d: usize) -> f64 {
        if self.num_domains <= 1 {
            0.0
        } else {
            d as f64 / (self.num_domains - 1) as f64
        }
    }

    /// `(frequency, amplitude)` pairs of class `c` before the domain shift.
    pub fn tones(c: usize) -> impl Iterator<Item = (f64, f64)> {
        let carrier = BASE_FREQ * CLASS_RATIO.powi(c as i32);
        TONES.iter().map(move |&(m, a)| (carrier * m, a))
    }
}

/// Raw signals of one domain, one per class, each `samples_per_class`
/// windows long.
pub fn domain_signals(cfg: &SyntheticConfig, d: usize) -> Result<Vec<RawSignal>> {
    cfg.validate()?;
    if d >= cfg.num_domains {
        return Err(contract_err!("domain {} of {}", d, cfg.num_domains));
    }
    let scale = 1.0 + cfg.shift * cfg.domain_offset(d);
    let noise = (cfg.noise_std > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_std).expect("positive std"));
    (0..cfg.num_classes)
        .map(|c| {
            let mut rng = stream_rng(cfg.seed, Stream::Data, ((d as u64) << 20) | c as u64);
            let tones: Vec<(f64, f64)> = SyntheticConfig::tones(c)
                .map(|(f, a)| (2.0 * PI * f * scale / WINDOW_LEN as f64, a))
                .collect();
            let mut samples = Vec::with_capacity(cfg.samples_per_class * WINDOW_LEN);
            for _ in 0..cfg.samples_per_class {
                let phases: Vec<f64> = tones.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
                for n in 0..WINDOW_LEN {
                    let mut v: f64 = tones
                        .iter()
                        .zip(&phases)
                        .map(|(&(w, a), &ph)| a * (w * n as f64 + ph).sin())
                        .sum();
                    if let Some(nd) = &noise {
                        v += nd.sample(&mut rng);
                    }
                    samples.push(v);
                }
            }
            let mut signal = RawSignal {
                samples,
                channel: "synthetic".into(),
                ..RawSignal::default()
            };
            signal.metadata.insert("domain".into(), SyntheticConfig::domain_id(d));
            signal.metadata.insert("class".into(), c.to_string());
            Ok(signal)
        })
        .collect()
}

fn domain_windows(cfg: &SyntheticConfig, d: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut windows = Vec::with_capacity(cfg.num_classes * cfg.samples_per_class);
    let mut labels = Vec::with_capacity(windows.capacity());
    for (c, sig) in domain_signals(cfg, d)?.into_iter().enumerate() {
        for w in sig.samples.chunks_exact(WINDOW_LEN) {
            windows.push(w.to_vec());
            labels.push(c);
        }
    }
    Ok((windows, labels))
}

/// Every domain through the standard pipeline, statistics fitted per domain.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<DomainDataset>> {
    (0..cfg.num_domains)
        .map(|d| {
            let (w, l) = domain_windows(cfg, d)?;
            prepare_domain(&SyntheticConfig::domain_id(d), cfg.num_classes, &w, Some(l))
        })
        .collect()
}

/// Every domain split into train/test, z-score fitted on training windows.
pub fn synthetic_splits(cfg: &SyntheticConfig, fraction: f64, split_seed: u64) -> Result<Vec<SplitPair>> {
    (0..cfg.num_domains)
        .map(|d| {
            let (w, l) = domain_windows(cfg, d)?;
            Ok(prepare_domain_split(
                &SyntheticConfig::domain_id(d),
                cfg.num_classes,
                &w,
                Some(l),
                fraction,
                split_seed,
            )?
            .0)
        })
        .collect()
}

/// Writes `<out>/<domain>/class_<c>.f64` and `<out>/<domain>/manifest.json`
/// for every domain; returns the manifest paths.
pub fn write_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut manifests = Vec::with_capacity(cfg.num_domains);
    for d in 0..cfg.num_domains {
        let id = SyntheticConfig::domain_id(d);
        let dir = out.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entries = Vec::with_capacity(cfg.num_classes);
        for (c, sig) in domain_signals(cfg, d)?.iter().enumerate() {
            let name = format!("class_{c}.f64");
            write_signal(&dir.join(&name), &sig.samples)?;
            entries.push(ManifestEntry {
                path: name,
                label: Some(c),
            });
        }
        let manifest = Manifest {
            domain_id: id,
            class_count: cfg.num_classes,
            entries,
            stride: None,
        };
        let path = dir.join("manifest.json");
        manifest.write(&path)?;
        manifests.push(path);
    }
    Ok(manifests)
}
