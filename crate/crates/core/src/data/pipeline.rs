//! Window → Z-score → FFT magnitude.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};

pub const WINDOW_LEN: usize = 1024;
pub const SPECTRUM_LEN: usize = WINDOW_LEN / 2;
pub const DEFAULT_STRIDE: usize = WINDOW_LEN;

/// Number of windows `window` produces.
pub fn window_count(n: usize, len: usize, stride: usize) -> Option<usize> {
    (stride >= 1 && len >= 1 && n >= len).then(|| (n - len) / stride + 1)
}

/// Cuts contiguous windows of `len` samples every `stride` samples.
pub fn window(signal: &[f64], len: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    let count = window_count(signal.len(), len, stride).ok_or_else(|| {
        contract_err!(
            "cannot window {} samples with length {} and stride {}",
            signal.len(),
            len,
            stride
        )
    })?;
    Ok((0..count)
        .map(|i| signal[i * stride..i * stride + len].to_vec())
        .collect())
}

/// Scalar mean and (population) standard deviation of a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean: f64,
    pub std: f64,
}

impl ZScoreStats {
    /// Fits over every sample of every window; a zero variance gives std 1.
    pub fn fit(windows: &[Vec<f64>]) -> Result<Self> {
        let n: usize = windows.iter().map(Vec::len).sum();
        if n == 0 {
            return Err(contract_err!("cannot fit z-score statistics on no data"));
        }
        let mean = windows.iter().flatten().sum::<f64>() / n as f64;
        let var = windows
            .iter()
            .flatten()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(ZScoreStats { mean, std })
    }

    pub fn apply(&self, windows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        windows
            .iter()
            .map(|w| w.iter().map(|v| (v - self.mean) / self.std).collect())
            .collect()
    }
}

/// Normalises `windows` with `stats`, fitting them first when absent.
pub fn zscore(
    windows: &[Vec<f64>],
    stats: Option<ZScoreStats>,
) -> Result<(Vec<Vec<f64>>, ZScoreStats)> {
    let stats = match stats {
        Some(s) => s,
        None => ZScoreStats::fit(windows)?,
    };
    Ok((stats.apply(windows), stats))
}

/// Reusable forward FFT of size [`WINDOW_LEN`].
#[derive(Clone)]
pub struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
}

impl Default for Spectrum {
    fn default() -> Self {
        Spectrum {
            fft: FftPlanner::new().plan_fft_forward(WINDOW_LEN),
        }
    }
}

impl Spectrum {
    /// Unnormalised DFT magnitudes of bins `0..512`.
    pub fn magnitude(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != WINDOW_LEN {
            return Err(dim_err!(
                "fft_magnitude expects {} samples, got {}",
                WINDOW_LEN,
                window.len()
            ));
        }
        let mut buf: Vec<Complex<f64>> = window.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf[..SPECTRUM_LEN].iter().map(|c| c.norm()).collect())
    }
}

pub fn fft_magnitude(window: &[f64]) -> Result<Vec<f64>> {
    Spectrum::default().magnitude(window)
}
