use rand::seq::SliceRandom;

use super::pipeline::{Spectrum, ZScoreStats, SPECTRUM_LEN};
use crate::diffcore::Tensor;
use crate::error::{contract_err, Error, Result};
use crate::rng::{stream_rng, Stream};

pub const TRAIN_FRACTION: f64 = 0.8;

/// Preprocessed windows of one domain. `features` is `[N, 1, 512]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
}

impl DomainDataset {
    pub fn new(
        domain_id: impl Into<String>,
        features: Tensor,
        labels: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if features.shape() != [n, 1, SPECTRUM_LEN] {
            return Err(contract_err!(
                "features must be [N, 1, {}], got {:?}",
                SPECTRUM_LEN,
                features.shape()
            ));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(contract_err!("{} labels for {} rows", l.len(), n));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= class_count) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    class_count,
                });
            }
        }
        Ok(DomainDataset {
            domain_id: domain_id.into(),
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Rows `idx` as a new dataset with the same identity.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let labels = self
            .labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i]).collect());
        DomainDataset::new(
            self.domain_id.clone(),
            self.features.select_rows(idx)?,
            labels,
            self.class_count,
        )
    }

    /// Per-class row counts; empty when unlabeled.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in self.labels.iter().flatten() {
            counts[l] += 1;
        }
        counts
    }
}

/// Train and test partitions of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: DomainDataset,
    pub test: DomainDataset,
}

/// Seeded train/test row indices. With labels the split is stratified: each
/// class keeps `round((1 − fraction) · count)` rows for test.
pub fn split_indices(
    labels: Option<&[usize]>,
    n: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(contract_err!("split needs at least 5 rows, got {}", n));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(contract_err!("train fraction {} outside (0, 1)", fraction));
    }
    let mut rng = stream_rng(seed, Stream::Split, 0);
    let mut train = Vec::with_capacity(n);
    let mut test = Vec::with_capacity(n - n * 4 / 5);
    match labels {
        Some(labels) => {
            let classes = labels.iter().max().map_or(0, |&m| m + 1);
            for c in 0..classes {
                let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                idx.shuffle(&mut rng);
                let n_test = ((1.0 - fraction) * idx.len() as f64).round() as usize;
                test.extend_from_slice(&idx[..n_test]);
                train.extend_from_slice(&idx[n_test..]);
            }
        }
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let n_train = (fraction * n as f64).round() as usize;
            train.extend_from_slice(&idx[..n_train]);
            test.extend_from_slice(&idx[n_train..]);
        }
    }
    if test.is_empty() {
        test.push(train.pop().expect("n >= 5"));
    }
    if train.is_empty() {
        train.push(test.pop().expect("n >= 5"));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &DomainDataset, fraction: f64, seed: u64) -> Result<SplitPair> {
    let (train, test) = split_indices(ds.labels.as_deref(), ds.len(), fraction, seed)?;
    Ok(SplitPair {
        train: ds.subset(&train)?,
        test: ds.subset(&test)?,
    })
}

/// Z-scores `windows` with `stats`, takes FFT magnitudes and stacks the
/// result into a dataset.
pub(crate) fn assemble(
    domain_id: &str,
    class_count: usize,
    windows: &[Vec<f64>],
    labels: Option<Vec<usize>>,
    stats: &ZScoreStats,
    spectrum: &Spectrum,
) -> Result<DomainDataset> {
    if windows.is_empty() {
        return Err(contract_err!("domain '{}' has no windows", domain_id));
    }
    let mut values = Vec::with_capacity(windows.len() * SPECTRUM_LEN);
    for w in stats.apply(windows) {
        values.extend(spectrum.magnitude(&w)?);
    }
    let features = Tensor::new(vec![windows.len(), 1, SPECTRUM_LEN], values)?;
    DomainDataset::new(domain_id, features, labels, class_count)
}

/// Full pipeline with statistics fitted on all windows.
pub fn prepare_domain(
    domain_id: &str,
    class_count: usize,
    windows: &[Vec<f64>],
    labels: Option<Vec<usize>>,
) -> Result<DomainDataset> {
    let stats = ZScoreStats::fit(windows)?;
    assemble(domain_id, class_count, windows, labels, &stats, &Spectrum::default())
}

/// Full pipeline with a train/test split taken at the window level;
/// statistics are fitted on the training windows and reused for test.
pub fn prepare_domain_split(
    domain_id: &str,
    class_count: usize,
    windows: &[Vec<f64>],
    labels: Option<Vec<usize>>,
    fraction: f64,
    seed: u64,
) -> Result<(SplitPair, ZScoreStats)> {
    let (train_idx, test_idx) = split_indices(labels.as_deref(), windows.len(), fraction, seed)?;
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Option<Vec<usize>>) {
        (
            idx.iter().map(|&i| windows[i].clone()).collect(),
            labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        )
    };
    let (train_w, train_l) = pick(&train_idx);
    let (test_w, test_l) = pick(&test_idx);
    let stats = ZScoreStats::fit(&train_w)?;
    let spectrum = Spectrum::default();
    let train = assemble(domain_id, class_count, &train_w, train_l, &stats, &spectrum)?;
    let test = assemble(domain_id, class_count, &test_w, test_l, &stats, &spectrum)?;
    Ok((SplitPair { train, test }, stats))
}


#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> DomainDataset {
        let features = Tensor::new(
            vec![n, 1, SPECTRUM_LEN],
            (0..n * SPECTRUM_LEN).map(|i| (i / SPECTRUM_LEN) as f64).collect(),
        )
        .unwrap();
        let labels = (0..n).map(|i| i % classes).collect();
        DomainDataset::new("toy", features, Some(labels), classes).unwrap()
    }

    #[test]
    fn ten_rows_split_eight_two() {
        let ds = toy(10, 1);
        let sp = split(&ds, 0.8, 1).unwrap();
        assert_eq!((sp.train.len(), sp.test.len()), (8, 2));
        let unl = DomainDataset::new("u", ds.features.clone(), None, 1).unwrap();
        let sp = split(&unl, 0.8, 1).unwrap();
        assert_eq!((sp.train.len(), sp.test.len()), (8, 2));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ds = toy(37, 3);
        let a = split_indices(ds.labels.as_deref(), 37, 0.8, 5).unwrap();
        let b = split_indices(ds.labels.as_deref(), 37, 0.8, 5).unwrap();
        assert_eq!(a, b);
        let c = split_indices(ds.labels.as_deref(), 37, 0.8, 6).unwrap();
        assert_ne!(a, c);
        let (tr, te) = a;
        assert_eq!(tr.len() + te.len(), 37);
        assert!(tr.iter().all(|i| !te.contains(i)));
    }

    #[test]
    fn split_rejects_tiny_sets() {
        assert!(split(&toy(4, 2), 0.8, 0).is_err());
    }

    #[test]
    fn label_range_checked() {
        let f = Tensor::zeros(&[2, 1, SPECTRUM_LEN]);
        assert!(matches!(
            DomainDataset::new("x", f, Some(vec![0, 2]), 2),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }
}
