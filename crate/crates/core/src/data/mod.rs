//! Signal ingestion, dataset containers and synthetic corpora.

mod dataset;
mod manifest;
mod pipeline;
mod synthetic;

pub use dataset::{
    prepare_domain, prepare_domain_split, split, split_indices, DomainDataset, SplitPair,
    TRAIN_FRACTION,
};
pub use manifest::{
    load_domain, load_domain_split, read_signal, read_windows, write_signal, Manifest,
    ManifestEntry, RawSignal,
};
pub use pipeline::{
    fft_magnitude, window, window_count, zscore, Spectrum, ZScoreStats, DEFAULT_STRIDE,
    SPECTRUM_LEN, WINDOW_LEN,
};
pub use synthetic::{
    domain_signals, generate_synthetic, synthetic_splits, write_synthetic, SyntheticConfig,
};
