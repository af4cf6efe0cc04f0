//! Datasets, sweeps, ASR curves and the verification suite.

mod asr;
mod codec;
mod dataset;
mod experiment;
pub mod verify;

pub use asr::{asr_csv_string, asr_curve, write_asr_csv, AsrPoint, ASR_HEADER};
pub use codec::EncodedPerturbation;
pub use dataset::{
    list_ppm, load_idx, load_idx_split, load_ppm, parse_idx_images, parse_idx_labels, parse_ppm, read_label_sidecar,
    synthetic_blobs, Dataset,
};
pub use experiment::{
    default_eps0, read_rows_file, row_seed, run_experiment, run_experiment_on, AttackKind, DatasetSource, ExperimentConfig,
    ExperimentPlan, ExperimentSummary, ResultRow, CONFIG_FILE, ROWS_FILE, SUMMARY_FILE, TIMINGS_FILE,
};
