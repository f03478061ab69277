//! Experiment definitions, checkpoints, seeded runs and ablation sweeps.

mod ablation;
mod checkpoint;
mod config;
mod run;

pub use ablation::{ablation_cells, run_ablation, AblationCell, AblationSummary, CellResult, HELDOUT_SAMPLES, HELDOUT_START};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{
    AblationAxes, EncoderOverride, EncoderTable, ExperimentConfig, ModelSection, MoecSection, RunSection,
};
pub use run::{read_metrics, run_experiment, MetricRecord, PerGroup, RunSummary, CHECKPOINT_FILE, METRICS_FILE, TIMING_FILE};
