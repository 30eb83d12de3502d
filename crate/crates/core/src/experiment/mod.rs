//! End-to-end experiments from a declarative config: ingest, audit,
//! optional pretraining, training, synthesis, evaluation and reporting.

mod config;
mod run;
mod sweep;

pub use config::{
    ArSettings, DataConfig, DeltaSpec, DiffusionSettings, ExperimentConfig, GenerationSettings,
    ModelKind, PretrainConfig, PublicCorpusConfig, ReferenceSettings, TemplateSource,
};
pub use run::{
    config_hash, prepare_data, run_experiment, train_generator, train_reference, Accounting,
    ExperimentMetrics, Manifest, ManifestFile, PreparedData, RunSummary, SeedReport,
    TrainedGenerator, TrainedRun,
};
pub use sweep::{
    epsilon_label, expand_grid, render_table, sweep, CellOutcome, EpsilonValue, SweepConfig,
    SweepRow,
};
