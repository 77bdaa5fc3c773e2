//! Optimizer, run configuration, checkpoints, training phases and evaluation.

mod adam;
mod checkpoint;
mod config;
mod eval;
mod experiment;
mod phase;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, DType, ResumeState, FORMAT_VERSION, RESUME_PREFIX};
pub use config::{Phase, RunConfig, TrainOptions, KEYS};
pub use experiment::{trend_checks, SeedTrend, TrendCheck, TrendRunner};
pub use eval::{aggregate, evaluate, CategoryRow, EvalReport, GtEcho, PaddedInput, Predictor};
pub use phase::{
    log_csv, run_phase, run_phase_with, setup_phase, teachers_for, LogRow, PhaseOutcome, PhaseSetup, Prerequisites,
    RunControl, TrainedModel, LOG_HEADER,
};
