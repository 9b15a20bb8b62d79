//! Training with the summed objective, the ablation harness and the
//! alignment-layer sweep.

mod config;
mod harness;
mod train;

pub use config::{DataSource, OptimizerConfig, RunConfig, Selection};
pub use harness::{ablate, ablation_csv, layer_sweep, layer_sweep_csv, variant_toggles, write_text, LayerRun, VariantRun, VARIANTS};
pub use train::{
    build_model, evaluate_split, initial_params, load_data, predict_split, probe_step, total_loss, train, train_on, EpochRecord,
    LossComponents, RunRecord, TrainedRun,
};
