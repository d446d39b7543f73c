//! Configuration, pipeline orchestration, ablations and reporting.

mod ablation;
mod config;
mod pipeline;
mod report;

pub use ablation::{run_ablation, AblationResult, AblationSpec, Axis, CellFailure};
pub use config::{
    AggregatorSection, EvalSection, ExperimentConfig, ExpertsSection, PrivacySection,
    StudentSection,
};
pub use pipeline::{
    arm_bn_baseline, baseline_from_groups, baseline_groups, build_experts, checkpoint_hash,
    erm_baseline, eval_config, evaluate_all, expert_groups, experts_from_groups, generate_data,
    load_model, meta_stage, model_from_groups, model_groups, new_record, run_pipeline,
    run_pipeline_on, save_model, warm_start, AxisValue, PhaseTimes, PipelineOutput, RunRecord,
    WarmStart, CODE_VERSION,
};
pub use report::{
    embeddings_csv, emit_report, mean_std, pca_2d, plot_axis, summary_csv, table_csv,
};
