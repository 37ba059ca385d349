//! Experiment orchestration: the cost model, synthetic tasks and corpus,
//! Pareto-front extraction and report emission.

mod cost;
mod experiment;
mod pareto;
mod synth;
mod tasks;

pub use cost::{cost_csv, estimate_cost, family_total, reference_cost_table, CostEntry, CostMode, COST_HEADER};
pub use experiment::{
    forward_macs_per_token, frontier_series, load_items, load_model_params, report_points, run_experiment, CalibSpec,
    CostAxis, EvalSpec, ExperimentSpec, FrontierSeries, ModelSpec, QadSpec, QualityAxis, Report, ReportRow,
    REPORT_HEADER,
};
pub use pareto::{frontier_csv, mark_dominated, pareto_front, ParetoPoint};
pub use synth::{synth_corpus, synth_documents, write_synth_corpus, SynthConfig};
pub use tasks::{
    eval_tasks, macro_average, task_accuracy, task_example, EvalSuite, LanguageModel, ParamsModel, TaskExample,
    TaskKind, TaskScore, TASK_ALPHABET,
};
