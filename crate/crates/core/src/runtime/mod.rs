//! Closed-loop orchestration: demonstrations, collection, autonomous execution.

pub mod collect;
pub mod eval;
pub mod executor;
pub mod expert;
pub mod rig;
pub mod task;

pub use collect::{collect, demonstrate, CollectOptions, CollectReport, GateMetrics, QualityGate, Recording};
pub use eval::{ablation_run, evaluate, train_policy, AblationOptions, AblationReport, EvalOptions, EvalReport};
pub use executor::{
    ensemble_weights, execute_autonomous, ChunkSchedule, ChunkSource, ExecMode, ExecutionLog, PolicySource,
    ReplaySource,
};
pub use expert::{home_angles, Phase, ScriptedExpert, Waypoints};
pub use rig::{Rig, StepRecord};
pub use task::{evaluate_success, Outcome, TaskSpec};

#[cfg(test)]
mod tests;
