//! Single-trajectory policy optimization over finite prompt/response spaces.
//!
//! Policies are softmax distributions over each prompt's candidate set, so
//! the KL-regularized optimum, its partition function and soft value are
//! available in closed form. Training objectives (reward-partitioning
//! regression, its unnormalized ablation, the joint policy/value Bellman
//! residual, prospect-theoretic KTO and maximum likelihood) are checked
//! against those closed forms.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod math;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use data::{
    coverage_report, generate_synthetic, CoverageStats, Prompt, PromptIndex, PromptSpace,
    RewardLaw, SyntheticConfig, SyntheticEnv, TripletDataset, TripletRecord,
};
pub use error::{Error, Result};
pub use eval::{compare_runs, policy_metrics, ComparisonRow, MetricsRow};
pub use objectives::{
    KtoConfig, Method, ObjectiveOutput, PartitionEstimate, PartitionMode, ValueTable,
};
pub use oracle::{OracleSolution, RewardTable};
pub use policy::{InitMode, Policy, PolicyClass, PolicyKind, ReferencePolicy};
pub use trainer::{train, TrainConfig, TrainResult};
