//! Deterministic training loops for every objective.
//!
//! Each step draws a batch (seeded epoch shuffle with wraparound, or the
//! full dataset), evaluates the method's loss and gradients, and applies an
//! Adam step at the scheduled learning rate. Metric rows are logged every
//! `eval_interval` steps and at the final step, with the loss recomputed on
//! the whole training set at the post-update parameters.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{PromptIndex, PromptSpace, TripletDataset};
use crate::error::{Error, Result};
use crate::eval::{policy_metrics, EvalContext, MetricsRow, StepContext};
use crate::objectives::{
    dro_loss_and_grad, kto_loss_and_grad, rpo_loss_and_grad, rpo_nonorm_loss_and_grad,
    sft_loss_and_grad, KtoConfig, Method, ObjectiveOutput, PartitionEstimate, PartitionMode,
    ValueTable,
};
use crate::optim::{lr_schedule, OptimizerState};
use crate::oracle::check_tau;
use crate::policy::{init_policy, InitMode, Policy, PolicyClass, PolicyKind, ReferencePolicy};
use crate::rng::{seeded_rng, LabRng};

/// How DRO applies its policy and value gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DroUpdate {
    /// One simultaneous step on (θ, v) per batch.
    #[default]
    Joint,
    /// Even steps update θ, odd steps update v, each with its own Adam state.
    Alternating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub tau: f64,
    pub lr: f64,
    pub warmup: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Use the whole dataset every step (ignores `batch_size`).
    pub full_batch: bool,
    pub seed: u64,
    pub policy_class: PolicyClass,
    /// Hidden width of the featurized network.
    pub hidden: usize,
    pub init: InitMode,
    pub kto: KtoConfig,
    pub sft_threshold: f64,
    pub eval_interval: u64,
    pub weight_decay: f64,
    pub partition_mode: PartitionMode,
    /// Re-estimate the empirical partition at every evaluation instead of once.
    pub recompute_partition: bool,
    pub dro_update: DroUpdate,
    /// Fill `wall_ms` in metric rows. Off by default so that metrics are
    /// byte-identical across repeated runs.
    pub record_wall_time: bool,
    /// Free-form description of the reference policy, echoed into checkpoints.
    pub reference: String,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            tau: 1.0,
            lr: 1e-2,
            warmup: 0,
            total_steps: 5000,
            batch_size: 32,
            full_batch: false,
            seed: 0,
            policy_class: PolicyClass::Tabular,
            hidden: 16,
            init: InitMode::CopyReference,
            kto: KtoConfig::default(),
            sft_threshold: 0.0,
            eval_interval: 50,
            weight_decay: 0.0,
            partition_mode: PartitionMode::Literal,
            recompute_partition: false,
            dro_update: DroUpdate::Joint,
            record_wall_time: false,
            reference: "uniform".into(),
        }
    }

    pub fn policy_kind(&self) -> PolicyKind {
        match self.policy_class {
            PolicyClass::Tabular => PolicyKind::Tabular,
            PolicyClass::Featurized => PolicyKind::Featurized {
                hidden: self.hidden,
            },
        }
    }

    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        check_tau(self.tau)?;
        let invalid = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return invalid(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.total_steps == 0 {
            return invalid("total steps must be >= 1".into());
        }
        if self.warmup >= self.total_steps {
            return invalid(format!(
                "warmup ({}) must be smaller than total steps ({})",
                self.warmup, self.total_steps
            ));
        }
        if !self.full_batch && (self.batch_size == 0 || self.batch_size > dataset_len) {
            return invalid(format!(
                "batch size {} must be in [1, {dataset_len}]",
                self.batch_size
            ));
        }
        if self.eval_interval == 0 {
            return invalid("evaluation interval must be >= 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return invalid(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if self.policy_class == PolicyClass::Featurized && self.hidden == 0 {
            return invalid("hidden width must be >= 1".into());
        }
        if !self.sft_threshold.is_finite() {
            return invalid("SFT threshold must be finite".into());
        }
        self.kto.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub config: TrainConfig,
    pub rows: Vec<MetricsRow>,
    pub policy: Policy,
    pub values: Option<ValueTable>,
    pub optimizer: OptimizerState,
    /// Separate value-table optimizer (alternating DRO only).
    pub value_optimizer: Option<OptimizerState>,
    pub wall_ms: u64,
    /// Mean over prompts of `KL(π* ‖ π_ref)` for the run's oracle.
    pub oracle_kl_ref: f64,
}

impl TrainResult {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("a finished run logs at least one row")
    }
}

/// A method bound to its dataset, reference and precomputed state.
pub struct Objective<'a> {
    config: &'a TrainConfig,
    ds: &'a TripletDataset,
    reference: &'a ReferencePolicy,
    index: PromptIndex,
    partition: Option<PartitionEstimate>,
    pool: Vec<usize>,
}

impl<'a> Objective<'a> {
    pub fn new(
        config: &'a TrainConfig,
        ds: &'a TripletDataset,
        reference: &'a ReferencePolicy,
    ) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let index = ds.group_by_prompt();
        let partition = match config.method {
            Method::Rpo => Some(PartitionEstimate::estimate(
                &index,
                ds,
                reference,
                config.tau,
                config.partition_mode,
            )?),
            _ => None,
        };
        let pool: Vec<usize> = match config.method {
            Method::Sft => (0..ds.len())
                .filter(|&i| ds.record(i).reward() >= config.sft_threshold)
                .collect(),
            _ => (0..ds.len()).collect(),
        };
        if pool.is_empty() {
            return Err(Error::NoQualifyingRecords {
                threshold: config.sft_threshold,
            });
        }
        Ok(Self {
            config,
            ds,
            reference,
            index,
            partition,
            pool,
        })
    }

    /// Record indices batches are drawn from.
    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn evaluate(
        &self,
        policy: &Policy,
        values: Option<&ValueTable>,
        batch: &[usize],
    ) -> Result<ObjectiveOutput> {
        let cfg = self.config;
        match cfg.method {
            Method::Rpo => {
                let fresh;
                let partition = if cfg.recompute_partition {
                    fresh = PartitionEstimate::estimate(
                        &self.index,
                        self.ds,
                        self.reference,
                        cfg.tau,
                        cfg.partition_mode,
                    )?;
                    &fresh
                } else {
                    self.partition.as_ref().expect("built for rpo")
                };
                rpo_loss_and_grad(policy, self.reference, self.ds, batch, partition, cfg.tau)
            }
            Method::RpoNoNorm => {
                rpo_nonorm_loss_and_grad(policy, self.reference, self.ds, batch, cfg.tau)
            }
            Method::Dro => {
                let values = values.ok_or_else(|| {
                    Error::InvalidConfig("dro needs a value table".into())
                })?;
                dro_loss_and_grad(policy, values, self.reference, self.ds, batch, cfg.tau)
            }
            Method::Kto => kto_loss_and_grad(policy, self.reference, self.ds, batch, &cfg.kto),
            Method::Sft => sft_loss_and_grad(policy, self.ds, batch, cfg.sft_threshold),
        }
    }

    /// Loss over the whole pool.
    pub fn full_loss(&self, policy: &Policy, values: Option<&ValueTable>) -> Result<f64> {
        Ok(self.evaluate(policy, values, &self.pool)?.loss)
    }
}

/// Seeded epoch shuffling; a batch that runs past the end of an epoch
/// continues into a freshly shuffled one.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    full: bool,
    rng: LabRng,
}

impl Batcher {
    fn new(pool: &[usize], size: usize, full: bool, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        rng.set_stream(1);
        let mut order = pool.to_vec();
        if !full {
            order.shuffle(&mut rng);
        }
        Self {
            order,
            pos: 0,
            size,
            full,
            rng,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.full {
            return self.order.clone();
        }
        let mut batch = Vec::with_capacity(self.size);
        while batch.len() < self.size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Trains with metrics computed against rewards read from the dataset itself.
pub fn train(
    cfg: &TrainConfig,
    ds: &TripletDataset,
    space: &PromptSpace,
    reference: &ReferencePolicy,
) -> Result<TrainResult> {
    let eval = EvalContext::from_dataset(ds, space, reference, cfg.tau)?;
    train_with_eval(cfg, ds, reference, &eval)
}

pub fn train_with_eval(
    cfg: &TrainConfig,
    ds: &TripletDataset,
    reference: &ReferencePolicy,
    eval: &EvalContext,
) -> Result<TrainResult> {
    let started = Instant::now();
    if !ds.is_standardized() {
        return Err(Error::InvalidConfig(
            "training expects a standardized dataset".into(),
        ));
    }
    cfg.validate(ds.len())?;
    if eval.tau() != cfg.tau {
        return Err(Error::MismatchedOracle(format!(
            "evaluation oracle built at tau = {}, training at tau = {}",
            eval.tau(),
            cfg.tau
        )));
    }

    let space = reference.space().clone();
    let mut policy = init_policy(cfg.policy_kind(), space.clone(), cfg.init, reference, cfg.seed)?;
    let mut values = cfg
        .method
        .has_value_table()
        .then(|| ValueTable::zeros(space.len()));
    let objective = Objective::new(cfg, ds, reference)?;
    let mut batcher = Batcher::new(objective.pool(), cfg.batch_size, cfg.full_batch, cfg.seed);

    let alternating = cfg.method == Method::Dro && cfg.dro_update == DroUpdate::Alternating;
    let joint_len = policy.num_params()
        + if alternating {
            0
        } else {
            values.as_ref().map_or(0, ValueTable::len)
        };
    let mut optimizer = OptimizerState::with_weight_decay(joint_len, cfg.weight_decay);
    let mut value_optimizer =
        alternating.then(|| OptimizerState::with_weight_decay(space.len(), cfg.weight_decay));

    let mut rows = Vec::new();
    let mut params = policy.params().to_vec();
    for step in 0..cfg.total_steps {
        let lr = lr_schedule(step, cfg.warmup, cfg.total_steps, cfg.lr)?;
        let batch = batcher.next_batch();
        let out = objective.evaluate(&policy, values.as_ref(), &batch)?;
        if !out.loss.is_finite() {
            return Err(Error::Divergence {
                method: cfg.method.token().into(),
                step: step + 1,
                loss: out.loss,
            });
        }

        match (&mut values, &mut value_optimizer) {
            (None, _) => {
                optimizer.adam_step(&mut params, &out.policy_grad, lr)?;
                policy.set_params(&params)?;
            }
            (Some(table), None) => {
                let n = params.len();
                let mut joint = std::mem::take(&mut params);
                joint.extend_from_slice(&table.values);
                let mut grads = out.policy_grad;
                grads.extend(out.value_grad.expect("dro returns value gradients"));
                optimizer.adam_step(&mut joint, &grads, lr)?;
                table.values.copy_from_slice(&joint[n..]);
                joint.truncate(n);
                params = joint;
                policy.set_params(&params)?;
            }
            (Some(table), Some(value_opt)) => {
                if step % 2 == 0 {
                    optimizer.adam_step(&mut params, &out.policy_grad, lr)?;
                    policy.set_params(&params)?;
                } else {
                    let grads = out.value_grad.expect("dro returns value gradients");
                    value_opt.adam_step(&mut table.values, &grads, lr)?;
                }
            }
        }

        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.total_steps {
            let loss = objective.full_loss(&policy, values.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    method: cfg.method.token().into(),
                    step: done,
                    loss,
                });
            }
            let wall_ms = if cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            };
            rows.push(policy_metrics(
                &policy,
                reference,
                eval,
                &StepContext {
                    step: done,
                    method: cfg.method,
                    seed: cfg.seed,
                    loss,
                    lr: lr_schedule(done, cfg.warmup, cfg.total_steps, cfg.lr)?,
                    wall_ms,
                },
            )?);
        }
    }

    Ok(TrainResult {
        config: cfg.clone(),
        rows,
        policy,
        values,
        optimizer,
        value_optimizer,
        wall_ms: started.elapsed().as_millis() as u64,
        oracle_kl_ref: eval.solution.mean_kl_to_reference(reference),
    })
}

/// Recomputes the final metric row of a finished run from its parameters.
pub fn evaluate_result(
    result: &TrainResult,
    ds: &TripletDataset,
    reference: &ReferencePolicy,
    eval: &EvalContext,
) -> Result<MetricsRow> {
    let cfg = &result.config;
    let objective = Objective::new(cfg, ds, reference)?;
    let loss = objective.full_loss(&result.policy, result.values.as_ref())?;
    let step = result.final_row().step;
    policy_metrics(
        &result.policy,
        reference,
        eval,
        &StepContext {
            step,
            method: cfg.method,
            seed: cfg.seed,
            loss,
            lr: lr_schedule(step, cfg.warmup, cfg.total_steps, cfg.lr)?,
            wall_ms: 0,
        },
    )
}
