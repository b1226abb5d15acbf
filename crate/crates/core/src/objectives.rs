//! Training objectives with exact analytic gradients.
//!
//! All objectives act on a batch of record indices and return the batch
//! loss together with the gradient over the flat policy parameters. Gradients
//! are accumulated per prompt in score space (`∂L/∂z(y|x)`) and pushed
//! through the policy once per prompt.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{PromptIndex, TripletDataset, TripletRecord};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, sigmoid};
use crate::oracle::{check_tau, kl_from_logs};
use crate::policy::{Policy, ReferencePolicy};

/// Objective selector. Tokens are exact and case-sensitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Rpo,
    RpoNoNorm,
    Dro,
    Kto,
    Sft,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Rpo,
        Method::RpoNoNorm,
        Method::Dro,
        Method::Kto,
        Method::Sft,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Method::Rpo => "rpo",
            Method::RpoNoNorm => "rpo-nonorm",
            Method::Dro => "dro",
            Method::Kto => "kto",
            Method::Sft => "sft",
        }
    }

    /// Whether the method learns a value table next to the policy.
    pub fn has_value_table(self) -> bool {
        self == Method::Dro
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.token() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown method '{s}' (valid: rpo, rpo-nonorm, dro, kto, sft)"
                ))
            })
    }
}

/// Number of trainable scalars for `method` with `policy`.
impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.token())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let token = String::deserialize(d)?;
        token.parse().map_err(serde::de::Error::custom)
    }
}

pub fn trainable_parameter_count(method: Method, policy: &Policy) -> usize {
    policy.num_params()
        + if method.has_value_table() {
            policy.space().len()
        } else {
            0
        }
}

/// How repeated (prompt, response) records enter the empirical partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    /// One term per record index, duplicates included.
    #[default]
    Literal,
    /// One term per distinct pair, using the last occurrence's reward.
    Dedup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionEntry {
    pub log_partition: f64,
    pub value: f64,
    /// Number of terms summed.
    pub records: usize,
    pub full_coverage: bool,
}

impl PartitionEntry {
    pub fn partition(&self) -> f64 {
        self.log_partition.exp()
    }
}

/// Per-prompt empirical partition `Ẑ(x) = Σ_{j ∈ I_x} π_ref(y_j|x) exp(r_j/τ)`
/// and value `V̂(x) = τ ln Ẑ(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionEstimate {
    tau: f64,
    mode: PartitionMode,
    dataset_len: usize,
    entries: Vec<Option<PartitionEntry>>,
}

impl PartitionEstimate {
    pub fn estimate(
        index: &PromptIndex,
        ds: &TripletDataset,
        reference: &ReferencePolicy,
        tau: f64,
        mode: PartitionMode,
    ) -> Result<Self> {
        check_tau(tau)?;
        let space = reference.space();
        let mut entries = vec![None; space.len()];
        for (prompt_id, group) in index.iter() {
            if group.is_empty() {
                return Err(Error::MismatchedEstimate(format!(
                    "empty group for prompt '{prompt_id}'"
                )));
            }
            let x = space.prompt_position(prompt_id)?;
            let mut terms: Vec<f64> = Vec::with_capacity(group.len());
            let mut last: BTreeMap<usize, f64> = BTreeMap::new();
            for &i in group {
                let record = ds.records().get(i).ok_or(Error::IndexOutOfRange {
                    index: i,
                    len: ds.len(),
                })?;
                if record.prompt != x {
                    return Err(Error::MismatchedEstimate(format!(
                        "record {i} is not in the group of '{prompt_id}'"
                    )));
                }
                if mode == PartitionMode::Literal {
                    terms.push(reference.log_prob_at(x, record.response) + record.reward() / tau);
                }
                last.insert(record.response, record.reward());
            }
            if mode == PartitionMode::Dedup {
                terms = last
                    .iter()
                    .map(|(&y, &r)| reference.log_prob_at(x, y) + r / tau)
                    .collect();
            }
            let log_z = log_sum_exp(&terms);
            entries[x] = Some(PartitionEntry {
                log_partition: log_z,
                value: tau * log_z,
                records: terms.len(),
                full_coverage: last.len() == space.num_candidates(x),
            });
        }
        Ok(Self {
            tau,
            mode,
            dataset_len: ds.len(),
            entries,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mode(&self) -> PartitionMode {
        self.mode
    }

    pub fn entry(&self, x: usize) -> Option<&PartitionEntry> {
        self.entries.get(x).and_then(Option::as_ref)
    }

    pub fn value(&self, x: usize) -> Option<f64> {
        self.entry(x).map(|e| e.value)
    }

    fn check(&self, ds: &TripletDataset, tau: f64) -> Result<()> {
        if self.tau != tau {
            return Err(Error::MismatchedEstimate(format!(
                "estimate built at tau = {}, used at tau = {tau}",
                self.tau
            )));
        }
        if self.dataset_len != ds.len() {
            return Err(Error::MismatchedEstimate(format!(
                "estimate built from {} records, dataset has {}",
                self.dataset_len,
                ds.len()
            )));
        }
        Ok(())
    }
}

pub fn empirical_partition(
    index: &PromptIndex,
    ds: &TripletDataset,
    reference: &ReferencePolicy,
    tau: f64,
    mode: PartitionMode,
) -> Result<PartitionEstimate> {
    PartitionEstimate::estimate(index, ds, reference, tau, mode)
}

/// DRO's per-prompt value `v(x)`, in reward units.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub values: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(prompts: usize) -> Self {
        Self {
            values: vec![0.0; prompts],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub loss: f64,
    pub policy_grad: Vec<f64>,
    /// DRO only.
    pub value_grad: Option<Vec<f64>>,
    /// Per-sample residuals: `δ_i` for the RPO family, Bellman residuals for
    /// DRO, per-sample loss terms for KTO and SFT.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KtoConfig {
    pub beta: f64,
    pub lambda_d: f64,
    pub lambda_u: f64,
    /// Records with standardized reward at or above this are desirable.
    pub threshold: f64,
}

impl Default for KtoConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda_d: 1.0,
            lambda_u: 1.0,
            threshold: 0.0,
        }
    }
}

impl KtoConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("lambda_d", self.lambda_d),
            ("lambda_u", self.lambda_u),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.threshold.is_finite() {
            return Err(Error::InvalidConfig("KTO threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Per-prompt log-probabilities and probabilities, computed once per batch.
struct BatchCache<'a> {
    policy: &'a Policy,
    rows: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    score_grads: Vec<Option<Vec<f64>>>,
}

impl<'a> BatchCache<'a> {
    fn new(policy: &'a Policy) -> Self {
        let n = policy.space().len();
        Self {
            policy,
            rows: vec![None; n],
            score_grads: vec![None; n],
        }
    }

    fn row(&mut self, x: usize) -> &(Vec<f64>, Vec<f64>) {
        let policy = self.policy;
        self.rows[x].get_or_insert_with(|| {
            let log_probs = policy.log_probs(x);
            let probs = log_probs.iter().map(|lp| lp.exp()).collect();
            (log_probs, probs)
        })
    }

    fn log_prob(&mut self, x: usize, y: usize) -> f64 {
        self.row(x).0[y]
    }

    /// Adds `coeff · ∂ ln π(y|x)/∂z(·|x)` to the score gradient of `x`.
    fn add_log_prob_grad(&mut self, x: usize, y: usize, coeff: f64) {
        let probs = self.row(x).1.clone();
        let grads = self.score_grads[x].get_or_insert_with(|| vec![0.0; probs.len()]);
        for (g, p) in grads.iter_mut().zip(&probs) {
            *g -= coeff * p;
        }
        grads[y] += coeff;
    }

    fn into_param_grad(self) -> Vec<f64> {
        let mut out = vec![0.0; self.policy.num_params()];
        for (x, grads) in self.score_grads.iter().enumerate() {
            if let Some(grads) = grads {
                self.policy.backprop_scores(x, grads, &mut out);
            }
        }
        out
    }
}

fn batch_records<'d>(ds: &'d TripletDataset, batch: &[usize]) -> Result<Vec<&'d TripletRecord>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch
        .iter()
        .map(|&i| {
            ds.records().get(i).ok_or(Error::IndexOutOfRange {
                index: i,
                len: ds.len(),
            })
        })
        .collect()
}

/// `L = (1/2n) Σ (ln π(y_i|x_i) − ln π_ref(y_i|x_i) − t_i)²`.
fn log_ratio_regression(
    policy: &Policy,
    reference: &ReferencePolicy,
    records: &[&TripletRecord],
    targets: &[f64],
) -> ObjectiveOutput {
    let n = records.len() as f64;
    let mut cache = BatchCache::new(policy);
    let mut loss = 0.0;
    let mut residuals = Vec::with_capacity(records.len());
    for (record, &t) in records.iter().zip(targets) {
        let (x, y) = (record.prompt, record.response);
        let delta = cache.log_prob(x, y) - reference.log_prob_at(x, y) - t;
        loss += delta * delta;
        cache.add_log_prob_grad(x, y, delta / n);
        residuals.push(delta);
    }
    ObjectiveOutput {
        loss: loss / (2.0 * n),
        policy_grad: cache.into_param_grad(),
        value_grad: None,
        residuals,
    }
}

/// Reward-partitioning regression: targets `t_i = (r_i − V̂(x_i))/τ`, with
/// `V̂` held constant.
pub fn rpo_loss_and_grad(
    policy: &Policy,
    reference: &ReferencePolicy,
    ds: &TripletDataset,
    batch: &[usize],
    partition: &PartitionEstimate,
    tau: f64,
) -> Result<ObjectiveOutput> {
    check_tau(tau)?;
    partition.check(ds, tau)?;
    let records = batch_records(ds, batch)?;
    let targets = records
        .iter()
        .map(|r| {
            let v = partition.value(r.prompt).ok_or_else(|| {
                Error::MismatchedEstimate(format!("no estimate for prompt '{}'", r.prompt_id))
            })?;
            Ok((r.reward() - v) / tau)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(log_ratio_regression(policy, reference, &records, &targets))
}

/// The unnormalized ablation: targets `t_i = r_i/τ`.
pub fn rpo_nonorm_loss_and_grad(
    policy: &Policy,
    reference: &ReferencePolicy,
    ds: &TripletDataset,
    batch: &[usize],
    tau: f64,
) -> Result<ObjectiveOutput> {
    check_tau(tau)?;
    let records = batch_records(ds, batch)?;
    let targets: Vec<f64> = records.iter().map(|r| r.reward() / tau).collect();
    Ok(log_ratio_regression(policy, reference, &records, &targets))
}

/// Squared Bellman residual `(1/2n) Σ (r_i − v(x_i) − τ ln(π/π_ref))²`, with
/// gradients for both the policy and the value table.
pub fn dro_loss_and_grad(
    policy: &Policy,
    values: &ValueTable,
    reference: &ReferencePolicy,
    ds: &TripletDataset,
    batch: &[usize],
    tau: f64,
) -> Result<ObjectiveOutput> {
    check_tau(tau)?;
    if values.len() != policy.space().len() {
        return Err(Error::DimensionMismatch {
            expected: policy.space().len(),
            found: values.len(),
        });
    }
    let records = batch_records(ds, batch)?;
    let n = records.len() as f64;
    let mut cache = BatchCache::new(policy);
    let mut value_grad = vec![0.0; values.len()];
    let mut loss = 0.0;
    let mut residuals = Vec::with_capacity(records.len());
    for record in &records {
        let (x, y) = (record.prompt, record.response);
        let log_ratio = cache.log_prob(x, y) - reference.log_prob_at(x, y);
        let rho = record.reward() - values.values[x] - tau * log_ratio;
        loss += rho * rho;
        cache.add_log_prob_grad(x, y, -tau * rho / n);
        value_grad[x] -= rho / n;
        residuals.push(rho);
    }
    Ok(ObjectiveOutput {
        loss: loss / (2.0 * n),
        policy_grad: cache.into_param_grad(),
        value_grad: Some(value_grad),
        residuals,
    })
}

/// KTO with the reference point `z0(x) = KL(π(·|x) ‖ π_ref(·|x))` computed by
/// enumeration and treated as a constant.
pub fn kto_loss_and_grad(
    policy: &Policy,
    reference: &ReferencePolicy,
    ds: &TripletDataset,
    batch: &[usize],
    cfg: &KtoConfig,
) -> Result<ObjectiveOutput> {
    cfg.validate()?;
    let records = batch_records(ds, batch)?;
    let n = records.len() as f64;
    let mut cache = BatchCache::new(policy);
    let mut z0: Vec<Option<f64>> = vec![None; policy.space().len()];
    let mut loss = 0.0;
    let mut residuals = Vec::with_capacity(records.len());
    for record in &records {
        let (x, y) = (record.prompt, record.response);
        let reference_point = match z0[x] {
            Some(z) => z,
            None => {
                let z = kl_from_logs(&cache.row(x).0, reference.log_probs(x));
                z0[x] = Some(z);
                z
            }
        };
        let r_theta = cache.log_prob(x, y) - reference.log_prob_at(x, y);
        let desirable = record.reward() >= cfg.threshold;
        let (term, d_term) = if desirable {
            let s = sigmoid(cfg.beta * (r_theta - reference_point));
            (
                cfg.lambda_d - cfg.lambda_d * s,
                -cfg.lambda_d * cfg.beta * s * (1.0 - s),
            )
        } else {
            let s = sigmoid(cfg.beta * (reference_point - r_theta));
            (
                cfg.lambda_u - cfg.lambda_u * s,
                cfg.lambda_u * cfg.beta * s * (1.0 - s),
            )
        };
        loss += term;
        cache.add_log_prob_grad(x, y, d_term / n);
        residuals.push(term);
    }
    Ok(ObjectiveOutput {
        loss: loss / n,
        policy_grad: cache.into_param_grad(),
        value_grad: None,
        residuals,
    })
}

/// Negative log-likelihood over batch records with reward at or above `threshold`.
pub fn sft_loss_and_grad(
    policy: &Policy,
    ds: &TripletDataset,
    batch: &[usize],
    threshold: f64,
) -> Result<ObjectiveOutput> {
    let records: Vec<_> = batch_records(ds, batch)?
        .into_iter()
        .filter(|r| r.reward() >= threshold)
        .collect();
    if records.is_empty() {
        return Err(Error::NoQualifyingRecords { threshold });
    }
    let m = records.len() as f64;
    let mut cache = BatchCache::new(policy);
    let mut loss = 0.0;
    let mut residuals = Vec::with_capacity(records.len());
    for record in &records {
        let lp = cache.log_prob(record.prompt, record.response);
        loss -= lp;
        cache.add_log_prob_grad(record.prompt, record.response, -1.0 / m);
        residuals.push(-lp);
    }
    Ok(ObjectiveOutput {
        loss: loss / m,
        policy_grad: cache.into_param_grad(),
        value_grad: None,
        residuals,
    })
}
