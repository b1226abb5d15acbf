//! Softmax policies over each prompt's candidate set.
//!
//! Two classes share one flat parameter vector:
//!
//! * tabular: one free logit per (prompt, candidate), rows laid out in
//!   prompt order;
//! * featurized: a one-hidden-layer tanh network scoring each candidate's
//!   feature vector, `s(x, y) = w2 · tanh(W1 φ(x, y) + b1) + b2`, laid out
//!   as `W1` (row-major, `hidden × d`), `b1`, `w2`, `b2`.
//!
//! Probabilities are never clamped. Max-shifted log-sum-exp is the only
//! stabilization, so gradients stay exact.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::PromptSpace;
use crate::error::{Error, Result};
use crate::math::{log_softmax, softmax};
use crate::rng::seeded_rng;

/// Policy class tag with the featurized network's hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Tabular,
    Featurized { hidden: usize },
}

/// The bare class tag, as used on the command line and in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyClass {
    Tabular,
    Featurized,
}

impl PolicyClass {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyClass::Tabular => "tabular",
            PolicyClass::Featurized => "featurized",
        }
    }
}

impl fmt::Display for PolicyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(PolicyClass::Tabular),
            "featurized" => Ok(PolicyClass::Featurized),
            other => Err(Error::InvalidConfig(format!(
                "unknown policy class '{other}' (expected tabular or featurized)"
            ))),
        }
    }
}

impl PolicyKind {
    pub fn class(self) -> PolicyClass {
        match self {
            PolicyKind::Tabular => PolicyClass::Tabular,
            PolicyKind::Featurized { .. } => PolicyClass::Featurized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    CopyReference,
    Zeros,
    SeededRandom,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy-reference" => Ok(InitMode::CopyReference),
            "zeros" => Ok(InitMode::Zeros),
            "seeded-random" => Ok(InitMode::SeededRandom),
            other => Err(Error::InvalidConfig(format!(
                "unknown init mode '{other}' (expected copy-reference, zeros or seeded-random)"
            ))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::CopyReference => "copy-reference",
            InitMode::Zeros => "zeros",
            InitMode::SeededRandom => "seeded-random",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    space: Arc<PromptSpace>,
    kind: PolicyKind,
    params: Vec<f64>,
    /// Tabular row offsets (`len = prompts + 1`); empty for featurized.
    offsets: Vec<usize>,
}

fn parameter_count(space: &PromptSpace, kind: PolicyKind) -> Result<usize> {
    match kind {
        PolicyKind::Tabular => Ok(space.total_candidates()),
        PolicyKind::Featurized { hidden } => {
            let d = space.feature_dim().ok_or(Error::MissingFeatures)?;
            if hidden == 0 {
                return Err(Error::InvalidConfig("hidden width must be >= 1".into()));
            }
            Ok(hidden * d + 2 * hidden + 1)
        }
    }
}

impl Policy {
    pub fn from_params(space: Arc<PromptSpace>, kind: PolicyKind, params: Vec<f64>) -> Result<Self> {
        let expected = parameter_count(&space, kind)?;
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: params.len(),
            });
        }
        if let Some(k) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig(format!("parameter {k} is not finite")));
        }
        let offsets = match kind {
            PolicyKind::Tabular => std::iter::once(0)
                .chain(space.prompts().iter().scan(0, |acc, p| {
                    *acc += p.responses.len();
                    Some(*acc)
                }))
                .collect(),
            PolicyKind::Featurized { .. } => Vec::new(),
        };
        Ok(Self {
            space,
            kind,
            params,
            offsets,
        })
    }

    /// Uniform policy (all parameters zero).
    pub fn zeros(space: Arc<PromptSpace>, kind: PolicyKind) -> Result<Self> {
        let n = parameter_count(&space, kind)?;
        Self::from_params(space, kind, vec![0.0; n])
    }

    /// Tabular logits: standard normal. Featurized: `W1 ~ N(0, 1/d)`,
    /// `b1 ~ N(0, 1)`, `w2 ~ N(0, 1/hidden)`, `b2 ~ N(0, 1)`.
    pub fn seeded_random(space: Arc<PromptSpace>, kind: PolicyKind, seed: u64) -> Result<Self> {
        let n = parameter_count(&space, kind)?;
        let mut rng = seeded_rng(seed);
        let mut params: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        if let PolicyKind::Featurized { hidden } = kind {
            let d = space.feature_dim().expect("checked by parameter_count");
            let (w1, rest) = params.split_at_mut(hidden * d);
            w1.iter_mut().for_each(|w| *w /= (d as f64).sqrt());
            rest[hidden..2 * hidden]
                .iter_mut()
                .for_each(|w| *w /= (hidden as f64).sqrt());
        }
        Self::from_params(space, kind, params)
    }

    /// Tabular policy from explicit per-prompt logits.
    pub fn tabular(space: Arc<PromptSpace>, logits: Vec<Vec<f64>>) -> Result<Self> {
        if logits.len() != space.len() {
            return Err(Error::DimensionMismatch {
                expected: space.len(),
                found: logits.len(),
            });
        }
        for (x, row) in logits.iter().enumerate() {
            if row.len() != space.num_candidates(x) {
                return Err(Error::DimensionMismatch {
                    expected: space.num_candidates(x),
                    found: row.len(),
                });
            }
        }
        Self::from_params(space, PolicyKind::Tabular, logits.concat())
    }

    pub fn space(&self) -> &Arc<PromptSpace> {
        &self.space
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn class(&self) -> PolicyClass {
        self.kind.class()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                found: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// A copy with different parameters of the same shape.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut copy = self.clone();
        copy.set_params(params)?;
        Ok(copy)
    }

    /// Tabular logits of one prompt.
    pub fn logits_row(&self, x: usize) -> Option<&[f64]> {
        match self.kind {
            PolicyKind::Tabular => Some(&self.params[self.offsets[x]..self.offsets[x + 1]]),
            PolicyKind::Featurized { .. } => None,
        }
    }

    /// Tabular logits as nested rows, or the featurized blocks
    /// `[W1 rows.., b1, w2, [b2]]`.
    pub fn nested_params(&self) -> Vec<Vec<f64>> {
        match self.kind {
            PolicyKind::Tabular => (0..self.space.len())
                .map(|x| self.logits_row(x).expect("tabular").to_vec())
                .collect(),
            PolicyKind::Featurized { hidden } => {
                let d = self.feature_dim();
                let mut nested: Vec<Vec<f64>> = self.params[..hidden * d]
                    .chunks(d)
                    .map(<[f64]>::to_vec)
                    .collect();
                let rest = &self.params[hidden * d..];
                nested.push(rest[..hidden].to_vec());
                nested.push(rest[hidden..2 * hidden].to_vec());
                nested.push(vec![rest[2 * hidden]]);
                nested
            }
        }
    }

    /// Inverse of [`Policy::nested_params`].
    pub fn from_nested(
        space: Arc<PromptSpace>,
        kind: PolicyKind,
        nested: &[Vec<f64>],
    ) -> Result<Self> {
        if let PolicyKind::Tabular = kind {
            return Self::tabular(space, nested.to_vec());
        }
        let PolicyKind::Featurized { hidden } = kind else {
            unreachable!()
        };
        let d = space.feature_dim().ok_or(Error::MissingFeatures)?;
        let shape_ok = nested.len() == hidden + 3
            && nested[..hidden].iter().all(|row| row.len() == d)
            && nested[hidden].len() == hidden
            && nested[hidden + 1].len() == hidden
            && nested[hidden + 2].len() == 1;
        if !shape_ok {
            return Err(Error::MalformedDocument(format!(
                "featurized parameters do not match hidden width {hidden} and feature dimension {d}"
            )));
        }
        Self::from_params(space, kind, nested.concat())
    }

    fn feature_dim(&self) -> usize {
        self.space.feature_dim().unwrap_or(0)
    }

    fn hidden_activations(&self, hidden: usize, phi: &[f64]) -> Vec<f64> {
        let d = phi.len();
        let (w1, rest) = self.params.split_at(hidden * d);
        let b1 = &rest[..hidden];
        w1.chunks(d)
            .zip(b1)
            .map(|(row, b)| (row.iter().zip(phi).map(|(w, p)| w * p).sum::<f64>() + b).tanh())
            .collect()
    }

    /// Unnormalized candidate scores `z(·|x)`.
    pub fn scores(&self, x: usize) -> Vec<f64> {
        match self.kind {
            PolicyKind::Tabular => self.logits_row(x).expect("tabular").to_vec(),
            PolicyKind::Featurized { hidden } => {
                let d = self.feature_dim();
                let rest = &self.params[hidden * d..];
                let w2 = &rest[hidden..2 * hidden];
                let b2 = rest[2 * hidden];
                (0..self.space.num_candidates(x))
                    .map(|y| {
                        let phi = self.space.features(x, y).expect("featurized space");
                        let h = self.hidden_activations(hidden, phi);
                        h.iter().zip(w2).map(|(a, w)| a * w).sum::<f64>() + b2
                    })
                    .collect()
            }
        }
    }

    /// `π(·|x)` by prompt position.
    pub fn distribution(&self, x: usize) -> Vec<f64> {
        softmax(&self.scores(x))
    }

    /// `ln π(·|x)` by prompt position.
    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        log_softmax(&self.scores(x))
    }

    pub fn log_prob_at(&self, x: usize, y: usize) -> f64 {
        self.log_probs(x)[y]
    }

    pub fn action_distribution(&self, prompt_id: &str) -> Result<Vec<f64>> {
        Ok(self.distribution(self.space.prompt_position(prompt_id)?))
    }

    pub fn log_prob(&self, prompt_id: &str, response_id: &str) -> Result<f64> {
        let (x, y) = self.space.resolve(prompt_id, response_id)?;
        Ok(self.log_prob_at(x, y))
    }

    /// `∂ ln π(y_i|x) / ∂ z(y|x) = 1{y = y_i} − π(y|x)` over the candidates of `x`.
    pub fn logit_grad_log_prob(&self, prompt_id: &str, response_id: &str) -> Result<Vec<f64>> {
        let (x, y) = self.space.resolve(prompt_id, response_id)?;
        Ok(self.logit_grad_at(x, y))
    }

    pub fn logit_grad_at(&self, x: usize, y_i: usize) -> Vec<f64> {
        let mut grad = self.distribution(x);
        grad.iter_mut().for_each(|g| *g = -*g);
        grad[y_i] += 1.0;
        grad
    }

    /// Gradient of `ln π(y_i|x)` over every parameter.
    pub fn param_grad_log_prob(&self, prompt_id: &str, response_id: &str) -> Result<Vec<f64>> {
        let (x, y) = self.space.resolve(prompt_id, response_id)?;
        Ok(self.param_grad_at(x, y))
    }

    pub fn param_grad_at(&self, x: usize, y_i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.params.len()];
        self.backprop_scores(x, &self.logit_grad_at(x, y_i), &mut out);
        out
    }

    /// Accumulates `Σ_y score_grads[y] · ∂z(y|x)/∂θ` into `out`.
    pub fn backprop_scores(&self, x: usize, score_grads: &[f64], out: &mut [f64]) {
        debug_assert_eq!(score_grads.len(), self.space.num_candidates(x));
        debug_assert_eq!(out.len(), self.params.len());
        match self.kind {
            PolicyKind::Tabular => {
                let row = &mut out[self.offsets[x]..self.offsets[x + 1]];
                row.iter_mut().zip(score_grads).for_each(|(o, g)| *o += g);
            }
            PolicyKind::Featurized { hidden } => {
                let d = self.feature_dim();
                let w2: Vec<f64> = self.params[hidden * d + hidden..hidden * d + 2 * hidden].to_vec();
                let (g_w1, g_rest) = out.split_at_mut(hidden * d);
                let (g_b1, g_rest) = g_rest.split_at_mut(hidden);
                let (g_w2, g_b2) = g_rest.split_at_mut(hidden);
                for (y, &ds) in score_grads.iter().enumerate() {
                    if ds == 0.0 {
                        continue;
                    }
                    let phi = self.space.features(x, y).expect("featurized space");
                    let h = self.hidden_activations(hidden, phi);
                    g_b2[0] += ds;
                    for j in 0..hidden {
                        g_w2[j] += ds * h[j];
                        let da = ds * w2[j] * (1.0 - h[j] * h[j]);
                        g_b1[j] += da;
                        g_w1[j * d..(j + 1) * d]
                            .iter_mut()
                            .zip(phi)
                            .for_each(|(g, p)| *g += da * p);
                    }
                }
            }
        }
    }
}

/// A frozen policy with strictly positive support on every candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy {
    policy: Policy,
    log_probs: Vec<Vec<f64>>,
}

impl ReferencePolicy {
    pub fn new(policy: Policy) -> Result<Self> {
        let space = policy.space().clone();
        let log_probs: Vec<Vec<f64>> = (0..space.len()).map(|x| policy.log_probs(x)).collect();
        for (x, row) in log_probs.iter().enumerate() {
            if let Some(y) = row.iter().position(|lp| lp.exp() <= 0.0 || lp.is_nan()) {
                let prompt = space.prompt(x);
                return Err(Error::ZeroReferenceProbability {
                    prompt: prompt.id.clone(),
                    response: prompt.responses[y].clone(),
                });
            }
        }
        Ok(Self { policy, log_probs })
    }

    pub fn uniform(space: Arc<PromptSpace>, kind: PolicyKind) -> Result<Self> {
        Self::new(Policy::zeros(space, kind)?)
    }

    pub fn seeded_random(space: Arc<PromptSpace>, kind: PolicyKind, seed: u64) -> Result<Self> {
        Self::new(Policy::seeded_random(space, kind, seed)?)
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn space(&self) -> &Arc<PromptSpace> {
        self.policy.space()
    }

    pub fn log_probs(&self, x: usize) -> &[f64] {
        &self.log_probs[x]
    }

    pub fn log_prob_at(&self, x: usize, y: usize) -> f64 {
        self.log_probs[x][y]
    }

    pub fn distribution(&self, x: usize) -> Vec<f64> {
        self.log_probs[x].iter().map(|lp| lp.exp()).collect()
    }
}

/// Builds the trainable policy.
pub fn init_policy(
    kind: PolicyKind,
    space: Arc<PromptSpace>,
    mode: InitMode,
    reference: &ReferencePolicy,
    seed: u64,
) -> Result<Policy> {
    if kind.class() == PolicyClass::Featurized && space.feature_dim().is_none() {
        return Err(Error::MissingFeatures);
    }
    match mode {
        InitMode::Zeros => Policy::zeros(space, kind),
        InitMode::SeededRandom => Policy::seeded_random(space, kind, seed),
        InitMode::CopyReference => {
            let ref_kind = reference.policy().kind();
            if ref_kind != kind {
                return Err(Error::ClassMismatch {
                    expected: kind.class().as_str(),
                    found: ref_kind.class().as_str(),
                });
            }
            Policy::from_params(space, kind, reference.policy().params().to_vec())
        }
    }
}
