//! Closed-form quantities of the KL-regularized reward maximization problem
//! over a finite candidate set.
//!
//! For a reference `π_ref`, rewards `r` and temperature `τ`:
//!
//! ```text
//! Z(x)      = Σ_y π_ref(y|x) exp(r(x,y)/τ)
//! V*(x)     = τ ln Z(x)
//! π*(y|x)   = π_ref(y|x) exp((r(x,y) − V*(x))/τ)
//! r(x,y)    = V*(x) + τ ln(π*(y|x)/π_ref(y|x))
//! ```
//!
//! Everything is evaluated in log space; `Z` is exponentiated only when asked for.

use crate::data::{PromptSpace, TripletDataset};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::policy::ReferencePolicy;

pub fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

/// How repeated (prompt, response) observations resolve to one reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DuplicateRewards {
    #[default]
    LastWins,
    /// Repeated pairs must carry identical rewards.
    Strict,
}

/// One reward per (prompt, candidate), possibly with gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    rewards: Vec<Vec<Option<f64>>>,
}

impl RewardTable {
    /// Collects training-unit rewards from a dataset.
    pub fn from_dataset(
        ds: &TripletDataset,
        space: &PromptSpace,
        duplicates: DuplicateRewards,
    ) -> Result<Self> {
        let mut rewards: Vec<Vec<Option<f64>>> = space
            .prompts()
            .iter()
            .map(|p| vec![None; p.responses.len()])
            .collect();
        for record in ds.records() {
            let (x, y) = space.resolve(&record.prompt_id, &record.response_id)?;
            let slot = &mut rewards[x][y];
            if let (DuplicateRewards::Strict, Some(first)) = (duplicates, *slot) {
                if first != record.reward() {
                    return Err(Error::ConflictingReward {
                        prompt: record.prompt_id.clone(),
                        response: record.response_id.clone(),
                        first,
                        second: record.reward(),
                    });
                }
            }
            *slot = Some(record.reward());
        }
        Ok(Self { rewards })
    }

    /// A complete table, indexed `[prompt][candidate]`.
    pub fn full(rewards: Vec<Vec<f64>>) -> Self {
        Self {
            rewards: rewards
                .into_iter()
                .map(|row| row.into_iter().map(Some).collect())
                .collect(),
        }
    }

    /// A complete raw table mapped into `ds`'s training units.
    pub fn from_raw_table(raw: &[Vec<f64>], ds: &TripletDataset) -> Self {
        Self::full(
            raw.iter()
                .map(|row| row.iter().map(|&r| ds.training_units(r)).collect())
                .collect(),
        )
    }

    pub fn num_prompts(&self) -> usize {
        self.rewards.len()
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.rewards.get(x).and_then(|row| row.get(y)).copied().flatten()
    }

    pub fn is_complete(&self, x: usize) -> bool {
        self.rewards[x].iter().all(Option::is_some)
    }

    pub fn is_fully_complete(&self) -> bool {
        (0..self.rewards.len()).all(|x| self.is_complete(x))
    }

    /// Adds `shift` to every reward of prompt `x`.
    pub fn shifted(&self, x: usize, shift: f64) -> Self {
        let mut copy = self.clone();
        copy.rewards[x]
            .iter_mut()
            .flatten()
            .for_each(|r| *r += shift);
        copy
    }

    /// The complete reward row of prompt `x`.
    pub fn row(&self, space: &PromptSpace, x: usize) -> Result<Vec<f64>> {
        self.rewards[x]
            .iter()
            .enumerate()
            .map(|(y, r)| {
                r.ok_or_else(|| Error::MissingReward {
                    prompt: space.prompt(x).id.clone(),
                    response: space.prompt(x).responses[y].clone(),
                })
            })
            .collect()
    }
}

fn check_shapes(reference: &ReferencePolicy, rewards: &RewardTable) -> Result<()> {
    let n = reference.space().len();
    if rewards.num_prompts() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: rewards.num_prompts(),
        });
    }
    Ok(())
}

/// `ln Z(x)` by prompt position.
pub fn log_partition_at(
    reference: &ReferencePolicy,
    rewards: &RewardTable,
    x: usize,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    check_shapes(reference, rewards)?;
    let row = rewards.row(reference.space(), x)?;
    let terms: Vec<f64> = reference
        .log_probs(x)
        .iter()
        .zip(&row)
        .map(|(lp, r)| lp + r / tau)
        .collect();
    Ok(log_sum_exp(&terms))
}

pub fn exact_partition(
    reference: &ReferencePolicy,
    rewards: &RewardTable,
    prompt_id: &str,
    tau: f64,
) -> Result<f64> {
    let x = reference.space().prompt_position(prompt_id)?;
    Ok(log_partition_at(reference, rewards, x, tau)?.exp())
}

pub fn soft_value(
    reference: &ReferencePolicy,
    rewards: &RewardTable,
    prompt_id: &str,
    tau: f64,
) -> Result<f64> {
    let x = reference.space().prompt_position(prompt_id)?;
    Ok(tau * log_partition_at(reference, rewards, x, tau)?)
}

fn optimal_at(reference: &ReferencePolicy, row: &[f64], log_z: f64, x: usize, tau: f64) -> Vec<f64> {
    reference
        .log_probs(x)
        .iter()
        .zip(row)
        .map(|(lp, r)| (lp + r / tau - log_z).exp())
        .collect()
}

pub fn optimal_policy(
    reference: &ReferencePolicy,
    rewards: &RewardTable,
    prompt_id: &str,
    tau: f64,
) -> Result<Vec<f64>> {
    let x = reference.space().prompt_position(prompt_id)?;
    let log_z = log_partition_at(reference, rewards, x, tau)?;
    let row = rewards.row(reference.space(), x)?;
    Ok(optimal_at(reference, &row, log_z, x, tau))
}

/// `KL(p ‖ q) = Σ p ln(p/q)` with `0 ln 0 = 0`.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    if let Some(k) = q.iter().position(|&v| v <= 0.0) {
        return Err(Error::ZeroProbability(k));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum())
}

/// KL between two distributions given as log-probabilities; exact even when
/// some probabilities underflow.
pub fn kl_from_logs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p > 0.0 {
                p * (lp - lq)
            } else {
                0.0
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSolution {
    pub log_partition: f64,
    pub value: f64,
    pub policy: Vec<f64>,
    pub log_policy: Vec<f64>,
}

impl PromptSolution {
    pub fn partition(&self) -> f64 {
        self.log_partition.exp()
    }
}

/// Per-prompt `Z`, `V*` and `π*` for one `(π_ref, r, τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    tau: f64,
    prompts: Vec<Option<PromptSolution>>,
}

impl OracleSolution {
    /// Solves every prompt; fails if any candidate lacks a reward.
    pub fn solve(reference: &ReferencePolicy, rewards: &RewardTable, tau: f64) -> Result<Self> {
        let sol = Self::solve_covered(reference, rewards, tau)?;
        if let Some(x) = sol.prompts.iter().position(Option::is_none) {
            rewards.row(reference.space(), x)?;
        }
        Ok(sol)
    }

    /// Solves the prompts whose rewards are complete; the rest are `None`.
    pub fn solve_covered(
        reference: &ReferencePolicy,
        rewards: &RewardTable,
        tau: f64,
    ) -> Result<Self> {
        check_tau(tau)?;
        check_shapes(reference, rewards)?;
        let prompts = (0..rewards.num_prompts())
            .map(|x| {
                if !rewards.is_complete(x) {
                    return Ok(None);
                }
                let row = rewards.row(reference.space(), x)?;
                let log_z = log_partition_at(reference, rewards, x, tau)?;
                let log_policy: Vec<f64> = reference
                    .log_probs(x)
                    .iter()
                    .zip(&row)
                    .map(|(lp, r)| lp + r / tau - log_z)
                    .collect();
                Ok(Some(PromptSolution {
                    log_partition: log_z,
                    value: tau * log_z,
                    policy: optimal_at(reference, &row, log_z, x, tau),
                    log_policy,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tau, prompts })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn prompt(&self, x: usize) -> Option<&PromptSolution> {
        self.prompts.get(x).and_then(Option::as_ref)
    }

    pub fn covered(&self) -> impl Iterator<Item = (usize, &PromptSolution)> {
        self.prompts
            .iter()
            .enumerate()
            .filter_map(|(x, s)| s.as_ref().map(|s| (x, s)))
    }

    pub fn is_complete(&self) -> bool {
        self.prompts.iter().all(Option::is_some)
    }

    /// Mean over solved prompts of `KL(π* ‖ π_ref)`.
    pub fn mean_kl_to_reference(&self, reference: &ReferencePolicy) -> f64 {
        let (sum, n) = self.covered().fold((0.0, 0usize), |(s, n), (x, sol)| {
            (s + kl_from_logs(&sol.log_policy, reference.log_probs(x)), n + 1)
        });
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// `r(x,y) − V*(x) − τ ln(π*(y|x)/π_ref(y|x))`, zero up to rounding.
pub fn identity_residual(
    rewards: &RewardTable,
    solution: &OracleSolution,
    reference: &ReferencePolicy,
    tau: f64,
    prompt_id: &str,
    response_id: &str,
) -> Result<f64> {
    check_tau(tau)?;
    if solution.tau() != tau {
        return Err(Error::MismatchedOracle(format!(
            "solution built at tau = {}, queried at tau = {tau}",
            solution.tau()
        )));
    }
    if solution.num_prompts() != reference.space().len() {
        return Err(Error::MismatchedOracle(
            "solution and reference cover different prompt spaces".into(),
        ));
    }
    let (x, y) = reference.space().resolve(prompt_id, response_id)?;
    let r = rewards.get(x, y).ok_or_else(|| Error::MissingReward {
        prompt: prompt_id.to_string(),
        response: response_id.to_string(),
    })?;
    let sol = solution
        .prompt(x)
        .ok_or_else(|| Error::MismatchedOracle(format!("prompt '{prompt_id}' was not solved")))?;
    Ok(r - sol.value - tau * (sol.log_policy[y] - reference.log_prob_at(x, y)))
}

/// Central differences `(f(p + h e_k) − f(p − h e_k)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut point = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        point[k] = params[k] + step;
        let plus = loss(&point);
        point[k] = params[k] - step;
        let minus = loss(&point);
        point[k] = params[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteEvaluation);
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Prompt;
    use crate::policy::{Policy, PolicyKind};
    use std::sync::Arc;

    fn two_candidate() -> (ReferencePolicy, RewardTable) {
        let space = Arc::new(
            PromptSpace::new(vec![Prompt {
                id: "x".into(),
                responses: vec!["y1".into(), "y2".into()],
                weight: 1.0,
                features: None,
            }])
            .unwrap(),
        );
        (
            ReferencePolicy::uniform(space, PolicyKind::Tabular).unwrap(),
            RewardTable::full(vec![vec![1.0, 0.0]]),
        )
    }

    // (e + 1)/2, ln((e + 1)/2), e/(e + 1)
    const Z_EX: f64 = 1.859_140_914_229_522_5;
    const V_EX: f64 = 0.620_114_506_958_277_5;
    const SIGMA1: f64 = 0.731_058_578_630_004_9;

    #[test]
    fn partition_worked_example() {
        let (r, rw) = two_candidate();
        assert!((exact_partition(&r, &rw, "x", 1.0).unwrap() - Z_EX).abs() < 1e-12);
        assert!((soft_value(&r, &rw, "x", 1.0).unwrap() - V_EX).abs() < 1e-12);
        let pi = optimal_policy(&r, &rw, "x", 1.0).unwrap();
        assert!((pi[0] - SIGMA1).abs() < 1e-12);
        assert!((pi[1] - (1.0 - SIGMA1)).abs() < 1e-12);
    }

    #[test]
    fn constant_rewards() {
        let (r, _) = two_candidate();
        let c = 0.7;
        let rw = RewardTable::full(vec![vec![c, c]]);
        for tau in [0.1, 1.0, 5.0] {
            let z = exact_partition(&r, &rw, "x", tau).unwrap();
            assert!((z - (c / tau).exp()).abs() < 1e-12 * z);
            assert!((soft_value(&r, &rw, "x", tau).unwrap() - c).abs() < 1e-12);
            let pi = optimal_policy(&r, &rw, "x", tau).unwrap();
            assert!(pi.iter().all(|p| (p - 0.5).abs() < 1e-15));
        }
        let zero = RewardTable::full(vec![vec![0.0, 0.0]]);
        assert_eq!(exact_partition(&r, &zero, "x", 1.0).unwrap(), 1.0);
    }

    #[test]
    fn large_ratio_is_finite() {
        let (r, _) = two_candidate();
        let rw = RewardTable::full(vec![vec![1.0, -1.0]]);
        let v = soft_value(&r, &rw, "x", 1e-4).unwrap();
        assert!(v.is_finite());
        assert!((v - (1.0 - 1e-4 * std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn high_temperature_approaches_reference() {
        let (r, _) = two_candidate();
        let rw = RewardTable::full(vec![vec![1.0, -1.0]]);
        let pi = optimal_policy(&r, &rw, "x", 1000.0).unwrap();
        let dist = pi.iter().map(|p| (p - 0.5).abs()).fold(0.0, f64::max);
        assert!(dist < 2e-3, "{dist}");
    }

    #[test]
    fn errors() {
        let (r, rw) = two_candidate();
        assert!(matches!(
            exact_partition(&r, &rw, "x", 0.0),
            Err(Error::InvalidTemperature(_))
        ));
        let space = r.space().clone();
        let ds = TripletDataset::from_triplets(&space, [("x", "y1", 1.0)]).unwrap();
        let partial = RewardTable::from_dataset(&ds, &space, DuplicateRewards::LastWins).unwrap();
        assert!(matches!(
            exact_partition(&r, &partial, "x", 1.0),
            Err(Error::MissingReward { .. })
        ));
    }

    #[test]
    fn strict_duplicates() {
        let (r, _) = two_candidate();
        let space = r.space().clone();
        let ds =
            TripletDataset::from_triplets(&space, [("x", "y1", 1.0), ("x", "y1", 2.0)]).unwrap();
        let last = RewardTable::from_dataset(&ds, &space, DuplicateRewards::LastWins).unwrap();
        assert_eq!(last.get(0, 0), Some(2.0));
        assert!(matches!(
            RewardTable::from_dataset(&ds, &space, DuplicateRewards::Strict),
            Err(Error::ConflictingReward { .. })
        ));
    }

    #[test]
    fn kl_values() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(exact_kl(&p, &p).unwrap(), 0.0);
        assert!((exact_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // σ(1) ln(2σ(1)) + (1 − σ(1)) ln(2(1 − σ(1))) = 0.11094407167172735
        let kl = exact_kl(&[SIGMA1, 1.0 - SIGMA1], &[0.5, 0.5]).unwrap();
        assert!((kl - 0.110_944_071_671_727_35).abs() < 1e-12);
        assert!(matches!(
            exact_kl(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::ZeroProbability(1))
        ));
        assert!(matches!(
            exact_kl(&[1.0], &[0.5, 0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn residual_worked_example() {
        let (r, rw) = two_candidate();
        let sol = OracleSolution::solve(&r, &rw, 1.0).unwrap();
        let res = identity_residual(&rw, &sol, &r, 1.0, "x", "y1").unwrap();
        assert!(res.abs() < 1e-12);
        assert!(matches!(
            identity_residual(&rw, &sol, &r, 2.0, "x", "y1"),
            Err(Error::MismatchedOracle(_))
        ));
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|p| p.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        let g = finite_diff_grad(log_sum_exp, &[0.0, 0.0], 1e-5).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-8 && (g[1] - 0.5).abs() < 1e-8);
        assert!(matches!(
            finite_diff_grad(|p| 1.0 / p[0], &[0.0], 1.0),
            Ok(g) if g == vec![1.0]
        ));
        assert!(matches!(
            finite_diff_grad(|p| p[0], &[0.0], 0.0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            finite_diff_grad(|p| if p[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-5),
            Err(Error::NonFiniteEvaluation)
        ));
    }

    #[test]
    fn solution_sums_to_one() {
        let space = Arc::new(
            PromptSpace::new(
                (0..3)
                    .map(|i| Prompt {
                        id: format!("p{i}"),
                        responses: (0..5).map(|j| format!("y{j}")).collect(),
                        weight: 1.0,
                        features: None,
                    })
                    .collect(),
            )
            .unwrap(),
        );
        let r = ReferencePolicy::new(
            Policy::seeded_random(space, PolicyKind::Tabular, 2).unwrap(),
        )
        .unwrap();
        let rw = RewardTable::full(vec![vec![0.3, -1.0, 2.0, 0.0, 0.5]; 3]);
        let sol = OracleSolution::solve(&r, &rw, 0.1).unwrap();
        for (_, s) in sol.covered() {
            assert!((s.policy.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((s.value - 0.1 * s.partition().ln()).abs() < 1e-12);
        }
    }
}
