//! Policy-quality metrics against the oracle, run comparisons, and CSV output.
//!
//! All expectations are exact sums over the finite space.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PromptSpace, TripletDataset};
use crate::error::{Error, Result};
use crate::objectives::Method;
use crate::oracle::{kl_from_logs, DuplicateRewards, OracleSolution, RewardTable};
use crate::policy::{Policy, ReferencePolicy};
use crate::trainer::TrainResult;

pub const METRICS_HEADER: &str =
    "step,method,tau,seed,loss,kl_ref,kl_opt,kl_opt_max,expected_reward,objective_J,lr,wall_ms";

/// `kl_opt_max` below which a run counts as converged in comparisons.
pub const CONVERGENCE_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub method: Method,
    pub tau: f64,
    pub seed: u64,
    pub loss: f64,
    /// Mean over prompts of `KL(π_θ ‖ π_ref)`.
    pub kl_ref: f64,
    /// Mean over prompts of `KL(π_θ ‖ π*)`.
    pub kl_opt: f64,
    pub kl_opt_max: f64,
    pub expected_reward: f64,
    /// `E[r] − τ · KL_ρ(π_θ ‖ π_ref)`.
    #[serde(rename = "objective_J")]
    pub objective_j: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Rewards and the matching oracle solution used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext {
    pub rewards: RewardTable,
    pub solution: OracleSolution,
}

impl EvalContext {
    /// Prompts whose rewards are incomplete are left out of every metric.
    pub fn new(reference: &ReferencePolicy, rewards: RewardTable, tau: f64) -> Result<Self> {
        let solution = OracleSolution::solve_covered(reference, &rewards, tau)?;
        if solution.covered().next().is_none() {
            return Err(Error::MismatchedOracle(
                "no prompt has a reward for every candidate".into(),
            ));
        }
        Ok(Self { rewards, solution })
    }

    /// Rewards taken from the dataset itself (last occurrence wins).
    pub fn from_dataset(
        ds: &TripletDataset,
        space: &PromptSpace,
        reference: &ReferencePolicy,
        tau: f64,
    ) -> Result<Self> {
        let rewards = RewardTable::from_dataset(ds, space, DuplicateRewards::LastWins)?;
        Self::new(reference, rewards, tau)
    }

    pub fn tau(&self) -> f64 {
        self.solution.tau()
    }

    /// True when some prompts are excluded for lack of rewards.
    pub fn is_partial(&self) -> bool {
        !self.solution.is_complete()
    }

    /// `J(π*) = Σ_x ρ(x) V*(x)` over evaluated prompts (ρ renormalized).
    pub fn optimal_objective(&self, space: &PromptSpace) -> f64 {
        let (num, den) = self.solution.covered().fold((0.0, 0.0), |(n, d), (x, s)| {
            let w = space.prompt(x).weight;
            (n + w * s.value, d + w)
        });
        num / den
    }
}

/// Step-dependent fields copied into a [`MetricsRow`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub step: u64,
    pub method: Method,
    pub seed: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn policy_metrics(
    policy: &Policy,
    reference: &ReferencePolicy,
    ctx: &EvalContext,
    step: &StepContext,
) -> Result<MetricsRow> {
    let space = policy.space();
    if ctx.solution.num_prompts() != space.len() || reference.space().len() != space.len() {
        return Err(Error::MismatchedOracle(
            "policy, reference and oracle cover different prompt spaces".into(),
        ));
    }
    let tau = ctx.tau();
    let (mut kl_ref, mut kl_opt, mut kl_opt_max) = (0.0, 0.0, 0.0_f64);
    let (mut reward_w, mut kl_ref_w, mut weight) = (0.0, 0.0, 0.0);
    let mut count = 0usize;
    for (x, sol) in ctx.solution.covered() {
        let log_probs = policy.log_probs(x);
        let to_ref = kl_from_logs(&log_probs, reference.log_probs(x));
        let to_opt = kl_from_logs(&log_probs, &sol.log_policy);
        let rewards = ctx.rewards.row(space, x)?;
        let expected: f64 = log_probs
            .iter()
            .zip(&rewards)
            .map(|(lp, r)| lp.exp() * r)
            .sum();
        let w = space.prompt(x).weight;
        kl_ref += to_ref;
        kl_opt += to_opt;
        kl_opt_max = kl_opt_max.max(to_opt);
        reward_w += w * expected;
        kl_ref_w += w * to_ref;
        weight += w;
        count += 1;
    }
    let n = count as f64;
    let expected_reward = reward_w / weight;
    Ok(MetricsRow {
        step: step.step,
        method: step.method,
        tau,
        seed: step.seed,
        loss: step.loss,
        kl_ref: kl_ref / n,
        kl_opt: kl_opt / n,
        kl_opt_max,
        expected_reward,
        objective_j: expected_reward - tau * kl_ref_w / weight,
        lr: step.lr,
        wall_ms: step.wall_ms,
    })
}

/// `Σ_x ρ(x) KL(π_θ(·|x) ‖ π*(·|x))` over evaluated prompts (ρ renormalized).
pub fn weighted_kl_to_optimum(policy: &Policy, ctx: &EvalContext) -> f64 {
    let space = policy.space();
    let (num, den) = ctx.solution.covered().fold((0.0, 0.0), |(n, d), (x, s)| {
        let w = space.prompt(x).weight;
        (n + w * kl_from_logs(&policy.log_probs(x), &s.log_policy), d + w)
    });
    num / den
}

/// Formats with 17 significant digits (`%.17g`), which round-trips any `f64`.
pub fn format_float(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..17).contains(&exp) {
        trim(&format!("{:.*}", (16 - exp) as usize, x))
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

fn parse_float(field: &str, line: usize) -> Result<f64> {
    field.parse().map_err(|_| Error::MalformedLine {
        line,
        message: format!("'{field}' is not a number"),
    })
}

fn parse_int(field: &str, line: usize) -> Result<u64> {
    field.parse().map_err(|_| Error::MalformedLine {
        line,
        message: format!("'{field}' is not an unsigned integer"),
    })
}

/// The metrics CSV as a string: exact header, LF line endings.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.method,
            format_float(r.tau),
            r.seed,
            format_float(r.loss),
            format_float(r.kl_ref),
            format_float(r.kl_opt),
            format_float(r.kl_opt_max),
            format_float(r.expected_reward),
            format_float(r.objective_j),
            format_float(r.lr),
            r.wall_ms
        );
    }
    out
}

pub fn emit_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Appends rows to a metrics CSV, writing the header first if the file is new.
pub fn append_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let exists = path.exists() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let text = metrics_csv(rows);
    let body = if exists {
        text.split_once('\n').map(|(_, b)| b).unwrap_or("")
    } else {
        text.as_str()
    };
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::SchemaMismatch(format!(
                "unexpected metrics header {:?}",
                other.unwrap_or("")
            )))
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let line = i + 2;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 12 {
                return Err(Error::MalformedLine {
                    line,
                    message: format!("expected 12 fields, found {}", f.len()),
                });
            }
            Ok(MetricsRow {
                step: parse_int(f[0], line)?,
                method: f[1].parse()?,
                tau: parse_float(f[2], line)?,
                seed: parse_int(f[3], line)?,
                loss: parse_float(f[4], line)?,
                kl_ref: parse_float(f[5], line)?,
                kl_opt: parse_float(f[6], line)?,
                kl_opt_max: parse_float(f[7], line)?,
                expected_reward: parse_float(f[8], line)?,
                objective_j: parse_float(f[9], line)?,
                lr: parse_float(f[10], line)?,
                wall_ms: parse_int(f[11], line)?,
            })
        })
        .collect()
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text)
}

/// One (method, τ) line of a run comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: Method,
    pub tau: f64,
    pub seeds: Vec<u64>,
    pub final_kl_opt_mean: f64,
    /// Population standard deviation across runs.
    pub final_kl_opt_std: f64,
    /// Mean first step with `kl_opt_max < CONVERGENCE_THRESHOLD`, if every run got there.
    pub steps_to_threshold: Option<f64>,
    pub reached: usize,
    pub final_objective_j: f64,
    /// Mean over prompts of `KL(π* ‖ π_ref)`.
    pub kl_opt_ref: f64,
}

/// First logged step with `kl_opt_max` below the threshold.
pub fn steps_to_threshold(rows: &[MetricsRow], threshold: f64) -> Option<u64> {
    rows.iter().find(|r| r.kl_opt_max < threshold).map(|r| r.step)
}

fn group_runs(results: &[TrainResult]) -> Result<BTreeMap<(Method, OrderedTau), Vec<&TrainResult>>> {
    if results.is_empty() {
        return Err(Error::SchemaMismatch("no runs to compare".into()));
    }
    let mut groups: BTreeMap<(Method, OrderedTau), Vec<&TrainResult>> = BTreeMap::new();
    for result in results {
        if result.rows.is_empty() {
            return Err(Error::SchemaMismatch(format!(
                "run {} (tau {}, seed {}) has no metric rows",
                result.config.method, result.config.tau, result.config.seed
            )));
        }
        groups
            .entry((result.config.method, OrderedTau(result.config.tau)))
            .or_default()
            .push(result);
    }
    Ok(groups)
}

#[derive(Debug, Clone, Copy)]
struct OrderedTau(f64);

impl PartialEq for OrderedTau {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0).is_eq()
    }
}
impl Eq for OrderedTau {}
impl PartialOrd for OrderedTau {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrderedTau {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Aggregates runs per (method, τ); rows are sorted by method token, then τ.
pub fn compare_runs(results: &[TrainResult]) -> Result<Vec<ComparisonRow>> {
    let groups = group_runs(results)?;
    let mut rows: Vec<ComparisonRow> = groups
        .into_iter()
        .map(|((method, tau), runs)| {
            let n = runs.len() as f64;
            let finals: Vec<&MetricsRow> =
                runs.iter().map(|r| r.rows.last().expect("non-empty")).collect();
            let mean = finals.iter().map(|r| r.kl_opt).sum::<f64>() / n;
            let var = finals.iter().map(|r| (r.kl_opt - mean).powi(2)).sum::<f64>() / n;
            let steps: Vec<u64> = runs
                .iter()
                .filter_map(|r| steps_to_threshold(&r.rows, CONVERGENCE_THRESHOLD))
                .collect();
            ComparisonRow {
                method,
                tau: tau.0,
                seeds: runs.iter().map(|r| r.config.seed).collect(),
                final_kl_opt_mean: mean,
                final_kl_opt_std: var.sqrt(),
                steps_to_threshold: (steps.len() == runs.len())
                    .then(|| steps.iter().sum::<u64>() as f64 / n),
                reached: steps.len(),
                final_objective_j: finals.iter().map(|r| r.objective_j).sum::<f64>() / n,
                kl_opt_ref: runs.iter().map(|r| r.oracle_kl_ref).sum::<f64>() / n,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.method
            .token()
            .cmp(b.method.token())
            .then(a.tau.total_cmp(&b.tau))
    });
    Ok(rows)
}

pub const COMPARISON_HEADER: &str = "method,tau,seeds,runs,final_kl_opt_mean,final_kl_opt_std,steps_to_threshold,reached,final_objective_J,kl_opt_ref";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    out.push_str(COMPARISON_HEADER);
    out.push('\n');
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method,
            format_float(r.tau),
            seeds.join(";"),
            r.seeds.len(),
            format_float(r.final_kl_opt_mean),
            format_float(r.final_kl_opt_std),
            r.steps_to_threshold
                .map(format_float)
                .unwrap_or_else(|| "not reached".into()),
            r.reached,
            format_float(r.final_objective_j),
            format_float(r.kl_opt_ref),
        );
    }
    out
}

pub fn emit_comparison_csv(rows: &[ComparisonRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, comparison_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SeriesIndex {
    series: Vec<SeriesEntry>,
}

#[derive(Serialize)]
struct SeriesEntry {
    method: String,
    tau: f64,
    path: String,
}

/// Writes one `step,kl_opt,loss` CSV per (method, τ), averaging runs with the
/// same steps, plus `index.json` listing the series. Returns written paths.
pub fn emit_plot_data(results: &[TrainResult], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let groups = group_runs(results)?;
    let mut written = Vec::new();
    let mut index = SeriesIndex { series: Vec::new() };
    for ((method, tau), runs) in groups {
        let steps: Vec<u64> = runs[0].rows.iter().map(|r| r.step).collect();
        if runs
            .iter()
            .any(|r| r.rows.iter().map(|m| m.step).ne(steps.iter().copied()))
        {
            return Err(Error::SchemaMismatch(format!(
                "runs of {method} at tau {} log different steps",
                tau.0
            )));
        }
        let n = runs.len() as f64;
        let mut text = String::from("step,kl_opt,loss\n");
        for (k, step) in steps.iter().enumerate() {
            let kl = runs.iter().map(|r| r.rows[k].kl_opt).sum::<f64>() / n;
            let loss = runs.iter().map(|r| r.rows[k].loss).sum::<f64>() / n;
            let _ = writeln!(text, "{step},{},{}", format_float(kl), format_float(loss));
        }
        let name = format!("{method}_tau{}.csv", tau.0);
        let path = dir.join(&name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        index.series.push(SeriesEntry {
            method: method.token().into(),
            tau: tau.0,
            path: name,
        });
    }
    let index_path = dir.join("index.json");
    let mut json = serde_json::to_string_pretty(&index).expect("index serializes");
    json.push('\n');
    fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
    written.push(index_path);
    Ok(written)
}
