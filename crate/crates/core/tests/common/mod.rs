#![allow(dead_code)]

//! Shared fixtures and from-scratch reference implementations of every loss.
//! Nothing here calls into the objectives module, so the gradient suite
//! compares two independent computations.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rpolab_core::objectives::{
    dro_loss_and_grad, kto_loss_and_grad, rpo_loss_and_grad, rpo_nonorm_loss_and_grad,
    sft_loss_and_grad,
};
use rpolab_core::{
    generate_synthetic, KtoConfig, Method, PartitionEstimate, PartitionMode, Policy, PolicyKind,
    PromptSpace, ReferencePolicy, RewardLaw, SyntheticConfig, TripletDataset, ValueTable,
};

/// The 8 × 6 environment: standard-normal rewards, full coverage,
/// seeded-random tabular reference, standardized rewards.
pub fn reference_env(seed: u64) -> (Arc<PromptSpace>, TripletDataset, ReferencePolicy) {
    let env = generate_synthetic(&SyntheticConfig::default(), seed).unwrap();
    let space = Arc::new(env.space);
    let reference =
        ReferencePolicy::seeded_random(space.clone(), PolicyKind::Tabular, seed + 10_000).unwrap();
    let ds = env.dataset.standardize_rewards().unwrap();
    (space, ds, reference)
}

/// Log-softmax written out longhand.
fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = scores.iter().map(|z| (z - m).exp()).sum();
    scores.iter().map(|z| z - m - s.ln()).collect()
}

/// `ln π(·|x)` computed directly from a flat parameter vector.
pub fn naive_log_probs(space: &PromptSpace, kind: PolicyKind, params: &[f64], x: usize) -> Vec<f64> {
    let scores: Vec<f64> = match kind {
        PolicyKind::Tabular => {
            let start: usize = (0..x).map(|p| space.num_candidates(p)).sum();
            params[start..start + space.num_candidates(x)].to_vec()
        }
        PolicyKind::Featurized { hidden } => {
            let d = space.feature_dim().unwrap();
            let w1 = &params[..hidden * d];
            let b1 = &params[hidden * d..hidden * d + hidden];
            let w2 = &params[hidden * d + hidden..hidden * d + 2 * hidden];
            let b2 = params[hidden * d + 2 * hidden];
            (0..space.num_candidates(x))
                .map(|y| {
                    let phi = space.features(x, y).unwrap();
                    let mut s = b2;
                    for k in 0..hidden {
                        let mut a = b1[k];
                        for j in 0..d {
                            a += w1[k * d + j] * phi[j];
                        }
                        s += w2[k] * a.tanh();
                    }
                    s
                })
                .collect()
        }
    };
    log_softmax(&scores)
}

/// One randomized point at which gradients are checked.
pub struct GradState {
    pub space: Arc<PromptSpace>,
    pub ds: TripletDataset,
    pub reference: ReferencePolicy,
    pub policy: Policy,
    pub values: Vec<f64>,
    pub tau: f64,
    pub kto: KtoConfig,
    pub sft_threshold: f64,
    pub batch: Vec<usize>,
}

impl GradState {
    /// A small featurized environment with partial coverage and duplicated
    /// records, a random reference of the requested class, random policy
    /// parameters, values, temperature, KTO settings and batch.
    pub fn random(seed: u64, featurized: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SyntheticConfig {
            prompts: rng.random_range(2..=4),
            responses: rng.random_range(2..=5),
            reward_law: RewardLaw::FeatureLinear { noise: 0.3 },
            feature_dim: 3,
            coverage: 0.75,
            duplication: 2,
        };
        let env = generate_synthetic(&cfg, seed).unwrap();
        let space = Arc::new(env.space);
        let kind = if featurized {
            PolicyKind::Featurized { hidden: 4 }
        } else {
            PolicyKind::Tabular
        };
        let reference = ReferencePolicy::seeded_random(space.clone(), kind, seed + 1).unwrap();
        let policy = Policy::seeded_random(space.clone(), kind, seed + 2).unwrap();
        let ds = env.dataset.standardize_rewards().unwrap();
        let values = (0..space.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let batch_len = rng.random_range(1..=ds.len());
        let batch = (0..batch_len).map(|_| rng.random_range(0..ds.len())).collect();
        Self {
            space,
            ds,
            reference,
            policy,
            values,
            tau: rng.random_range(0.2..3.0),
            kto: KtoConfig {
                beta: rng.random_range(0.1..2.0),
                lambda_d: rng.random_range(0.5..1.5),
                lambda_u: rng.random_range(0.5..1.5),
                threshold: 0.0,
            },
            sft_threshold: -0.5,
            batch,
        }
    }

    fn log_probs_at(&self, params: &[f64], x: usize) -> Vec<f64> {
        naive_log_probs(&self.space, self.policy.kind(), params, x)
    }

    /// The flat point whose gradient is checked: policy parameters, then the
    /// value table for DRO.
    pub fn point(&self, method: Method) -> Vec<f64> {
        let mut p = self.policy.params().to_vec();
        if method == Method::Dro {
            p.extend_from_slice(&self.values);
        }
        p
    }

    /// The loss recomputed from scratch at `point`. KTO's reference point is
    /// held at the unperturbed parameters, like the analytic gradient.
    pub fn naive_loss(&self, method: Method, point: &[f64]) -> f64 {
        let np = self.policy.num_params();
        let params = &point[..np];
        let tau = self.tau;
        let records: Vec<_> = self.batch.iter().map(|&i| self.ds.record(i)).collect();
        let ref_lp = |x: usize, y: usize| self.reference.log_probs(x)[y];
        let log_ratio = |x: usize, y: usize| self.log_probs_at(params, x)[y] - ref_lp(x, y);
        let n = records.len() as f64;
        match method {
            Method::Rpo => {
                let mut z_hat = vec![0.0; self.space.len()];
                for r in self.ds.records() {
                    z_hat[r.prompt] += (ref_lp(r.prompt, r.response) + r.reward() / tau).exp();
                }
                records
                    .iter()
                    .map(|r| {
                        let v_hat = tau * z_hat[r.prompt].ln();
                        let d = log_ratio(r.prompt, r.response) - (r.reward() - v_hat) / tau;
                        d * d
                    })
                    .sum::<f64>()
                    / (2.0 * n)
            }
            Method::RpoNoNorm => {
                records
                    .iter()
                    .map(|r| {
                        let d = log_ratio(r.prompt, r.response) - r.reward() / tau;
                        d * d
                    })
                    .sum::<f64>()
                    / (2.0 * n)
            }
            Method::Dro => {
                let values = &point[np..];
                records
                    .iter()
                    .map(|r| {
                        let rho =
                            r.reward() - values[r.prompt] - tau * log_ratio(r.prompt, r.response);
                        rho * rho
                    })
                    .sum::<f64>()
                    / (2.0 * n)
            }
            Method::Kto => {
                let cfg = &self.kto;
                let base = self.policy.params();
                let z0 = |x: usize| {
                    let lp = self.log_probs_at(base, x);
                    let lq = self.reference.log_probs(x);
                    lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>()
                };
                let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
                records
                    .iter()
                    .map(|r| {
                        let lr = log_ratio(r.prompt, r.response);
                        if r.reward() >= cfg.threshold {
                            cfg.lambda_d - cfg.lambda_d * sig(cfg.beta * (lr - z0(r.prompt)))
                        } else {
                            cfg.lambda_u - cfg.lambda_u * sig(cfg.beta * (z0(r.prompt) - lr))
                        }
                    })
                    .sum::<f64>()
                    / n
            }
            Method::Sft => {
                let kept: Vec<f64> = records
                    .iter()
                    .filter(|r| r.reward() >= self.sft_threshold)
                    .map(|r| -self.log_probs_at(params, r.prompt)[r.response])
                    .collect();
                kept.iter().sum::<f64>() / kept.len() as f64
            }
        }
    }

    /// Does any batch record qualify for SFT?
    pub fn sft_applicable(&self) -> bool {
        self.batch
            .iter()
            .any(|&i| self.ds.record(i).reward() >= self.sft_threshold)
    }

    /// Library loss and gradient, flattened the same way as [`Self::point`].
    pub fn analytic(&self, method: Method) -> (f64, Vec<f64>) {
        let out = match method {
            Method::Rpo => {
                let part = PartitionEstimate::estimate(
                    &self.ds.group_by_prompt(),
                    &self.ds,
                    &self.reference,
                    self.tau,
                    PartitionMode::Literal,
                )
                .unwrap();
                rpo_loss_and_grad(
                    &self.policy,
                    &self.reference,
                    &self.ds,
                    &self.batch,
                    &part,
                    self.tau,
                )
            }
            Method::RpoNoNorm => rpo_nonorm_loss_and_grad(
                &self.policy,
                &self.reference,
                &self.ds,
                &self.batch,
                self.tau,
            ),
            Method::Dro => dro_loss_and_grad(
                &self.policy,
                &ValueTable {
                    values: self.values.clone(),
                },
                &self.reference,
                &self.ds,
                &self.batch,
                self.tau,
            ),
            Method::Kto => {
                kto_loss_and_grad(&self.policy, &self.reference, &self.ds, &self.batch, &self.kto)
            }
            Method::Sft => sft_loss_and_grad(&self.policy, &self.ds, &self.batch, self.sft_threshold),
        }
        .unwrap();
        let mut grad = out.policy_grad;
        grad.extend(out.value_grad.unwrap_or_default());
        (out.loss, grad)
    }
}

/// Central differences with step `h`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..point.len())
        .map(|k| {
            p[k] = point[k] + h;
            let plus = f(&p);
            p[k] = point[k] - h;
            let minus = f(&p);
            p[k] = point[k];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_loss_gap: f64,
    pub worst_case: String,
}

/// Five objectives × two policy classes × `states` random points.
pub fn gradient_suite(states: u64) -> GradReport {
    let mut report = GradReport {
        checked: 0,
        worst: 0.0,
        worst_loss_gap: 0.0,
        worst_case: String::new(),
    };
    for featurized in [false, true] {
        for seed in 0..states {
            let state = GradState::random(seed, featurized);
            for method in Method::ALL {
                if method == Method::Sft && !state.sft_applicable() {
                    continue;
                }
                let point = state.point(method);
                let (loss, grad) = state.analytic(method);
                let naive = state.naive_loss(method, &point);
                let fd = central_differences(|p| state.naive_loss(method, p), &point, 1e-5);
                let err = rel_err(&grad, &fd);
                let gap = (loss - naive).abs() / naive.abs().max(1.0);
                report.checked += 1;
                report.worst_loss_gap = report.worst_loss_gap.max(gap);
                if err > report.worst {
                    report.worst = err;
                    report.worst_case = format!(
                        "{} {} seed {seed}",
                        method.token(),
                        if featurized { "featurized" } else { "tabular" }
                    );
                }
            }
        }
    }
    report
}

/// The 1-prompt, 2-candidate instance: uniform reference, rewards [1, 0].
pub fn two_candidate() -> (Arc<PromptSpace>, TripletDataset, ReferencePolicy) {
    let space = Arc::new(
        PromptSpace::new(vec![rpolab_core::Prompt {
            id: "x".into(),
            responses: vec!["y1".into(), "y2".into()],
            weight: 1.0,
            features: None,
        }])
        .unwrap(),
    );
    let ds = TripletDataset::from_triplets(&space, [("x", "y1", 1.0), ("x", "y2", 0.0)]).unwrap();
    let reference = ReferencePolicy::uniform(space.clone(), PolicyKind::Tabular).unwrap();
    (space, ds, reference)
}

/// Closed-form RPO tabular gradient `(1/n) Σ_i δ_i (1{y = y_i} − π(y|x_i))`
/// by a double loop over records and candidates.
pub fn rpo_closed_form(
    space: &PromptSpace,
    ds: &TripletDataset,
    reference: &ReferencePolicy,
    params: &[f64],
    batch: &[usize],
    tau: f64,
) -> Vec<f64> {
    let mut z_hat = vec![0.0; space.len()];
    for r in ds.records() {
        z_hat[r.prompt] += reference.log_probs(r.prompt)[r.response].exp() * (r.reward() / tau).exp();
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut offset = vec![0usize; space.len()];
    for x in 1..space.len() {
        offset[x] = offset[x - 1] + space.num_candidates(x - 1);
    }
    for &i in batch {
        let r = ds.record(i);
        let lp = naive_log_probs(space, PolicyKind::Tabular, params, r.prompt);
        let delta = lp[r.response]
            - reference.log_probs(r.prompt)[r.response]
            - (r.reward() - tau * z_hat[r.prompt].ln()) / tau;
        for y in 0..space.num_candidates(r.prompt) {
            let indicator = if y == r.response { 1.0 } else { 0.0 };
            grad[offset[r.prompt] + y] += delta * (indicator - lp[y].exp()) / n;
        }
    }
    grad
}
