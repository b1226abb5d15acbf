//! Prompt spaces, (prompt, response, reward) triplet datasets, and the
//! synthetic environments used for oracle experiments.
//!
//! A [`PromptSpace`] is the finite universe every other module works over:
//! each prompt owns an ordered candidate set, a sampling weight and,
//! optionally, one feature vector per candidate. Datasets reference the
//! space by identifier and are resolved to positional indices on load.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Spread below which rewards are treated as constant during standardization.
pub const MIN_REWARD_SPREAD: f64 = 1e-12;

/// One prompt with its candidate responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub id: String,
    pub responses: Vec<String>,
    pub weight: f64,
    /// One feature vector per response, aligned with `responses`.
    pub features: Option<Vec<Vec<f64>>>,
}

/// The finite universe of prompts and candidate responses.
#[derive(Debug, Clone)]
pub struct PromptSpace {
    prompts: Vec<Prompt>,
    feature_dim: Option<usize>,
    prompt_lookup: HashMap<String, usize>,
    response_lookup: Vec<HashMap<String, usize>>,
}

impl PartialEq for PromptSpace {
    fn eq(&self, other: &Self) -> bool {
        self.prompts == other.prompts
    }
}

impl PromptSpace {
    /// Validates the prompts and normalizes sampling weights to sum to one.
    pub fn new(mut prompts: Vec<Prompt>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidConfig("prompt space has no prompts".into()));
        }
        let mut prompt_lookup = HashMap::with_capacity(prompts.len());
        let mut response_lookup = Vec::with_capacity(prompts.len());
        let mut feature_dim: Option<usize> = None;
        let with_features = prompts[0].features.is_some();

        for (x, prompt) in prompts.iter().enumerate() {
            if prompt_lookup.insert(prompt.id.clone(), x).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate prompt id '{}'",
                    prompt.id
                )));
            }
            if prompt.responses.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "prompt '{}' has no candidate responses",
                    prompt.id
                )));
            }
            let mut lookup = HashMap::with_capacity(prompt.responses.len());
            for (y, response) in prompt.responses.iter().enumerate() {
                if lookup.insert(response.clone(), y).is_some() {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate response id '{}' in prompt '{}'",
                        response, prompt.id
                    )));
                }
            }
            response_lookup.push(lookup);

            if !prompt.weight.is_finite() || prompt.weight < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "prompt '{}' has invalid weight {}",
                    prompt.id, prompt.weight
                )));
            }

            match (&prompt.features, with_features) {
                (Some(features), true) => {
                    if features.len() != prompt.responses.len() {
                        return Err(Error::InvalidConfig(format!(
                            "prompt '{}' has {} feature vectors for {} responses",
                            prompt.id,
                            features.len(),
                            prompt.responses.len()
                        )));
                    }
                    for phi in features {
                        let d = *feature_dim.get_or_insert(phi.len());
                        if phi.len() != d || d == 0 {
                            return Err(Error::InvalidConfig(format!(
                                "prompt '{}' has a feature vector of dimension {} (expected {})",
                                prompt.id,
                                phi.len(),
                                d.max(1)
                            )));
                        }
                        if phi.iter().any(|v| !v.is_finite()) {
                            return Err(Error::InvalidConfig(format!(
                                "prompt '{}' has a non-finite feature",
                                prompt.id
                            )));
                        }
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(Error::InvalidConfig(
                        "either every prompt or no prompt must carry features".into(),
                    ))
                }
            }
        }

        let total: f64 = prompts.iter().map(|p| p.weight).sum();
        if total <= 0.0 {
            return Err(Error::InvalidConfig(
                "prompt weights must not all be zero".into(),
            ));
        }
        // Weights already summing to one are kept bit-for-bit so that a saved
        // space reloads to the same digest.
        if (total - 1.0).abs() > 1e-12 {
            for prompt in &mut prompts {
                prompt.weight /= total;
            }
        }

        Ok(Self {
            prompts,
            feature_dim,
            prompt_lookup,
            response_lookup,
        })
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompt(&self, x: usize) -> &Prompt {
        &self.prompts[x]
    }

    pub fn num_candidates(&self, x: usize) -> usize {
        self.prompts[x].responses.len()
    }

    pub fn total_candidates(&self) -> usize {
        self.prompts.iter().map(|p| p.responses.len()).sum()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_dim
    }

    pub fn features(&self, x: usize, y: usize) -> Option<&[f64]> {
        self.prompts[x]
            .features
            .as_ref()
            .map(|features| features[y].as_slice())
    }

    pub fn prompt_position(&self, prompt_id: &str) -> Result<usize> {
        self.prompt_lookup
            .get(prompt_id)
            .copied()
            .ok_or_else(|| Error::UnknownPrompt(prompt_id.to_string()))
    }

    /// Resolves a (prompt, response) pair to positional indices.
    pub fn resolve(&self, prompt_id: &str, response_id: &str) -> Result<(usize, usize)> {
        let x = self.prompt_position(prompt_id)?;
        let y = self.response_lookup[x]
            .get(response_id)
            .copied()
            .ok_or_else(|| Error::UnknownResponse {
                prompt: prompt_id.to_string(),
                response: response_id.to_string(),
            })?;
        Ok((x, y))
    }

    fn to_file(&self) -> SpaceFile {
        SpaceFile {
            prompts: self
                .prompts
                .iter()
                .map(|p| PromptEntry {
                    id: p.id.clone(),
                    responses: p.responses.clone(),
                    weight: p.weight,
                    features: p.features.as_ref().map(|features| {
                        p.responses
                            .iter()
                            .cloned()
                            .zip(features.iter().cloned())
                            .collect()
                    }),
                })
                .collect(),
        }
    }

    fn from_file(file: SpaceFile) -> Result<Self> {
        let prompts = file
            .prompts
            .into_iter()
            .map(|entry| {
                let features = match entry.features {
                    None => None,
                    Some(mut map) => {
                        let mut aligned = Vec::with_capacity(entry.responses.len());
                        for response in &entry.responses {
                            let phi = map.remove(response).ok_or_else(|| {
                                Error::MalformedDocument(format!(
                                    "prompt '{}' has no features for response '{}'",
                                    entry.id, response
                                ))
                            })?;
                            aligned.push(phi);
                        }
                        if let Some(extra) = map.keys().next() {
                            return Err(Error::UnknownResponse {
                                prompt: entry.id.clone(),
                                response: extra.clone(),
                            });
                        }
                        Some(aligned)
                    }
                };
                Ok(Prompt {
                    id: entry.id,
                    responses: entry.responses,
                    weight: entry.weight,
                    features,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(prompts)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("prompt space serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SpaceFile = serde_json::from_str(text)
            .map_err(|e| Error::MalformedDocument(format!("prompt space: {e}")))?;
        Self::from_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json();
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical compact serialization.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(&self.to_file()).expect("prompt space serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    prompts: Vec<PromptEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptEntry {
    id: String,
    responses: Vec<String>,
    weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<BTreeMap<String, Vec<f64>>>,
}

/// One (prompt, response, reward) observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletRecord {
    pub prompt_id: String,
    pub response_id: String,
    /// Position of the prompt in its space.
    pub prompt: usize,
    /// Position of the response within the prompt's candidates.
    pub response: usize,
    pub raw_reward: f64,
    pub std_reward: f64,
}

impl TripletRecord {
    /// The reward the objectives train on.
    pub fn reward(&self) -> f64 {
        self.std_reward
    }
}

/// Affine map applied by [`TripletDataset::standardize_rewards`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardization {
    pub mean: f64,
    /// Population standard deviation; zero when the rewards have no spread.
    pub std: f64,
}

impl Standardization {
    pub fn apply(&self, raw: f64) -> f64 {
        if self.std < MIN_REWARD_SPREAD {
            0.0
        } else {
            (raw - self.mean) / self.std
        }
    }
}

/// An ordered list of triplets bound to one [`PromptSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TripletDataset {
    records: Vec<TripletRecord>,
    standardization: Option<Standardization>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    prompt: String,
    response: String,
    reward: f64,
}

fn reward_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""reward"\s*:\s*([-+]?[A-Za-z0-9.+-]+)"#).expect("valid regex"))
}

/// Distinguishes a non-finite reward literal (which JSON cannot represent)
/// from other syntax errors.
fn is_non_finite_literal(line: &str) -> bool {
    reward_token()
        .captures(line)
        .and_then(|c| c.get(1))
        .map(|token| {
            let t = token.as_str().trim_start_matches(['+', '-']);
            t.eq_ignore_ascii_case("nan")
                || t.eq_ignore_ascii_case("inf")
                || t.eq_ignore_ascii_case("infinity")
                || token.as_str().parse::<f64>().is_ok_and(|v| !v.is_finite())
        })
        .unwrap_or(false)
}

impl TripletDataset {
    /// Builds a dataset from (prompt, response, raw reward) triplets,
    /// resolving each against `space`.
    pub fn from_triplets<I, P, R>(space: &PromptSpace, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (P, R, f64)>,
        P: Into<String>,
        R: Into<String>,
    {
        let records = triplets
            .into_iter()
            .enumerate()
            .map(|(i, (p, r, reward))| {
                let prompt_id = p.into();
                let response_id = r.into();
                if !reward.is_finite() {
                    return Err(Error::NonFiniteReward { line: i + 1 });
                }
                let (prompt, response) = space.resolve(&prompt_id, &response_id)?;
                Ok(TripletRecord {
                    prompt_id,
                    response_id,
                    prompt,
                    response,
                    raw_reward: reward,
                    std_reward: reward,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            records,
            standardization: None,
        })
    }

    /// Parses JSON Lines from a reader. Blank lines are skipped; line numbers
    /// in errors are 1-based.
    pub fn read_jsonl(reader: impl BufRead, space: &PromptSpace) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine = match serde_json::from_str(&line) {
                Ok(parsed) => parsed,
                Err(_) if is_non_finite_literal(&line) => {
                    return Err(Error::NonFiniteReward { line: line_no })
                }
                Err(e) => {
                    return Err(Error::MalformedLine {
                        line: line_no,
                        message: e.to_string(),
                    })
                }
            };
            if !parsed.reward.is_finite() {
                return Err(Error::NonFiniteReward { line: line_no });
            }
            let (prompt, response) = space.resolve(&parsed.prompt, &parsed.response)?;
            records.push(TripletRecord {
                prompt_id: parsed.prompt,
                response_id: parsed.response,
                prompt,
                response,
                raw_reward: parsed.reward,
                std_reward: parsed.reward,
            });
        }
        Ok(Self {
            records,
            standardization: None,
        })
    }

    /// Loads a JSONL dataset in file order, unstandardized.
    pub fn load(path: impl AsRef<Path>, space: &PromptSpace) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file), space)
    }

    /// Writes raw rewards as JSON Lines.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_jsonl(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for record in &self.records {
            let line = RecordLine {
                prompt: record.prompt_id.clone(),
                response: record.response_id.clone(),
                reward: record.raw_reward,
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[TripletRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &TripletRecord {
        &self.records[i]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardization.is_some()
    }

    pub fn standardization(&self) -> Option<Standardization> {
        self.standardization
    }

    /// Maps a raw reward into the units this dataset trains on.
    pub fn training_units(&self, raw: f64) -> f64 {
        match self.standardization {
            Some(s) => s.apply(raw),
            None => raw,
        }
    }

    /// Global standardization with the population standard deviation.
    /// Always recomputed from raw rewards, so applying it twice is a no-op.
    pub fn standardize_rewards(&self) -> Result<Self> {
        if self.records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = self.records.len() as f64;
        let mean = self.records.iter().map(|r| r.raw_reward).sum::<f64>() / n;
        let var = self
            .records
            .iter()
            .map(|r| (r.raw_reward - mean).powi(2))
            .sum::<f64>()
            / n;
        let standardization = Standardization {
            mean,
            std: var.sqrt(),
        };
        let records = self
            .records
            .iter()
            .map(|r| TripletRecord {
                std_reward: standardization.apply(r.raw_reward),
                ..r.clone()
            })
            .collect();
        Ok(Self {
            records,
            standardization: Some(standardization),
        })
    }

    /// Groups record indices by prompt id, in dataset order.
    pub fn group_by_prompt(&self) -> PromptIndex {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, record) in self.records.iter().enumerate() {
            groups.entry(record.prompt_id.clone()).or_default().push(i);
        }
        PromptIndex { groups }
    }

    /// A new dataset holding the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let records = indices
            .iter()
            .map(|&i| {
                self.records
                    .get(i)
                    .cloned()
                    .ok_or(Error::IndexOutOfRange {
                        index: i,
                        len: self.records.len(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            records,
            standardization: self.standardization,
        })
    }

    pub fn coverage_report(&self, space: &PromptSpace) -> Result<CoverageStats> {
        coverage_report(self, space)
    }
}

/// Record indices grouped by prompt id; iteration is sorted by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptIndex {
    groups: BTreeMap<String, Vec<usize>>,
}

impl PromptIndex {
    pub fn get(&self, prompt_id: &str) -> Option<&[usize]> {
        self.groups.get(prompt_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptCoverage {
    pub prompt_id: String,
    pub distinct_observed: usize,
    pub candidates: usize,
    /// Occurrences beyond the first of each observed pair.
    pub duplicates: usize,
    pub records: usize,
}

impl PromptCoverage {
    pub fn is_full(&self) -> bool {
        self.distinct_observed == self.candidates
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageStats {
    /// One entry per prompt of the space, in space order.
    pub prompts: Vec<PromptCoverage>,
    pub full_coverage_fraction: f64,
}

impl CoverageStats {
    pub fn total_duplicates(&self) -> usize {
        self.prompts.iter().map(|p| p.duplicates).sum()
    }
}

pub fn coverage_report(ds: &TripletDataset, space: &PromptSpace) -> Result<CoverageStats> {
    let mut seen: Vec<Vec<usize>> = space
        .prompts()
        .iter()
        .map(|p| vec![0; p.responses.len()])
        .collect();
    for record in ds.records() {
        let (x, y) = space.resolve(&record.prompt_id, &record.response_id)?;
        seen[x][y] += 1;
    }
    let prompts: Vec<PromptCoverage> = space
        .prompts()
        .iter()
        .zip(&seen)
        .map(|(prompt, counts)| {
            let distinct = counts.iter().filter(|&&c| c > 0).count();
            let records: usize = counts.iter().sum();
            PromptCoverage {
                prompt_id: prompt.id.clone(),
                distinct_observed: distinct,
                candidates: counts.len(),
                duplicates: records - distinct,
                records,
            }
        })
        .collect();
    let full = prompts.iter().filter(|p| p.is_full()).count();
    Ok(CoverageStats {
        full_coverage_fraction: full as f64 / prompts.len() as f64,
        prompts,
    })
}

/// How synthetic rewards are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardLaw {
    /// i.i.d. standard normal per (prompt, response).
    StandardNormal,
    /// `w · phi(x, y) + noise * eps` with `w` and `eps` standard normal.
    FeatureLinear { noise: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub prompts: usize,
    pub responses: usize,
    pub reward_law: RewardLaw,
    /// Zero means no features.
    pub feature_dim: usize,
    /// Fraction of each prompt's candidates that appear in the dataset.
    pub coverage: f64,
    /// Copies of each observed pair.
    pub duplication: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            prompts: 8,
            responses: 6,
            reward_law: RewardLaw::StandardNormal,
            feature_dim: 0,
            coverage: 1.0,
            duplication: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts == 0 {
            return Err(Error::InvalidConfig("prompts must be >= 1".into()));
        }
        if self.responses == 0 {
            return Err(Error::InvalidConfig("responses must be >= 1".into()));
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "coverage must be in (0, 1], got {}",
                self.coverage
            )));
        }
        if self.duplication == 0 {
            return Err(Error::InvalidConfig("duplication must be >= 1".into()));
        }
        if let RewardLaw::FeatureLinear { noise } = self.reward_law {
            if self.feature_dim == 0 {
                return Err(Error::InvalidConfig(
                    "the feature-linear reward law needs feature_dim >= 1".into(),
                ));
            }
            if !noise.is_finite() || noise < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "noise must be finite and nonnegative, got {noise}"
                )));
            }
        }
        Ok(())
    }

    /// Observed candidates per prompt.
    pub fn observed_per_prompt(&self) -> usize {
        ((self.coverage * self.responses as f64).round() as usize).clamp(1, self.responses)
    }
}

/// A generated environment: the space, the sampled dataset, and the full
/// raw reward table (indexed `[prompt][candidate]`) it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEnv {
    pub space: PromptSpace,
    pub dataset: TripletDataset,
    pub rewards: Vec<Vec<f64>>,
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

/// Draws a synthetic environment. The generator is ChaCha8 seeded from
/// `seed`; draws happen in this order: features (prompt-major, then
/// response, then coordinate), the linear weight vector if any, rewards
/// (prompt-major), observed subsets per prompt, and a final shuffle of the
/// record list.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<SyntheticEnv> {
    config.validate()?;
    let mut rng = seeded_rng(seed);
    let pw = id_width(config.prompts);
    let rw = id_width(config.responses);

    let responses: Vec<String> = (0..config.responses)
        .map(|j| format!("y{j:0rw$}"))
        .collect();
    let features: Option<Vec<Vec<Vec<f64>>>> = (config.feature_dim > 0).then(|| {
        (0..config.prompts)
            .map(|_| {
                (0..config.responses)
                    .map(|_| {
                        (0..config.feature_dim)
                            .map(|_| rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    });

    let rewards: Vec<Vec<f64>> = match config.reward_law {
        RewardLaw::StandardNormal => (0..config.prompts)
            .map(|_| {
                (0..config.responses)
                    .map(|_| rng.sample(StandardNormal))
                    .collect()
            })
            .collect(),
        RewardLaw::FeatureLinear { noise } => {
            let w: Vec<f64> = (0..config.feature_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let features = features.as_ref().expect("validated feature_dim");
            features
                .iter()
                .map(|per_prompt| {
                    per_prompt
                        .iter()
                        .map(|phi| {
                            let eps: f64 = rng.sample(StandardNormal);
                            w.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>() + noise * eps
                        })
                        .collect()
                })
                .collect()
        }
    };

    let weight = 1.0 / config.prompts as f64;
    let prompts: Vec<Prompt> = (0..config.prompts)
        .map(|i| Prompt {
            id: format!("p{i:0pw$}"),
            responses: responses.clone(),
            weight,
            features: features.as_ref().map(|f| f[i].clone()),
        })
        .collect();
    let space = PromptSpace::new(prompts)?;

    let k = config.observed_per_prompt();
    let mut records = Vec::with_capacity(config.prompts * k * config.duplication);
    for (x, prompt) in space.prompts().iter().enumerate() {
        let mut observed: Vec<usize> =
            rand::seq::index::sample(&mut rng, config.responses, k).into_vec();
        observed.sort_unstable();
        for &y in &observed {
            for _ in 0..config.duplication {
                records.push(TripletRecord {
                    prompt_id: prompt.id.clone(),
                    response_id: prompt.responses[y].clone(),
                    prompt: x,
                    response: y,
                    raw_reward: rewards[x][y],
                    std_reward: rewards[x][y],
                });
            }
        }
    }
    records.shuffle(&mut rng);

    Ok(SyntheticEnv {
        space,
        dataset: TripletDataset {
            records,
            standardization: None,
        },
        rewards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_prompt_space() -> PromptSpace {
        PromptSpace::new(vec![
            Prompt {
                id: "p0".into(),
                responses: vec!["a".into(), "b".into()],
                weight: 1.0,
                features: None,
            },
            Prompt {
                id: "p1".into(),
                responses: vec!["a".into(), "b".into(), "c".into()],
                weight: 3.0,
                features: None,
            },
        ])
        .unwrap()
    }

    fn std_of(raw: &[f64]) -> Vec<f64> {
        let space = PromptSpace::new(vec![Prompt {
            id: "p".into(),
            responses: vec!["y".into()],
            weight: 1.0,
            features: None,
        }])
        .unwrap();
        let ds =
            TripletDataset::from_triplets(&space, raw.iter().map(|&r| ("p", "y", r))).unwrap();
        ds.standardize_rewards()
            .unwrap()
            .records()
            .iter()
            .map(|r| r.std_reward)
            .collect()
    }

    #[test]
    fn weights_are_normalized() {
        let space = two_prompt_space();
        assert_eq!(space.prompt(0).weight, 0.25);
        assert_eq!(space.prompt(1).weight, 0.75);
    }

    #[test]
    fn rejects_duplicate_responses() {
        let err = PromptSpace::new(vec![Prompt {
            id: "p".into(),
            responses: vec!["a".into(), "a".into()],
            weight: 1.0,
            features: None,
        }])
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn rejects_ragged_features() {
        let err = PromptSpace::new(vec![Prompt {
            id: "p".into(),
            responses: vec!["a".into(), "b".into()],
            weight: 1.0,
            features: Some(vec![vec![1.0, 2.0], vec![1.0]]),
        }])
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn load_keeps_file_order() {
        let space = two_prompt_space();
        let text = "{\"prompt\":\"p1\",\"response\":\"c\",\"reward\":0.5}\n\
                    {\"prompt\":\"p0\",\"response\":\"a\",\"reward\":1}\n\
                    {\"prompt\":\"p1\",\"response\":\"a\",\"reward\":-2.0}\n";
        let ds = TripletDataset::read_jsonl(text.as_bytes(), &space).unwrap();
        assert_eq!(ds.len(), 3);
        let ids: Vec<_> = ds.records().iter().map(|r| r.response_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "a"]);
        assert!(!ds.is_standardized());
        assert!(ds.records().iter().all(|r| r.std_reward == r.raw_reward));
        assert_eq!((ds.record(0).prompt, ds.record(0).response), (1, 2));
    }

    #[test]
    fn load_reports_unknown_response() {
        let space = two_prompt_space();
        let err = TripletDataset::read_jsonl(
            "{\"prompt\":\"p0\",\"response\":\"bad\",\"reward\":1.0}\n".as_bytes(),
            &space,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
    }

    #[test]
    fn load_reports_nan_reward() {
        let space = two_prompt_space();
        for literal in ["NaN", "-Infinity", "1e999"] {
            let text = format!(
                "{{\"prompt\":\"p0\",\"response\":\"a\",\"reward\":1.0}}\n\
                 {{\"prompt\":\"p0\",\"response\":\"a\",\"reward\":{literal}}}\n"
            );
            let err = TripletDataset::read_jsonl(text.as_bytes(), &space).unwrap_err();
            assert!(
                matches!(err, Error::NonFiniteReward { line: 2 }),
                "{literal}: {err}"
            );
        }
    }

    #[test]
    fn load_reports_malformed_line_number() {
        let space = two_prompt_space();
        let text = "{\"prompt\":\"p0\",\"response\":\"a\",\"reward\":1.0}\n{\"prompt\":\"p0\"\n";
        let err = TripletDataset::read_jsonl(text.as_bytes(), &space).unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn load_rejects_unknown_keys() {
        let space = two_prompt_space();
        let text = "{\"prompt\":\"p0\",\"response\":\"a\",\"reward\":1.0,\"extra\":1}\n";
        let err = TripletDataset::read_jsonl(text.as_bytes(), &space).unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 1, .. }));
    }

    #[test]
    fn standardize_two_points() {
        assert_eq!(std_of(&[0.0, 10.0]), vec![-1.0, 1.0]);
    }

    #[test]
    fn standardize_constant_is_zero() {
        assert_eq!(std_of(&[3.5, 3.5, 3.5]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn standardize_three_points() {
        // population std sqrt(2/3) -> 1/sqrt(2/3) = 1.2247448713915890
        let s = std_of(&[-1.0, 0.0, 1.0]);
        assert!((s[0] + 1.224_744_871_391_589).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - 1.224_744_871_391_589).abs() < 1e-12);
    }

    #[test]
    fn standardize_empty_fails() {
        let space = two_prompt_space();
        let ds = TripletDataset::read_jsonl("".as_bytes(), &space).unwrap();
        assert!(matches!(ds.standardize_rewards(), Err(Error::EmptyDataset)));
    }

    #[test]
    fn grouping_sorted_and_ordered() {
        let space = two_prompt_space();
        let ds = TripletDataset::from_triplets(
            &space,
            [("p1", "a", 0.0), ("p0", "a", 0.0), ("p1", "b", 0.0)],
        )
        .unwrap();
        let index = ds.group_by_prompt();
        let groups: Vec<_> = index.iter().collect();
        assert_eq!(groups, vec![("p0", &[1][..]), ("p1", &[0, 2][..])]);
        assert_eq!(index, ds.group_by_prompt());

        let single = TripletDataset::from_triplets(&space, [("p0", "b", 1.0)]).unwrap();
        assert_eq!(single.group_by_prompt().len(), 1);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            feature_dim: 3,
            coverage: 0.5,
            duplication: 2,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, 11).unwrap();
        let b = generate_synthetic(&cfg, 11).unwrap();
        assert_eq!(a.space.to_json(), b.space.to_json());
        let (mut ja, mut jb) = (Vec::new(), Vec::new());
        a.dataset.write_jsonl(&mut ja).unwrap();
        b.dataset.write_jsonl(&mut jb).unwrap();
        assert_eq!(ja, jb);
        let c = generate_synthetic(&cfg, 12).unwrap();
        assert_ne!(a.rewards, c.rewards);
    }

    #[test]
    fn synthetic_full_coverage_counts() {
        let env = generate_synthetic(&SyntheticConfig::default(), 7).unwrap();
        assert_eq!(env.dataset.len(), 48);
        let cov = env.dataset.coverage_report(&env.space).unwrap();
        assert_eq!(cov.full_coverage_fraction, 1.0);
        assert_eq!(cov.total_duplicates(), 0);
    }

    #[test]
    fn synthetic_half_coverage() {
        let cfg = SyntheticConfig {
            coverage: 0.5,
            ..Default::default()
        };
        let env = generate_synthetic(&cfg, 3).unwrap();
        let cov = env.dataset.coverage_report(&env.space).unwrap();
        for p in &cov.prompts {
            assert_eq!(p.distinct_observed, p.candidates / 2);
        }
        assert_eq!(cov.full_coverage_fraction, 0.0);
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        for cfg in [
            SyntheticConfig {
                coverage: 0.0,
                ..Default::default()
            },
            SyntheticConfig {
                prompts: 0,
                ..Default::default()
            },
            SyntheticConfig {
                reward_law: RewardLaw::FeatureLinear { noise: 0.1 },
                ..Default::default()
            },
        ] {
            assert!(matches!(
                generate_synthetic(&cfg, 0),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn coverage_counts_duplicates() {
        let env = generate_synthetic(&SyntheticConfig::default(), 1).unwrap();
        let mut triplets: Vec<_> = env
            .dataset
            .records()
            .iter()
            .map(|r| (r.prompt_id.clone(), r.response_id.clone(), r.raw_reward))
            .collect();
        let repeated: Vec<_> = triplets
            .iter()
            .filter(|t| t.0 == "p3")
            .cloned()
            .collect();
        triplets.extend(repeated.iter().cloned());
        triplets.extend(repeated.iter().take(2).cloned());
        let ds = TripletDataset::from_triplets(&env.space, triplets).unwrap();
        let cov = ds.coverage_report(&env.space).unwrap();
        assert_eq!(cov.prompts[3].duplicates, 8);
        assert_eq!(cov.total_duplicates(), 8);
    }

    #[test]
    fn space_round_trips_with_features() {
        let env = generate_synthetic(
            &SyntheticConfig {
                feature_dim: 2,
                reward_law: RewardLaw::FeatureLinear { noise: 0.1 },
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let reloaded = PromptSpace::from_json(&env.space.to_json()).unwrap();
        assert_eq!(reloaded, env.space);
        assert_eq!(reloaded.digest(), env.space.digest());
        assert_eq!(reloaded.feature_dim(), Some(2));
    }

    #[test]
    fn space_rejects_unknown_keys() {
        let text = r#"{"prompts":[{"id":"p","responses":["a"],"weight":1.0,"color":"red"}]}"#;
        assert!(matches!(
            PromptSpace::from_json(text),
            Err(Error::MalformedDocument(_))
        ));
    }
}
