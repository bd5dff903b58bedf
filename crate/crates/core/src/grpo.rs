//! Group-relative policy optimization.
//!
//! Each step samples `G` completions per query from a frozen snapshot,
//! standardizes their binary rewards within the group, and takes one Adam
//! step on the clipped token-level surrogate
//!
//! ```text
//! J = mean_groups mean_i 1/|o_i| sum_t min(r_it A_i, clip(r_it, 1-eps, 1+eps) A_i)
//! ```
//!
//! with `r_it = pi(o_it) / pi_old(o_it)` and no KL term.

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::dataio::{render_prompt, Dataset, PromptTemplate, QaItem};
use crate::evalmetrics::{effective_query_ratio, BatchOutcome};
use crate::optim::{Adam, AdamConfig};
use crate::policy::{
    init_params, packed_logprobs, sample_completions, Completion, ParamVars, PolicyConfig,
    PolicyError, PolicyParams, TokenId, Tokenizer,
};
use ndarray::{Array1, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group size {0} < 2")]
    GroupTooSmall(usize),
    #[error("no rollout groups")]
    NoGroups,
    #[error("empty batch")]
    EmptyBatch,
    #[error("completion {index}: {tokens} tokens but {logprobs} stored logprobs")]
    LengthMismatch {
        index: usize,
        tokens: usize,
        logprobs: usize,
    },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("query {id}: {source}")]
    Query {
        id: String,
        #[source]
        source: PolicyError,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("config file {path}: {message}")]
    ConfigFile { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, GrpoError>;

/// `(r_i - mean) / std` with population std; all zeros and `true` when the
/// std is below `std_floor`.
pub fn compute_group_advantages(rewards: &[f64], std_floor: f64) -> Result<(Vec<f64>, bool)> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_floor {
        return Ok((vec![0.0; rewards.len()], true));
    }
    Ok((rewards.iter().map(|r| (r - mean) / std).collect(), false))
}

/// `G` scored completions of one query with their advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub item: QaItem,
    pub prompt: Vec<TokenId>,
    pub completions: Vec<Completion>,
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

impl RolloutGroup {
    pub fn new(
        item: QaItem,
        prompt: Vec<TokenId>,
        completions: Vec<Completion>,
        std_floor: f64,
    ) -> Result<Self> {
        let rewards: Vec<f64> = completions.iter().map(|c| c.reward).collect();
        let (advantages, degenerate) = compute_group_advantages(&rewards, std_floor)?;
        Ok(Self {
            item,
            prompt,
            completions,
            advantages,
            degenerate,
        })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.completions.iter().map(|c| c.reward).collect()
    }

    pub fn token_count(&self) -> usize {
        self.completions.iter().map(|c| c.tokens.len()).sum()
    }

    fn check(&self) -> Result<()> {
        if self.completions.len() < 2 {
            return Err(GrpoError::GroupTooSmall(self.completions.len()));
        }
        for (index, c) in self.completions.iter().enumerate() {
            if c.tokens.len() != c.logprobs_old.len() {
                return Err(GrpoError::LengthMismatch {
                    index,
                    tokens: c.tokens.len(),
                    logprobs: c.logprobs_old.len(),
                });
            }
        }
        Ok(())
    }
}

/// Immutable behaviour policy.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPolicy(Arc<PolicyParams>);

impl Deref for FrozenPolicy {
    type Target = PolicyParams;
    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

pub fn snapshot_old_policy(params: &PolicyParams) -> FrozenPolicy {
    FrozenPolicy(Arc::new(params.clone()))
}

/// Per-token `exp(log pi - log pi_old)` for every completion of `group`, back
/// to back, differentiable through `pv`.
pub fn importance_ratios(g: &mut Graph, pv: &ParamVars, group: &RolloutGroup) -> Result<Var> {
    group.check()?;
    let toks: Vec<Vec<TokenId>> = group.completions.iter().map(|c| c.tokens.clone()).collect();
    let (lp, _) = packed_logprobs(g, pv, &group.prompt, &toks)?;
    let old: Vec<f64> = group
        .completions
        .iter()
        .flat_map(|c| c.logprobs_old.iter().map(|&l| -l))
        .collect();
    let neg_old = g.constant(Array1::from(old).into_dyn());
    let diff = g.add(lp, neg_old)?;
    Ok(g.exp(diff))
}

/// Surrogate of one group scaled by `weight`, plus the number of tokens
/// whose ratio left `[1 - eps, 1 + eps]`.
fn group_objective(
    g: &mut Graph,
    pv: &ParamVars,
    group: &RolloutGroup,
    epsilon: f64,
    weight: f64,
) -> Result<(Var, usize)> {
    let ratio = importance_ratios(g, pv, group)?;
    let gsize = group.completions.len() as f64;
    let mut adv = Vec::with_capacity(group.token_count());
    let mut w = Vec::with_capacity(group.token_count());
    for (c, &a) in group.completions.iter().zip(&group.advantages) {
        let n = c.tokens.len() as f64;
        for _ in &c.tokens {
            adv.push(a);
            w.push(weight / (gsize * n));
        }
    }
    let clipped = g
        .value(ratio)
        .iter()
        .filter(|&&r| r < 1.0 - epsilon || r > 1.0 + epsilon)
        .count();
    let surr = g.clipped_surrogate(ratio, &adv, epsilon)?;
    let obj = g.weighted_sum(surr, ArrayD::from_shape_vec(vec![w.len()], w).expect("1-D"))?;
    Ok((obj, clipped))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveStats {
    pub tokens: usize,
    pub clipped: usize,
}

impl ObjectiveStats {
    pub fn clip_fraction(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.clipped as f64 / self.tokens as f64
        }
    }
}

/// The surrogate objective (to be maximized) over all `groups`.
pub fn grpo_objective(
    g: &mut Graph,
    pv: &ParamVars,
    groups: &[RolloutGroup],
    epsilon: f64,
) -> Result<(Var, ObjectiveStats)> {
    if groups.is_empty() {
        return Err(GrpoError::NoGroups);
    }
    let weight = 1.0 / groups.len() as f64;
    let mut total: Option<Var> = None;
    let mut stats = ObjectiveStats {
        tokens: 0,
        clipped: 0,
    };
    for group in groups {
        let (obj, clipped) = group_objective(g, pv, group, epsilon, weight)?;
        stats.tokens += group.token_count();
        stats.clipped += clipped;
        total = Some(match total {
            Some(t) => g.add(t, obj)?,
            None => obj,
        });
    }
    Ok((total.expect("non-empty"), stats))
}

fn default_group_size() -> usize {
    8
}
fn default_queries() -> usize {
    64
}
fn default_steps() -> usize {
    300
}
fn default_epsilon() -> f64 {
    0.2
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    AdamConfig::default().beta1
}
fn default_beta2() -> f64 {
    AdamConfig::default().beta2
}
fn default_adam_eps() -> f64 {
    AdamConfig::default().eps
}
fn default_std_floor() -> f64 {
    1e-6
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_new() -> usize {
    16
}
fn default_layers() -> usize {
    TrainConfig::DESK_POLICY.layers
}
fn default_width() -> usize {
    TrainConfig::DESK_POLICY.width
}
fn default_heads() -> usize {
    TrainConfig::DESK_POLICY.heads
}
fn default_context() -> usize {
    TrainConfig::DESK_POLICY.context
}
fn default_prime_steps() -> usize {
    200
}
fn default_prime_batch() -> usize {
    16
}
fn default_prime_lr() -> f64 {
    3e-3
}

/// Every hyperparameter of a training run. Deserializes from a flat TOML
/// table; omitted keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_queries")]
    pub queries_per_batch: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_epsilon")]
    pub clip_epsilon: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_std_floor")]
    pub std_floor: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_context")]
    pub context: usize,
    /// Format-priming steps run before the first GRPO step (0 disables).
    #[serde(default = "default_prime_steps")]
    pub prime_steps: usize,
    #[serde(default = "default_prime_batch")]
    pub prime_batch: usize,
    #[serde(default = "default_prime_lr")]
    pub prime_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub const DESK_POLICY: PolicyConfig = PolicyConfig {
        layers: 2,
        width: 64,
        heads: 4,
        context: 512,
    };

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if self.queries_per_batch == 0 || self.max_new == 0 {
            return bad("queries_per_batch and max_new must be positive");
        }
        if !(self.learning_rate > 0.0 && self.prime_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.prime_steps > 0 && self.prime_batch == 0 {
            return bad("prime_batch must be positive");
        }
        self.policy().validate()?;
        Ok(())
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            layers: self.layers,
            width: self.width,
            heads: self.heads,
            context: self.context,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| GrpoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GrpoError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| GrpoError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub effective_query_ratio: f64,
    pub clip_fraction: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Samples and scores one rollout group per item from `old`.
pub fn collect_rollouts(
    old: &FrozenPolicy,
    batch: &[QaItem],
    template: &PromptTemplate,
    config: &TrainConfig,
    step: usize,
) -> Result<Vec<RolloutGroup>> {
    batch
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let prompt = Tokenizer.encode_prompt(&render_prompt(item, template));
            let seed = mix_seed(&[config.seed, step as u64, i as u64]);
            let completions = sample_completions(
                old,
                &prompt,
                &item.answer,
                config.group_size,
                config.temperature,
                config.max_new,
                seed,
            )
            .map_err(|source| GrpoError::Query {
                id: item.id.clone(),
                source,
            })?;
            RolloutGroup::new(item.clone(), prompt, completions, config.std_floor)
        })
        .collect()
}

/// Current parameters and optimizer moments.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    pub optimizer: Adam,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: PolicyParams, config: &TrainConfig) -> Self {
        let optimizer = Adam::new(config.adam(), &params.tensors);
        Self {
            params,
            optimizer,
            step: 0,
        }
    }
}

/// Gradient of the objective restricted to the non-degenerate groups;
/// degenerate groups have all-zero advantages and contribute exactly zero.
pub fn objective_gradient(
    params: &PolicyParams,
    groups: &[RolloutGroup],
    epsilon: f64,
) -> Result<(f64, Vec<ArrayD<f64>>, usize)> {
    let weight = 1.0 / groups.len() as f64;
    let parts = groups
        .par_iter()
        .filter(|gr| !gr.degenerate)
        .map(|gr| {
            let mut g = Graph::new();
            let pv = ParamVars::trainable(&mut g, params);
            let (obj, clipped) = group_objective(&mut g, &pv, gr, epsilon, weight)?;
            g.backward(obj)?;
            Ok((g.scalar(obj), pv.grads(&g), clipped))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads: Vec<ArrayD<f64>> = params
        .tensors
        .iter()
        .map(|t| ArrayD::zeros(t.raw_dim()))
        .collect();
    let mut value = 0.0;
    let mut clipped = 0;
    for (v, gs, c) in parts {
        value += v;
        clipped += c;
        for (acc, g) in grads.iter_mut().zip(gs) {
            *acc += &g;
        }
    }
    Ok((value, grads, clipped))
}

/// One snapshot → rollout → single ascent update cycle.
pub fn train_step(
    state: &mut TrainState,
    batch: &[QaItem],
    template: &PromptTemplate,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let start = Instant::now();
    let step = state.step + 1;
    let old = snapshot_old_policy(&state.params);
    let groups = collect_rollouts(&old, batch, template, config, step)?;

    let outcome = BatchOutcome::from_rewards(
        groups
            .iter()
            .map(|g| g.rewards())
            .collect::<Vec<_>>()
            .iter()
            .map(Vec::as_slice),
    );
    let effective = effective_query_ratio(&outcome).expect("non-empty batch");
    let total_reward: f64 = groups.iter().flat_map(|g| g.rewards()).sum();
    let mean_reward = total_reward / (groups.len() * config.group_size) as f64;
    let tokens: usize = groups.iter().map(RolloutGroup::token_count).sum();

    let (objective, grads, clipped) = objective_gradient(&state.params, &groups, config.clip_epsilon)?;
    let grad_norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if groups.iter().any(|g| !g.degenerate) {
        let descent: Vec<ArrayD<f64>> = grads.into_iter().map(|g| -g).collect();
        state.optimizer.step(&mut state.params.tensors, &descent);
    }
    state.step = step;
    Ok(StepMetrics {
        step,
        mean_reward,
        effective_query_ratio: effective,
        clip_fraction: if tokens == 0 { 0.0 } else { clipped as f64 / tokens as f64 },
        objective,
        grad_norm,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Epoch-wise shuffled batches; the last batch of an epoch may be smaller.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, 0xBA7C, self.epoch]));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.batch).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Fresh policy from `config`, format-primed on `data`.
pub fn initial_state(
    data: &Dataset,
    template: &PromptTemplate,
    config: &TrainConfig,
) -> Result<TrainState> {
    config.validate()?;
    if data.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let mut params = init_params(config.policy(), mix_seed(&[config.seed, 0x1417]))?;
    crate::priming::prime_format(&mut params, data, template, config)?;
    Ok(TrainState::new(params, config))
}

/// Runs `config.steps` GRPO steps from `state` over `data`. `observe` sees
/// every step's metrics and the current state and may return `false` to
/// stop early.
pub fn train_from(
    mut state: TrainState,
    data: &Dataset,
    template: &PromptTemplate,
    config: &TrainConfig,
    mut observe: impl FnMut(&StepMetrics, &TrainState) -> bool,
) -> Result<(TrainState, Vec<StepMetrics>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let mut sampler = BatchSampler::new(data.len(), config.queries_per_batch, config.seed);
    let mut metrics = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch: Vec<QaItem> = sampler
            .next_indices()
            .into_iter()
            .map(|i| data.items[i].clone())
            .collect();
        let m = train_step(&mut state, &batch, template, config)?;
        let keep_going = observe(&m, &state);
        metrics.push(m);
        if !keep_going {
            break;
        }
    }
    Ok((state, metrics))
}

/// [`initial_state`] followed by [`train_from`].
pub fn train(
    data: &Dataset,
    template: &PromptTemplate,
    config: &TrainConfig,
    observe: impl FnMut(&StepMetrics, &TrainState) -> bool,
) -> Result<(TrainState, Vec<StepMetrics>)> {
    let state = initial_state(data, template, config)?;
    train_from(state, data, template, config, observe)
}
