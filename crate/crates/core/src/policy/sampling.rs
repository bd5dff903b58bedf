use super::model::{decode_step, forward_cached, BranchCache, KvCache, PolicyParams};
use super::tokenizer::{TokenId, Tokenizer, EOS};
use super::PolicyError;
use crate::autodiff::log_softmax_rows;
use crate::verifier::{self, ExtractedAnswer};
use ndarray::{s, Array1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Draw from `softmax(logits / temperature)`.
    Sample { temperature: f64 },
    /// Argmax at every step (the zero-temperature limit).
    Greedy,
}

/// Raw generated continuation before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: Vec<TokenId>,
    /// `log pi(token | prefix)` under the untempered model.
    pub logprobs: Vec<f64>,
    pub truncated: bool,
}

/// A sampled response scored against the gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub logprobs_old: Vec<f64>,
    pub extracted: ExtractedAnswer,
    pub reward: f64,
    pub truncated: bool,
}

impl Completion {
    pub fn score(generated: Generated, gold: &str) -> Self {
        let text = Tokenizer.decode(&generated.tokens);
        let extracted = verifier::extract_boxed_answer(&text);
        let reward = verifier::reward(&text, gold);
        Self {
            tokens: generated.tokens,
            text,
            logprobs_old: generated.logprobs,
            extracted,
            reward,
            truncated: generated.truncated,
        }
    }
}

fn choose(logits: &Array1<f64>, decoding: Decoding, rng: &mut ChaCha8Rng) -> TokenId {
    match decoding {
        Decoding::Greedy => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        }
        Decoding::Sample { temperature } => {
            let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let weights: Vec<f64> = logits
                .iter()
                .map(|&v| ((v - m) / temperature).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i;
                }
                u -= w;
            }
            // rounding fell off the end: last token with positive weight
            weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
        }
    }
}

/// Generates `n` continuations of `prompt`, each ending at EOS or after
/// `max_new` tokens. The prompt is encoded once and shared by all branches.
pub fn generate(
    params: &PolicyParams,
    prompt: &[TokenId],
    n: usize,
    decoding: Decoding,
    max_new: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Generated>, PolicyError> {
    if let Decoding::Sample { temperature } = decoding {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(PolicyError::Temperature(temperature));
        }
    }
    if prompt.is_empty() {
        return Err(PolicyError::EmptyPrompt);
    }
    if max_new == 0 {
        return Err(PolicyError::Config("max_new must be positive".into()));
    }
    let context = params.config.context;
    if prompt.len() + max_new > context {
        return Err(PolicyError::ContextOverflow {
            needed: prompt.len() + max_new,
            context,
        });
    }
    let mut prefix = KvCache::new(&params.config);
    let positions: Vec<usize> = (0..prompt.len()).collect();
    let logits = forward_cached(params, &mut prefix, prompt, &positions);
    let last = logits.slice(s![logits.nrows() - 1.., ..]).row(0).to_owned();

    let mut caches: Vec<BranchCache> = (0..n).map(|_| BranchCache::new(&params.config)).collect();
    let mut logits: Vec<Array1<f64>> = vec![last; n];
    let mut out: Vec<Generated> = (0..n)
        .map(|_| Generated {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            truncated: true,
        })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    for t in 0..max_new {
        let mut still = Vec::with_capacity(active.len());
        for &b in &active {
            let tok = choose(&logits[b], decoding, rng);
            let lp = log_softmax_rows(logits[b].view().insert_axis(ndarray::Axis(0)));
            out[b].tokens.push(tok);
            out[b].logprobs.push(lp[[0, tok]]);
            if tok == EOS {
                out[b].truncated = false;
            } else {
                still.push(b);
            }
        }
        active = still;
        if active.is_empty() || t + 1 == max_new {
            break;
        }
        let toks: Vec<TokenId> = active.iter().map(|&b| *out[b].tokens.last().expect("token")).collect();
        let positions = vec![prompt.len() + t; active.len()];
        let mut refs: Vec<&mut BranchCache> = caches
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| active.contains(i))
            .map(|(_, c)| c)
            .collect();
        let next = decode_step(params, &prefix, &mut refs, &toks, &positions);
        for (row, &b) in active.iter().enumerate() {
            logits[b] = next.row(row).to_owned();
        }
    }
    Ok(out)
}

/// Draws `group_size` seeded completions and scores each against `gold`.
pub fn sample_completions(
    params: &PolicyParams,
    prompt: &[TokenId],
    gold: &str,
    group_size: usize,
    temperature: f64,
    max_new: usize,
    seed: u64,
) -> Result<Vec<Completion>, PolicyError> {
    if group_size < 2 {
        return Err(PolicyError::GroupTooSmall(group_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gens = generate(
        params,
        prompt,
        group_size,
        Decoding::Sample { temperature },
        max_new,
        &mut rng,
    )?;
    Ok(gens.into_iter().map(|g| Completion::score(g, gold)).collect())
}

/// One greedy completion, scored.
pub fn greedy_completion(
    params: &PolicyParams,
    prompt: &[TokenId],
    gold: &str,
    max_new: usize,
) -> Result<Completion, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut gens = generate(params, prompt, 1, Decoding::Greedy, max_new, &mut rng)?;
    Ok(Completion::score(gens.remove(0), gold))
}
