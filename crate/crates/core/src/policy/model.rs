//! Pre-norm decoder-only transformer over the byte vocabulary.
//!
//! The differentiable forward runs on the autodiff tape. Several
//! completions of one prompt are packed into a single sequence: the prompt
//! rows come first, then each completion as its own branch. A branch row
//! sees every prompt row and the earlier rows of its own branch, and carries
//! the position it would have in an unpacked sequence, so the packed pass
//! computes exactly the per-completion log-probabilities while the prompt
//! is encoded once.

use super::tokenizer::{TokenId, VOCAB_SIZE};
use super::PolicyError;
use crate::autodiff::{Graph, Var};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;
pub const FFN_MULT: usize = 4;
pub(crate) const TENSORS_PER_LAYER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            context: 512,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.context < 2 {
            return Err(PolicyError::Config(format!(
                "layers, width, heads must be positive and context >= 2: {self:?}"
            )));
        }
        if self.width % self.heads != 0 {
            return Err(PolicyError::Config(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// `(name, shape)` of every learnable tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.width;
        let f = FFN_MULT * d;
        let mut out = vec![
            ("tok_emb".to_string(), vec![VOCAB_SIZE, d]),
            ("pos_emb".to_string(), vec![self.context, d]),
        ];
        for l in 0..self.layers {
            let shapes: [(&str, Vec<usize>); TENSORS_PER_LAYER] = [
                ("ln1_gain", vec![d]),
                ("ln1_bias", vec![d]),
                ("w_qkv", vec![d, 3 * d]),
                ("b_qkv", vec![3 * d]),
                ("w_attn_out", vec![d, d]),
                ("b_attn_out", vec![d]),
                ("ln2_gain", vec![d]),
                ("ln2_bias", vec![d]),
                ("w_fc", vec![d, f]),
                ("b_fc", vec![f]),
                ("w_proj", vec![f, d]),
                ("b_proj", vec![d]),
            ];
            for (name, shape) in shapes {
                out.push((format!("layer{l}.{name}"), shape));
            }
        }
        out.push(("lnf_gain".to_string(), vec![d]));
        out.push(("lnf_bias".to_string(), vec![d]));
        out.push(("w_out".to_string(), vec![d, VOCAB_SIZE]));
        out.push(("b_out".to_string(), vec![VOCAB_SIZE]));
        out
    }
}

/// Index of each tensor in [`PolicyParams::tensors`].
pub(crate) mod slot {
    use super::TENSORS_PER_LAYER;
    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;
    pub fn layer(l: usize, k: usize) -> usize {
        2 + l * TENSORS_PER_LAYER + k
    }
    pub const LN1_GAIN: usize = 0;
    pub const LN1_BIAS: usize = 1;
    pub const W_QKV: usize = 2;
    pub const B_QKV: usize = 3;
    pub const W_ATTN_OUT: usize = 4;
    pub const B_ATTN_OUT: usize = 5;
    pub const LN2_GAIN: usize = 6;
    pub const LN2_BIAS: usize = 7;
    pub const W_FC: usize = 8;
    pub const B_FC: usize = 9;
    pub const W_PROJ: usize = 10;
    pub const B_PROJ: usize = 11;
    pub fn final_base(layers: usize) -> usize {
        2 + layers * TENSORS_PER_LAYER
    }
}

/// All learnable arrays of the policy plus its shape configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub tensors: Vec<ArrayD<f64>>,
}

impl PolicyParams {
    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_shapes(&self) -> Result<(), PolicyError> {
        let layout = self.config.layout();
        if layout.len() != self.tensors.len() {
            return Err(PolicyError::Config(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(PolicyError::Config(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn t(&self, i: usize) -> &ArrayD<f64> {
        &self.tensors[i]
    }
}

/// Deterministic initialization: N(0, 0.02) token embeddings and output
/// head, sinusoidal position embeddings of amplitude 0.03, hidden matrices
/// N(0, 1/fan_in) with residual output projections further scaled by
/// `1/sqrt(2 * layers)`, zero biases, unit gains.
pub fn init_params(config: PolicyConfig, seed: u64) -> Result<PolicyParams, PolicyError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let resid_scale = 1.0 / ((2 * config.layers) as f64).sqrt();
    let tensors = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let short = name.rsplit('.').next().unwrap_or(&name);
            let data: Vec<f64> = if short == "pos_emb" {
                sinusoidal(shape[0], shape[1], 0.03)
            } else if short.ends_with("_gain") {
                vec![1.0; n]
            } else if short.starts_with("b_") || short.ends_with("_bias") {
                vec![0.0; n]
            } else {
                let std = match short {
                    "tok_emb" | "w_out" => 0.02,
                    "w_attn_out" | "w_proj" => resid_scale / (shape[0] as f64).sqrt(),
                    _ => 1.0 / (shape[0] as f64).sqrt(),
                };
                (0..n).map(|_| unit.sample(&mut rng) * std).collect()
            };
            ArrayD::from_shape_vec(IxDyn(&shape), data).expect("layout shape")
        })
        .collect();
    Ok(PolicyParams { config, tensors })
}

/// Row `t` holds `amp * (sin, cos)(t / 10000^(2i/d))` pairs.
fn sinusoidal(rows: usize, d: usize, amp: f64) -> Vec<f64> {
    let mut v = vec![0.0; rows * d];
    for t in 0..rows {
        for i in 0..d / 2 {
            let f = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            v[t * d + 2 * i] = amp * f.sin();
            v[t * d + 2 * i + 1] = amp * f.cos();
        }
    }
    v
}

/// Tape handles for every parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub config: PolicyConfig,
    pub vars: Vec<Var>,
}

impl ParamVars {
    /// Registers the parameters as trainable leaves.
    pub fn trainable(g: &mut Graph, params: &PolicyParams) -> Self {
        let vars = params.tensors.iter().map(|t| g.param(t.clone())).collect();
        Self {
            config: params.config,
            vars,
        }
    }

    /// Registers the parameters as constants (scoring without gradients).
    pub fn frozen(g: &mut Graph, params: &PolicyParams) -> Self {
        let vars = params.tensors.iter().map(|t| g.constant(t.clone())).collect();
        Self {
            config: params.config,
            vars,
        }
    }

    /// Reads accumulated gradients back in tensor order (zeros where unreached).
    pub fn grads(&self, g: &Graph) -> Vec<ArrayD<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(g.value(v).raw_dim()))
            })
            .collect()
    }
}

/// Row layout of a packed prompt + branches sequence.
struct Packing {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    mask: Array2<f64>,
    /// Row whose output predicts each completion token, in branch order.
    predict_rows: Vec<usize>,
    targets: Vec<TokenId>,
}

fn pack(prompt: &[TokenId], completions: &[Vec<TokenId>]) -> Packing {
    let p = prompt.len();
    let mut tokens = prompt.to_vec();
    let mut positions: Vec<usize> = (0..p).collect();
    let mut branch_of = vec![usize::MAX; p];
    let mut predict_rows = Vec::new();
    let mut targets = Vec::new();
    for (j, c) in completions.iter().enumerate() {
        let first_row = tokens.len();
        for (t, &tok) in c.iter().enumerate() {
            predict_rows.push(if t == 0 { p - 1 } else { first_row + t - 1 });
            targets.push(tok);
        }
        // The last completion token is only a target, never an input.
        for (t, &tok) in c.iter().take(c.len().saturating_sub(1)).enumerate() {
            tokens.push(tok);
            positions.push(p + t);
            branch_of.push(j);
        }
    }
    let n = tokens.len();
    let mut mask = Array2::from_elem((n, n), f64::NEG_INFINITY);
    for i in 0..n {
        for k in 0..=i {
            let visible = k < p || branch_of[k] == branch_of[i];
            if visible {
                mask[[i, k]] = 0.0;
            }
        }
    }
    Packing {
        tokens,
        positions,
        mask,
        predict_rows,
        targets,
    }
}

fn check_context(
    config: &PolicyConfig,
    prompt: &[TokenId],
    completions: &[Vec<TokenId>],
) -> Result<(), PolicyError> {
    if prompt.is_empty() {
        return Err(PolicyError::EmptyPrompt);
    }
    for c in completions {
        if c.is_empty() {
            return Err(PolicyError::EmptyCompletion);
        }
        if let Some(&bad) = c.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(PolicyError::Token(bad));
        }
        if prompt.len() + c.len() > config.context {
            return Err(PolicyError::ContextOverflow {
                needed: prompt.len() + c.len(),
                context: config.context,
            });
        }
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t >= VOCAB_SIZE) {
        return Err(PolicyError::Token(bad));
    }
    Ok(())
}

/// Differentiable per-token log-probabilities of several completions of one
/// prompt. Returns a 1-D node holding the completions' tokens back to back
/// (completion 0 first) and the length of each completion.
pub fn packed_logprobs(
    g: &mut Graph,
    pv: &ParamVars,
    prompt: &[TokenId],
    completions: &[Vec<TokenId>],
) -> Result<(Var, Vec<usize>), PolicyError> {
    let cfg = pv.config;
    check_context(&cfg, prompt, completions)?;
    let pk = pack(prompt, completions);
    let w = |i: usize| pv.vars[i];
    let lw = |l: usize, k: usize| pv.vars[slot::layer(l, k)];

    let tok = g.gather_rows(w(slot::TOK_EMB), &pk.tokens)?;
    let pos = g.gather_rows(w(slot::POS_EMB), &pk.positions)?;
    let mut x = g.add(tok, pos)?;
    let mask = g.constant(pk.mask.into_dyn());
    let hd = cfg.head_dim();
    let d = cfg.width;
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    for l in 0..cfg.layers {
        let h = g.layer_norm(x, lw(l, slot::LN1_GAIN), lw(l, slot::LN1_BIAS), LN_EPS)?;
        let qkv = g.matmul(h, lw(l, slot::W_QKV))?;
        let qkv = g.add_bias(qkv, lw(l, slot::B_QKV))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hi in 0..cfg.heads {
            let q = g.slice_columns(qkv, hi * hd, (hi + 1) * hd)?;
            let k = g.slice_columns(qkv, d + hi * hd, d + (hi + 1) * hd)?;
            let v = g.slice_columns(qkv, 2 * d + hi * hd, 2 * d + (hi + 1) * hd)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, inv_sqrt);
            let scores = g.add(scores, mask)?;
            let att = g.softmax(scores)?;
            heads.push(g.matmul(att, v)?);
        }
        let att = g.concat_columns(&heads)?;
        let att = g.matmul(att, lw(l, slot::W_ATTN_OUT))?;
        let att = g.add_bias(att, lw(l, slot::B_ATTN_OUT))?;
        x = g.add(x, att)?;

        let h = g.layer_norm(x, lw(l, slot::LN2_GAIN), lw(l, slot::LN2_BIAS), LN_EPS)?;
        let f = g.matmul(h, lw(l, slot::W_FC))?;
        let f = g.add_bias(f, lw(l, slot::B_FC))?;
        let f = g.gelu(f);
        let f = g.matmul(f, lw(l, slot::W_PROJ))?;
        let f = g.add_bias(f, lw(l, slot::B_PROJ))?;
        x = g.add(x, f)?;
    }

    let fb = slot::final_base(cfg.layers);
    let sel = g.gather_rows(x, &pk.predict_rows)?;
    let h = g.layer_norm(sel, w(fb), w(fb + 1), LN_EPS)?;
    let logits = g.matmul(h, w(fb + 2))?;
    let logits = g.add_bias(logits, w(fb + 3))?;
    let logp = g.log_softmax(logits)?;
    let picked = g.pick_columns(logp, &pk.targets)?;
    Ok((picked, completions.iter().map(Vec::len).collect()))
}

/// `log pi(o_t | prompt, o_<t)` for every completion token (no gradients).
pub fn sequence_logprobs(
    params: &PolicyParams,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    let mut g = Graph::new();
    let pv = ParamVars::frozen(&mut g, params);
    let (lp, _) = packed_logprobs(&mut g, &pv, prompt, &[completion.to_vec()])?;
    Ok(g.value(lp).iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Incremental inference

/// Cached keys and values of already-processed rows, per layer.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
}

impl KvCache {
    pub fn new(config: &PolicyConfig) -> Self {
        let d = config.width;
        Self {
            keys: vec![Array2::zeros((0, d)); config.layers],
            values: vec![Array2::zeros((0, d)); config.layers],
        }
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn row_vec(t: &ArrayD<f64>) -> &[f64] {
    t.as_slice().expect("contiguous")
}

fn mat(t: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank 2 weight")
}

fn affine(x: &Array2<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>) -> Array2<f64> {
    let mut y = x.dot(&mat(w));
    y += &ndarray::ArrayView1::from(row_vec(b));
    y
}

/// Runs `tokens` (at `positions`) through the model on top of `cache`, where
/// new row `i` attends to all cached rows and new rows `0..=i`. Appends the
/// new keys/values and returns next-token logits for every new row.
pub fn forward_cached(
    params: &PolicyParams,
    cache: &mut KvCache,
    tokens: &[TokenId],
    positions: &[usize],
) -> Array2<f64> {
    let cfg = params.config;
    let (d, hd) = (cfg.width, cfg.head_dim());
    let n = tokens.len();
    let past = cache.len();
    let tok = mat(params.t(slot::TOK_EMB));
    let pos = mat(params.t(slot::POS_EMB));
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        let mut row = x.row_mut(i);
        row.assign(&tok.row(tokens[i]));
        row += &pos.row(positions[i]);
    }
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    for l in 0..cfg.layers {
        let p = |k| params.t(slot::layer(l, k));
        let (h, _, _) = crate::autodiff::layer_norm_rows(
            x.view(),
            row_vec(p(slot::LN1_GAIN)),
            row_vec(p(slot::LN1_BIAS)),
            LN_EPS,
        );
        let qkv = affine(&h, p(slot::W_QKV), p(slot::B_QKV));
        let q = qkv.slice(ndarray::s![.., 0..d]);
        let new_k = qkv.slice(ndarray::s![.., d..2 * d]);
        let new_v = qkv.slice(ndarray::s![.., 2 * d..3 * d]);
        let keys = ndarray::concatenate(ndarray::Axis(0), &[cache.keys[l].view(), new_k])
            .expect("width matches");
        let values = ndarray::concatenate(ndarray::Axis(0), &[cache.values[l].view(), new_v])
            .expect("width matches");
        let mut att = Array2::zeros((n, d));
        for hi in 0..cfg.heads {
            let cols = hi * hd..(hi + 1) * hd;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = keys.slice(ndarray::s![.., cols.clone()]);
            let vh = values.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t()) * inv_sqrt;
            for i in 0..n {
                for k in past + i + 1..past + n {
                    scores[[i, k]] = f64::NEG_INFINITY;
                }
            }
            let probs = crate::autodiff::softmax_rows(scores.view());
            att.slice_mut(ndarray::s![.., cols]).assign(&probs.dot(&vh));
        }
        cache.keys[l] = keys;
        cache.values[l] = values;
        let o = affine(&att, p(slot::W_ATTN_OUT), p(slot::B_ATTN_OUT));
        x += &o;
        let (h, _, _) = crate::autodiff::layer_norm_rows(
            x.view(),
            row_vec(p(slot::LN2_GAIN)),
            row_vec(p(slot::LN2_BIAS)),
            LN_EPS,
        );
        let mut f = affine(&h, p(slot::W_FC), p(slot::B_FC));
        f.mapv_inplace(crate::autodiff::gelu);
        let f = affine(&f, p(slot::W_PROJ), p(slot::B_PROJ));
        x += &f;
    }
    let fb = slot::final_base(cfg.layers);
    let (h, _, _) = crate::autodiff::layer_norm_rows(
        x.view(),
        row_vec(params.t(fb)),
        row_vec(params.t(fb + 1)),
        LN_EPS,
    );
    affine(&h, params.t(fb + 2), params.t(fb + 3))
}

/// Per-branch keys/values appended after a shared prefix, one flat
/// row-major buffer per layer.
#[derive(Debug, Clone)]
pub struct BranchCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl BranchCache {
    pub fn new(config: &PolicyConfig) -> Self {
        Self {
            keys: vec![Vec::new(); config.layers],
            values: vec![Vec::new(); config.layers],
        }
    }
}

/// Advances several independent branches of one prefix by one token each.
/// Row `i` of `tokens` belongs to `branches[i]`; linear layers run batched,
/// attention runs per branch over the shared prefix plus its own rows.
/// Returns next-token logits per branch.
pub fn decode_step(
    params: &PolicyParams,
    prefix: &KvCache,
    branches: &mut [&mut BranchCache],
    tokens: &[TokenId],
    positions: &[usize],
) -> Array2<f64> {
    let cfg = params.config;
    let (d, hd) = (cfg.width, cfg.head_dim());
    let n = tokens.len();
    let tok = mat(params.t(slot::TOK_EMB));
    let pos = mat(params.t(slot::POS_EMB));
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        let mut row = x.row_mut(i);
        row.assign(&tok.row(tokens[i]));
        row += &pos.row(positions[i]);
    }
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut scores = Vec::new();
    for l in 0..cfg.layers {
        let p = |k| params.t(slot::layer(l, k));
        let (h, _, _) = crate::autodiff::layer_norm_rows(
            x.view(),
            row_vec(p(slot::LN1_GAIN)),
            row_vec(p(slot::LN1_BIAS)),
            LN_EPS,
        );
        let qkv = affine(&h, p(slot::W_QKV), p(slot::B_QKV));
        let pk = &prefix.keys[l];
        let pv = &prefix.values[l];
        let plen = pk.nrows();
        let mut att = Array2::zeros((n, d));
        for (i, branch) in branches.iter_mut().enumerate() {
            let row = qkv.row(i);
            let row = row.as_slice().expect("contiguous row");
            branch.keys[l].extend_from_slice(&row[d..2 * d]);
            branch.values[l].extend_from_slice(&row[2 * d..3 * d]);
            let bk = &branch.keys[l];
            let bv = &branch.values[l];
            let blen = bk.len() / d;
            for hi in 0..cfg.heads {
                let c0 = hi * hd;
                let q = &row[c0..c0 + hd];
                scores.clear();
                for r in 0..plen {
                    let k = pk.row(r);
                    let s: f64 = (0..hd).map(|j| q[j] * k[c0 + j]).sum();
                    scores.push(s * inv_sqrt);
                }
                for r in 0..blen {
                    let k = &bk[r * d + c0..r * d + c0 + hd];
                    let s: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                    scores.push(s * inv_sqrt);
                }
                let m = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let mut out = att.row_mut(i);
                for (r, &w) in scores.iter().enumerate() {
                    let w = w / z;
                    if r < plen {
                        let v = pv.row(r);
                        for j in 0..hd {
                            out[c0 + j] += w * v[c0 + j];
                        }
                    } else {
                        let v = &bv[(r - plen) * d + c0..];
                        for j in 0..hd {
                            out[c0 + j] += w * v[j];
                        }
                    }
                }
            }
        }
        let o = affine(&att, p(slot::W_ATTN_OUT), p(slot::B_ATTN_OUT));
        x += &o;
        let (h, _, _) = crate::autodiff::layer_norm_rows(
            x.view(),
            row_vec(p(slot::LN2_GAIN)),
            row_vec(p(slot::LN2_BIAS)),
            LN_EPS,
        );
        let mut f = affine(&h, p(slot::W_FC), p(slot::B_FC));
        f.mapv_inplace(crate::autodiff::gelu);
        let f = affine(&f, p(slot::W_PROJ), p(slot::B_PROJ));
        x += &f;
    }
    let fb = slot::final_base(cfg.layers);
    let (h, _, _) = crate::autodiff::layer_norm_rows(
        x.view(),
        row_vec(params.t(fb)),
        row_vec(params.t(fb + 1)),
        LN_EPS,
    );
    affine(&h, params.t(fb + 2), params.t(fb + 3))
}

/// Next-token log-distribution after `prompt`.
pub fn next_token_logprobs(
    params: &PolicyParams,
    prompt: &[TokenId],
) -> Result<Array1<f64>, PolicyError> {
    check_context(&params.config, prompt, &[])?;
    if prompt.len() > params.config.context {
        return Err(PolicyError::ContextOverflow {
            needed: prompt.len(),
            context: params.config.context,
        });
    }
    let mut cache = KvCache::new(&params.config);
    let positions: Vec<usize> = (0..prompt.len()).collect();
    let logits = forward_cached(params, &mut cache, prompt, &positions);
    let last = logits.slice(ndarray::s![logits.nrows() - 1..logits.nrows(), ..]);
    Ok(crate::autodiff::log_softmax_rows(last).row(0).to_owned())
}
