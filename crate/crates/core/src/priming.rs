//! Answer-format priming.
//!
//! A freshly initialized byte-level policy essentially never emits a well
//! formed `\boxed{X}` followed by EOS, so every rollout group would be
//! degenerate. Priming fits the policy to the answer format with every label
//! of an item weighted equally: it learns *how* to answer, not *what* to
//! answer, and gold labels are never read. A next-token loss on the prompt
//! itself is added so the attention layers start out reading the question.

use crate::autodiff::Graph;
use crate::dataio::{render_prompt, Dataset, PromptTemplate, QaItem};
use crate::grpo::{mix_seed, GrpoError, TrainConfig};
use crate::optim::{Adam, AdamConfig};
use crate::policy::{packed_logprobs, ParamVars, PolicyParams, TokenId, Tokenizer, EOS};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// `\boxed{L}` + EOS for every choice label of `item`.
pub fn format_targets(item: &QaItem) -> Vec<Vec<TokenId>> {
    item.labels()
        .into_iter()
        .map(|l| {
            let mut t = Tokenizer.tokenize(format!("\\boxed{{{l}}}").as_bytes());
            t.push(EOS);
            t
        })
        .collect()
}

/// Mean per-item negative log-likelihood of all format targets plus the
/// mean per-token prompt loss, and its gradient.
pub fn format_loss(
    params: &PolicyParams,
    items: &[&QaItem],
    template: &PromptTemplate,
) -> Result<(f64, Vec<ArrayD<f64>>), GrpoError> {
    let scale = 1.0 / items.len() as f64;
    let parts = items
        .par_iter()
        .map(|item| {
            let prompt = Tokenizer.encode_prompt(&render_prompt(item, template));
            let targets = format_targets(item);
            let mut g = Graph::new();
            let pv = ParamVars::trainable(&mut g, params);
            let (lp, _) = packed_logprobs(&mut g, &pv, &prompt, &targets)?;
            let n = g.value(lp).len() as f64;
            let w = ArrayD::from_elem(g.shape(lp).to_vec(), -scale * targets[0].len() as f64 / n);
            let answer_loss = g.weighted_sum(lp, w)?;
            let (lm, _) = packed_logprobs(&mut g, &pv, &prompt[..1], &[prompt[1..].to_vec()])?;
            let m = g.value(lm).len() as f64;
            let w = ArrayD::from_elem(g.shape(lm).to_vec(), -scale / m);
            let lm_loss = g.weighted_sum(lm, w)?;
            let loss = g.add(answer_loss, lm_loss)?;
            g.backward(loss)?;
            Ok((g.scalar(loss), pv.grads(&g)))
        })
        .collect::<Result<Vec<_>, GrpoError>>()?;
    let mut grads: Vec<ArrayD<f64>> = params
        .tensors
        .iter()
        .map(|t| ArrayD::zeros(t.raw_dim()))
        .collect();
    let mut loss = 0.0;
    for (l, gs) in parts {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            *acc += &g;
        }
    }
    Ok((loss, grads))
}

/// Runs `config.prime_steps` Adam steps of format priming on `data`.
/// Returns the loss of every step.
pub fn prime_format(
    params: &mut PolicyParams,
    data: &Dataset,
    template: &PromptTemplate,
    config: &TrainConfig,
) -> Result<Vec<f64>, GrpoError> {
    if config.prime_steps == 0 || data.is_empty() {
        return Ok(Vec::new());
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.prime_learning_rate,
            ..config.adam()
        },
        &params.tensors,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x9417]));
    let mut losses = Vec::with_capacity(config.prime_steps);
    for _ in 0..config.prime_steps {
        let batch: Vec<&QaItem> = data
            .items
            .choose_multiple(&mut rng, config.prime_batch.min(data.len()))
            .collect();
        let (loss, grads) = format_loss(params, &batch, template)?;
        opt.step(&mut params.tensors, &grads);
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::toy_item;

    #[test]
    fn targets_cover_every_label() {
        let t = format_targets(&toy_item("t", "B"));
        assert_eq!(t.len(), 2);
        assert_eq!(Tokenizer.decode(&t[1]), "\\boxed{B}");
        assert_eq!(*t[0].last().unwrap(), EOS);
    }

    #[test]
    fn priming_lowers_loss_without_reading_gold() {
        let mut a = toy_item("a", "A");
        let items: Vec<QaItem> = (0..4)
            .map(|i| {
                a.id = format!("x{i}");
                a.clone()
            })
            .collect();
        let ds = Dataset::new("d", items.clone()).unwrap();
        let flipped: Vec<QaItem> = items
            .into_iter()
            .map(|mut it| {
                it.answer = "B".into();
                it
            })
            .collect();
        let ds_b = Dataset::new("d", flipped).unwrap();
        let cfg: TrainConfig = toml::from_str(
            "layers = 1\nwidth = 16\nheads = 2\ncontext = 64\nprime_steps = 15\nprime_batch = 2",
        )
        .unwrap();
        let tpl = PromptTemplate::new("{question}{choices}{instruction}", "?").unwrap();
        let p0 = crate::policy::init_params(cfg.policy(), 1).unwrap();
        let mut p = p0.clone();
        let losses = prime_format(&mut p, &ds, &tpl, &cfg).unwrap();
        assert_eq!(losses.len(), 15);
        assert!(losses.last().unwrap() < &losses[0]);
        let mut q = p0;
        prime_format(&mut q, &ds_b, &tpl, &cfg).unwrap();
        assert_eq!(p, q);
    }
}
