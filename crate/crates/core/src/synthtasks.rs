//! Seeded synthetic multiple-choice task families.
//!
//! * `COPY`: the answer text is stated in the question ("Which option is c?").
//! * `PARITY`: is the digit sum even or odd.
//! * `CHAIN-k`: follow a cyclic map over the option symbols for `k` steps.
//!
//! COPY and CHAIN choices use canonical texts (option `A` reads `a`, ...), so
//! the difficulty lies in the lookups stated in the question. PARITY choices
//! are shuffled words. Every item is solvable from its own text;
//! [`oracle_solve`] recomputes the answer by parsing the question,
//! independently of the generator.

use crate::dataio::{label_for, Choice, Dataset, QaItem};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("item {id:?} does not parse as any task family")]
    Unparseable { id: String },
    #[error("item {id:?}: computed answer {answer:?} is not among the choices")]
    NoMatchingChoice { id: String, answer: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Copy,
    Parity,
    Chain(usize),
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Copy => write!(f, "copy"),
            Family::Parity => write!(f, "parity"),
            Family::Chain(k) => write!(f, "chain{k}"),
        }
    }
}

impl FromStr for Family {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase().replace(['-', '_'], "");
        match lower.as_str() {
            "copy" => Ok(Family::Copy),
            "parity" => Ok(Family::Parity),
            _ => lower
                .strip_prefix("chain")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(Family::Chain)
                .ok_or_else(|| TaskError::Spec(format!("unknown family {s:?}"))),
        }
    }
}

/// Target question length in tokens (bytes). Items shorter than a draw from
/// `N(mean, std)` are padded with a filler context line; `mean == 0` keeps
/// the natural length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LengthProfile {
    pub mean: usize,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub n_items: usize,
    pub n_choices: usize,
    pub length: LengthProfile,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(family: Family, n_items: usize, n_choices: usize, seed: u64) -> Self {
        Self {
            family,
            n_items,
            n_choices,
            length: LengthProfile::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if !(3..=5).contains(&self.n_choices) {
            return Err(TaskError::Spec(format!(
                "n_choices must be 3..=5, got {}",
                self.n_choices
            )));
        }
        if let Family::Chain(k) = self.family {
            if k == 0 || k > 8 {
                return Err(TaskError::Spec(format!("chain length must be 1..=8, got {k}")));
            }
        }
        if !(self.length.std >= 0.0 && self.length.std.is_finite()) {
            return Err(TaskError::Spec("length std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Generated corpus plus each item's intrinsic difficulty (COPY 0, PARITY the
/// digit count, CHAIN-k `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTasks {
    pub dataset: Dataset,
    pub difficulty: Vec<usize>,
}

const PAD_PREFIX: &str = "\nContext: ";
const FILLER: &[&str] = &[
    "the", "quiet", "river", "moves", "past", "old", "stone", "walls", "while", "birds", "circle",
    "above", "green", "fields", "and", "a", "farmer", "counts", "sheep", "near", "wooden",
    "fence", "under", "grey", "clouds", "before", "evening", "rain",
];
const PARITY_DISTRACTORS: &[&str] = &["prime", "zero", "negative"];
const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn filler(rng: &mut ChaCha8Rng, len: usize) -> String {
    let mut s = String::with_capacity(len + 8);
    while s.len() < len {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(FILLER.choose(rng).expect("non-empty"));
    }
    s.truncate(len);
    s
}

/// Canonical choice texts: option `A` reads `a`, `B` reads `b`, and so on.
fn symbol_choices(n: usize) -> Vec<Choice> {
    (0..n)
        .map(|i| Choice {
            label: label_for(i),
            text: symbol(i).to_string(),
        })
        .collect()
}

fn symbol(i: usize) -> char {
    LETTERS[i] as char
}

fn copy_item(n: usize, gold: usize) -> (String, Vec<Choice>, usize) {
    let question = format!("Which option is {}?", symbol(gold));
    (question, symbol_choices(n), 0)
}

fn parity_item(rng: &mut ChaCha8Rng, n: usize, gold: usize) -> (String, Vec<Choice>, usize) {
    let count = rng.gen_range(3..=6);
    let digits: Vec<u32> = (0..count).map(|_| rng.gen_range(0..10)).collect();
    let even = digits.iter().sum::<u32>() % 2 == 0;
    let (right, wrong) = if even { ("even", "odd") } else { ("odd", "even") };
    let listed = digits
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    let question = format!("Digits: {listed}. Is their sum even or odd?");
    let mut others: Vec<String> = PARITY_DISTRACTORS.iter().map(|s| s.to_string()).collect();
    others.shuffle(rng);
    let mut distractors = vec![wrong.to_string()];
    distractors.extend(others.into_iter().take(n - 2));
    distractors.shuffle(rng);
    let mut rest = distractors.into_iter();
    let choices = (0..n)
        .map(|i| Choice {
            label: label_for(i),
            text: if i == gold {
                right.to_string()
            } else {
                rest.next().expect("enough distractors")
            },
        })
        .collect();
    (question, choices, count)
}

/// A random cyclic permutation of the `n` symbols, listed in walk order
/// from a start `s` chosen so that `k` steps from `s` end at `gold`.
fn chain_item(
    rng: &mut ChaCha8Rng,
    n: usize,
    gold: usize,
    k: usize,
) -> (String, Vec<Choice>, usize) {
    let mut cycle: Vec<usize> = (0..n).collect();
    cycle.shuffle(rng);
    let at = cycle.iter().position(|&c| c == gold).expect("gold in cycle");
    let start = (at + n - k % n) % n;
    let listed = (0..n)
        .map(|i| {
            let from = cycle[(start + i) % n];
            let to = cycle[(start + i + 1) % n];
            format!("{}->{}", symbol(from), symbol(to))
        })
        .collect::<Vec<_>>()
        .join(", ");
    let question = format!(
        "Start at {}, follow {k} step{}. Map: {listed}.",
        symbol(cycle[start]),
        if k == 1 { "" } else { "s" }
    );
    (question, symbol_choices(n), k)
}

/// Deterministic corpus for `spec`. Gold labels are drawn uniformly.
pub fn generate(spec: &TaskSpec) -> Result<GeneratedTasks, TaskError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let length = Normal::new(spec.length.mean as f64, spec.length.std)
        .map_err(|e| TaskError::Spec(e.to_string()))?;
    let mut items = Vec::with_capacity(spec.n_items);
    let mut difficulty = Vec::with_capacity(spec.n_items);
    let source = spec.family.to_string();
    for i in 0..spec.n_items {
        let gold = rng.gen_range(0..spec.n_choices);
        let (mut question, choices, diff) = match spec.family {
            Family::Copy => copy_item(spec.n_choices, gold),
            Family::Parity => parity_item(&mut rng, spec.n_choices, gold),
            Family::Chain(k) => chain_item(&mut rng, spec.n_choices, gold, k),
        };
        if spec.length.mean > 0 {
            let target = length.sample(&mut rng).round().max(0.0) as usize;
            let natural = question.len() + PAD_PREFIX.len() + 1;
            if target > natural {
                let pad = filler(&mut rng, target - natural);
                question = format!("{question}{PAD_PREFIX}{pad}");
            }
        }
        items.push(QaItem {
            id: format!("{source}-{:05}", i),
            question,
            answer: label_for(gold),
            choices,
            source: source.clone(),
        });
        difficulty.push(diff);
    }
    let dataset = Dataset::new(source, items).map_err(|e| TaskError::Spec(e.to_string()))?;
    Ok(GeneratedTasks {
        dataset,
        difficulty,
    })
}

fn core_question(item: &QaItem) -> &str {
    match item.question.split_once(PAD_PREFIX) {
        Some((core, _)) => core,
        None => &item.question,
    }
}

fn label_of(item: &QaItem, text: &str) -> Result<String, TaskError> {
    item.choices
        .iter()
        .find(|c| c.text == text)
        .map(|c| c.label.clone())
        .ok_or_else(|| TaskError::NoMatchingChoice {
            id: item.id.clone(),
            answer: text.to_string(),
        })
}

/// Recomputes the answer label from the question text alone.
pub fn oracle_solve(item: &QaItem) -> Result<String, TaskError> {
    let q = core_question(item);
    let unparseable = || TaskError::Unparseable {
        id: item.id.clone(),
    };
    if let Some(target) = q
        .strip_prefix("Which option is ")
        .and_then(|r| r.strip_suffix('?'))
    {
        return label_of(item, target);
    }
    if let Some(rest) = q.strip_prefix("Digits: ") {
        let (digits, _) = rest.split_once('.').ok_or_else(unparseable)?;
        let mut sum = 0u64;
        for d in digits.split_whitespace() {
            sum += d.parse::<u64>().map_err(|_| unparseable())?;
        }
        return label_of(item, if sum % 2 == 0 { "even" } else { "odd" });
    }
    if let Some(rest) = q.strip_prefix("Start at ") {
        let (start, rest) = rest.split_once(", follow ").ok_or_else(unparseable)?;
        let (steps, map_text) = rest.split_once(". Map: ").ok_or_else(unparseable)?;
        let steps: usize = steps
            .split_whitespace()
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(unparseable)?;
        let map_text = map_text.strip_suffix('.').ok_or_else(unparseable)?;
        let mut map = std::collections::HashMap::new();
        for pair in map_text.split(", ") {
            let (a, b) = pair.split_once("->").ok_or_else(unparseable)?;
            map.insert(a.to_string(), b.to_string());
        }
        let mut at = start.to_string();
        for _ in 0..steps {
            at = map.get(&at).cloned().ok_or_else(unparseable)?;
        }
        return label_of(item, &at);
    }
    Err(unparseable())
}
