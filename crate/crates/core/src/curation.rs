//! Difficulty quantification, level bucketing, subset construction and
//! question-length statistics.
//!
//! An item probed `k` times with `c` correct completions lands at level
//! `L(k + 1 - c)`: L1 is always solved, L(k+1) never.

use crate::dataio::{Dataset, PromptTemplate, QaItem};
use crate::grpo::mix_seed;
use crate::policy::{generate, Completion, Decoding, PolicyError, PolicyParams, Tokenizer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("k must be >= 1")]
    ZeroK,
    #[error("correct count {c} outside 0..={k}")]
    CorrectCount { k: usize, c: usize },
    #[error("item {id}: {source}")]
    Probe {
        id: String,
        #[source]
        source: PolicyError,
    },
    #[error("no probe record for item {0}")]
    MissingRecord(String),
    #[error("item {id}: record has {got} flags, expected k = {k}")]
    RecordLength { id: String, got: usize, k: usize },
    #[error("records line {line}: {message}")]
    MalformedRecords { line: usize, message: String },
    #[error("records mix different k values")]
    MixedK,
    #[error("no records")]
    NoRecords,
    #[error("L{level} has {available} < {requested}")]
    Insufficient {
        level: usize,
        available: usize,
        requested: usize,
    },
    #[error("source {0:?} not provided")]
    UnknownSource(String),
    #[error("source {0:?} needs difficulty records for a per-level selector")]
    RecordsRequired(String),
    #[error("invalid recipe: {0}")]
    Recipe(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
}

pub type Result<T> = std::result::Result<T, CurationError>;

/// Level index (1-based) for `c` correct out of `k` probes.
pub fn assign_level(k: usize, c: usize) -> Result<usize> {
    if k == 0 {
        return Err(CurationError::ZeroK);
    }
    if c > k {
        return Err(CurationError::CorrectCount { k, c });
    }
    Ok(k + 1 - c)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub item_id: String,
    pub k: usize,
    pub correct_count: usize,
    pub level: usize,
}

impl DifficultyRecord {
    pub fn from_flags(item_id: impl Into<String>, flags: &[bool]) -> Result<Self> {
        let k = flags.len();
        let correct_count = flags.iter().filter(|&&f| f).count();
        Ok(Self {
            item_id: item_id.into(),
            k,
            correct_count,
            level: assign_level(k, correct_count)?,
        })
    }
}

/// Source of per-item correctness flags.
pub trait Prober: Sync {
    /// `k` correctness flags for `item`; `seed` is unique to the item.
    fn probe(&self, item: &QaItem, k: usize, seed: u64) -> Result<Vec<bool>>;
}

/// Samples `k` completions from a policy and scores them.
#[derive(Debug, Clone)]
pub struct PolicyProber<'a> {
    pub params: &'a PolicyParams,
    pub template: &'a PromptTemplate,
    pub temperature: f64,
    pub max_new: usize,
}

impl Prober for PolicyProber<'_> {
    fn probe(&self, item: &QaItem, k: usize, seed: u64) -> Result<Vec<bool>> {
        let prompt = Tokenizer.encode_prompt(&self.template.render(item));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gens = generate(
            self.params,
            &prompt,
            k,
            Decoding::Sample {
                temperature: self.temperature,
            },
            self.max_new,
            &mut rng,
        )
        .map_err(|source| CurationError::Probe {
            id: item.id.clone(),
            source,
        })?;
        Ok(gens
            .into_iter()
            .map(|g| Completion::score(g, &item.answer).reward == 1.0)
            .collect())
    }
}

/// Correctness flags produced elsewhere, keyed by item id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportedRecords {
    pub flags: HashMap<String, Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    item_id: String,
    correct: Vec<bool>,
}

impl ImportedRecords {
    /// Parses line-delimited `{"item_id": ..., "correct": [bool, ...]}`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut flags = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine =
                serde_json::from_str(line).map_err(|e| CurationError::MalformedRecords {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if flags.insert(rec.item_id.clone(), rec.correct).is_some() {
                return Err(CurationError::MalformedRecords {
                    line: i + 1,
                    message: format!("duplicate item_id {:?}", rec.item_id),
                });
            }
        }
        Ok(Self { flags })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CurationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

impl Prober for ImportedRecords {
    fn probe(&self, item: &QaItem, k: usize, _seed: u64) -> Result<Vec<bool>> {
        let flags = self
            .flags
            .get(&item.id)
            .ok_or_else(|| CurationError::MissingRecord(item.id.clone()))?;
        if flags.len() != k {
            return Err(CurationError::RecordLength {
                id: item.id.clone(),
                got: flags.len(),
                k,
            });
        }
        Ok(flags.clone())
    }
}

/// Probes every item `k` times and buckets it.
pub fn quantify_difficulty(
    ds: &Dataset,
    prober: &dyn Prober,
    k: usize,
    seed: u64,
) -> Result<Vec<DifficultyRecord>> {
    if k == 0 {
        return Err(CurationError::ZeroK);
    }
    ds.items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let flags = prober.probe(item, k, mix_seed(&[seed, i as u64]))?;
            DifficultyRecord::from_flags(item.id.clone(), &flags)
        })
        .collect()
}

/// Writes records in the import format (`correct` lists `c` trues first).
pub fn records_jsonl(records: &[DifficultyRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = RecordLine {
            item_id: r.item_id.clone(),
            correct: (0..r.k).map(|i| i < r.correct_count).collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Per-level item counts of one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyTable {
    pub name: String,
    pub counts: Vec<usize>,
    pub total: usize,
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl DifficultyTable {
    pub fn from_counts(name: impl Into<String>, counts: Vec<usize>) -> Self {
        let total = counts.iter().sum();
        Self {
            name: name.into(),
            counts,
            total,
        }
    }

    pub fn header(levels: usize) -> String {
        let mut cols = vec!["Dataset".to_string(), "Total".to_string()];
        cols.extend((1..=levels).map(|l| format!("L{l}")));
        format!("{} \\\\", cols.join(" & "))
    }

    /// `Name & total & L1 & ... & Ln \\` with thousands separators.
    pub fn row(&self) -> String {
        let mut cols = vec![self.name.clone(), thousands(self.total)];
        cols.extend(self.counts.iter().map(|&c| thousands(c)));
        format!("{} \\\\", cols.join(" & "))
    }

    /// Inverse of [`DifficultyTable::row`]. The stated total must equal the
    /// sum of the level counts.
    pub fn parse_row(row: &str) -> Result<Self> {
        let bad = |m: String| CurationError::Recipe(m);
        let body = row.trim().trim_end_matches("\\\\").trim();
        let cols: Vec<&str> = body.split('&').map(str::trim).collect();
        if cols.len() < 3 {
            return Err(bad(format!("table row needs a name, total and levels: {row:?}")));
        }
        let num = |s: &str| {
            s.replace(',', "")
                .parse::<usize>()
                .map_err(|_| bad(format!("not a count: {s:?}")))
        };
        let total = num(cols[1])?;
        let counts = cols[2..].iter().map(|c| num(c)).collect::<Result<Vec<_>>>()?;
        let table = Self::from_counts(cols[0], counts);
        if table.total != total {
            return Err(bad(format!(
                "stated total {} != level sum {}",
                thousands(total),
                thousands(table.total)
            )));
        }
        Ok(table)
    }
}

fn common_k(records: &[DifficultyRecord]) -> Result<usize> {
    let k = records.first().ok_or(CurationError::NoRecords)?.k;
    if records.iter().any(|r| r.k != k) {
        return Err(CurationError::MixedK);
    }
    Ok(k)
}

pub fn build_difficulty_table(
    records: &[DifficultyRecord],
    name: impl Into<String>,
) -> Result<DifficultyTable> {
    let k = common_k(records)?;
    let mut counts = vec![0; k + 1];
    for r in records {
        counts[r.level - 1] += 1;
    }
    Ok(DifficultyTable::from_counts(name, counts))
}

fn level_map(records: &[DifficultyRecord]) -> HashMap<&str, usize> {
    records
        .iter()
        .map(|r| (r.item_id.as_str(), r.level))
        .collect()
}

/// Item indices of `ds` grouped by level (index 0 = L1), in dataset order.
fn items_by_level(ds: &Dataset, records: &[DifficultyRecord]) -> Result<Vec<Vec<usize>>> {
    let k = common_k(records)?;
    let levels = level_map(records);
    let mut by_level = vec![Vec::new(); k + 1];
    for (i, item) in ds.items.iter().enumerate() {
        let level = *levels
            .get(item.id.as_str())
            .ok_or_else(|| CurationError::MissingRecord(item.id.clone()))?;
        by_level[level - 1].push(i);
    }
    Ok(by_level)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectMode {
    /// Error when a level has fewer than `n` items.
    Strict,
    /// Take `min(n, available)` and report the shortfall.
    Cap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub source: String,
    pub level: usize,
    pub requested: usize,
    pub available: usize,
}

/// Seeded sample of up to `n` items per level, without replacement.
fn sample_per_level(
    ds: &Dataset,
    records: &[DifficultyRecord],
    n: usize,
    mode: SelectMode,
    seed: u64,
) -> Result<(Vec<usize>, Vec<Shortfall>)> {
    let by_level = items_by_level(ds, records)?;
    if mode == SelectMode::Strict {
        if let Some((l, pool)) = by_level.iter().enumerate().find(|(_, p)| p.len() < n) {
            return Err(CurationError::Insufficient {
                level: l + 1,
                available: pool.len(),
                requested: n,
            });
        }
    }
    let mut picked = Vec::new();
    let mut shortfalls = Vec::new();
    for (l, pool) in by_level.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, l as u64 + 1]));
        let take = n.min(pool.len());
        if take < n {
            shortfalls.push(Shortfall {
                source: ds.name.clone(),
                level: l + 1,
                requested: n,
                available: pool.len(),
            });
        }
        picked.extend(pool.choose_multiple(&mut rng, take).copied());
    }
    Ok((picked, shortfalls))
}

fn subset(ds: &Dataset, name: String, indices: &[usize]) -> Result<Dataset> {
    Ok(Dataset::new(
        name,
        indices.iter().map(|&i| ds.items[i].clone()).collect(),
    )?)
}

/// Exactly `n_per_level` items from every level.
pub fn build_balanced_subset(
    ds: &Dataset,
    records: &[DifficultyRecord],
    n_per_level: usize,
    seed: u64,
) -> Result<Dataset> {
    let (picked, _) = sample_per_level(ds, records, n_per_level, SelectMode::Strict, seed)?;
    subset(ds, format!("{}-balanced{}", ds.name, n_per_level), &picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DifficultyGroup {
    Easy,
    Medium,
    Hard,
}

impl DifficultyGroup {
    /// Levels covered by the group, for six-level bucketing.
    pub fn levels(self) -> [usize; 2] {
        match self {
            DifficultyGroup::Easy => [1, 2],
            DifficultyGroup::Medium => [3, 4],
            DifficultyGroup::Hard => [5, 6],
        }
    }
}

impl fmt::Display for DifficultyGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DifficultyGroup::Easy => "easy",
            DifficultyGroup::Medium => "medium",
            DifficultyGroup::Hard => "hard",
        })
    }
}

impl FromStr for DifficultyGroup {
    type Err = CurationError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(DifficultyGroup::Easy),
            "medium" => Ok(DifficultyGroup::Medium),
            "hard" => Ok(DifficultyGroup::Hard),
            _ => Err(CurationError::Recipe(format!("unknown group {s:?}"))),
        }
    }
}

/// All items whose level falls in `group`, in dataset order.
pub fn build_difficulty_group(
    ds: &Dataset,
    records: &[DifficultyRecord],
    group: DifficultyGroup,
) -> Result<Dataset> {
    let levels = level_map(records);
    let wanted = group.levels();
    let mut items = Vec::new();
    for item in &ds.items {
        let level = *levels
            .get(item.id.as_str())
            .ok_or_else(|| CurationError::MissingRecord(item.id.clone()))?;
        if wanted.contains(&level) {
            items.push(item.clone());
        }
    }
    Ok(Dataset::new(format!("{}-{}", ds.name, group), items)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selector {
    All,
    PerLevel { n: usize, mode: SelectMode },
}

impl FromStr for Selector {
    type Err = CurationError;
    /// `all`, `strict:N` or `cap:N`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || CurationError::Recipe(format!("bad selector {s:?}"));
        if s.eq_ignore_ascii_case("all") {
            return Ok(Selector::All);
        }
        let (mode, n) = s.split_once(':').ok_or_else(bad)?;
        let n = n.trim().parse().map_err(|_| bad())?;
        let mode = match mode.trim().to_ascii_lowercase().as_str() {
            "strict" => SelectMode::Strict,
            "cap" => SelectMode::Cap,
            _ => return Err(bad()),
        };
        Ok(Selector::PerLevel { n, mode })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecipe {
    pub seed: u64,
    pub entries: Vec<(String, Selector)>,
}

impl MixRecipe {
    /// Flat TOML: `seed = N` plus one `source = "selector"` line per source.
    /// Sources are taken in name order.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: BTreeMap<String, toml::Value> =
            toml::from_str(text).map_err(|e| CurationError::Recipe(e.to_string()))?;
        let mut seed = 0;
        let mut entries = Vec::new();
        for (key, value) in table {
            if key == "seed" {
                seed = value
                    .as_integer()
                    .and_then(|v| u64::try_from(v).ok())
                    .ok_or_else(|| CurationError::Recipe("seed must be a non-negative integer".into()))?;
                continue;
            }
            let sel = value
                .as_str()
                .ok_or_else(|| CurationError::Recipe(format!("{key}: selector must be a string")))?;
            entries.push((key, sel.parse()?));
        }
        if entries.is_empty() {
            return Err(CurationError::Recipe("recipe lists no sources".into()));
        }
        Ok(Self { seed, entries })
    }
}

/// One input of [`mix_datasets`].
#[derive(Debug, Clone, Copy)]
pub struct MixSource<'a> {
    pub dataset: &'a Dataset,
    pub records: Option<&'a [DifficultyRecord]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixOutcome {
    pub dataset: Dataset,
    pub shortfalls: Vec<Shortfall>,
}

/// Concatenates the selections of every recipe entry; item ids become
/// `<source>/<id>`.
pub fn mix_datasets(
    recipe: &MixRecipe,
    sources: &BTreeMap<String, MixSource<'_>>,
    name: impl Into<String>,
) -> Result<MixOutcome> {
    let mut items = Vec::new();
    let mut shortfalls = Vec::new();
    for (i, (source, selector)) in recipe.entries.iter().enumerate() {
        let src = sources
            .get(source)
            .ok_or_else(|| CurationError::UnknownSource(source.clone()))?;
        let indices: Vec<usize> = match *selector {
            Selector::All => (0..src.dataset.len()).collect(),
            Selector::PerLevel { n, mode } => {
                let records = src
                    .records
                    .ok_or_else(|| CurationError::RecordsRequired(source.clone()))?;
                let (picked, short) = sample_per_level(
                    src.dataset,
                    records,
                    n,
                    mode,
                    mix_seed(&[recipe.seed, i as u64]),
                )?;
                shortfalls.extend(short.into_iter().map(|s| Shortfall {
                    source: source.clone(),
                    ..s
                }));
                picked
            }
        };
        items.extend(indices.into_iter().map(|j| {
            let mut item = src.dataset.items[j].clone();
            item.id = format!("{source}/{}", item.id);
            item
        }));
    }
    Ok(MixOutcome {
        dataset: Dataset::new(name, items)?,
        shortfalls,
    })
}

/// Question-length distribution in tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub lengths: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub min: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: usize,
    pub bin_width: usize,
    /// `(bin start, count)` for consecutive bins from 0 up to the maximum.
    pub histogram: Vec<(usize, usize)>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[usize], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

pub fn length_stats(ds: &Dataset, tokenizer: &Tokenizer, bin_width: usize) -> LengthStats {
    let bin_width = bin_width.max(1);
    let lengths: Vec<usize> = ds.items.iter().map(|i| tokenizer.count(&i.question)).collect();
    let mut sorted = lengths.clone();
    sorted.sort_unstable();
    let n = lengths.len().max(1) as f64;
    let mean = lengths.iter().sum::<usize>() as f64 / n;
    let std = (lengths
        .iter()
        .map(|&l| (l as f64 - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let max = sorted.last().copied().unwrap_or(0);
    let mut histogram: Vec<(usize, usize)> = if lengths.is_empty() {
        Vec::new()
    } else {
        (0..=max / bin_width).map(|b| (b * bin_width, 0)).collect()
    };
    for &l in &lengths {
        histogram[l / bin_width].1 += 1;
    }
    LengthStats {
        mean,
        std,
        min: sorted.first().copied().unwrap_or(0),
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max,
        bin_width,
        histogram,
        lengths,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::toy_item;

    fn ds(n: usize) -> Dataset {
        Dataset::new(
            "d",
            (0..n).map(|i| toy_item(&format!("q{i}"), "A")).collect(),
        )
        .unwrap()
    }

    fn records(levels: &[usize]) -> Vec<DifficultyRecord> {
        levels
            .iter()
            .enumerate()
            .map(|(i, &l)| DifficultyRecord {
                item_id: format!("q{i}"),
                k: 5,
                correct_count: 6 - l,
                level: l,
            })
            .collect()
    }

    #[test]
    fn levels_follow_correct_counts() {
        for c in 0..=5 {
            assert_eq!(assign_level(5, c).unwrap(), 6 - c);
        }
        assert!(assign_level(5, 6).is_err());
        assert!(assign_level(0, 0).is_err());
    }

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(934), "934");
        assert_eq!(thousands(1970), "1,970");
        assert_eq!(thousands(211268), "211,268");
        assert_eq!(thousands(1234567), "1,234,567");
    }

    #[test]
    fn table_rows_round_trip() {
        let t = DifficultyTable::from_counts("X", vec![10, 0, 0, 0, 0, 0]);
        assert_eq!(t.total, 10);
        assert_eq!(DifficultyTable::parse_row(&t.row()).unwrap(), t);
        assert!(DifficultyTable::parse_row("X & 11 & 10 & 0 \\\\").is_err());
        assert_eq!(
            DifficultyTable::header(6),
            "Dataset & Total & L1 & L2 & L3 & L4 & L5 & L6 \\\\"
        );
    }

    #[test]
    fn balanced_subset_and_shortfall() {
        let levels: Vec<usize> = (0..60).map(|i| i % 6 + 1).collect();
        let d = ds(60);
        let r = records(&levels);
        let s = build_balanced_subset(&d, &r, 10, 1).unwrap();
        assert_eq!(s.len(), 60);
        let s = build_balanced_subset(&d, &r, 4, 1).unwrap();
        assert_eq!(s.len(), 24);
        assert_eq!(s, build_balanced_subset(&d, &r, 4, 1).unwrap());
        let err = build_balanced_subset(&d, &r, 11, 1).unwrap_err();
        assert_eq!(err.to_string(), "L1 has 10 < 11");
    }

    #[test]
    fn groups_partition() {
        let levels: Vec<usize> = (0..30).map(|i| i % 6 + 1).collect();
        let d = ds(30);
        let r = records(&levels);
        let sizes: Vec<usize> = [DifficultyGroup::Easy, DifficultyGroup::Medium, DifficultyGroup::Hard]
            .iter()
            .map(|&g| build_difficulty_group(&d, &r, g).unwrap().len())
            .collect();
        assert_eq!(sizes, vec![10, 10, 10]);
        let all_easy = records(&[1; 30]);
        assert!(build_difficulty_group(&d, &all_easy, DifficultyGroup::Hard)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn recipe_parsing() {
        let r = MixRecipe::from_toml("seed = 3\nb = \"cap:16\"\na = \"all\"").unwrap();
        assert_eq!(r.seed, 3);
        assert_eq!(r.entries[0], ("a".to_string(), Selector::All));
        assert_eq!(
            r.entries[1].1,
            Selector::PerLevel {
                n: 16,
                mode: SelectMode::Cap
            }
        );
        assert!(MixRecipe::from_toml("seed = 1").is_err());
        assert!(MixRecipe::from_toml("a = \"some\"").is_err());
    }

    #[test]
    fn imported_records_parse() {
        let text = "{\"item_id\":\"q0\",\"correct\":[true,true,false,false,false]}\n\n";
        let imp = ImportedRecords::parse(text).unwrap();
        let recs = quantify_difficulty(&ds(1), &imp, 5, 0).unwrap();
        assert_eq!(recs[0].level, 4);
        assert!(quantify_difficulty(&ds(1), &imp, 4, 0).is_err());
        assert!(quantify_difficulty(&ds(2), &imp, 5, 0).is_err());
        assert!(matches!(
            ImportedRecords::parse("{oops"),
            Err(CurationError::MalformedRecords { line: 1, .. })
        ));
        let again = ImportedRecords::parse(&records_jsonl(&recs)).unwrap();
        assert_eq!(quantify_difficulty(&ds(1), &again, 5, 0).unwrap(), recs);
    }

    #[test]
    fn length_stats_basics() {
        let d = ds(7);
        let s = length_stats(&d, &Tokenizer, 4);
        assert_eq!(s.std, 0.0);
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 4.0);
        assert_eq!(s.histogram.iter().map(|b| b.1).sum::<usize>(), 7);
        let empty = Dataset::new("e", vec![]).unwrap();
        assert!(length_stats(&empty, &Tokenizer, 4).histogram.is_empty());
    }
}
