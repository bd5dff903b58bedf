//! Subcommand implementations and the declarative pipeline runner.

use crate::curation::{
    build_balanced_subset, build_difficulty_group, build_difficulty_table, mix_datasets,
    quantify_difficulty, records_jsonl, DifficultyGroup, DifficultyRecord, DifficultyTable,
    ImportedRecords, MixRecipe, MixSource, PolicyProber,
};
use crate::dataio::{
    load_dataset, write_dataset, Dataset, PromptTemplate, DEFAULT_INSTRUCTION, DEFAULT_TEMPLATE,
};
use crate::evalmetrics::{
    emit_report, eval_items_csv, eval_summary_csv, evaluate, metrics_csv, timing_csv, EvalResult,
};
use crate::grpo::{train, StepMetrics, TrainConfig};
use crate::policy::{load_checkpoint, save_checkpoint};
use crate::synthtasks::{generate, Family, LengthProfile, TaskSpec};
use crate::verifier;
use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn default_choices() -> usize {
    4
}
fn default_k() -> usize {
    5
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_new() -> usize {
    16
}

/// One unit of work. Relative paths resolve against the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Stage {
    Gen {
        family: String,
        n: usize,
        #[serde(default = "default_choices")]
        choices: usize,
        #[serde(default)]
        len_mean: usize,
        #[serde(default)]
        len_std: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
        out: PathBuf,
    },
    Curate {
        data: PathBuf,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default)]
        prober_ckpt: Option<PathBuf>,
        #[serde(default)]
        import_records: Option<PathBuf>,
        #[serde(default = "default_temperature")]
        temperature: f64,
        #[serde(default = "default_max_new")]
        max_new: usize,
        #[serde(default)]
        seed: Option<u64>,
        out_records: PathBuf,
    },
    Subset {
        data: PathBuf,
        records: PathBuf,
        #[serde(default)]
        per_level: Option<usize>,
        #[serde(default)]
        group: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
        out: PathBuf,
    },
    Mix {
        recipe: PathBuf,
        /// Source name to `[data]` or `[data, records]`.
        sources: BTreeMap<String, Vec<PathBuf>>,
        out: PathBuf,
    },
    Train {
        data: PathBuf,
        #[serde(default)]
        config: Option<PathBuf>,
        #[serde(default)]
        seed: Option<u64>,
        ckpt_out: PathBuf,
        metrics_out: PathBuf,
    },
    Eval {
        ckpt: PathBuf,
        data: PathBuf,
        #[serde(default = "default_max_new")]
        max_new: usize,
        out: PathBuf,
    },
    Report {
        metrics: PathBuf,
        #[serde(default)]
        evals: Vec<PathBuf>,
        out: PathBuf,
    },
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Gen { .. } => "gen",
            Stage::Curate { .. } => "curate",
            Stage::Subset { .. } => "subset",
            Stage::Mix { .. } => "mix",
            Stage::Train { .. } => "train",
            Stage::Eval { .. } => "eval",
            Stage::Report { .. } => "report",
        }
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Stage::Gen { .. } => vec![],
            Stage::Curate {
                data,
                prober_ckpt,
                import_records,
                ..
            } => std::iter::once(data.clone())
                .chain(prober_ckpt.clone())
                .chain(import_records.clone())
                .collect(),
            Stage::Subset { data, records, .. } => vec![data.clone(), records.clone()],
            Stage::Mix {
                recipe, sources, ..
            } => std::iter::once(recipe.clone())
                .chain(sources.values().flatten().cloned())
                .collect(),
            Stage::Train { data, config, .. } => {
                std::iter::once(data.clone()).chain(config.clone()).collect()
            }
            Stage::Eval { ckpt, data, .. } => vec![ckpt.clone(), data.clone()],
            Stage::Report { metrics, evals, .. } => {
                std::iter::once(metrics.clone()).chain(evals.iter().cloned()).collect()
            }
        }
    }

    pub fn outputs(&self) -> Vec<PathBuf> {
        match self {
            Stage::Gen { out, .. } | Stage::Subset { out, .. } | Stage::Mix { out, .. } => {
                vec![out.clone()]
            }
            Stage::Curate { out_records, .. } => vec![out_records.clone()],
            Stage::Train {
                ckpt_out,
                metrics_out,
                ..
            } => vec![ckpt_out.clone(), metrics_out.clone()],
            Stage::Eval { out, .. } => vec![out.clone(), eval_json_path(out)],
            Stage::Report { out, .. } => vec![out.clone()],
        }
    }

    fn resolve(&self, dir: &Path) -> Stage {
        let r = |p: &PathBuf| dir.join(p);
        let ro = |p: &Option<PathBuf>| p.as_ref().map(|p| dir.join(p));
        match self.clone() {
            Stage::Gen {
                family,
                n,
                choices,
                len_mean,
                len_std,
                seed,
                out,
            } => Stage::Gen {
                family,
                n,
                choices,
                len_mean,
                len_std,
                seed,
                out: r(&out),
            },
            Stage::Curate {
                data,
                k,
                prober_ckpt,
                import_records,
                temperature,
                max_new,
                seed,
                out_records,
            } => Stage::Curate {
                data: r(&data),
                k,
                prober_ckpt: ro(&prober_ckpt),
                import_records: ro(&import_records),
                temperature,
                max_new,
                seed,
                out_records: r(&out_records),
            },
            Stage::Subset {
                data,
                records,
                per_level,
                group,
                seed,
                out,
            } => Stage::Subset {
                data: r(&data),
                records: r(&records),
                per_level,
                group,
                seed,
                out: r(&out),
            },
            Stage::Mix {
                recipe,
                sources,
                out,
            } => Stage::Mix {
                recipe: r(&recipe),
                sources: sources
                    .into_iter()
                    .map(|(k, v)| (k, v.iter().map(r).collect()))
                    .collect(),
                out: r(&out),
            },
            Stage::Train {
                data,
                config,
                seed,
                ckpt_out,
                metrics_out,
            } => Stage::Train {
                data: r(&data),
                config: ro(&config),
                seed,
                ckpt_out: r(&ckpt_out),
                metrics_out: r(&metrics_out),
            },
            Stage::Eval {
                ckpt,
                data,
                max_new,
                out,
            } => Stage::Eval {
                ckpt: r(&ckpt),
                data: r(&data),
                max_new,
                out: r(&out),
            },
            Stage::Report { metrics, evals, out } => Stage::Report {
                metrics: r(&metrics),
                evals: evals.iter().map(r).collect(),
                out: r(&out),
            },
        }
    }
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn eval_json_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn timing_path(metrics: &Path) -> PathBuf {
    let mut s = metrics.as_os_str().to_owned();
    s.push(".timing.csv");
    PathBuf::from(s)
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    write_text(path, &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path, &dataset_name(path)).with_context(|| format!("loading {}", path.display()))
}

fn load_records(path: &Path) -> Result<Vec<DifficultyRecord>> {
    let imported = ImportedRecords::load(path)?;
    let mut ids: Vec<&String> = imported.flags.keys().collect();
    ids.sort();
    ids.into_iter()
        .map(|id| Ok(DifficultyRecord::from_flags(id.clone(), &imported.flags[id])?))
        .collect()
}

/// Reads a metrics CSV (and its timing sidecar when present).
pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let timing: BTreeMap<usize, f64> = fs::read_to_string(timing_path(path))
        .map(|t| {
            t.lines()
                .skip(1)
                .filter_map(|l| {
                    let (s, w) = l.split_once(',')?;
                    Some((s.parse().ok()?, w.parse().ok()?))
                })
                .collect()
        })
        .unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 6, "{} line {}: expected 6 columns", path.display(), i + 1);
        let num = |j: usize| -> Result<f64> {
            f[j].parse()
                .with_context(|| format!("{} line {}: bad number {:?}", path.display(), i + 1, f[j]))
        };
        let step: usize = f[0]
            .parse()
            .with_context(|| format!("{} line {}: bad step", path.display(), i + 1))?;
        out.push(StepMetrics {
            step,
            mean_reward: num(1)?,
            effective_query_ratio: num(2)?,
            clip_fraction: num(3)?,
            objective: num(4)?,
            grad_norm: num(5)?,
            wall_time_s: timing.get(&step).copied().unwrap_or(0.0),
        });
    }
    Ok(out)
}

/// Execution options shared by all stages.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Overrides every stage's seed when set.
    pub seed: Option<u64>,
    pub quiet: bool,
}

fn say(opts: &RunOptions, msg: impl AsRef<str>) {
    if !opts.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

/// Runs one stage and writes its manifest next to its first output.
pub fn run_stage(stage: &Stage, opts: &RunOptions) -> Result<()> {
    let manifest = execute(stage, opts)?;
    let anchor = match stage {
        Stage::Report { out, .. } => out.join("report"),
        _ => stage.outputs()[0].clone(),
    };
    write_manifest(&manifest_path(&anchor), &manifest)
}

fn execute(stage: &Stage, opts: &RunOptions) -> Result<RunManifest> {
    let started = now_unix();
    let seed_of = |s: &Option<u64>| opts.seed.or(*s).unwrap_or(0);
    let mut seeds = Vec::new();
    let mut config = serde_json::to_value(stage)?;
    match stage {
        Stage::Gen {
            family,
            n,
            choices,
            len_mean,
            len_std,
            seed,
            out,
        } => {
            let seed = seed_of(seed);
            seeds.push(seed);
            let spec = TaskSpec {
                family: family.parse::<Family>()?,
                n_items: *n,
                n_choices: *choices,
                length: LengthProfile {
                    mean: *len_mean,
                    std: len_std.unwrap_or(*len_mean as f64 * 0.1),
                },
                seed,
            };
            let generated = generate(&spec)?;
            ensure_parent(out)?;
            write_dataset(&generated.dataset, out)?;
            say(opts, format!("wrote {} items to {}", generated.dataset.len(), out.display()));
        }
        Stage::Curate {
            data,
            k,
            prober_ckpt,
            import_records,
            temperature,
            max_new,
            seed,
            out_records,
        } => {
            let ds = load(data)?;
            let seed = seed_of(seed);
            seeds.push(seed);
            let records = match (prober_ckpt, import_records) {
                (Some(ckpt), None) => {
                    let params = load_checkpoint(ckpt)?;
                    let template = PromptTemplate::new(DEFAULT_TEMPLATE, DEFAULT_INSTRUCTION)?;
                    let prober = PolicyProber {
                        params: &params,
                        template: &template,
                        temperature: *temperature,
                        max_new: *max_new,
                    };
                    quantify_difficulty(&ds, &prober, *k, seed)?
                }
                (None, Some(path)) => {
                    quantify_difficulty(&ds, &ImportedRecords::load(path)?, *k, seed)?
                }
                _ => bail!("curate needs exactly one of a prober checkpoint or imported records"),
            };
            write_text(out_records, &records_jsonl(&records))?;
            let table = build_difficulty_table(&records, ds.name.clone())?;
            say(opts, DifficultyTable::header(table.counts.len()));
            say(opts, table.row());
        }
        Stage::Subset {
            data,
            records,
            per_level,
            group,
            seed,
            out,
        } => {
            let ds = load(data)?;
            let recs = load_records(records)?;
            let seed = seed_of(seed);
            seeds.push(seed);
            let subset = match (per_level, group) {
                (Some(n), None) => build_balanced_subset(&ds, &recs, *n, seed)?,
                (None, Some(g)) => build_difficulty_group(&ds, &recs, g.parse::<DifficultyGroup>()?)?,
                _ => bail!("subset needs exactly one of per_level or group"),
            };
            ensure_parent(out)?;
            write_dataset(&subset, out)?;
            say(opts, format!("wrote {} items to {}", subset.len(), out.display()));
        }
        Stage::Mix {
            recipe,
            sources,
            out,
        } => {
            let text = fs::read_to_string(recipe)
                .with_context(|| format!("reading {}", recipe.display()))?;
            let mut recipe = MixRecipe::from_toml(&text)?;
            if let Some(s) = opts.seed {
                recipe.seed = s;
            }
            seeds.push(recipe.seed);
            let mut loaded = BTreeMap::new();
            for (name, paths) in sources {
                ensure!(
                    matches!(paths.len(), 1 | 2),
                    "source {name}: give [data] or [data, records]"
                );
                let ds = load(&paths[0])?;
                let recs = paths.get(1).map(|p| load_records(p)).transpose()?;
                loaded.insert(name.clone(), (ds, recs));
            }
            let views: BTreeMap<String, MixSource<'_>> = loaded
                .iter()
                .map(|(name, (ds, recs))| {
                    (
                        name.clone(),
                        MixSource {
                            dataset: ds,
                            records: recs.as_deref(),
                        },
                    )
                })
                .collect();
            let outcome = mix_datasets(&recipe, &views, dataset_name(out))?;
            for s in &outcome.shortfalls {
                say(
                    opts,
                    format!(
                        "shortfall: {} L{} has {} < {}",
                        s.source, s.level, s.available, s.requested
                    ),
                );
            }
            ensure_parent(out)?;
            write_dataset(&outcome.dataset, out)?;
            config["shortfalls"] = serde_json::to_value(&outcome.shortfalls)?;
            say(opts, format!("wrote {} items to {}", outcome.dataset.len(), out.display()));
        }
        Stage::Train {
            data,
            config: cfg_path,
            seed,
            ckpt_out,
            metrics_out,
        } => {
            let ds = load(data)?;
            let mut cfg = match cfg_path {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = opts.seed.or(*seed) {
                cfg.seed = s;
            }
            seeds.push(cfg.seed);
            config["resolved"] = serde_json::to_value(&cfg)?;
            let template = PromptTemplate::new(DEFAULT_TEMPLATE, DEFAULT_INSTRUCTION)?;
            let (state, metrics) = train(&ds, &template, &cfg, |m, _| {
                if m.step % 10 == 0 || m.step == 1 {
                    say(
                        opts,
                        format!(
                            "step {:>4} reward {:.3} effective {:.3} grad {:.4}",
                            m.step, m.mean_reward, m.effective_query_ratio, m.grad_norm
                        ),
                    );
                }
                true
            })?;
            ensure_parent(ckpt_out)?;
            save_checkpoint(&state.params, ckpt_out)?;
            write_text(metrics_out, &metrics_csv(&metrics))?;
            write_text(&timing_path(metrics_out), &timing_csv(&metrics))?;
        }
        Stage::Eval {
            ckpt,
            data,
            max_new,
            out,
        } => {
            let params = load_checkpoint(ckpt)?;
            let ds = load(data)?;
            let template = PromptTemplate::new(DEFAULT_TEMPLATE, DEFAULT_INSTRUCTION)?;
            let result = evaluate(&params, &ds, &template, *max_new)?;
            write_text(out, &eval_items_csv(std::slice::from_ref(&result)))?;
            write_text(&eval_json_path(out), &serde_json::to_string(&result)?)?;
            say(opts, eval_summary_csv(std::slice::from_ref(&result)));
        }
        Stage::Report { metrics, evals, out } => {
            let m = read_metrics_csv(metrics)?;
            let e = evals
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?;
                    Ok(serde_json::from_str::<EvalResult>(&text)
                        .with_context(|| format!("parsing {}", p.display()))?)
                })
                .collect::<Result<Vec<_>>>()?;
            emit_report(&m, &e, out)?;
        }
    }
    Ok(RunManifest {
        subcommand: stage.name().to_string(),
        config,
        seeds,
        inputs: stage.inputs(),
        outputs: stage.outputs(),
        tool_version: TOOL_VERSION.to_string(),
        started_unix: started,
        finished_unix: now_unix(),
    })
}

/// Declarative experiment: stages run in order inside `workdir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Relative to the config file; defaults to its directory.
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    #[serde(rename = "stage")]
    pub stages: Vec<Stage>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let dir = match &cfg.workdir {
            Some(w) => base.join(w),
            None => base.to_path_buf(),
        };
        Ok((cfg, dir))
    }

    /// Every stage input must exist or be produced by an earlier stage.
    pub fn validate(&self, dir: &Path) -> Result<Vec<Stage>> {
        ensure!(!self.stages.is_empty(), "pipeline has no stages");
        let mut produced: Vec<PathBuf> = Vec::new();
        let mut resolved = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let stage = stage.resolve(dir);
            for input in stage.inputs() {
                if !produced.contains(&input) && !input.exists() {
                    bail!(
                        "stage {} ({}): missing input {}",
                        i + 1,
                        stage.name(),
                        input.display()
                    );
                }
            }
            produced.extend(stage.outputs());
            resolved.push(stage);
        }
        Ok(resolved)
    }
}

/// Validates the whole pipeline, then runs its stages in order and writes a
/// single `pipeline.manifest.json` in the run directory.
pub fn run_pipeline(path: &Path, opts: &RunOptions) -> Result<()> {
    let started = now_unix();
    let (cfg, dir) = PipelineConfig::load(path)?;
    let stages = cfg.validate(&dir)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut configs = Vec::new();
    let mut seeds = Vec::new();
    for (i, stage) in stages.iter().enumerate() {
        say(opts, format!("[{}/{}] {}", i + 1, stages.len(), stage.name()));
        let m = execute(stage, opts)
            .with_context(|| format!("stage {} ({}) failed", i + 1, stage.name()))?;
        configs.push(m.config);
        seeds.extend(m.seeds);
    }
    let manifest = RunManifest {
        subcommand: "pipeline".into(),
        config: serde_json::json!({ "workdir": dir, "stages": configs }),
        seeds,
        inputs: vec![path.to_path_buf()],
        outputs: stages.iter().flat_map(Stage::outputs).collect(),
        tool_version: TOOL_VERSION.to_string(),
        started_unix: started,
        finished_unix: now_unix(),
    };
    write_manifest(&dir.join("pipeline.manifest.json"), &manifest)
}

/// Prints the extracted answer and reward of a response.
pub fn verify_text(text: &str, gold: &str) -> String {
    let extracted = verifier::extract_boxed_answer(text);
    format!(
        "extracted: {}\nreward: {}",
        extracted.value.as_deref().unwrap_or("<none>"),
        verifier::reward(text, gold)
    )
}
