use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rlmcq::cli::{run_pipeline, run_stage, verify_text, RunOptions, Stage};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Rule-rewarded GRPO training for multiple-choice QA.
#[derive(Debug, Parser)]
#[command(name = "rlmcq", version)]
struct Cli {
    /// Seed override for every seeded stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (copy, parity, chain-K).
    Gen {
        #[arg(long)]
        family: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        choices: usize,
        /// Target mean question length in tokens; 0 keeps natural length.
        #[arg(long, default_value_t = 0)]
        len_mean: usize,
        #[arg(long)]
        len_std: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe items k times and write difficulty records.
    Curate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, conflicts_with = "import_records")]
        prober_ckpt: Option<PathBuf>,
        #[arg(long)]
        import_records: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
        #[arg(long)]
        out_records: PathBuf,
    },
    /// Build a level-balanced subset, a difficulty group, or a recipe mix.
    Subset {
        #[arg(long, required_unless_present = "recipe")]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "recipe")]
        records: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["group", "recipe"])]
        per_level: Option<usize>,
        /// easy, medium or hard.
        #[arg(long, conflicts_with = "recipe")]
        group: Option<String>,
        /// Mix recipe: `seed = N` plus one `source = "all" | "strict:N" | "cap:N"` line per source.
        #[arg(long)]
        recipe: Option<PathBuf>,
        /// NAME=DATA or NAME=DATA,RECORDS for each recipe source; repeatable.
        #[arg(long = "source", value_parser = parse_source, requires = "recipe")]
        sources: Vec<(String, Vec<PathBuf>)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prime and train a policy with GRPO.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt_out: PathBuf,
        #[arg(long)]
        metrics_out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the boxed answer of a response and score it.
    Verify {
        #[arg(long, required_unless_present = "file", conflicts_with = "file")]
        text: Option<String>,
        /// Read the response from a text file.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        gold: String,
    },
    /// Write CSV tables and a summary from training and eval outputs.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// JSON results written by `eval`.
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate and run a TOML stage list.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_source(s: &str) -> Result<(String, Vec<PathBuf>), String> {
    let (name, paths) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=DATA[,RECORDS], got {s:?}"))?;
    Ok((name.to_string(), paths.split(',').map(PathBuf::from).collect()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let opts = RunOptions {
        seed: cli.seed,
        quiet: cli.quiet,
    };
    let stage = match cli.command {
        Command::Gen {
            family,
            n,
            choices,
            len_mean,
            len_std,
            out,
        } => Stage::Gen {
            family,
            n,
            choices,
            len_mean,
            len_std,
            seed: None,
            out,
        },
        Command::Curate {
            data,
            k,
            prober_ckpt,
            import_records,
            temperature,
            max_new,
            out_records,
        } => Stage::Curate {
            data,
            k,
            prober_ckpt,
            import_records,
            temperature,
            max_new,
            seed: None,
            out_records,
        },
        Command::Subset {
            data,
            records,
            per_level,
            group,
            recipe,
            sources,
            out,
        } => match (recipe, data, records) {
            (Some(recipe), _, _) => Stage::Mix {
                recipe,
                sources: sources.into_iter().collect::<BTreeMap<_, _>>(),
                out,
            },
            (None, Some(data), Some(records)) => Stage::Subset {
                data,
                records,
                per_level,
                group,
                seed: None,
                out,
            },
            _ => anyhow::bail!("subset needs --data and --records, or --recipe"),
        },
        Command::Train {
            data,
            config,
            ckpt_out,
            metrics_out,
        } => Stage::Train {
            data,
            config,
            seed: None,
            ckpt_out,
            metrics_out,
        },
        Command::Eval {
            ckpt,
            data,
            max_new,
            out,
        } => Stage::Eval {
            ckpt,
            data,
            max_new,
            out,
        },
        Command::Report { metrics, evals, out } => Stage::Report { metrics, evals, out },
        Command::Verify { text, file, gold } => {
            let text = match (text, file) {
                (Some(t), _) => t,
                (None, Some(f)) => std::fs::read_to_string(&f)
                    .with_context(|| format!("reading {}", f.display()))?,
                (None, None) => anyhow::bail!("verify needs --text or --file"),
            };
            println!("{}", verify_text(&text, &gold));
            return Ok(());
        }
        Command::Pipeline { config } => return run_pipeline(&config, &opts),
    };
    run_stage(&stage, &opts)
}
