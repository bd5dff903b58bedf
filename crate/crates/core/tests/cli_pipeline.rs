use rlmcq::cli::{manifest_path, run_pipeline, RunManifest, RunOptions};
use std::fs;
use std::path::Path;
use std::process::Command;

const TRAIN_TOML: &str = "layers = 1\nwidth = 8\nheads = 2\ncontext = 128\n\
group_size = 4\nqueries_per_batch = 4\nsteps = 3\nmax_new = 8\nprime_steps = 2\nseed = 5\n";

const PIPELINE: &str = r#"
[[stage]]
kind = "gen"
family = "copy"
n = 12
seed = 1
out = "data/copy.jsonl"

[[stage]]
kind = "train"
data = "data/copy.jsonl"
config = "train.toml"
ckpt_out = "run/policy.ckpt"
metrics_out = "run/metrics.csv"

[[stage]]
kind = "eval"
ckpt = "run/policy.ckpt"
data = "data/copy.jsonl"
max_new = 8
out = "run/eval.csv"

[[stage]]
kind = "report"
metrics = "run/metrics.csv"
evals = ["run/eval.csv.json"]
out = "report"
"#;

fn quiet() -> RunOptions {
    RunOptions {
        seed: None,
        quiet: true,
    }
}

fn setup(dir: &Path) -> std::path::PathBuf {
    fs::write(dir.join("train.toml"), TRAIN_TOML).unwrap();
    let cfg = dir.join("pipeline.toml");
    fs::write(&cfg, PIPELINE).unwrap();
    cfg
}

#[test]
fn gen_train_eval_pipeline_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    run_pipeline(&cfg, &quiet()).unwrap();
    for f in [
        "data/copy.jsonl",
        "run/policy.ckpt",
        "run/metrics.csv",
        "run/metrics.csv.timing.csv",
        "run/eval.csv",
        "report/metrics.csv",
        "report/eval_summary.csv",
        "report/summary.txt",
        "pipeline.manifest.json",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.starts_with("step,mean_reward,effective_query_ratio"));
    let m: RunManifest = serde_json::from_str(
        &fs::read_to_string(dir.path().join("pipeline.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(m.subcommand, "pipeline");
    assert_eq!(m.seeds, vec![1, 5]);
    assert!(m.finished_unix >= m.started_unix);
    assert!(!manifest_path(&dir.path().join("run/policy.ckpt")).exists());
}

#[test]
fn rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&setup(a.path()), &quiet()).unwrap();
    run_pipeline(&setup(b.path()), &quiet()).unwrap();
    for f in ["run/metrics.csv", "run/policy.ckpt", "run/eval.csv", "data/copy.jsonl"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn missing_input_fails_before_any_stage_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let text = PIPELINE.replace("data = \"data/copy.jsonl\"\nconfig", "data = \"nope.jsonl\"\nconfig");
    fs::write(&cfg, text).unwrap();
    let err = run_pipeline(&cfg, &quiet()).unwrap_err().to_string();
    assert!(err.contains("nope.jsonl"), "{err}");
    assert!(!dir.path().join("data/copy.jsonl").exists());
}

#[test]
fn binary_reports_exit_status() {
    let exe = env!("CARGO_BIN_EXE_rlmcq");
    let out = Command::new(exe)
        .args(["verify", "--text", "so \\boxed{B}", "--gold", "B"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("extracted: B") && text.contains("reward: 1"), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let resp = dir.path().join("resp.txt");
    fs::write(&resp, "first \\boxed{A} then \\boxed{C}\n").unwrap();
    let out = Command::new(exe)
        .args(["verify", "--gold", "B", "--file"])
        .arg(&resp)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("extracted: C") && text.contains("reward: 0"), "{text}");

    let cfg = dir.path().join("p.toml");
    fs::write(
        &cfg,
        "[[stage]]\nkind = \"eval\"\nckpt = \"x.ckpt\"\ndata = \"y.jsonl\"\nout = \"e.csv\"\n",
    )
    .unwrap();
    let out = Command::new(exe)
        .args(["--quiet", "pipeline", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing input"));
}

#[test]
fn subcommands_write_one_manifest_each() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("p.jsonl");
    let status = Command::new(env!("CARGO_BIN_EXE_rlmcq"))
        .args(["--quiet", "--seed", "3", "gen", "--family", "parity", "--n", "20", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    let m: RunManifest =
        serde_json::from_str(&fs::read_to_string(manifest_path(&data)).unwrap()).unwrap();
    assert_eq!((m.subcommand.as_str(), m.seeds.as_slice()), ("gen", &[3u64][..]));
    assert_eq!(m.outputs, vec![data.clone()]);
    let ds = rlmcq::dataio::load_dataset(&data, "p").unwrap();
    assert_eq!(ds.len(), 20);
}
