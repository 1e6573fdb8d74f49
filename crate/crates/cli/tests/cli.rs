use ldlb_core::data::DatasetKind;
use ldlb_core::experiment::ExperimentConfig;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = ExperimentConfig::toy(DatasetKind::Toy8Gauss);
    c.dataset.n_train = 256;
    c.dataset.n_eval = 64;
    c.train.batch_size = 64;
    c.train.epochs_pretrain = 3;
    c.train.epochs_main = 3;
    c.models.vae.hidden = vec![16];
    c.models.prior.hidden = vec![16];
    c.models.prior.time_embed_dim = 8;
    c.eval.n_probes = 1;
    c.eval.n_samples = 50;
    c.solver.rtol = 1e-3;
    c.solver.atol = 1e-3;
    c.output_dir = dir.join("runs");
    let p = dir.join("config.json");
    std::fs::write(&p, c.to_json()).unwrap();
    p
}

fn ldlb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldlb"))
        .args(args)
        .env("LDLB_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = ldlb(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn schedule_dump_writes_one_row_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["--out", out, "schedule-dump", "--grid", "37"]);
    let csv = std::fs::read_to_string(tmp.path().join("schedule/v001/schedule.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,beta,g2,mean_coeff,var,ring_var");
    assert_eq!(lines.len(), 38);
    // A second run never overwrites the first.
    ok(&["--out", out, "schedule-dump", "--grid", "5"]);
    assert!(tmp.path().join("schedule/v002/schedule.csv").is_file());
    assert_eq!(std::fs::read_to_string(tmp.path().join("schedule/v001/schedule.csv")).unwrap(), csv);
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tiny_config(tmp.path());
    let text = std::fs::read_to_string(&p).unwrap().replace("\"batch_size\": 64", "\"batch_size\": 0");
    std::fs::write(&p, text).unwrap();
    let o = ldlb(&["--config", p.to_str().unwrap(), "pretrain"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train.batch_size"), "{err}");

    let o = ldlb(&["--config", "/nonexistent/config.json", "pretrain"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));
}

#[test]
fn toy_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "--workers", "1", "pretrain"]);
    let runs = tmp.path().join("runs");
    assert!(runs.join("pretrain/v001/checkpoint.ldlb").is_file());
    ok(&["--config", c, "--workers", "1", "train"]);
    let metrics = std::fs::read_to_string(runs.join("train/v001/metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["phase"], "main");
    assert!(last["nelbo"].as_f64().unwrap().is_finite());

    ok(&["--config", c, "--workers", "1", "sample", "--n", "20"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(runs.join("sample/v001/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n"], 20);
    assert!(manifest["nfe"].as_u64().unwrap() >= 6 * manifest["accepted"].as_u64().unwrap());
    let csv = std::fs::read_to_string(runs.join("sample/v001/samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);

    ok(&["--config", c, "--workers", "1", "sample", "--n", "10", "--method", "ancestral"]);
    assert!(runs.join("sample/v002/samples.csv").is_file());

    let o = ok(&["--config", c, "--workers", "1", "eval-nelbo"]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["n"], 64);
    assert!(report["nelbo"].as_f64().unwrap().is_finite());
    assert!(runs.join("eval/v001/nelbo.json").is_file());
}

fn metrics_without_clock(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wallclock");
            v
        })
        .collect()
}

#[test]
fn same_seed_reproduces_metrics_single_threaded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    for _ in 0..2 {
        ok(&["--config", c, "--workers", "1", "--seed", "9", "pretrain"]);
    }
    let runs = tmp.path().join("runs/pretrain");
    let a = metrics_without_clock(&runs.join("v001/metrics.jsonl"));
    let b = metrics_without_clock(&runs.join("v002/metrics.jsonl"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let ca = std::fs::read(runs.join("v001/checkpoint.ldlb")).unwrap();
    let cb = std::fs::read(runs.join("v002/checkpoint.ldlb")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn diagnostics_write_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&["--out", out, "iw-bias", "--k", "10", "--trials", "2000", "--s2", "0,0.1"]);
    let csv = std::fs::read_to_string(tmp.path().join("iw_bias/v001/iw_bias.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,10,0,"), "{}", rows[1]);

    ok(&["--out", out, "variance-report", "--draws", "2000", "--grid", "5"]);
    let csv = std::fs::read_to_string(tmp.path().join("variance/v001/variance.csv")).unwrap();
    // Linear VP supports all three weightings under both strategies.
    assert_eq!(csv.lines().count(), 1 + 6 * 5);
}

#[test]
fn sample_without_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ldlb(&["--out", tmp.path().to_str().unwrap(), "sample"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `train` first"));
}
