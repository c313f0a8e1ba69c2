use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fbsde-sampler"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMOKE: &str = "[train]\nK = 3\nM = 8\ndt = 0.1\n";

fn train_smoke(dir: &Path, body: &str) -> String {
    let cfg = write_config(dir, "run.toml", body);
    let out = dir.join("run");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.to_str().unwrap().to_string()
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_smoke(dir.path(), SMOKE);
    let out = Path::new(&out);
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 3);
    assert!(loss.starts_with("step,loss\n1,"));
    let resolved = fs::read_to_string(out.join("resolved-config.toml")).unwrap();
    assert!(resolved.starts_with("# fbsde-sampler "));
    assert!(resolved.contains("K = 3"));
    assert!(out.join("checkpoint.json").exists());
}

#[test]
fn negative_dt_exits_with_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[train]\ndt = -0.01\n");
    let o = run(&["train", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.dt"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_with_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[train]\nsteps = 10\n");
    let o = run(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("steps"));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "hot.toml", "[schedule]\nbeta = 1000.0\n[train]\nK = 2\nM = 4\n");
    let o = run(&["train", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step 1"), "{}", stderr(&o));
}

#[test]
fn sample_counts_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_smoke(dir.path(), SMOKE);
    let ckpt = format!("{out}/checkpoint.json");
    let o = run(&["sample", "--checkpoint", &ckpt, "--count", "0", "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(format!("{out}/samples.csv")).unwrap(), "x1\n");
    let o = run(&["sample", "--checkpoint", &ckpt, "--count", "25", "--seed", "4", "--out", &out]);
    assert!(o.status.success());
    let text = fs::read_to_string(format!("{out}/samples.csv")).unwrap();
    assert_eq!(text.lines().count(), 26);
    let bad = dir.path().join("corrupt.json");
    fs::write(&bad, "{\"format_version\": 1, \"theta_y\": [").unwrap();
    let o = run(&["sample", "--checkpoint", bad.to_str().unwrap(), "--count", "5", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn score_writes_one_file_per_time() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_smoke(dir.path(), SMOKE);
    let ckpt = format!("{out}/checkpoint.json");
    let diag = dir.path().join("diag");
    let o = run(&["diagnose", "score", "--checkpoint", &ckpt, "--times", "0,1,2,3", "--out", diag.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for t in ["0", "1", "2", "3"] {
        let text = fs::read_to_string(diag.join(format!("score_t{t}.csv"))).unwrap();
        assert!(text.starts_with("t,x1,coord,estimated,true,diff\n"));
        assert_eq!(text.lines().count(), 1 + 81);
    }
    let o = run(&["diagnose", "score", "--checkpoint", &ckpt, "--format", "json", "--out", diag.to_str().unwrap()]);
    assert!(o.status.success());
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(diag.join("score.json")).unwrap()).unwrap();
    assert_eq!(doc["rows"].as_array().unwrap().len(), 4 * 81);
}

#[test]
fn stats_on_mixture_samples_gives_nine_modes() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_smoke(dir.path(), &format!("[target]\nkind = \"mixture\"\n{SMOKE}"));
    let ckpt = format!("{out}/checkpoint.json");
    assert!(run(&["sample", "--checkpoint", &ckpt, "--count", "200", "--out", &out]).status.success());
    let o = run(&[
        "diagnose",
        "stats",
        "--checkpoint",
        &ckpt,
        "--samples",
        &format!("{out}/samples.csv"),
        "--out",
        &out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let modes = fs::read_to_string(format!("{out}/modes.csv")).unwrap();
    assert!(modes.starts_with("mode,c1,c2,count,mass,m1,m2\n"));
    assert_eq!(modes.lines().count(), 1 + 9);
}

#[test]
fn forward_and_u0_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_smoke(dir.path(), SMOKE);
    let ckpt = format!("{out}/checkpoint.json");
    let o = run(&["diagnose", "forward", "--checkpoint", &ckpt, "--paths", "2000", "--dt", "0.01", "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(format!("{out}/forward.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    let o = run(&["diagnose", "u0", "--checkpoint", &ckpt, "--format", "json", "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(Path::new(&format!("{out}/u0.json")).exists());
}

#[test]
fn custom_target_diagnostics_exit_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_smoke(dir.path(), SMOKE);
    let text = fs::read_to_string(format!("{out}/checkpoint.json")).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["target"] = serde_json::json!({"kind": "custom", "name": "banana", "dim": 1});
    let custom = dir.path().join("custom.json");
    fs::write(&custom, serde_json::to_string(&doc).unwrap()).unwrap();
    let o = run(&["diagnose", "u0", "--checkpoint", custom.to_str().unwrap(), "--out", &out]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("banana"));
}

#[test]
fn runs_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", "[train]\nK = 4\nM = 40\ndt = 0.1\nseed = 9\n");
    let mut files = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "3")] {
        let out = dir.path().join(name);
        let o = run(&["--threads", threads, "train", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
        assert!(o.status.success());
        let ckpt = out.join("checkpoint.json");
        let o = run(&[
            "--threads",
            threads,
            "sample",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--count",
            "5000",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        files.push((fs::read(ckpt).unwrap(), fs::read(out.join("samples.csv")).unwrap()));
    }
    assert_eq!(files[0], files[1]);
}
