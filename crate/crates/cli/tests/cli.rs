use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cncv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cncv")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path, kind: &str, dim: usize) -> PathBuf {
    let text = format!(
        r#"[problem]
kind = "{kind}"
dim = {dim}
sigma = 0.3
seed = 1

[model]
ensemble_size = 2
depth = 1
hidden_units = 8
mlp_layers = 2

[train]
batch_size = 64
epochs = 1
lr_init = 1e-3
lr_final = 1e-4
n_train_samples = 256
seed = 4

[eval]
n_obs = 3
samples = 200
seed = 9
stein_obs = 250
sizes = [10, 100]
sweep_obs = 2
repeats = 3

[qoi]
kind = "mean"

[output]
dir = "{}"
"#,
        dir.join("out").display()
    );
    let path = dir.join(format!("{kind}-{dim}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "gaussian", 2);
    let ck = dir.path().join("ck.json");
    ok(&cncv(&["train", "--config", s(&cfg), "--out", s(&ck)]));
    assert!(ck.exists());
    let curve = std::fs::read_to_string(dir.path().join("ck.curve.csv")).unwrap();
    assert!(curve.starts_with("samples_seen,batch_loss,epoch,val_loss,lr,config_hash\n"));

    let out = dir.path().join("eval");
    ok(&cncv(&["eval", "--ckpt", s(&ck), "--study", "vrf", "--out", s(&out)]));
    let vrf = std::fs::read_to_string(out.join("vrf.csv")).unwrap();
    let lines: Vec<&str> = vrf.lines().collect();
    assert_eq!(lines[0], "obs_id,component,var_h,var_hg,vrf,corr,raw_estimate,cv_estimate,n_samples,seed,config_hash");
    assert_eq!(lines.len(), 1 + 3 * 2);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("vrf.json")).unwrap()).unwrap();
    assert!(summary["mean_vrf"].is_number());
    assert!(summary["components_outer"]["mean"].is_number());
    assert!(summary["observations_outer"]["std"].is_number());

    ok(&cncv(&["eval", "--ckpt", s(&ck), "--study", "stein", "--out", s(&out)]));
    assert_eq!(std::fs::read_to_string(out.join("stein.csv")).unwrap().lines().count(), 251);

    ok(&cncv(&["eval", "--ckpt", s(&ck), "--study", "sweep", "--out", s(&out), "--sample-sizes", "10,30,100"]));
    assert_eq!(std::fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 4);

    ok(&cncv(&["eval", "--ckpt", s(&ck), "--study", "ablate", "--out", s(&out), "--ensemble-sizes", "1,2"]));
    let ablate = std::fs::read_to_string(out.join("ablate.csv")).unwrap();
    assert_eq!(ablate.lines().count(), 1 + 2 * 3);
}

#[test]
fn amortization_study_on_rosenbrock() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "rosenbrock", 2);
    let ck = dir.path().join("ck.json");
    ok(&cncv(&["train", "--config", s(&cfg), "--out", s(&ck)]));
    let out = dir.path().join("eval");
    ok(&cncv(&["eval", "--ckpt", s(&ck), "--study", "amortize", "--out", s(&out)]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("amortize.json")).unwrap()).unwrap();
    assert_eq!(v["fingerprint_before"], v["fingerprint_after"]);
    assert_eq!(v["observations"].as_array().unwrap().len(), 3);
}

#[test]
fn zero_epochs_are_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "gaussian", 3);
    let ck = dir.path().join("ck.json");
    ok(&cncv(&["train", "--config", s(&cfg), "--out", s(&ck), "--epochs", "0"]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ck).unwrap()).unwrap();
    assert_eq!(v["metadata"]["samples_seen"], 0);
}

#[test]
fn identical_runs_produce_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "gaussian", 2);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let ck = dir.path().join(format!("{run}.json"));
        let out = dir.path().join(format!("eval-{run}"));
        ok(&cncv(&["train", "--config", s(&cfg), "--out", s(&ck), "--deterministic"]));
        ok(&cncv(&["eval", "--ckpt", s(&ck), "--study", "vrf", "--out", s(&out), "--deterministic"]));
        outputs.push([
            std::fs::read(&ck).unwrap(),
            std::fs::read(dir.path().join(format!("{run}.curve.csv"))).unwrap(),
            std::fs::read(out.join("vrf.csv")).unwrap(),
        ]);
    }
    assert!(outputs[0] == outputs[1]);

    let ck = dir.path().join("c.json");
    ok(&cncv(&["train", "--config", s(&cfg), "--out", s(&ck), "--seed", "5"]));
    assert_ne!(std::fs::read(&ck).unwrap(), outputs[0][0]);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = cncv(&["eval", "--ckpt", s(&missing), "--study", "vrf"]);
    assert_eq!(out.status.code(), Some(3));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[problem]\nkind = \"gaussian\"\n").unwrap();
    assert_eq!(cncv(&["train", "--config", s(&bad)]).status.code(), Some(1));
    assert_eq!(cncv(&["train"]).status.code(), Some(1));
    assert_eq!(cncv(&["eval", "--ckpt", "x", "--study", "nope"]).status.code(), Some(1));
    assert_eq!(cncv(&["--help"]).status.code(), Some(0));

    let cfg2 = tiny_config(dir.path(), "gaussian", 2);
    let cfg3 = tiny_config(dir.path(), "gaussian", 3);
    let ck = dir.path().join("ck.json");
    ok(&cncv(&["train", "--config", s(&cfg2), "--out", s(&ck), "--epochs", "0"]));
    let out = cncv(&["eval", "--ckpt", s(&ck), "--study", "vrf", "--config", s(&cfg3)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot evaluate"));
}

#[test]
fn generate_writes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "nonlinear", 3);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&cncv(&["generate", "--config", s(&cfg), "--out", s(&a)]));
    ok(&cncv(&["generate", "--config", s(&cfg), "--out", s(&b)]));
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 257);
    assert!(text.lines().all(|l| l.split(',').count() == 11));
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
}
