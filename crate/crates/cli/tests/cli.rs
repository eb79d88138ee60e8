//! End-to-end runs of the `sparsenn` binary on a tiny synthetic config.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[dataset]
kind = "synthetic"
train = 300
test = 100

[network]
layer_sizes = [784, 64, 10]
rank = 4

[train]
epochs = 2

[arch]
num_pes = 16

[simulate]
samples = 3

[sweep]
ranks = [2]
"#;

fn sparsenn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsenn")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn run_ok(args: &[&str]) {
    let out = sparsenn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn full_pipeline_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    for cmd in ["train", "eval", "simulate", "sweep"] {
        run_ok(&[cmd, "--config", &cfg, "--out", out_s]);
    }
    run_ok(&["report", "--out", out_s]);
    for f in [
        "checkpoint.spnn",
        "checkpoint.spnn.json",
        "train_report.json",
        "train.csv",
        "eval_report.json",
        "sim_uv_on.json",
        "sim_uv_off.json",
        "sim_phases_uv_on.csv",
        "sim_layers.csv",
        "sim_summary.json",
        "sweep.csv",
        "report.md",
        "manifest_train.json",
        "manifest_simulate.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert_eq!(header(&out.join("train.csv")), "epoch,loss,ter,rho_layer0");
    assert_eq!(header(&out.join("sweep.csv")), "mode,rank,epoch,loss,ter,rho_mean,params");
    assert_eq!(
        header(&out.join("sim_layers.csv")),
        "layer,rho,uv_off_cycles,uv_on_cycles,cycle_reduction,w_off_cycles,w_on_cycles,w_cycle_reduction,\
         law_reduction,predictor_cycles,uv_off_energy_pj,uv_on_energy_pj,uv_off_power_mw,uv_on_power_mw,power_ratio"
    );
    assert_eq!(
        header(&out.join("sim_phases_uv_on.csv")),
        "layer,phase,cycles,utilization,w_mem_reads,u_mem_reads,v_mem_reads,macs,regfile_ops,router_hops,\
         queue_ops,saturations,energy_pj,power_mw,mode"
    );
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest_train.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["files"]["train.csv"].as_str().unwrap().len(), 64);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let runs: Vec<_> = ["a", "b"].iter().map(|d| dir.path().join(d)).collect();
    for out in &runs {
        run_ok(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        run_ok(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    }
    for f in ["checkpoint.spnn", "train.csv", "sim_layers.csv", "manifest_train.json", "manifest_simulate.json"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_override_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]);
    run_ok(&["train", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "4"]);
    assert_ne!(fs::read(a.join("checkpoint.spnn")).unwrap(), fs::read(b.join("checkpoint.spnn")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(sparsenn(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(2));

    let bad = write_config(dir.path(), &TINY.replace("rank = 4", "rank = 4\ntypo = 1"));
    assert_eq!(sparsenn(&["train", "--config", &bad]).status.code(), Some(2));

    let good = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    run_ok(&["train", "--config", &good, "--out", out.to_str().unwrap()]);
    let small = dir.path().join("small.toml");
    fs::write(&small, TINY.replace("num_pes = 16", "num_pes = 4")).unwrap();
    let res = sparsenn(&["simulate", "--config", small.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&res.stderr).contains("activation registers"));

    let diverge = dir.path().join("diverge.toml");
    fs::write(&diverge, TINY.replace("epochs = 2", "epochs = 2\nlearning_rate = 1e200")).unwrap();
    let res = sparsenn(&["train", "--config", diverge.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));

    let mismatch = dir.path().join("mismatch.toml");
    fs::write(&mismatch, TINY.replace("rank = 4", "rank = 2")).unwrap();
    let res = sparsenn(&["eval", "--config", mismatch.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));

    assert_eq!(sparsenn(&["report", "--out", dir.path().join("empty").to_str().unwrap()]).status.code(), Some(3));
}
