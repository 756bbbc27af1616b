//! End-to-end tests of the `polyq` binary: exit codes, artifacts, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn polyq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn smoke() -> String {
    configs().join("smoke.toml").display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_exits_zero() {
    let o = polyq(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["simulate", "embed-policies", "train", "evaluate", "run-experiment", "diagnose-remainder", "bandwidth-sweep", "scale-K"] {
        assert!(text.contains(sub), "usage lacks {sub}");
    }
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_one() {
    let o = polyq(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(polyq(&[]).status.code(), Some(1));
}

#[test]
fn missing_config_names_the_path() {
    let o = polyq(&["simulate", "--config", "/nonexistent/cfg.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/cfg.toml"));
}

#[test]
fn invalid_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(polyq(&["train", "--mode", "bogus", "--out", out]).status.code(), Some(1));
    assert_eq!(polyq(&["simulate", "--eval-split", "2", "--out", out]).status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "n = 1\n").unwrap();
    assert_eq!(polyq(&["simulate", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    // Remainder diagnostics refuse horizons beyond the oracle budget.
    let o = polyq(&["diagnose-remainder", "--out", out]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let o = polyq(&["simulate", "--config", &smoke(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn every_shipped_config_parses() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        polyq::bench::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn simulate_train_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = polyq(&["simulate", "--config", &smoke(), "--seed", "4", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let data = dir.path().join("data.jsonl");
    let first = std::fs::read_to_string(&data).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["id", "L", "A", "Y"] {
        assert!(rec.get(key).is_some(), "record lacks {key}");
    }
    let data = data.to_str().unwrap();

    let o = polyq(&["embed-policies", "--config", &smoke(), "--seed", "4", "--data", data, "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let emb = std::fs::read_to_string(dir.path().join("embeddings.csv")).unwrap();
    assert!(emb.starts_with("t,k,dim,value\n"));
    // 4 steps x 3 policies x 2 dimensions.
    assert_eq!(emb.lines().count(), 1 + 4 * 3 * 2);
    assert!(std::fs::read_to_string(dir.path().join("stress.csv")).unwrap().starts_with("t,stress"));

    let o = polyq(&["train", "--config", &smoke(), "--seed", "4", "--data", data, "--out", out, "--mode", "joint_peq"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("training_log_joint_peq.csv")).unwrap();
    assert!(log.starts_with("epoch,t,policy_label,loss_kind,value\n"));
    let ck = dir.path().join("checkpoint_joint_peq.json");
    assert!(ck.exists());

    let o = polyq(&[
        "evaluate",
        "--config",
        &smoke(),
        "--seed",
        "4",
        "--data",
        data,
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let est = std::fs::read_to_string(dir.path().join("estimates_joint_peq.csv")).unwrap();
    assert!(est.starts_with("label,psi_hat,se,ci_lo,ci_hi,epsilon_1,epsilon_2,epsilon_3,epsilon_4"));
    assert_eq!(est.lines().count(), 1 + 3 + 3, "three policies and three pairs:\n{est}");

    // A corrupted checkpoint is rejected as invalid input.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    let o = polyq(&["evaluate", "--config", &smoke(), "--checkpoint", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_experiment_writes_reports_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = polyq(&["run-experiment", "--config", &smoke(), "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        for f in ["metrics.csv", "summary.md", "rmse.svg"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
    }
    let ma = std::fs::read(a.path().join("metrics.csv")).unwrap();
    let mb = std::fs::read(b.path().join("metrics.csv")).unwrap();
    assert_eq!(ma, mb, "metrics.csv differs between identical runs");
    let table = polyq::bench::MetricsTable::from_csv(std::str::from_utf8(&ma).unwrap()).unwrap();
    // 2 seeds x 2 modes x 2 contrasts, then 2 modes x 2 contrasts aggregates.
    assert_eq!(table.rows.len(), 8);
    assert_eq!(table.aggregates.len(), 4);
    for agg in &table.aggregates {
        let sel: Vec<_> = table
            .rows
            .iter()
            .filter(|r| r.mode == agg.mode && r.contrast == agg.contrast)
            .collect();
        let mse = sel.iter().map(|r| (r.estimate - r.oracle).powi(2)).sum::<f64>() / sel.len() as f64;
        assert_eq!(agg.rmse, mse.sqrt());
    }
}

#[test]
fn sweeps_and_scaling_write_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = polyq(&["bandwidth-sweep", "--config", &smoke(), "--seed", "0", "--multipliers", "0.1,10", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bandwidth.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    let o = polyq(&["scale-K", "--config", &smoke(), "--ks", "3,4", "--reps", "1", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("scale_k.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(polyq(&["scale-K", "--ks", "1", "--out", out]).status.code(), Some(1));
}

#[test]
fn remainder_diagnostics_on_a_short_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("diag.toml");
    std::fs::write(
        &cfg,
        "n = 60\nsuite = \"duplicate\"\nseeds = [0]\nn_draws = 0\noracle_n_mc = 100\n[dgp]\ntau = 3\n[train]\nepochs = 2\n[diagnostic]\nn_mc = 10\n",
    )
    .unwrap();
    let o = polyq(&["diagnose-remainder", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("diagnostics.csv")).unwrap();
    assert!(csv.starts_with("mode,pair,t,term1,term2,term3,traj_mmd\n"));
    // Two modes x one pair x (tau - 1) steps.
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}
