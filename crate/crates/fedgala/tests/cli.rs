//! End-to-end checks of the command-line surface and its file outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedgala"))
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fedgala-cli-{}-{tag}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("exp.cfg");
    fs::write(
        &path,
        "seed = 3\nprotocol.clients = 2\nprotocol.rounds = 2\nprotocol.local_epochs = 1\n\
         protocol.batch_size = 8\ndomain.count = 3\ndomain.features = 4\n\
         domain.samples_per_domain = 32\nmodel.mlp_arch = 4,8,4\neval.labeled_fractions = 0.2\n\
         eval.probe_epochs = 20\n",
    )
    .unwrap();
    path
}

#[test]
fn missing_config_reports_file_not_found() {
    let out = bin().args(["run", "--config", "missing.cfg"]).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("file not found"), "stderr was: {stderr}");
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let dir = scratch("badkey");
    let path = dir.join("bad.cfg");
    fs::write(&path, "protocol.gamma = 2\n").unwrap();
    let out = bin().args(["run", "--config", path.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown key"), "stderr was: {stderr}");
    assert!(stderr.contains("protocol.tau"), "stderr was: {stderr}");
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_all_artifacts() {
    let dir = scratch("run");
    let cfg = tiny_config(&dir);
    let out_dir = dir.join("out");
    let out = bin()
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["resolved.cfg", "domains.csv", "rounds.csv", "probe.csv", "final_model.bin"] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
    // The round CSV carries the schema marker and one row per client per round.
    let rounds = fs::read_to_string(out_dir.join("rounds.csv")).unwrap();
    let lines: Vec<&str> = rounds.lines().collect();
    assert_eq!(lines[0], "# schema=1");
    assert!(lines[1].starts_with("target_domain,round,client_id"));
    assert_eq!(lines.len(), 2 + 2 * 2);
    // The resolved config echoes defaults too.
    let resolved = fs::read_to_string(out_dir.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("protocol.agg_iterations = 3"));
    assert!(resolved.contains("loss.temperature = 0.5"));
    // The checkpoint loads back into the declared shape.
    let mut f = fs::File::open(out_dir.join("final_model.bin")).unwrap();
    let params = fedgala::encoders::load_params(&mut f).unwrap();
    assert_eq!(params.layers.len(), 4);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn lodo_writes_probe_rows_per_target_and_fraction() {
    let dir = scratch("lodo");
    let cfg = tiny_config(&dir);
    let out_dir = dir.join("out");
    let out = bin()
        .args(["lodo", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let probe = fs::read_to_string(out_dir.join("probe.csv")).unwrap();
    // 3 domains x 1 fraction + schema + header.
    assert_eq!(probe.lines().count(), 2 + 3);
    // Round telemetry for every target: 3 targets x 2 rounds x 2 clients.
    let rounds = fs::read_to_string(out_dir.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 2 + 3 * 2 * 2);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn sweep_writes_grid_rows() {
    let dir = scratch("sweep");
    let cfg = tiny_config(&dir);
    let out_dir = dir.join("out");
    let out = bin()
        .args([
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--grid",
            "tau",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 2 + 3); // three tau values, one fraction
    assert!(sweep.lines().nth(2).unwrap().starts_with("tau,"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn seed_override_changes_outputs() {
    let dir = scratch("seed");
    let cfg = tiny_config(&dir);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for (out_dir, seed) in [(&out_a, "3"), (&out_b, "4")] {
        let out = bin()
            .args([
                "run",
                "--config",
                cfg.to_str().unwrap(),
                "--seed",
                seed,
                "--out",
                out_dir.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = fs::read(out_a.join("rounds.csv")).unwrap();
    let b = fs::read(out_b.join("rounds.csv")).unwrap();
    assert_ne!(a, b);
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn theory_writes_one_csv_per_check_and_verdicts() {
    let dir = scratch("theory");
    let out_dir = dir.join("out");
    // Default config; full desk-scale sizes.
    let out = bin()
        .args(["theory", "--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "theory/mi_agreement.csv",
        "theory/taylor_cov.csv",
        "theory/grad_cov_trend.csv",
        "theory/var_diff_trend.csv",
        "theory/discard_covariance.csv",
        "theory/sign_checks.csv",
        "verdicts.json",
        "resolved.cfg",
    ] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
    let verdicts = fs::read_to_string(out_dir.join("verdicts.json")).unwrap();
    for check in [
        "mi_agreement",
        "taylor_cov",
        "grad_cov_trend",
        "var_diff_trend",
        "discard_covariance",
        "sign_supervised",
        "sign_ssl_positive",
        "sign_ssl_negative",
    ] {
        assert!(verdicts.contains(check), "{check} missing from verdicts");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("grad_cov_trend: pass"), "stdout: {stdout}");
    fs::remove_dir_all(&dir).unwrap();
}
