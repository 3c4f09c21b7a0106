//! End-to-end checks of the binary surface: subcommands, flag handling,
//! exit codes, and the output directory contract.

use std::path::Path;
use std::process::{Command, Output};

fn brw(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brw"))
        .args(args)
        .current_dir(dir)
        .env_remove("BRW_LAB_OUT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

const MICRO_DELTA_N: &str = r#"
experiment = "delta_n_report"
seed = 3

[law]
family = "dyadic"

[budgets]
walk_replicas = 20000
n_grid = [16, 64]
"#;

#[test]
fn passing_run_exits_zero_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MICRO_DELTA_N);
    let out = brw(
        &["delta-n", "--config", &config, "--out", "run"],
        dir.path(),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "stdout: {stdout}");
    assert!(stdout.contains("PASS"), "stdout: {stdout}");
    assert!(dir.path().join("run/delta_n.csv").exists());
    assert!(dir.path().join("run/result.json").exists());
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "experiment = \"delta_n_report\"\nbogus = 1\n[law]\nfamily = \"dyadic\"\n",
    );
    let out = brw(&["delta-n", "--config", &config], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus"), "stderr: {stderr}");
}

#[test]
fn subcommand_config_mismatch_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MICRO_DELTA_N);
    let out = brw(&["stable-check", "--config", &config], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn budget_exhaustion_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    // No freeze cap and a tiny particle cap: the tree must overflow.
    let config = write_config(
        dir.path(),
        r#"
experiment = "seneta_heyde"
seed = 3

[law]
family = "dyadic"

[budgets]
replicas = 10
freeze_cap = 0.0
particle_cap = 50
n_grid = [12]
"#,
    );
    let out = brw(&["seneta-heyde", "--config", &config], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("particle cap"), "stderr: {stderr}");
}

#[test]
fn env_var_sets_output_dir_and_flag_beats_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MICRO_DELTA_N);

    let out = Command::new(env!("CARGO_BIN_EXE_brw"))
        .args(["delta-n", "--config", &config])
        .current_dir(dir.path())
        .env("BRW_LAB_OUT", "from-env")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("from-env/delta_n.csv").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_brw"))
        .args(["delta-n", "--config", &config, "--out", "from-flag"])
        .current_dir(dir.path())
        .env("BRW_LAB_OUT", "ignored-env")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("from-flag/delta_n.csv").exists());
    assert!(!dir.path().join("ignored-env").exists());
}

#[test]
fn seed_override_changes_artifacts_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), MICRO_DELTA_N);
    let run = |seed: &str, out: &str| {
        let o = brw(
            &["delta-n", "--config", &config, "--seed", seed, "--out", out],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(dir.path().join(out).join("delta_n.csv")).unwrap()
    };
    let a = run("3", "seed-a");
    let b = run("3", "seed-b");
    let c = run("4", "seed-c");
    assert_eq!(a, b, "same seed must reproduce bytes");
    assert_ne!(a, c, "different seed must change the sample");

    let sidecar = std::fs::read_to_string(dir.path().join("seed-c/result.json")).unwrap();
    assert!(sidecar.contains("\"format_version\": 1"));
    assert!(sidecar.contains("\"seed\": 4"));
}
