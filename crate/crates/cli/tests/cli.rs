mod common;

use std::path::Path;
use std::process::{Command, Output};

use aggtree::rng::derive_seed;
use aggtree::{balance_table, gate_from_scores, load_csv, split_honest, DrScores, VarianceKind};
use aggtree_cli::{cmd_fit, cmd_gates, Overrides, RunConfig, Selection};
use common::*;

fn aggtree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aggtree")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = aggtree(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup(n: usize, extra: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    write_csv(&dir.path().join("data.csv"), n, 3, &[]);
    let cfg = write_config(dir.path(), extra);
    (dir, cfg)
}

fn load(cfg: &Path) -> RunConfig {
    RunConfig::load(cfg, &Overrides::default()).unwrap()
}

#[test]
fn fit_writes_every_artifact_and_reruns_identically() {
    let (dir, cfg) = setup(200, "");
    let cfg = cfg.to_str().unwrap();
    run_ok(&["fit", "--config", cfg]);
    let out = dir.path().join("out");
    for name in [
        "cate_model.json",
        "tree.json",
        "sequence.json",
        "tree.dot",
        "grouping.dot",
        "split.json",
        "selection.json",
        "fit_manifest.json",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("fit_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["outcome"], "y");
    assert_eq!(manifest["artifacts"].as_object().unwrap().len(), 7);

    let again = dir.path().join("again");
    run_ok(&["fit", "--config", cfg, "--out", again.to_str().unwrap()]);
    assert_eq!(json_artifacts(&out), json_artifacts(&again));

    run_ok(&["fit", "--config", cfg, "--seed", "12", "--out", again.to_str().unwrap()]);
    assert_ne!(json_artifacts(&out), json_artifacts(&again));
}

#[test]
fn missing_outcome_column_is_an_ingestion_error() {
    let (dir, _) = setup(50, "");
    let cfg = write_config(dir.path(), "").to_str().unwrap().to_string();
    let text = std::fs::read_to_string(&cfg).unwrap().replace("outcome = \"y\"", "outcome = \"birthweight\"");
    std::fs::write(&cfg, text).unwrap();
    let out = aggtree(&["fit", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("stage ingestion"), "{}", stderr(&out));
    assert!(stderr(&out).contains("birthweight"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let (dir, cfg) = setup(50, "colour = \"blue\"");
    let out = aggtree(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("colour"));

    let out = aggtree(&["fit", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = aggtree(&["gates", "--config", "x.toml", "--granularity", "2", "--cv"]);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_aggtree"))
        .args(["fit", "--config", cfg.to_str().unwrap()])
        .env("AGGTREE_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_leaf_grouping_equals_dr_ate() {
    let (dir, cfg) = setup(400, "");
    let cfg = load(&cfg);
    cmd_fit(&cfg, None).unwrap();
    let out = cmd_gates(&cfg, Some(Selection::ByLeafCount { leaves: 1 })).unwrap();
    assert_eq!(out.gates.rows.len(), 1);
    assert!((out.gates.rows[0].beta_hat - out.dr_ate).abs() < 1e-12);
    assert!(out.differences.is_none());
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/gates.json")).unwrap()).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["data"]["table"]["rows"][0]["n"], 200);
}

#[test]
fn gates_reports_a_table_per_grouping() {
    let (dir, cfg) = setup(600, "");
    let cfg_path = cfg.to_str().unwrap();
    run_ok(&["fit", "--config", cfg_path]);
    let out = run_ok(&["gates", "--config", cfg_path, "--granularity", "2", "--level", "0.9"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("90% CI"), "{text}");
    for name in ["gates.txt", "differences.json", "profiles.txt", "gates_manifest.json"] {
        assert!(dir.path().join("out").join(name).is_file(), "{name}");
    }
    let gates = std::fs::read_to_string(dir.path().join("out/gates.txt")).unwrap();
    assert!(gates.contains("Leaf 1: x1 <="), "{gates}");
}

#[test]
fn empty_honest_leaf_exits_three_and_names_the_leaf() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[selection]\nmode = \"by_leaf_count\"\nleaves = 2\n");
    let n = 400;
    let split = split_honest(n, 0.5, derive_seed(11, 0)).unwrap();
    write_csv(&dir.path().join("data.csv"), n, 3, &split.train_idx[..40]);
    let cfg_path = cfg.to_str().unwrap();
    run_ok(&["fit", "--config", cfg_path]);
    let out = aggtree(&["gates", "--config", cfg_path]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("leaf 2 (x1 >"), "{}", stderr(&out));
}

#[test]
fn stale_artifacts_are_rejected() {
    let (dir, cfg) = setup(200, "");
    let cfg_path = cfg.to_str().unwrap();
    let gates = || aggtree(&["gates", "--config", cfg_path]);
    assert_eq!(gates().status.code(), Some(2));
    run_ok(&["fit", "--config", cfg_path]);

    let tree = dir.path().join("out/tree.json");
    let original = std::fs::read_to_string(&tree).unwrap();
    std::fs::write(&tree, original.replace("\"n_train\"", " \"n_train\"")).unwrap();
    let out = gates();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("tree.json"), "{}", stderr(&out));
    std::fs::write(&tree, &original).unwrap();

    let out = aggtree(&["gates", "--config", cfg_path, "--seed", "99"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("different configuration"));

    write_csv(&dir.path().join("data.csv"), 200, 4, &[]);
    let out = gates();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("changed"));
}

#[test]
fn gate_text_aligns_for_up_to_twelve_leaves() {
    for leaves in 1..=12usize {
        let ids: Vec<usize> = (0..6 * leaves).map(|i| i % leaves + 1).collect();
        let gamma: Vec<f64> = (0..ids.len()).map(|i| (i as f64 - 20.0) * 10f64.powi((i % 5) as i32)).collect();
        let table = gate_from_scores(&DrScores { gamma }, &ids, 0.95, VarianceKind::Hc0).unwrap();
        let text = table.to_text();
        let widths: Vec<usize> = text.lines().map(|l| l.chars().count()).collect();
        assert_eq!(widths.len(), leaves + 2);
        assert!(widths.iter().all(|&w| w == widths[0]), "{text}");
    }
}

#[test]
fn simulate_smoke_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, small_sim_config(5, "\"at_t\"")).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert!(stderr(&out).contains("cell 1/1 done"));
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(json_artifacts(&a), json_artifacts(&b));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("sim_report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    let cell = &report["cells"][0];
    assert_eq!(cell["estimator"], "at_t");
    assert_eq!(cell["metrics"]["runs"].as_u64().unwrap() + cell["metrics"]["failed"].as_u64().unwrap(), 2);
    assert!(a.join("sim_report.txt").is_file());
}

#[test]
fn invalid_estimator_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, small_sim_config(5, "\"causal_forest\"")).unwrap();
    let out = aggtree(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for name in ["at_x", "at_t", "ct"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn balance_echoes_the_library_table() {
    let (dir, cfg) = setup(300, "");
    let out = run_ok(&["balance", "--config", cfg.to_str().unwrap()]);
    let ds = load_csv(&dir.path().join("data.csv"), "y", "d").unwrap();
    let expected = balance_table(&ds).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), expected.to_text());
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/balance.json")).unwrap()).unwrap();
    assert_eq!(doc["data"]["rows"].as_array().unwrap().len(), expected.rows.len());

    let one_arm = "y,d,x\n1,1,0.5\n2,1,0.7\n3,1,0.1\n";
    std::fs::write(dir.path().join("data.csv"), one_arm).unwrap();
    let out = aggtree(&["balance", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("control"));
}
