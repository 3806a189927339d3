use std::path::{Path, PathBuf};
use std::time::Instant;

use aggtree::data::load_csv_with;
use aggtree::rng::derive_seed;
use aggtree::sim::{run_simulation_with_progress, Progress, SimConfig, SimReport};
use aggtree::{
    apply_tree, balance_table, cross_validate_alpha, crossfit_nuisances, dr_scores, fit_t_learner,
    fit_x_learner, gate_from_scores, grow_aggregation_tree, leaf_profiles, pairwise_differences,
    predict_cate, split_honest, subtree_at_alpha, subtree_with_leaves, weakest_link_sequence,
    BalanceReport, CateKind, CateModel, CvResult, Dataset, DiffTable, GateError, GateTable,
    GrowTarget, LeafProfiles, PruneSequence, Tree,
};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Selection};
use crate::error::{Classify, CliError, Stage};
use crate::manifest::{hash_file, sha256_hex, versioned, ArtifactWriter, Manifest, MANIFEST_SCHEMA_VERSION};

pub const FIT_MANIFEST: &str = "fit_manifest.json";
pub const GATES_MANIFEST: &str = "gates_manifest.json";
pub const SIMULATE_MANIFEST: &str = "simulate_manifest.json";
pub const BALANCE_MANIFEST: &str = "balance_manifest.json";

// Independent random streams derived from the run seed.
const STREAM_SPLIT: u64 = 0;
const STREAM_CATE: u64 = 1;
const STREAM_CV: u64 = 2;
const STREAM_NUISANCE_FOREST: u64 = 3;
const STREAM_NUISANCE_FOLDS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitRecord {
    seed: u64,
    train_idx: Vec<usize>,
    honest_idx: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CvRecord {
    candidates: Vec<f64>,
    cv_loss: Vec<f64>,
    selected_alpha: f64,
}

/// The grouping chosen from the pruning sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub selection: Selection,
    /// Position in the sequence, finest first.
    pub index: usize,
    pub leaves: usize,
    pub alpha_interval: (f64, Option<f64>),
    cv: Option<CvRecord>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    pub sequence_leaf_counts: Vec<usize>,
    pub selected: SelectionRecord,
}

#[derive(Debug, Clone)]
pub struct GatesOutcome {
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    pub gates: GateTable,
    pub differences: Option<DiffTable>,
    pub profiles: LeafProfiles,
    /// Mean of the doubly-robust scores over the honest sample.
    pub dr_ate: f64,
}

fn manifest(command: &str, seed: u64, config: serde_json::Value, fingerprint: String, input: Option<String>, start: Instant) -> Manifest {
    Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        command: command.into(),
        library_version: env!("CARGO_PKG_VERSION").into(),
        seed,
        threads: rayon::current_num_threads(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        config,
        fingerprint,
        input_sha256: input,
        artifacts: Default::default(),
    }
}

fn json_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("value serializes")
}

fn fit_fingerprint(cfg: &RunConfig) -> String {
    sha256_hex(serde_json::to_string(&cfg.fit_key()).expect("key serializes").as_bytes())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    load_csv_with(&cfg.input, &cfg.outcome, &cfg.treatment, &cfg.covariates).map_err(|e| e.at(Stage::Ingestion))
}

fn input_hash(cfg: &RunConfig) -> Result<String, CliError> {
    hash_file(&cfg.input).map_err(|e| CliError::input(Stage::Ingestion, e.message))
}

fn fit_cate(cfg: &RunConfig, train: &Dataset) -> Result<CateModel, CliError> {
    let params = cfg.learner.forest.with_seed(derive_seed(cfg.seed, STREAM_CATE));
    params.validate(train.p()).map_err(|e| e.at(Stage::Config))?;
    match cfg.learner.kind {
        CateKind::TLearner => fit_t_learner(train, &params),
        CateKind::XLearner => fit_x_learner(train, &params, cfg.learner.propensity, cfg.learner.x_weight),
    }
    .map_err(|e| e.at(Stage::Estimation))
}

fn index_of(seq: &PruneSequence, tree: &Tree) -> usize {
    seq.leaf_counts()
        .iter()
        .position(|&c| c == tree.n_leaves())
        .expect("subtree belongs to the sequence")
}

fn record(seq: &PruneSequence, selection: Selection, index: usize, cv: Option<&CvResult>) -> SelectionRecord {
    SelectionRecord {
        selection,
        index,
        leaves: seq.subtrees[index].n_leaves(),
        alpha_interval: (seq.alphas[index], seq.alphas.get(index + 1).copied()),
        cv: cv.map(|cv| CvRecord {
            candidates: cv.candidates.clone(),
            cv_loss: cv.cv_loss.clone(),
            selected_alpha: cv.selected_alpha,
        }),
    }
}

fn select(
    cfg: &RunConfig,
    selection: Selection,
    seq: &PruneSequence,
    train_x: &aggtree::Covariates,
    tau: &[f64],
) -> Result<SelectionRecord, CliError> {
    match selection {
        Selection::Cv => {
            let cv = cross_validate_alpha(
                train_x,
                GrowTarget::Aggregation { tau_hat: tau },
                &cfg.stop,
                cfg.cv_folds,
                derive_seed(cfg.seed, STREAM_CV),
            )
            .map_err(|e| e.at(Stage::Pruning))?;
            let index = index_of(seq, cv.selected());
            Ok(record(seq, selection, index, Some(&cv)))
        }
        Selection::Explicit { alpha } => {
            let t = subtree_at_alpha(seq, alpha).map_err(|e| e.at(Stage::Pruning))?;
            Ok(record(seq, selection, index_of(seq, t), None))
        }
        Selection::ByLeafCount { leaves } => {
            let t = subtree_with_leaves(seq, leaves).map_err(|e| e.at(Stage::Pruning))?;
            Ok(record(seq, selection, index_of(seq, t), None))
        }
    }
}

fn sequence_json(seq: &PruneSequence) -> String {
    let steps: serde_json::Value = serde_json::from_str(&seq.to_json()).expect("sequence json parses");
    versioned("prune_sequence", steps)
}

fn read_versioned<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T, CliError> {
    let bad = |m: String| CliError::input(Stage::Artifacts, format!("{name}: {m}"));
    let text = std::fs::read_to_string(dir.join(name)).map_err(|e| bad(e.to_string()))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if doc["schema_version"] != 1 {
        return Err(bad(format!("unsupported schema_version {}", doc["schema_version"])));
    }
    serde_json::from_value(doc["data"].clone()).map_err(|e| bad(e.to_string()))
}

/// Estimates CATEs on the training sample, grows and prunes the aggregation
/// tree, and picks a grouping. `selection` overrides the configured mode.
pub fn cmd_fit(cfg: &RunConfig, selection: Option<Selection>) -> Result<FitOutcome, CliError> {
    let start = Instant::now();
    cfg.validate()?;
    let input_sha = input_hash(cfg)?;
    let ds = load_dataset(cfg)?;
    let split_seed = derive_seed(cfg.seed, STREAM_SPLIT);
    let split = split_honest(ds.n(), 1.0 - cfg.honest_fraction, split_seed).map_err(|e| e.at(Stage::Ingestion))?;
    let train = ds.select(&split.train_idx);

    let model = fit_cate(cfg, &train)?;
    let tau = predict_cate(&model, train.x()).map_err(|e| e.at(Stage::Estimation))?;
    let tree = grow_aggregation_tree(train.x(), &tau, &cfg.stop).map_err(|e| e.at(Stage::Growing))?;
    let seq = weakest_link_sequence(&tree).map_err(|e| e.at(Stage::Pruning))?;
    let selection = selection.unwrap_or(cfg.selection);
    let chosen = select(cfg, selection, &seq, train.x(), &tau)?;

    let mut w = ArtifactWriter::create(&cfg.out_dir)?;
    w.write("cate_model.json", &(model.to_json() + "\n"))?;
    w.write("tree.json", &(tree.to_json() + "\n"))?;
    w.write("sequence.json", &sequence_json(&seq))?;
    w.write("tree.dot", &tree.to_dot())?;
    w.write("grouping.dot", &seq.subtrees[chosen.index].to_dot())?;
    w.write(
        "split.json",
        &versioned(
            "sample_split",
            json_value(&SplitRecord {
                seed: split_seed,
                train_idx: split.train_idx.clone(),
                honest_idx: split.honest_idx.clone(),
            }),
        ),
    )?;
    w.write("selection.json", &versioned("selection", json_value(&chosen)))?;
    let artifacts = w.names();
    let out_dir = w.dir().to_path_buf();
    let m = manifest("fit", cfg.seed, json_value(cfg), fit_fingerprint(cfg), Some(input_sha), start);
    w.finish(FIT_MANIFEST, m)?;
    Ok(FitOutcome {
        out_dir,
        artifacts,
        sequence_leaf_counts: seq.leaf_counts(),
        selected: chosen,
    })
}

/// Estimates GATEs on the honest sample for a grouping from the fitted
/// sequence. Without `grouping`, the grouping chosen by `fit` is used.
pub fn cmd_gates(cfg: &RunConfig, grouping: Option<Selection>) -> Result<GatesOutcome, CliError> {
    let start = Instant::now();
    cfg.validate()?;
    let dir = &cfg.out_dir;
    let fit = Manifest::read(&dir.join(FIT_MANIFEST))?;
    fit.verify_artifacts(dir)?;
    if fit.fingerprint != fit_fingerprint(cfg) {
        return Err(CliError::input(
            Stage::Artifacts,
            "fit artifacts were produced with a different configuration; rerun `aggtree fit`",
        ));
    }
    let input_sha = input_hash(cfg)?;
    if fit.input_sha256.as_deref() != Some(input_sha.as_str()) {
        return Err(CliError::input(
            Stage::Artifacts,
            format!("{} changed since `aggtree fit`; rerun it", cfg.input.display()),
        ));
    }
    let ds = load_dataset(cfg)?;
    let tree_text = std::fs::read_to_string(dir.join("tree.json"))
        .map_err(|e| CliError::input(Stage::Artifacts, format!("tree.json: {e}")))?;
    let tree = Tree::from_json(&tree_text).map_err(|e| e.at(Stage::Artifacts))?;
    let seq = weakest_link_sequence(&tree).map_err(|e| e.at(Stage::Pruning))?;
    let split: SplitRecord = read_versioned(dir, "split.json")?;
    let fitted: SelectionRecord = read_versioned(dir, "selection.json")?;

    let chosen = match grouping {
        None => fitted,
        Some(Selection::Cv) if fitted.selection == Selection::Cv => fitted,
        Some(sel) => {
            let train = ds.select(&split.train_idx);
            let model_text = std::fs::read_to_string(dir.join("cate_model.json"))
                .map_err(|e| CliError::input(Stage::Artifacts, format!("cate_model.json: {e}")))?;
            let model = CateModel::from_json(&model_text).map_err(|e| e.at(Stage::Artifacts))?;
            let tau = predict_cate(&model, train.x()).map_err(|e| e.at(Stage::Estimation))?;
            select(cfg, sel, &seq, train.x(), &tau)?
        }
    };
    let grouping_tree = seq.subtrees.get(chosen.index).ok_or_else(|| {
        CliError::input(Stage::Artifacts, "selection.json does not match tree.json; rerun `aggtree fit`")
    })?;

    let honest = ds.select(&split.honest_idx);
    let nuisance_params = cfg.learner.forest.with_seed(derive_seed(cfg.seed, STREAM_NUISANCE_FOREST));
    let nuis = crossfit_nuisances(
        &honest,
        cfg.folds,
        &nuisance_params,
        cfg.learner.propensity,
        cfg.clip_eps,
        derive_seed(cfg.seed, STREAM_NUISANCE_FOLDS),
    )
    .map_err(|e| e.at(Stage::Nuisance))?;
    let scores = dr_scores(honest.y(), honest.d(), &nuis).map_err(|e| e.at(Stage::Gates))?;
    let leaf_ids = apply_tree(grouping_tree, honest.x()).map_err(|e| e.at(Stage::Gates))?;
    let positions = grouping_tree.leaf_positions();
    let rule = |leaf: usize| grouping_tree.rule_path(positions[leaf - 1]);
    let name_leaf = |e: GateError| match e {
        GateError::EmptyLeaf(l) => CliError::new(
            Stage::Gates,
            e.kind(),
            format!("honest sample has no observations in leaf {l} ({})", rule(l)),
        ),
        GateError::UndefinedSe(l) => CliError::new(
            Stage::Gates,
            e.kind(),
            format!("leaf {l} ({}) has an undefined standard error", rule(l)),
        ),
        e => e.at(Stage::Gates),
    };
    // Labels are dense up to the largest one present, so only trailing
    // leaves can be missing here.
    let present = leaf_ids.iter().copied().max().unwrap_or(0);
    if present < positions.len() {
        return Err(name_leaf(GateError::EmptyLeaf(present + 1)));
    }
    let gates = gate_from_scores(&scores, &leaf_ids, cfg.level, cfg.variance).map_err(name_leaf)?;
    let differences = if gates.rows.len() >= 2 {
        Some(pairwise_differences(&gates).map_err(name_leaf)?)
    } else {
        None
    };
    let profiles = leaf_profiles(honest.x(), &leaf_ids).map_err(|e| e.at(Stage::Gates))?;
    let dr_ate = scores.gamma.iter().sum::<f64>() / scores.gamma.len() as f64;

    let legend: String = (1..=gates.rows.len())
        .map(|l| format!("Leaf {l}: {}\n", rule(l)))
        .collect();
    let mut w = ArtifactWriter::create(dir)?;
    let gates_doc = serde_json::json!({
        "grouping": json_value(&chosen),
        "rules": (1..=gates.rows.len()).map(rule).collect::<Vec<_>>(),
        "table": json_value(&gates),
    });
    w.write("gates.json", &versioned("gate_table", gates_doc))?;
    w.write("gates.txt", &format!("{}\n{legend}", gates.to_text()))?;
    if let Some(diffs) = &differences {
        w.write("differences.json", &versioned("gate_differences", json_value(diffs)))?;
        w.write("differences.txt", &diffs.to_text())?;
    }
    w.write("profiles.json", &versioned("leaf_profiles", json_value(&profiles)))?;
    w.write("profiles.txt", &profiles.to_text())?;
    let artifacts = w.names();
    let fingerprint = sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    let m = manifest("gates", cfg.seed, json_value(cfg), fingerprint, Some(input_sha), start);
    w.finish(GATES_MANIFEST, m)?;
    Ok(GatesOutcome {
        out_dir: dir.clone(),
        artifacts,
        gates,
        differences,
        profiles,
        dr_ate,
    })
}

/// Covariate balance between the treatment arms of the whole input.
pub fn cmd_balance(cfg: &RunConfig) -> Result<BalanceReport, CliError> {
    let start = Instant::now();
    cfg.validate()?;
    let input_sha = input_hash(cfg)?;
    let ds = load_dataset(cfg)?;
    let report = balance_table(&ds).map_err(|e| e.at(Stage::Ingestion))?;
    let mut w = ArtifactWriter::create(&cfg.out_dir)?;
    w.write("balance.json", &versioned("balance", json_value(&report)))?;
    w.write("balance.txt", &report.to_text())?;
    let fingerprint = sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    let m = manifest("balance", cfg.seed, json_value(cfg), fingerprint, Some(input_sha), start);
    w.finish(BALANCE_MANIFEST, m)?;
    Ok(report)
}

/// Reads and validates a simulation config, applying a seed override.
pub fn load_sim_config(path: &Path, seed: Option<u64>) -> Result<SimConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(Stage::Config, format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = SimConfig::from_toml(&text).map_err(|e| e.at(Stage::Config))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Runs a Monte Carlo study and writes its report to `out_dir`.
pub fn cmd_simulate(cfg: &SimConfig, out_dir: &Path, progress: impl FnMut(Progress)) -> Result<SimReport, CliError> {
    let start = Instant::now();
    let report = run_simulation_with_progress(cfg, progress).map_err(|e| e.at(Stage::Simulation))?;
    let mut w = ArtifactWriter::create(out_dir)?;
    w.write("sim_report.json", &(report.to_json() + "\n"))?;
    w.write("sim_report.txt", &report.to_text())?;
    let fingerprint = sha256_hex(cfg.to_toml().as_bytes());
    let m = manifest("simulate", cfg.seed, json_value(cfg), fingerprint, None, start);
    w.finish(SIMULATE_MANIFEST, m)?;
    Ok(report)
}
