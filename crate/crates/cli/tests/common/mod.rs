#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Randomized experiment with an effect that steps up at `x1 = 0.5`.
/// Rows listed in `outliers` get `x1 = 10` and an effect of 30.
pub fn write_csv(path: &Path, n: usize, seed: u64, outliers: &[usize]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("y,d,x1,x2,region\n");
    for i in 0..n {
        let mut x1: f64 = rng.random_range(0.0..1.0);
        let x2: f64 = rng.random_range(-1.0..1.0);
        let region = ["north", "south", "east"][rng.random_range(0..3)];
        let d = rng.random_bool(0.5);
        let mut effect = if x1 > 0.5 { 2.0 } else { 0.5 };
        if outliers.contains(&i) {
            x1 = 10.0 + rng.random_range(0.0..0.1);
            effect = 30.0;
        }
        let y = 1.0 + x1 + 0.5 * x2 + if d { effect } else { 0.0 } + rng.random_range(-0.5..0.5);
        out.push_str(&format!("{y},{},{x1},{x2},{region}\n", u8::from(d)));
    }
    std::fs::write(path, out).unwrap();
}

/// Writes `config.toml` next to `data.csv` in `dir` and returns its path.
pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"schema_version = 1
input = "data.csv"
outcome = "y"
treatment = "d"
seed = 11
out_dir = "out"
{extra}
[learner.forest]
n_trees = 50
"#
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn small_sim_config(seed: u64, estimators: &str) -> String {
    format!(
        r#"schema_version = 1
seed = {seed}
sample_sizes = [500]
regimes = ["random"]
heterogeneity = [4.0]
replications = 2
estimators = [{estimators}]

[population]
population_size = 5000
validation_size = 500

[learner.forest]
n_trees = 50
"#
    )
}

/// Every `*.json` file in `dir` except manifests, by name.
pub fn json_artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .filter(|p| !p.file_name().unwrap().to_str().unwrap().ends_with("manifest.json"))
        .map(|p| (p.file_name().unwrap().to_str().unwrap().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}
