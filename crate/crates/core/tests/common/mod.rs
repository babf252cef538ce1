#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use supmix::cli::{gen_data, ExperimentConfig};
use supmix::data::SyntheticSpec;
use supmix::trainer::{TrainConfig, Variant};

/// Small 32×32 vessel dataset.
pub fn vessel_dataset(dir: &Path, train: usize, test: usize, seed: u64) -> PathBuf {
    let mut spec = SyntheticSpec::chase_like(train, test, seed);
    spec.image_size = [32, 32];
    gen_data(&spec, dir).unwrap();
    dir.to_path_buf()
}

pub fn experiment(dataset: &Path, out: &Path, variant: Variant, seeds: Vec<u64>) -> ExperimentConfig {
    let mut train = TrainConfig::new(variant);
    train.epochs = 1;
    train.widths = [4, 8, 8];
    train.disc_width = 4;
    ExperimentConfig {
        dataset: dataset.to_path_buf(),
        out_dir: out.to_path_buf(),
        seeds,
        labeled_ratio: Some(0.25),
        split_seed: 3,
        ablation_ratios: vec![0.25],
        label: None,
        train,
    }
}

/// sha256 of every file below `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, supmix::util::sha256_file(&p).unwrap());
            }
        }
    }
    out
}
