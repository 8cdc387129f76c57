//! On-disk layout of dataset and sample directories.

use std::io::BufReader;
use std::path::{Path, PathBuf};

use modeprior::data::{read_dataset_csv, Bump, DatasetSpec, LabeledSample};
use modeprior::latents::LatentSpace;
use modeprior::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DATASET_CSV: &str = "dataset.csv";
pub const DATASET_JSON: &str = "dataset.json";
pub const BUMPS_JSON: &str = "bumps.json";
pub const LATENTS_TSV: &str = "latents.tsv";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const SAMPLE_META: &str = "sample_meta.json";

/// Generation settings of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub n: usize,
    pub seed: u64,
    pub spec: DatasetSpec,
}

/// Context a sample file needs for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub checkpoint: String,
    pub variant: String,
    pub gamma: f64,
    pub seed: u64,
    pub steps: usize,
    pub tau: f64,
    pub use_ema: bool,
    pub dataset: DatasetSpec,
    pub space: Option<LatentSpace>,
}

impl SampleMeta {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(s) = &mut m.space {
            s.init_vocab()?;
        }
        Ok(m)
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::contract(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::contract(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn out_dir(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| Error::contract("--out is required for this command"))
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<LabeledSample>)> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(DATASET_JSON))?)?;
    let file = std::fs::File::open(dir.join(DATASET_CSV))?;
    let mut samples = read_dataset_csv(BufReader::new(file))?;
    if let DatasetSpec::Canvas(_) = meta.spec {
        let bumps: Vec<Vec<Bump>> = serde_json::from_str(&std::fs::read_to_string(dir.join(BUMPS_JSON))?)?;
        if bumps.len() != samples.len() {
            return Err(Error::contract("bump sidecar and dataset differ in length"));
        }
        for (s, b) in samples.iter_mut().zip(bumps) {
            s.bumps = b;
        }
    }
    if samples.iter().any(|s| s.x.len() != meta.spec.dim() || s.class >= meta.spec.n_classes()) {
        return Err(Error::contract("dataset rows do not match dataset.json"));
    }
    Ok((meta, samples))
}
