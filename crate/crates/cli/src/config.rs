//! Experiment configuration: one JSON document covering every subcommand,
//! resolved against the command line and written back into each run's output
//! directory so any artifact can be reproduced bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use classinv::classifier::ClassifierSpec;
use classinv::compress::{DistillConfig, PruneConfig, ScratchConfig};
use classinv::engine::InversionConfig;
use classinv::util::{atomic_write, derive_seed, sha256_hex};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "CLASSINV_OUT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub classes: usize,
    pub resolution: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            classes: 10,
            resolution: 32,
            train_size: 2000,
            test_size: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSection {
    pub spec: ClassifierSpec,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            spec: ClassifierSpec::desk_resnet(10),
            epochs: 5,
            lr: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSection {
    /// Neighborhood size of the precision/recall manifold estimate.
    pub k: usize,
    /// Split count for the label-entropy score.
    pub splits: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { k: 3, splits: 1 }
    }
}

/// The complete experiment document. Every field has a default, so an empty
/// `{}` file (or no file) is a valid starting point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; all section seeds derive from it during resolution.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub teacher: TeacherSection,
    pub inversion: InversionConfig,
    pub distill: DistillConfig,
    pub prune: PruneConfig,
    pub scratch: ScratchConfig,
    /// Architecture trained in the from-scratch study.
    pub scratch_model: ClassifierSpec,
    pub evaluate: EvaluateSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dataset: DatasetSection::default(),
            teacher: TeacherSection::default(),
            inversion: InversionConfig::default(),
            distill: DistillConfig::new(ClassifierSpec::desk_resnet(10), 0),
            prune: PruneConfig::default(),
            scratch: ScratchConfig::default(),
            scratch_model: ClassifierSpec::desk_resnet(10),
            evaluate: EvaluateSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(ExperimentConfig::default()),
            Some(p) => {
                let bytes = std::fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
                let config: ExperimentConfig =
                    serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", p.display()))?;
                Ok(config)
            }
        }
    }

    /// Applies the master seed and derives every section seed from it.
    pub fn resolve_seeds(&mut self, seed_override: Option<u64>) {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.dataset.seed = derive_seed(self.seed, 0xDA7A);
        self.teacher.seed = derive_seed(self.seed, 0x7EAC);
        self.inversion.master_seed = derive_seed(self.seed, 0x14E7);
        self.distill.seed = derive_seed(self.seed, 0xD157);
        self.prune.seed = derive_seed(self.seed, 0x9F0E);
        self.scratch.seed = derive_seed(self.seed, 0x5C2A);
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.classes != self.teacher.spec.num_classes {
            bail!(
                "dataset has {} classes but the teacher spec expects {}",
                self.dataset.classes,
                self.teacher.spec.num_classes
            );
        }
        if self.dataset.resolution != self.teacher.spec.input_resolution {
            bail!(
                "dataset resolution {} does not match the teacher spec ({})",
                self.dataset.resolution,
                self.teacher.spec.input_resolution
            );
        }
        Ok(())
    }
}

/// Record written into every run directory: the command, the fully resolved
/// config, and digests of all file inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub command: String,
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, String>,
}

/// Writes `config.resolved.json` and returns its content digest, which is
/// embedded in every artifact manifest the run produces.
pub fn write_resolved(
    out_dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    inputs: BTreeMap<String, String>,
) -> Result<String> {
    std::fs::create_dir_all(out_dir)?;
    let record = ResolvedRun {
        command: command.to_string(),
        config: config.clone(),
        inputs,
    };
    let mut bytes = serde_json::to_vec_pretty(&record)?;
    bytes.push(b'\n');
    let digest = sha256_hex(&bytes);
    atomic_write(&out_dir.join("config.resolved.json"), &bytes)?;
    Ok(digest)
}

/// Output directory: explicit flag, else `$CLASSINV_OUT/<command>`, else
/// `./classinv-runs/<command>`.
pub fn resolve_out_dir(flag: Option<PathBuf>, command: &str) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("classinv-runs"));
    root.join(command)
}
