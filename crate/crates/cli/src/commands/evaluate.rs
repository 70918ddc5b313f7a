use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use classinv::artifact::{load_dataset, load_synth_images};
use classinv::metrics::evaluate_sets;
use classinv::util::atomic_write;

use crate::config::{resolve_out_dir, write_resolved, ExperimentConfig};

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Embedding classifier checkpoint(s); repeat for a multi-embedder sweep.
    #[arg(long, required = true)]
    pub embedder: Vec<PathBuf>,
    /// Reference image source: image-set manifest (.json) or a synth directory.
    #[arg(long)]
    pub real: PathBuf,
    /// Evaluated image source: image-set manifest (.json) or a synth directory.
    #[arg(long)]
    pub fake: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Loads images from either a synth-batch directory or an image-set manifest.
fn load_images(path: &Path) -> Result<classinv::ndarray::Array4<f64>> {
    if path.is_dir() {
        Ok(load_synth_images(path)?)
    } else {
        Ok(load_dataset(path)?.images)
    }
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(args.config.as_deref())?;
    config.resolve_seeds(args.seed);
    let out = resolve_out_dir(args.out, "evaluate");

    let real = load_images(&args.real).with_context(|| format!("loading {}", args.real.display()))?;
    let fake = load_images(&args.fake).with_context(|| format!("loading {}", args.fake.display()))?;

    let mut inputs = BTreeMap::new();
    let mut reports = Vec::new();
    for path in &args.embedder {
        let (embedder, digest) = super::load_teacher(path)?;
        inputs.insert(path.display().to_string(), digest);
        let report = evaluate_sets(
            &embedder,
            &real,
            &fake,
            config.evaluate.k,
            config.evaluate.splits,
        )?;
        println!(
            "{}: fd {:.4}  is {:.4} +- {:.4}  precision {:.4}  recall {:.4}  (n_real {}, n_fake {}{})",
            path.file_stem().and_then(|s| s.to_str()).unwrap_or("embedder"),
            report.fd,
            report.is_mean,
            report.is_std,
            report.precision,
            report.recall,
            report.real_count,
            report.fake_count,
            if report.degenerate { ", degenerate" } else { "" },
        );
        reports.push(report);
    }
    let digest = write_resolved(&out, "evaluate", &config, inputs)?;
    let mut bytes = serde_json::to_vec_pretty(&reports)?;
    bytes.push(b'\n');
    atomic_write(&out.join("metrics.json"), &bytes)?;
    println!("config digest: {digest}");
    println!("report: {}", out.join("metrics.json").display());
    Ok(())
}
