use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use classinv::engine::{self, SynthMode};
use classinv::util::atomic_write;

use crate::config::{resolve_out_dir, write_resolved, ExperimentConfig};

#[derive(Debug, Args)]
pub struct LossCompareArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Teacher checkpoint sidecar (.json).
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs for every mode (matched budgets).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

const MODES: [(SynthMode, &str); 3] = [
    (SynthMode::Natural, "one-to-one"),
    (SynthMode::OneToMany, "one-to-many"),
    (SynthMode::RawPixel, "raw-pixel"),
];

pub fn run(args: LossCompareArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(args.config.as_deref())?;
    config.resolve_seeds(args.seed);
    if let Some(e) = args.epochs {
        config.inversion.epochs = e;
    }
    if let Some(b) = args.batch_size {
        config.inversion.batch_size = b;
    }
    // At least two batches: with a single batch the persistent-generator
    // mode degenerates to per-batch re-initialization.
    config.inversion.num_batches = config.inversion.num_batches.max(2);
    let out = resolve_out_dir(args.out, "loss-compare");

    let (teacher, teacher_digest) = super::load_teacher(&args.teacher)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(args.teacher.display().to_string(), teacher_digest);
    let digest = write_resolved(&out, "loss-compare", &config, inputs)?;

    // Matched budgets: every mode synthesizes the same batch count for the
    // same per-batch epochs; the exported trace is the final batch's, where
    // the persistent-generator mode carries its warm start.
    let mut csv = String::from("mode,epoch,total,ce,r_bn\n");
    let mut summary = Vec::new();
    for (mode, name) in MODES {
        let mut inv = config.inversion;
        inv.mode = mode;
        let batches = engine::run(&teacher, &inv)?;
        let trace = &batches.last().expect("at least one batch").trace;
        for (e, r) in trace.iter().enumerate() {
            csv.push_str(&format!("{name},{e},{},{},{}\n", r.total, r.ce, r.r_bn));
        }
        let last = trace.last();
        let final_total = last.map(|r| r.total);
        println!(
            "{name}: {} epochs, final total {}",
            trace.len(),
            final_total.map_or("n/a".into(), |v| format!("{v:.6}")),
        );
        summary.push(serde_json::json!({
            "mode": name,
            "epochs": trace.len(),
            "final_total": final_total,
            "final_ce": last.map(|r| r.ce),
            "final_r_bn": last.map(|r| r.r_bn),
        }));
    }
    atomic_write(&out.join("loss_compare.csv"), csv.as_bytes())?;
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    atomic_write(&out.join("summary.json"), &bytes)?;
    println!("config digest: {digest}");
    println!("trace: {}", out.join("loss_compare.csv").display());
    Ok(())
}
