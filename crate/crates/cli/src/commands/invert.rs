use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;

use classinv::artifact::save_synth_batch;
use classinv::engine::{self, SynthMode};

use crate::config::{resolve_out_dir, write_resolved, ExperimentConfig};

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Teacher checkpoint sidecar (.json).
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthesis mode: natural | raw-pixel | one-to-many.
    #[arg(long)]
    pub mode: Option<String>,
    /// Number of batches to synthesize.
    #[arg(long)]
    pub batches: Option<usize>,
    /// Optimization epochs per batch.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Disable the feature-pyramid contribution.
    #[arg(long)]
    pub no_ftp: bool,
    /// Freeze the channel scales at 1.
    #[arg(long)]
    pub no_acs: bool,
    /// Use one persistent generator instead of per-batch re-initialization.
    #[arg(long)]
    pub no_o2o: bool,
}

fn parse_mode(s: &str) -> Result<SynthMode> {
    match s {
        "natural" => Ok(SynthMode::Natural),
        "raw-pixel" => Ok(SynthMode::RawPixel),
        "one-to-many" => Ok(SynthMode::OneToMany),
        other => anyhow::bail!("unknown mode {other:?} (expected natural | raw-pixel | one-to-many)"),
    }
}

pub fn run(args: InvertArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(args.config.as_deref())?;
    config.resolve_seeds(args.seed);
    if let Some(mode) = args.mode.as_deref() {
        config.inversion.mode = parse_mode(mode)?;
    }
    if let Some(b) = args.batches {
        config.inversion.num_batches = b;
    }
    if let Some(e) = args.epochs {
        config.inversion.epochs = e;
    }
    if let Some(b) = args.batch_size {
        config.inversion.batch_size = b;
    }
    if args.no_ftp {
        config.inversion = config.inversion.without_ftp();
    }
    if args.no_acs {
        config.inversion = config.inversion.without_acs();
    }
    if args.no_o2o {
        config.inversion = config.inversion.without_one_to_one();
    }
    let out = resolve_out_dir(args.out, "invert");

    let (teacher, teacher_digest) = super::load_teacher(&args.teacher)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(args.teacher.display().to_string(), teacher_digest);
    let digest = write_resolved(&out, "invert", &config, inputs)?;

    let batches = engine::run(&teacher, &config.inversion)?;
    for (i, batch) in batches.iter().enumerate() {
        let manifest = save_synth_batch(
            &out,
            i,
            batch,
            config.inversion.mode,
            &digest,
            &teacher.spec.normalization,
        )?;
        match batch.trace.last() {
            Some(r) => println!(
                "batch {i}: epochs {}  final total {:.6} (ce {:.6}, r_bn {:.6})  -> {}",
                batch.trace.len(),
                r.total,
                r.ce,
                r.r_bn,
                manifest.display()
            ),
            None => println!("batch {i}: untrained composition -> {}", manifest.display()),
        }
    }
    println!("config digest: {digest}");
    Ok(())
}
