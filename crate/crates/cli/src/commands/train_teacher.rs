use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use classinv::artifact::save_dataset;
use classinv::classifier::{build_classifier, save_checkpoint, train_classifier_with, TrainSettings};
use classinv::data::shapes_corpus;

use crate::config::{resolve_out_dir, write_resolved, ExperimentConfig};

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    /// Experiment config file (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $CLASSINV_OUT/train-teacher).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs override.
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn run(args: TrainTeacherArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(args.config.as_deref())?;
    config.resolve_seeds(args.seed);
    if let Some(e) = args.epochs {
        config.teacher.epochs = e;
    }
    config.validate()?;
    let out = resolve_out_dir(args.out, "train-teacher");

    let d = &config.dataset;
    let train = shapes_corpus(d.classes, d.resolution, d.train_size, d.seed)?;
    let test = shapes_corpus(d.classes, d.resolution, d.test_size, d.seed.wrapping_add(1))?;

    let handle = build_classifier(&config.teacher.spec, config.teacher.seed)?;
    let settings = TrainSettings {
        epochs: config.teacher.epochs,
        lr: config.teacher.lr,
        batch_size: config.teacher.batch_size,
        momentum: 0.9,
        seed: config.teacher.seed,
    };
    let (teacher, report) = train_classifier_with(handle, &train, Some(&test), &settings)?;

    let digest = write_resolved(&out, "train-teacher", &config, BTreeMap::new())?;
    let sidecar = save_checkpoint(&teacher, &out, "teacher")
        .with_context(|| format!("writing checkpoint under {}", out.display()))?;
    save_dataset(&out, "train_set", &train)?;
    save_dataset(&out, "test_set", &test)?;

    println!("teacher checkpoint: {}", sidecar.display());
    println!("config digest:      {digest}");
    println!(
        "family {:?}  stages {:?}  classes {}",
        teacher.spec.family, teacher.spec.stage_channels, teacher.spec.num_classes
    );
    println!(
        "train accuracy {:.4} (loss {:.4})",
        report.train_accuracy, report.train_loss
    );
    if let (Some(acc), Some(loss)) = (report.test_accuracy, report.test_loss) {
        println!("test accuracy  {acc:.4} (loss {loss:.4})");
    }
    Ok(())
}
