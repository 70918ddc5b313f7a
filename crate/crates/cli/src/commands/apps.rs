use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use classinv::artifact::load_synth_dir;
use classinv::compress::{
    distill, distill_with_student, finetune_pruned, l1_prune, synth_dataset, train_from_scratch,
};
use classinv::data::{shapes_corpus, Dataset};
use classinv::util::atomic_write;

use crate::config::{resolve_out_dir, write_resolved, ExperimentConfig};

#[derive(Debug, Args)]
pub struct AppsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Which application to run: distill | prune | prune-sweep | scratch.
    #[arg(long)]
    pub job: String,
    /// Teacher checkpoint sidecar (.json).
    #[arg(long)]
    pub teacher: PathBuf,
    /// Directory of synthesized batches (from `invert`).
    #[arg(long)]
    pub synth: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pruning ratio override for --job prune.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Start distillation from a copy of the teacher with pure soft loss
    /// (the initial loss of this run is exactly zero).
    #[arg(long)]
    pub student_copy_of_teacher: bool,
}

#[derive(Debug, Serialize)]
struct LedgerRow<'a> {
    experiment: &'a str,
    config_digest: &'a str,
    #[serde(flatten)]
    payload: serde_json::Value,
}

fn append_ledger(path: &Path, rows: &[LedgerRow<'_>]) -> Result<()> {
    let mut text = std::fs::read_to_string(path).unwrap_or_default();
    for row in rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn real_splits(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &config.dataset;
    Ok((
        shapes_corpus(d.classes, d.resolution, d.train_size, d.seed)?,
        shapes_corpus(d.classes, d.resolution, d.test_size, d.seed.wrapping_add(1))?,
    ))
}

pub fn run(args: AppsArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(args.config.as_deref())?;
    config.resolve_seeds(args.seed);
    if let Some(r) = args.ratio {
        config.prune.ratio = r;
    }
    let out = resolve_out_dir(args.out, "apps");

    let (teacher, teacher_digest) = super::load_teacher(&args.teacher)?;
    let batches = load_synth_dir(&args.synth)
        .with_context(|| format!("loading synthesized batches from {}", args.synth.display()))?;
    let synth = synth_dataset(&batches, teacher.num_classes())?;
    let (real_train, real_test) = real_splits(&config)?;

    let mut inputs = BTreeMap::new();
    inputs.insert(args.teacher.display().to_string(), teacher_digest);
    inputs.insert(
        args.synth.display().to_string(),
        format!("{} synthesized images", synth.len()),
    );
    let digest = write_resolved(&out, "apps", &config, inputs)?;
    let ledger = out.join("ledger.jsonl");

    match args.job.as_str() {
        "distill" => {
            let mut cfg = config.distill.clone();
            let (_, report) = if args.student_copy_of_teacher {
                cfg.student = teacher.spec.clone();
                cfg.soft_mix = 1.0;
                distill_with_student(&teacher, &cfg, &synth, &real_test, teacher.clone())?
            } else {
                distill(&teacher, &cfg, &synth, &real_test)?
            };
            println!(
                "distill: student test accuracy {:.4} (loss {:.4}); initial kd loss {:.6}, final {:.6}",
                report.test.accuracy, report.test.mean_loss, report.initial_loss, report.final_loss
            );
            append_ledger(
                &ledger,
                &[LedgerRow {
                    experiment: "distill",
                    config_digest: &digest,
                    payload: serde_json::json!({
                        "student_test_accuracy": report.test.accuracy,
                        "student_test_loss": report.test.mean_loss,
                        "initial_loss": report.initial_loss,
                        "final_loss": report.final_loss,
                        "images_used": report.images_used,
                        "student_copy_of_teacher": args.student_copy_of_teacher,
                    }),
                }],
            )?;
        }
        "prune" => {
            let ratio = config.prune.ratio;
            let row = prune_once(&teacher, &config, ratio, &synth, &real_test, &out)?;
            println!(
                "prune {:.0}%: before {:.4} -> after {:.4}",
                ratio * 100.0,
                row.0,
                row.1
            );
            append_ledger(
                &ledger,
                &[LedgerRow {
                    experiment: "prune",
                    config_digest: &digest,
                    payload: serde_json::json!({
                        "ratio": ratio,
                        "accuracy_before": row.0,
                        "accuracy_after": row.1,
                    }),
                }],
            )?;
        }
        "prune-sweep" => {
            let mut rows = Vec::new();
            let mut payloads = Vec::new();
            for ratio in [0.5, 0.6, 0.7, 0.8, 0.9] {
                let row = prune_once(&teacher, &config, ratio, &synth, &real_test, &out)?;
                println!(
                    "prune {:.0}%: before {:.4} -> after {:.4}",
                    ratio * 100.0,
                    row.0,
                    row.1
                );
                payloads.push(serde_json::json!({
                    "ratio": ratio,
                    "accuracy_before": row.0,
                    "accuracy_after": row.1,
                }));
            }
            for payload in &payloads {
                rows.push(LedgerRow {
                    experiment: "prune-sweep",
                    config_digest: &digest,
                    payload: payload.clone(),
                });
            }
            append_ledger(&ledger, &rows)?;
        }
        "scratch" => {
            let (_, report) = train_from_scratch(
                &config.scratch_model,
                &synth,
                &real_train,
                &real_test,
                &config.scratch,
            )?;
            println!(
                "scratch: real-train accuracy {:.4} (loss {:.4}); real-test accuracy {:.4} (loss {:.4})",
                report.real_train.accuracy,
                report.real_train.mean_loss,
                report.real_test.accuracy,
                report.real_test.mean_loss
            );
            append_ledger(
                &ledger,
                &[LedgerRow {
                    experiment: "scratch",
                    config_digest: &digest,
                    payload: serde_json::json!({
                        "real_train_accuracy": report.real_train.accuracy,
                        "real_train_loss": report.real_train.mean_loss,
                        "real_test_accuracy": report.real_test.accuracy,
                        "real_test_loss": report.real_test.mean_loss,
                    }),
                }],
            )?;
        }
        other => anyhow::bail!("unknown job {other:?} (expected distill | prune | prune-sweep | scratch)"),
    }
    println!("ledger: {}", ledger.display());
    Ok(())
}

fn prune_once(
    teacher: &classinv::classifier::ClassifierHandle,
    config: &ExperimentConfig,
    ratio: f64,
    synth: &Dataset,
    real_test: &Dataset,
    out: &Path,
) -> Result<(f64, f64)> {
    let mut cfg = config.prune.clone();
    cfg.ratio = ratio;
    let mut pruned = l1_prune(teacher, ratio)?;
    let mut bytes = serde_json::to_vec_pretty(&pruned.masks)?;
    bytes.push(b'\n');
    atomic_write(
        &out.join(format!("masks_{:02.0}.json", ratio * 100.0)),
        &bytes,
    )?;
    let report = finetune_pruned(&mut pruned, synth, real_test, &cfg)?;
    Ok((report.before.accuracy, report.after.accuracy))
}
