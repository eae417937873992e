//! The operations behind each `boxhead` subcommand.
//!
//! Each command writes its effective configuration as `config.toml` into
//! the directory it produces.

use crate::bbox::box_iou;
use crate::bench::{default_cases, run_bench, BenchRow};
use crate::checkpoint::{load_head, save_head};
use crate::config::RunConfig;
use crate::data::{generate_sequence, read_split, sequence_name, write_dataset, DatasetSummary, SceneSpec, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, ComponentReport};
use crate::head::{Head, HeadVariant};
use crate::metrics::{evaluate, MetricReport};
use crate::optim::AdamWConfig;
use crate::train::{loss_trace_csv, predict, train_head, FeatureSet, LossRecord, TrainHyper};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
const PREDICT_CHUNK: usize = 32;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_report(dir: &Path, stem: &str, report: &MetricReport) -> Result<()> {
    write(&dir.join(format!("{stem}.json")), report.to_json()?)?;
    write(&dir.join(format!("{stem}.csv")), report.to_csv())
}

/// Materializes the synthetic dataset at `cfg.dataset`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<DatasetSummary> {
    let summary = write_dataset(&cfg.dataset, &cfg.dataset_spec())?;
    cfg.write_into(&cfg.dataset)?;
    Ok(summary)
}

/// Encodes one split of the dataset at `cfg.dataset`.
pub fn load_features(cfg: &RunConfig, split: Split) -> Result<FeatureSet> {
    if !cfg.dataset.join(split.name()).is_dir() {
        return Err(Error::io(
            cfg.dataset.join(split.name()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset split missing; run `boxhead gen` first"),
        ));
    }
    let sequences = read_split(&cfg.dataset, split)?;
    if sequences.is_empty() {
        return Err(Error::contract(format!("the {split} split has no sequences")));
    }
    FeatureSet::encode(&sequences, &cfg.encoder())
}

/// A freshly initialized head for `variant`.
pub fn build_head(cfg: &RunConfig, variant: HeadVariant) -> Result<Head> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Head::new(cfg.head_config(variant), &mut rng)
}

/// Trains `variant` on `set` under `cfg`.
pub fn train_variant(cfg: &RunConfig, variant: HeadVariant, set: &FeatureSet) -> Result<(Head, Vec<LossRecord>)> {
    let mut head = build_head(cfg, variant)?;
    let trace = train_head(set, &mut head, &cfg.hyper())?;
    Ok((head, trace))
}

/// Per-frame predictions of `head` scored against `set`'s ground truth.
pub fn evaluate_head(head: &mut Head, set: &FeatureSet) -> Result<MetricReport> {
    let preds = predict(head, &set.features, PREDICT_CHUNK)?;
    evaluate(&set.regroup(&preds), &set.regroup(&set.boxes), &set.sequence_names)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub trace: Vec<LossRecord>,
    pub report: MetricReport,
    pub checkpoint: PathBuf,
}

/// Trains `cfg.variant` on the train split; writes checkpoint, loss trace and train-set report.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let set = load_features(cfg, Split::Train)?;
    cfg.write_into(&cfg.out)?;
    let (mut head, trace) = train_variant(cfg, cfg.variant, &set)?;
    write(&cfg.out.join("loss.csv"), loss_trace_csv(&trace))?;
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    save_head(&checkpoint, &head)?;
    let report = evaluate_head(&mut head, &set)?;
    write_report(&cfg.out, "train_report", &report)?;
    Ok(TrainOutput {
        trace,
        report,
        checkpoint,
    })
}

/// Scores a checkpoint on `split`; with `oracle`, scores the ground truth against itself.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split, oracle: bool) -> Result<MetricReport> {
    let set = load_features(cfg, split)?;
    cfg.write_into(&cfg.out)?;
    let report = if oracle {
        let gts = set.regroup(&set.boxes);
        evaluate(&gts, &gts, &set.sequence_names)?
    } else {
        let path = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
        let mut head = build_head(cfg, cfg.variant)?;
        load_head(&path, &mut head)?;
        evaluate_head(&mut head, &set)?
    };
    let stem = if oracle {
        format!("eval_{split}_oracle")
    } else {
        format!("eval_{split}")
    };
    write_report(&cfg.out, &stem, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub variant: HeadVariant,
    pub ao: f64,
    pub sr_50: f64,
    pub sr_75: f64,
    pub auc: f64,
    pub final_loss: f64,
    pub params: usize,
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("variant,AO,SR_0.5,SR_0.75,AUC,final_loss,params\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant, r.ao, r.sr_50, r.sr_75, r.auc, r.final_loss, r.params
        );
    }
    out
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let mut out = format!(
        "{:<18} {:>7} {:>7} {:>8} {:>7} {:>10} {:>8}\n",
        "variant", "AO", "SR_0.5", "SR_0.75", "AUC", "loss", "params"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<18} {:>7.4} {:>7.4} {:>8.4} {:>7.4} {:>10.4} {:>8}",
            r.variant.name(),
            r.ao,
            r.sr_50,
            r.sr_75,
            r.auc,
            r.final_loss,
            r.params
        );
    }
    out
}

fn compare_one(cfg: &RunConfig, variant: HeadVariant, train: &FeatureSet, eval: &FeatureSet) -> Result<CompareRow> {
    use crate::param::HasParams;
    let (mut head, trace) = train_variant(cfg, variant, train)?;
    let dir = cfg.out.join(variant.name());
    save_head(&dir.join(CHECKPOINT_FILE), &head)?;
    write(&dir.join("loss.csv"), loss_trace_csv(&trace))?;
    let report = evaluate_head(&mut head, eval)?;
    write_report(&dir, "eval_report", &report)?;
    let tail = trace.len().saturating_sub(100);
    let final_loss = crate::train::windowed_mean(&trace, tail..trace.len());
    Ok(CompareRow {
        variant,
        ao: report.ao,
        sr_50: report.sr_50,
        sr_75: report.sr_75,
        auc: report.auc,
        final_loss,
        params: head.param_count(),
    })
}

/// Trains every head variant under one seed and schedule on one dataset and
/// scores each on the eval split.
pub fn cmd_compare_heads(cfg: &RunConfig, parallel: bool) -> Result<Vec<CompareRow>> {
    let train = load_features(cfg, Split::Train)?;
    let eval = load_features(cfg, Split::Eval)?;
    cfg.write_into(&cfg.out)?;
    let rows: Vec<Result<CompareRow>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = HeadVariant::ALL
                .iter()
                .map(|&v| {
                    let (train, eval) = (&train, &eval);
                    s.spawn(move || compare_one(cfg, v, train, eval))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::contract("variant worker panicked"))))
                .collect()
        })
    } else {
        HeadVariant::ALL
            .iter()
            .map(|&v| compare_one(cfg, v, &train, &eval))
            .collect()
    };
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    write(&cfg.out.join("compare_heads.csv"), compare_csv(&rows))?;
    write(&cfg.out.join("compare_heads.txt"), compare_table(&rows))?;
    Ok(rows)
}

/// Trains an inception head on the first training frame alone and returns
/// the IoU of its decoded box on that frame.
pub fn memorize_single(cfg: &RunConfig) -> Result<f64> {
    let spec = cfg.dataset_spec();
    let scene = SceneSpec {
        frames: 1,
        ..spec.scene(Split::Train, 0)
    };
    let seq = generate_sequence(&scene, &sequence_name(0))?;
    let set = FeatureSet::encode(&[seq], &cfg.encoder())?;
    let mut head = build_head(cfg, HeadVariant::Inception)?;
    let hyper = TrainHyper {
        steps: cfg.memorize_steps,
        batch_size: 1,
        optim: AdamWConfig {
            lr: cfg.memorize_lr,
            ..cfg.hyper().optim
        },
        ..cfg.hyper()
    };
    train_head(&set, &mut head, &hyper)?;
    let pred = predict(&mut head, &set.features, 1)?;
    Ok(box_iou(&pred[0], &set.boxes[0]))
}

/// Runs the finite-difference suite; a numeric error lists any failing components.
pub fn cmd_gradcheck(seeds: u64) -> Result<Vec<ComponentReport>> {
    let reports = run_suite(seeds)?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({:.3e} at {})", r.component, r.max_rel_error, r.worst))
        .collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for: {}\n{}",
            failed.join(", "),
            crate::gradcheck::format_reports(&reports)
        )))
    }
}

/// Times naive against optimized kernels after checking their equivalence.
pub fn cmd_bench(cfg: &RunConfig, reps: usize) -> Result<Vec<BenchRow>> {
    let rows = run_bench(&default_cases(), reps, cfg.seed)?;
    cfg.write_into(&cfg.out)?;
    write(&cfg.out.join("bench.csv"), crate::bench::rows_csv(&rows))?;
    Ok(rows)
}
