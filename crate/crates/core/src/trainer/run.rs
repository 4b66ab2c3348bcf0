use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::fold::{predict_examples, train_fold, Features};
use super::inputs::FlowInputs;
use super::ExperimentConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io_util;
use crate::model::{canonical_json, encode_checkpoint, encode_tensor_file, FEATURES_MAGIC};
use crate::protocols::{compute_metrics, ConfusionMatrix, FoldPlan, MetricsReport, PlanKind, Protocol};

/// Environment variable capping the worker-pool width.
pub const THREADS_ENV: &str = "FR_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_key: String,
    pub confusion: ConfusionMatrix,
    pub final_train_loss: f64,
    pub epochs_run: usize,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub folds: Vec<FoldResult>,
}

/// Aggregate over rounds. `*_std` is the sample standard deviation (zero
/// for a single round).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub plan: PlanKind,
    pub variant: crate::model::Variant,
    pub acc: f64,
    pub uf1: f64,
    pub uar: f64,
    pub acc_std: f64,
    pub uf1_std: f64,
    pub uar_std: f64,
    pub rounds: Vec<RoundReport>,
}

impl ProtocolReport {
    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Worker-pool width: the configured value (default all cores), capped by
/// `FR_THREADS` and by the number of jobs.
pub fn worker_count(configured: Option<usize>, jobs: usize) -> usize {
    let mut n = configured.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from));
    if let Some(cap) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
    {
        n = n.min(cap.max(1));
    }
    n.clamp(1, jobs.max(1))
}

/// Runs `job(i)` for `i in 0..n` on `workers` threads; results keep index order.
fn run_pool<R: Send>(n: usize, workers: usize, job: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 {
        return (0..n).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = job(i);
                let failed = r.is_err();
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
                if failed {
                    next.store(n, Ordering::Relaxed);
                }
            });
        }
    });
    let slots = slots.into_inner().expect("workers have finished");
    let mut out = Vec::with_capacity(n);
    for r in slots.into_iter().flatten() {
        out.push(r?);
    }
    if out.len() != n {
        return Err(Error::Protocol("a fold was abandoned after an earlier failure".into()));
    }
    Ok(out)
}

/// Where one fold's files go: `folds/<key>/`, or `folds/<key>/round<r>/`
/// when there is more than one round.
pub fn fold_dir(run_dir: &Path, key: &str, round: usize, rounds: usize) -> PathBuf {
    let dir = run_dir.join("folds").join(key);
    if rounds > 1 {
        dir.join(format!("round{round}"))
    } else {
        dir
    }
}

#[derive(Serialize)]
struct FeaturesHeader<'a> {
    clip_ids: Vec<&'a str>,
    labels: Vec<usize>,
    folds: Vec<&'a str>,
}

/// Trains and evaluates every fold of `plan`, for every round.
///
/// With a run directory, `config.json` is written before anything is
/// computed; fold confusions and checkpoints follow as folds finish, and
/// `confusion.csv` and `report.json` come last.
pub fn run_protocol(
    config: &ExperimentConfig,
    plan: &FoldPlan,
    labels: &BTreeMap<String, usize>,
    inputs: &FlowInputs,
    run_dir: Option<&Path>,
) -> Result<ProtocolReport> {
    config.validate()?;
    if plan.folds.is_empty() {
        return Err(Error::Protocol("fold plan has no folds".into()));
    }
    if let Some(f) = plan.folds.iter().find(|f| f.test.is_empty() || f.train.is_empty()) {
        return Err(Error::Protocol(format!(
            "fold {} has an empty train or test set",
            f.key
        )));
    }
    if let Some(dir) = run_dir {
        io_util::write_atomic(&dir.join("config.json"), canonical_json(config)?.as_bytes())?;
    }
    let tc = &config.train;
    let workers = worker_count(tc.threads, plan.folds.len());
    log::info!(
        "{} folds x {} rounds, {} variant, {workers} worker(s)",
        plan.folds.len(),
        tc.rounds,
        config.model.variant
    );
    let mut rounds = Vec::with_capacity(tc.rounds);
    let mut exported: Vec<Features> = Vec::new();
    for round in 0..tc.rounds {
        let seed = tc.seed.wrapping_add(round as u64);
        let want_features = tc.export_features && round == 0;
        let results = run_pool(plan.folds.len(), workers, |i| {
            let fold = &plan.folds[i];
            let started = Instant::now();
            let train = inputs.examples(&fold.train, labels)?;
            let test = inputs.examples(&fold.test, labels)?;
            let (model, stats) = train_fold(&config.model, &train, tc, seed)?;
            let (preds, feats) = predict_examples(&model, &test, want_features)?;
            let truth: Vec<usize> = test.iter().map(|e| e.label).collect();
            let confusion = ConfusionMatrix::from_labels(config.model.num_classes, &truth, &preds)?;
            if let Some(dir) = run_dir {
                let fd = fold_dir(dir, &fold.key, round, tc.rounds);
                confusion.write_csv(&fd.join("confusion.csv"))?;
                io_util::write_atomic(
                    &fd.join("checkpoint"),
                    &encode_checkpoint(&model.config, &model.params)?,
                )?;
            }
            log::info!(
                "round {round} fold {}: {}/{} correct, loss {:.4}, {:.1?}",
                fold.key,
                confusion.correct(),
                confusion.total(),
                stats.final_train_loss,
                started.elapsed()
            );
            let result = FoldResult {
                fold_key: fold.key.clone(),
                confusion,
                final_train_loss: stats.final_train_loss,
                epochs_run: stats.epochs_run,
                n_train: train.len(),
                n_test: test.len(),
            };
            Ok((result, feats))
        })?;
        let (folds, feats): (Vec<FoldResult>, Vec<Features>) = results.into_iter().unzip();
        if want_features {
            exported = feats;
        }
        let confusions: Vec<ConfusionMatrix> = folds.iter().map(|f| f.confusion.clone()).collect();
        let metrics = compute_metrics(&confusions)?;
        log::info!(
            "round {round}: acc {:.4} uf1 {:.4} uar {:.4}",
            metrics.acc,
            metrics.uf1,
            metrics.uar
        );
        rounds.push(RoundReport { seed, metrics, folds });
    }
    let report = summarize(config, plan, rounds);
    if let Some(dir) = run_dir {
        if tc.export_features {
            write_features(dir, config, plan, labels, &exported)?;
        }
        let mut pooled = ConfusionMatrix::new(config.model.num_classes);
        for r in &report.rounds {
            pooled.merge(&r.metrics.total)?;
        }
        pooled.write_csv(&dir.join("confusion.csv"))?;
        io_util::write_atomic(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    }
    Ok(report)
}

fn write_features(
    dir: &Path,
    config: &ExperimentConfig,
    plan: &FoldPlan,
    labels: &BTreeMap<String, usize>,
    feats: &[Features],
) -> Result<()> {
    let mut header = FeaturesHeader {
        clip_ids: Vec::new(),
        labels: Vec::new(),
        folds: Vec::new(),
    };
    let (mut z, mut fused) = (Vec::new(), Vec::new());
    for (fold, f) in plan.folds.iter().zip(feats) {
        for id in &fold.test {
            header.clip_ids.push(id);
            header.labels.push(labels[id]);
            header.folds.push(&fold.key);
        }
        z.extend_from_slice(&f.z);
        fused.extend_from_slice(&f.fused);
    }
    let n = header.clip_ids.len();
    let z = Tensor::new([n, config.model.shared_dim], z)?;
    let fused = Tensor::new([n, config.model.fused_dim()], fused)?;
    let bytes = encode_tensor_file(FEATURES_MAGIC, &header, [("z", &z), ("fused", &fused)])?;
    io_util::write_atomic(&dir.join("features.bin"), &bytes)
}

/// Mean and spread of the round metrics.
pub(crate) fn summarize(config: &ExperimentConfig, plan: &FoldPlan, rounds: Vec<RoundReport>) -> ProtocolReport {
    let stat = |f: fn(&MetricsReport) -> f64| mean_std(&rounds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    let (acc, acc_std) = stat(|m| m.acc);
    let (uf1, uf1_std) = stat(|m| m.uf1);
    let (uar, uar_std) = stat(|m| m.uar);
    ProtocolReport {
        protocol: config.train.protocol,
        plan: plan.kind,
        variant: config.model.variant,
        acc,
        uf1,
        uar,
        acc_std,
        uf1_std,
        uar_std,
        rounds,
    }
}

/// Re-aggregates the fold confusions stored under `run_dir/folds`, pooled
/// over rounds.
pub fn reaggregate(run_dir: &Path) -> Result<MetricsReport> {
    let folds_dir = run_dir.join("folds");
    let mut paths = Vec::new();
    let entries = std::fs::read_dir(&folds_dir).map_err(|e| Error::io(&folds_dir, e))?;
    for entry in entries {
        let dir = entry.map_err(|e| Error::io(&folds_dir, e))?.path();
        let direct = dir.join("confusion.csv");
        if direct.is_file() {
            paths.push(direct);
            continue;
        }
        let inner = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for round in inner {
            let p = round.map_err(|e| Error::io(&dir, e))?.path().join("confusion.csv");
            if p.is_file() {
                paths.push(p);
            }
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no fold confusions under {}", folds_dir.display())));
    }
    let confusions = paths
        .iter()
        .map(|p| ConfusionMatrix::read_csv(p))
        .collect::<Result<Vec<_>>>()?;
    compute_metrics(&confusions)
}
