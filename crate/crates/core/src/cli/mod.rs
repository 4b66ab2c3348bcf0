//! The `frnet` command line.
//!
//! Results go to files and standard output, diagnostics to standard error.
//! Exit codes: 0 on success, 1 for usage errors, 2 for everything else.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

pub use config::ConfigArgs;

use crate::dataset::{generate_synthetic, labelled, load_manifest, Sample, SynthSpec};
use crate::error::{Error, Result};
use crate::io_util;
use crate::model::{canonical_json, count_parameters, read_checkpoint, Model};
use crate::protocols::{cdmer_pair, compute_metrics, plan_cdmer, plan_loso, FoldPlan, Protocol};
use crate::trainer::{cached_clip_flow, evaluate_fold, reaggregate, run_protocol, select_apex, FlowInputs};

#[derive(Debug, Parser)]
#[command(
    name = "frnet",
    version,
    about = "Micro-expression recognition from onset-to-apex optical flow"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (PNG frames, manifest.jsonl, truth.jsonl).
    GenSynth(GenSynthArgs),
    /// Compute and cache the TV-L1 flow of every clip in a manifest.
    Flow {
        #[arg(long)]
        manifest: PathBuf,
        /// Cache directory; one `<clip_id>.flow` file per clip.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the apex frame used for every clip, one JSON object per line.
    Apex {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train and evaluate a protocol, or a single fold of it.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the labelled clips of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        flow_cache: Option<PathBuf>,
        /// Also write the confusion matrix here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the number of learnable parameters of a model config.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Recompute metrics from the fold confusions of a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub clips_per_subject: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub frame_size: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub peak_motion: Option<f64>,
}

impl GenSynthArgs {
    fn spec(&self) -> SynthSpec {
        let d = SynthSpec::default();
        SynthSpec {
            n_subjects: self.subjects.unwrap_or(d.n_subjects),
            clips_per_subject: self.clips_per_subject.unwrap_or(d.clips_per_subject),
            n_classes: self.classes.unwrap_or(d.n_classes),
            frame_size: self.frame_size.unwrap_or(d.frame_size),
            frames_per_clip: self.frames.unwrap_or(d.frames_per_clip),
            noise_sigma: self.noise_sigma.unwrap_or(d.noise_sigma),
            peak_motion: self.peak_motion.unwrap_or(d.peak_motion),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Clip manifest; repeat to combine databases.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Run only the fold with this key.
    #[arg(long)]
    pub fold: Option<String>,
    /// Cross-database experiment number (1..=12), for `--protocol cdmer`.
    #[arg(long)]
    pub experiment: Option<usize>,
    /// Read and write cached flows here.
    #[arg(long)]
    pub flow_cache: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn emit(line: impl std::fmt::Display) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth(args) => {
            let samples = generate_synthetic(&args.spec(), &args.out)?;
            log::info!("wrote {} clips under {}", samples.len(), args.out.display());
            emit(args.out.join("manifest.jsonl").display())
        }
        Command::Flow { manifest, out, config } => {
            let cfg = config.resolve()?;
            let samples = load_manifest(&manifest)?;
            for (i, s) in samples.iter().enumerate() {
                cached_clip_flow(s, &cfg.flow, &out)?;
                log::info!("flow {}/{}: {}", i + 1, samples.len(), s.clip_id);
                emit(out.join(format!("{}.flow", s.clip_id)).display())?;
            }
            Ok(())
        }
        Command::Apex { manifest } => {
            for s in load_manifest(&manifest)? {
                let apex = select_apex(&s)?;
                emit(json!({"clip_id": s.clip_id, "apex": apex, "annotated": s.apex_index.is_some()}))?;
            }
            Ok(())
        }
        Command::Train(args) => train(args),
        Command::Eval {
            checkpoint,
            manifest,
            flow_cache,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let (model_config, params) = read_checkpoint(&checkpoint)?;
            let scheme = cfg.train.scheme;
            if scheme.num_classes() != model_config.num_classes {
                return Err(Error::Config(format!(
                    "checkpoint has {} classes but scheme {scheme} has {}",
                    model_config.num_classes,
                    scheme.num_classes()
                )));
            }
            let model = Model::from_parts(model_config, params)?;
            let data = labelled(&load_manifest(&manifest)?, scheme)?;
            if data.is_empty() {
                return Err(Error::Data(format!(
                    "no clip of {} has a {scheme} label",
                    manifest.display()
                )));
            }
            let samples: Vec<Sample> = data.iter().map(|(s, _)| s.clone()).collect();
            let labels: BTreeMap<String, usize> = data.iter().map(|(s, k)| (s.clip_id.clone(), *k)).collect();
            let inputs = FlowInputs::compute(&samples, &cfg.flow, flow_cache.as_deref())?;
            let ids: Vec<String> = samples.iter().map(|s| s.clip_id.clone()).collect();
            let confusion = evaluate_fold(&model, &inputs.examples(&ids, &labels)?)?;
            if let Some(path) = out {
                confusion.write_csv(&path)?;
            }
            let report = compute_metrics(std::slice::from_ref(&confusion))?;
            emit(serde_json::to_string(&report)?)
        }
        Command::Params { config } => {
            // Only the model section matters here, so K need not match a scheme.
            let cfg = config.load()?;
            cfg.model.validate()?;
            emit(count_parameters(&cfg.model))
        }
        Command::Report { run_dir } => emit(serde_json::to_string(&reaggregate(&run_dir)?)?),
    }
}

fn plan_for(protocol: Protocol, samples: &[Sample], experiment: Option<usize>) -> Result<FoldPlan> {
    if protocol != Protocol::Cdmer {
        if experiment.is_some() {
            return Err(Error::Usage("--experiment only applies to --protocol cdmer".into()));
        }
        return plan_loso(samples);
    }
    let exp = experiment.ok_or_else(|| Error::Usage("--protocol cdmer needs --experiment 1..=12".into()))?;
    let (src, tgt) = cdmer_pair(exp)?;
    let pick = |db| samples.iter().filter(|s| s.database == db).cloned().collect::<Vec<_>>();
    plan_cdmer(&pick(src), &pick(tgt), exp)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    // The resolved config lands in the run directory before any work starts.
    io_util::write_atomic(&args.out.join("config.json"), canonical_json(&cfg)?.as_bytes())?;
    let mut samples = Vec::new();
    for path in &args.manifest {
        samples.extend(load_manifest(path)?);
    }
    let data = labelled(&samples, cfg.train.scheme)?;
    let samples: Vec<Sample> = data.iter().map(|(s, _)| s.clone()).collect();
    let labels: BTreeMap<String, usize> = data.iter().map(|(s, k)| (s.clip_id.clone(), *k)).collect();
    let mut plan = plan_for(cfg.train.protocol, &samples, args.experiment)?;
    if let Some(key) = &args.fold {
        let keys: Vec<String> = plan.folds.iter().map(|f| f.key.clone()).collect();
        plan.folds.retain(|f| &f.key == key);
        if plan.folds.is_empty() {
            return Err(Error::Usage(format!("no fold '{key}'; folds are {}", keys.join(", "))));
        }
    }
    let used: BTreeSet<&String> = plan.folds.iter().flat_map(|f| f.train.iter().chain(&f.test)).collect();
    let needed: Vec<Sample> = samples.iter().filter(|s| used.contains(&s.clip_id)).cloned().collect();
    log::info!("computing flows for {} clips", needed.len());
    let inputs = FlowInputs::compute(&needed, &cfg.flow, args.flow_cache.as_deref())?;
    let report = run_protocol(&cfg, &plan, &labels, &inputs, Some(&args.out))?;
    emit(json!({
        "acc": report.acc,
        "uf1": report.uf1,
        "uar": report.uar,
        "report": args.out.join("report.json"),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(main_with(["frnet", "frobnicate"]), 1);
        assert_eq!(main_with(["frnet", "params", "--variant", "huge"]), 1);
        assert_eq!(main_with(["frnet", "params", "--k", "1"]), 2);
        assert_eq!(main_with(["frnet", "--help"]), 0);
    }

    #[test]
    fn gen_synth_flags_fill_the_spec() {
        let cli = Cli::try_parse_from(["frnet", "gen-synth", "--out", "x", "--seed", "7", "--subjects", "3"]).unwrap();
        let Command::GenSynth(args) = cli.command else { panic!() };
        let spec = args.spec();
        assert_eq!((spec.seed, spec.n_subjects), (7, 3));
        assert_eq!(spec.clips_per_subject, SynthSpec::default().clips_per_subject);
    }

    #[test]
    fn cdmer_needs_an_experiment() {
        assert!(matches!(plan_for(Protocol::Cdmer, &[], None), Err(Error::Usage(_))));
        assert!(matches!(plan_for(Protocol::Cde, &[], Some(1)), Err(Error::Usage(_))));
    }

    #[test]
    fn missing_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let m = missing.to_str().unwrap();
        assert_eq!(main_with(["frnet", "apex", "--manifest", m]), 2);
        assert_eq!(main_with(["frnet", "report", "--run-dir", m]), 2);
    }
}
