//! Experiment configuration as seen from the command line: an optional JSON
//! file, then one `--kebab-case` flag per schema key on top of it.

use std::path::PathBuf;

use clap::Args;
use serde_json::{Map, Value};

use crate::autodiff::Reduction;
use crate::dataset::LabelScheme;
use crate::error::{Error, Result};
use crate::io_util;
use crate::model::Variant;
use crate::protocols::Protocol;
use crate::trainer::ExperimentConfig;

fn parse_reduction(s: &str) -> Result<Reduction> {
    match s.trim().to_ascii_lowercase().as_str() {
        "mean" => Ok(Reduction::Mean),
        "sum" => Ok(Reduction::Sum),
        _ => Err(Error::Usage(format!(
            "unknown loss reduction '{s}' (expected mean or sum)"
        ))),
    }
}

/// `--config` plus overrides for every field of the model, training and
/// flow sections. Flow solver flags carry a `flow-` prefix.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON experiment config with optional `model`, `train` and `flow` sections.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Number of classes K.
    #[arg(long = "k", alias = "num-classes", help_heading = "Model")]
    pub num_classes: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub variant: Option<Variant>,
    #[arg(long, help_heading = "Model")]
    pub shared_dim: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub detector_hidden: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub classifier_hidden: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub dropout_p: Option<f64>,
    /// Weight of the proposal loss.
    #[arg(long, help_heading = "Model")]
    pub lambda: Option<f64>,
    #[arg(long, help_heading = "Model")]
    pub branch_filters_l1: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub branch_filters_l2: Option<usize>,
    /// mean or sum.
    #[arg(long, value_parser = parse_reduction, help_heading = "Model")]
    pub loss_reduction: Option<Reduction>,

    /// cde, single or cdmer.
    #[arg(long, help_heading = "Training")]
    pub protocol: Option<Protocol>,
    /// CDE3, CDMER3, SINGLE4 or CASME2_5.
    #[arg(long, help_heading = "Training")]
    pub scheme: Option<LabelScheme>,
    #[arg(long, help_heading = "Training")]
    pub batch_size: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub learning_rate: Option<f64>,
    #[arg(long, help_heading = "Training")]
    pub momentum: Option<f64>,
    #[arg(long, help_heading = "Training")]
    pub epochs: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub seed: Option<u64>,
    #[arg(long, help_heading = "Training")]
    pub rounds: Option<usize>,
    /// Worker threads (FR_THREADS caps this).
    #[arg(long, help_heading = "Training")]
    pub threads: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub export_features: Option<bool>,

    #[arg(long, help_heading = "Flow")]
    pub flow_lambda: Option<f32>,
    #[arg(long, help_heading = "Flow")]
    pub flow_theta: Option<f32>,
    #[arg(long, help_heading = "Flow")]
    pub flow_tau: Option<f32>,
    #[arg(long, help_heading = "Flow")]
    pub flow_scales: Option<usize>,
    #[arg(long, help_heading = "Flow")]
    pub flow_zoom: Option<f32>,
    #[arg(long, help_heading = "Flow")]
    pub flow_warps: Option<usize>,
    #[arg(long, help_heading = "Flow")]
    pub flow_iterations: Option<usize>,
    #[arg(long, help_heading = "Flow")]
    pub flow_epsilon: Option<f32>,
    #[arg(long, help_heading = "Flow")]
    pub flow_median_filter: Option<bool>,
}

fn section<'a>(root: &'a mut Map<String, Value>, name: &str) -> Result<&'a mut Map<String, Value>> {
    root.entry(name)
        .or_insert_with(|| Value::Object(Map::new()))
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("`{name}` must be a JSON object")))
}

fn set<T: serde::Serialize>(map: &mut Map<String, Value>, key: &str, value: &Option<T>) -> Result<()> {
    if let Some(v) = value {
        map.insert(key.to_string(), serde_json::to_value(v)?);
    }
    Ok(())
}

impl ConfigArgs {
    /// Reads the file (if any), applies the flags and validates the result.
    ///
    /// When K is given nowhere it follows the label scheme, so switching to
    /// a four-class protocol needs only `--protocol`.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let cfg = self.load()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`ConfigArgs::resolve`] without the validation.
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut root = match &self.config {
            Some(path) => serde_json::from_slice::<Value>(&io_util::read(path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            None => Value::Object(Map::new()),
        };
        let root = root
            .as_object_mut()
            .ok_or_else(|| Error::Config("config file must hold a JSON object".into()))?;
        self.apply(root)?;
        let k_given = root
            .get("model")
            .and_then(Value::as_object)
            .is_some_and(|m| m.contains_key("num_classes") || m.contains_key("k"));
        let mut cfg: ExperimentConfig =
            serde_json::from_value(Value::Object(root.clone())).map_err(|e| Error::Config(e.to_string()))?;
        if !k_given {
            cfg.model.num_classes = cfg.train.scheme.num_classes();
        }
        Ok(cfg)
    }

    fn apply(&self, root: &mut Map<String, Value>) -> Result<()> {
        let m = section(root, "model")?;
        if self.num_classes.is_some() {
            m.remove("k");
        }
        set(m, "num_classes", &self.num_classes)?;
        set(m, "variant", &self.variant)?;
        set(m, "shared_dim", &self.shared_dim)?;
        set(m, "detector_hidden", &self.detector_hidden)?;
        set(m, "classifier_hidden", &self.classifier_hidden)?;
        set(m, "dropout_p", &self.dropout_p)?;
        set(m, "lambda", &self.lambda)?;
        set(m, "branch_filters_l1", &self.branch_filters_l1)?;
        set(m, "branch_filters_l2", &self.branch_filters_l2)?;
        set(m, "loss_reduction", &self.loss_reduction)?;

        let t = section(root, "train")?;
        set(t, "protocol", &self.protocol)?;
        set(t, "scheme", &self.scheme)?;
        set(t, "batch_size", &self.batch_size)?;
        set(t, "learning_rate", &self.learning_rate)?;
        set(t, "momentum", &self.momentum)?;
        set(t, "epochs", &self.epochs)?;
        set(t, "seed", &self.seed)?;
        set(t, "rounds", &self.rounds)?;
        set(t, "threads", &self.threads)?;
        set(t, "export_features", &self.export_features)?;

        let f = section(root, "flow")?;
        set(f, "lambda", &self.flow_lambda)?;
        set(f, "theta", &self.flow_theta)?;
        set(f, "tau", &self.flow_tau)?;
        set(f, "scales", &self.flow_scales)?;
        set(f, "zoom", &self.flow_zoom)?;
        set(f, "warps", &self.flow_warps)?;
        set(f, "iterations", &self.flow_iterations)?;
        set(f, "epsilon", &self.flow_epsilon)?;
        set(f, "median_filter", &self.flow_median_filter)?;
        Ok(())
    }
}
