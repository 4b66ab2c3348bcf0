use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Reduction;
use crate::error::{Error, Result};
use crate::flow::NET_INPUT_SIZE;

/// Network variant: the full model plus the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// Backbone and classifier only.
    Basic,
    /// Softmax attention branches with detectors, fused by element-wise sum.
    Fr,
    /// Branches use `relu(dense(z))` instead of attention.
    FrFc,
    /// Branch features are concatenated instead of summed.
    FrConcat,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Basic, Variant::FrFc, Variant::FrConcat, Variant::Fr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "BASIC",
            Variant::Fr => "FR",
            Variant::FrFc => "FR_FC",
            Variant::FrConcat => "FR_CONCAT",
        }
    }

    pub fn has_branches(self) -> bool {
        self != Variant::Basic
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Variant::Fr | Variant::FrConcat)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL.into_iter().find(|v| v.name() == key).ok_or_else(|| {
            Error::Usage(format!(
                "unknown variant '{s}' (expected basic, fr, fr_fc or fr_concat)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of classes K.
    #[serde(alias = "k")]
    pub num_classes: usize,
    pub variant: Variant,
    pub shared_dim: usize,
    pub detector_hidden: usize,
    pub classifier_hidden: usize,
    pub dropout_p: f64,
    /// Weight of the proposal loss in the joint loss.
    pub lambda: f64,
    pub branch_filters_l1: usize,
    pub branch_filters_l2: usize,
    /// Batch reduction of both loss terms.
    pub loss_reduction: Reduction,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 3,
            variant: Variant::Fr,
            shared_dim: 1024,
            detector_hidden: 196,
            classifier_hidden: 32,
            dropout_p: 0.5,
            lambda: 0.85,
            branch_filters_l1: 6,
            branch_filters_l2: 16,
            loss_reduction: Reduction::Mean,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        ModelConfig {
            variant,
            num_classes,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("model: {msg}")));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a non-negative number, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        let dims = [
            self.shared_dim,
            self.detector_hidden,
            self.classifier_hidden,
            self.branch_filters_l1,
            self.branch_filters_l2,
        ];
        if dims.contains(&0) {
            return bad("all layer sizes must be positive".into());
        }
        Ok(())
    }

    /// Channels leaving the second Inception layer of one stream.
    pub fn stream_channels(&self) -> usize {
        4 * self.branch_filters_l2
    }

    /// Flattened feature length of one stream.
    pub fn stream_features(&self) -> usize {
        let side = NET_INPUT_SIZE / 4;
        side * side * self.stream_channels()
    }

    /// Input width of the classifier.
    pub fn fused_dim(&self) -> usize {
        match self.variant {
            Variant::FrConcat => self.num_classes * self.shared_dim,
            _ => self.shared_dim,
        }
    }
}
