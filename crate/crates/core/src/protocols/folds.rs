use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Database, LabelScheme, Sample};
use crate::error::{Error, Result};

/// Evaluation protocol. Selects the fold plan, default label scheme and
/// default optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Composite-database leave-one-subject-out.
    Cde,
    /// Single-database leave-one-subject-out.
    Single,
    /// Cross-database: train on a source database, test on 5 target folds.
    Cdmer,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Cde => "cde",
            Protocol::Single => "single",
            Protocol::Cdmer => "cdmer",
        }
    }

    pub fn default_scheme(self) -> LabelScheme {
        match self {
            Protocol::Cde => LabelScheme::Cde3,
            Protocol::Single => LabelScheme::Single4,
            Protocol::Cdmer => LabelScheme::Cdmer3,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cde" => Ok(Protocol::Cde),
            "single" => Ok(Protocol::Single),
            "cdmer" => Ok(Protocol::Cdmer),
            _ => Err(Error::Usage(format!(
                "unknown protocol '{s}' (expected cde, single or cdmer)"
            ))),
        }
    }
}

/// Number of target folds in a cross-database experiment.
pub const CDMER_FOLDS: usize = 5;

/// The twelve source → target pairs, indexed by experiment number − 1.
pub const CDMER_EXPERIMENTS: [(Database, Database); 12] = [
    (Database::SmicHs, Database::SmicVis),
    (Database::SmicVis, Database::SmicHs),
    (Database::SmicHs, Database::SmicNir),
    (Database::SmicNir, Database::SmicHs),
    (Database::SmicVis, Database::SmicNir),
    (Database::SmicNir, Database::SmicVis),
    (Database::Casme2, Database::SmicHs),
    (Database::SmicHs, Database::Casme2),
    (Database::Casme2, Database::SmicVis),
    (Database::SmicVis, Database::Casme2),
    (Database::Casme2, Database::SmicNir),
    (Database::SmicNir, Database::Casme2),
];

/// Source and target databases of experiment `1..=12`.
pub fn cdmer_pair(experiment: usize) -> Result<(Database, Database)> {
    experiment
        .checked_sub(1)
        .and_then(|i| CDMER_EXPERIMENTS.get(i))
        .copied()
        .ok_or_else(|| Error::Protocol(format!("cross-database experiment must be 1..=12, got {experiment}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    /// Subject key for leave-one-subject-out, `fold<i>` for cross-database.
    pub key: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlanKind {
    Loso,
    Cdmer {
        experiment: usize,
        source: Database,
        target: Database,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub kind: PlanKind,
    pub folds: Vec<Fold>,
}

fn check_unique(samples: &[Sample]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.clip_id.as_str()) {
            return Err(Error::Protocol(format!("clip id {} appears twice", s.clip_id)));
        }
    }
    Ok(())
}

/// One fold per subject, subjects in lexicographic order of their key.
pub fn plan_loso(samples: &[Sample]) -> Result<FoldPlan> {
    check_unique(samples)?;
    let mut by_subject: BTreeMap<String, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_subject.entry(s.subject_key()).or_default().push(s);
    }
    if by_subject.len() < 2 {
        return Err(Error::Protocol(format!(
            "leave-one-subject-out needs at least 2 subjects, got {}",
            by_subject.len()
        )));
    }
    let folds = by_subject
        .into_keys()
        .map(|key| {
            let (test, train): (Vec<&Sample>, Vec<&Sample>) = samples.iter().partition(|s| s.subject_key() == key);
            Fold {
                key,
                train: train.into_iter().map(|s| s.clip_id.clone()).collect(),
                test: test.into_iter().map(|s| s.clip_id.clone()).collect(),
            }
        })
        .collect();
    Ok(FoldPlan {
        kind: PlanKind::Loso,
        folds,
    })
}

/// Trains on every source sample and tests on five round-robin folds of the
/// target, taken in `clip_id` order.
pub fn plan_cdmer(source: &[Sample], target: &[Sample], experiment: usize) -> Result<FoldPlan> {
    let (src_db, tgt_db) = cdmer_pair(experiment)?;
    for (set, db, role) in [(source, src_db, "source"), (target, tgt_db, "target")] {
        if let Some(bad) = set.iter().find(|s| s.database != db) {
            return Err(Error::Protocol(format!(
                "experiment {experiment} needs {role} {db}, but clip {} is from {}",
                bad.clip_id, bad.database
            )));
        }
    }
    check_unique(source)?;
    check_unique(target)?;
    if source.is_empty() {
        return Err(Error::Protocol(format!("experiment {experiment}: no {src_db} samples")));
    }
    if target.len() < CDMER_FOLDS {
        return Err(Error::Protocol(format!(
            "experiment {experiment}: need at least {CDMER_FOLDS} {tgt_db} samples, got {}",
            target.len()
        )));
    }
    let mut ids: Vec<&str> = target.iter().map(|s| s.clip_id.as_str()).collect();
    ids.sort_unstable();
    let train: Vec<String> = source.iter().map(|s| s.clip_id.clone()).collect();
    let folds = (0..CDMER_FOLDS)
        .map(|f| Fold {
            key: format!("fold{}", f + 1),
            train: train.clone(),
            test: ids.iter().skip(f).step_by(CDMER_FOLDS).map(|s| s.to_string()).collect(),
        })
        .collect();
    Ok(FoldPlan {
        kind: PlanKind::Cdmer {
            experiment,
            source: src_db,
            target: tgt_db,
        },
        folds,
    })
}
