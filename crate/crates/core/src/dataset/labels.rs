use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Database, Sample};
use crate::error::{Error, Result};

/// Label re-grouping rules of the evaluation protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelScheme {
    /// Negative / Positive / Surprise over SMIC-HS, CASME II and SAMM.
    #[serde(rename = "CDE3")]
    Cde3,
    /// Negative / Positive / Surprise over the SMIC parts and CASME II.
    #[serde(rename = "CDMER3")]
    Cdmer3,
    /// Negative / Positive / Surprise / Others over CASME II and SAMM.
    #[serde(rename = "SINGLE4")]
    Single4,
    /// The five original CASME II categories.
    #[serde(rename = "CASME2_5")]
    Casme2Five,
}

/// Result of re-grouping one raw label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regrouped {
    Class(usize),
    Excluded,
}

const NPS: &[&str] = &["Negative", "Positive", "Surprise"];
const NPSO: &[&str] = &["Negative", "Positive", "Surprise", "Others"];
const CASME2_FIVE: &[&str] = &["Repression", "Happiness", "Surprise", "Disgust", "Others"];

enum Target {
    To(&'static str),
    Drop,
}
use Target::{Drop, To};

fn normalize(label: &str) -> String {
    label.trim().to_ascii_lowercase()
}

impl LabelScheme {
    pub const ALL: [LabelScheme; 4] = [
        LabelScheme::Cde3,
        LabelScheme::Cdmer3,
        LabelScheme::Single4,
        LabelScheme::Casme2Five,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LabelScheme::Cde3 => "CDE3",
            LabelScheme::Cdmer3 => "CDMER3",
            LabelScheme::Single4 => "SINGLE4",
            LabelScheme::Casme2Five => "CASME2_5",
        }
    }

    pub fn classes(self) -> &'static [&'static str] {
        match self {
            LabelScheme::Cde3 | LabelScheme::Cdmer3 => NPS,
            LabelScheme::Single4 => NPSO,
            LabelScheme::Casme2Five => CASME2_FIVE,
        }
    }

    pub fn num_classes(self) -> usize {
        self.classes().len()
    }

    pub fn covers(self, db: Database) -> bool {
        match self {
            LabelScheme::Cde3 => matches!(
                db,
                Database::SmicHs | Database::Casme2 | Database::Samm | Database::Synth
            ),
            LabelScheme::Cdmer3 => db.is_smic() || matches!(db, Database::Casme2 | Database::Synth),
            LabelScheme::Single4 => matches!(db, Database::Casme2 | Database::Samm | Database::Synth),
            LabelScheme::Casme2Five => matches!(db, Database::Casme2 | Database::Synth),
        }
    }

    fn target(self, label: &str, db: Database) -> Option<Target> {
        if db == Database::Synth {
            return self.classes().iter().find(|c| normalize(c) == label).map(|c| To(c));
        }
        if db.is_smic() {
            return match label {
                "negative" => Some(To("Negative")),
                "positive" => Some(To("Positive")),
                "surprise" => Some(To("Surprise")),
                _ => None,
            };
        }
        let t = match (self, db, label) {
            (_, _, "happiness") if self != LabelScheme::Casme2Five => To("Positive"),
            (_, _, "surprise") => To("Surprise"),

            (LabelScheme::Cde3, Database::Casme2, "disgust" | "repression") => To("Negative"),
            (LabelScheme::Cde3, Database::Casme2, "sadness" | "fear" | "others" | "other") => Drop,
            (LabelScheme::Cde3, Database::Samm, "anger" | "angry" | "contempt" | "disgust" | "fear" | "sadness") => {
                To("Negative")
            }
            (LabelScheme::Cde3, Database::Samm, "others" | "other" | "repression") => Drop,

            (LabelScheme::Cdmer3, Database::Casme2, "disgust" | "sadness" | "fear") => To("Negative"),
            (LabelScheme::Cdmer3, Database::Casme2, "repression" | "others" | "other") => Drop,

            (LabelScheme::Single4, _, "disgust" | "anger" | "angry" | "contempt" | "fear" | "sadness") => {
                To("Negative")
            }
            (LabelScheme::Single4, _, "repression" | "others" | "other") => To("Others"),

            (LabelScheme::Casme2Five, Database::Casme2, "repression") => To("Repression"),
            (LabelScheme::Casme2Five, Database::Casme2, "happiness") => To("Happiness"),
            (LabelScheme::Casme2Five, Database::Casme2, "disgust") => To("Disgust"),
            (LabelScheme::Casme2Five, Database::Casme2, "others" | "other") => To("Others"),
            (LabelScheme::Casme2Five, Database::Casme2, "sadness" | "fear") => Drop,
            _ => return None,
        };
        Some(t)
    }

    /// Maps a raw database label to a class index of this scheme.
    pub fn regroup(self, raw_label: &str, db: Database) -> Result<Regrouped> {
        if !self.covers(db) {
            return Err(Error::Data(format!("label scheme {self} does not cover database {db}")));
        }
        match self.target(&normalize(raw_label), db) {
            Some(To(name)) => {
                let idx = self
                    .classes()
                    .iter()
                    .position(|c| *c == name)
                    .expect("targets are scheme classes");
                Ok(Regrouped::Class(idx))
            }
            Some(Drop) => Ok(Regrouped::Excluded),
            None => Err(Error::Data(format!(
                "label '{raw_label}' of {db} is unknown to scheme {self}"
            ))),
        }
    }
}

/// Free-function form of [`LabelScheme::regroup`].
pub fn regroup_label(raw_label: &str, db: Database, scheme: LabelScheme) -> Result<Regrouped> {
    scheme.regroup(raw_label, db)
}

/// Samples with their class index; excluded samples are dropped.
pub fn labelled(samples: &[Sample], scheme: LabelScheme) -> Result<Vec<(Sample, usize)>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let class = scheme
            .regroup(&s.raw_label, s.database)
            .map_err(|e| Error::Validation {
                clip_id: s.clip_id.clone(),
                field: "label",
                msg: e.to_string(),
            })?;
        if let Regrouped::Class(k) = class {
            out.push((s.clone(), k));
        }
    }
    Ok(out)
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LabelScheme::ALL
            .into_iter()
            .find(|sch| sch.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Usage(format!("unknown label scheme '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_of(label: &str, db: Database, scheme: LabelScheme) -> &'static str {
        match scheme.regroup(label, db).unwrap() {
            Regrouped::Class(k) => scheme.classes()[k],
            Regrouped::Excluded => "EXCLUDED",
        }
    }

    #[test]
    fn documented_examples() {
        assert_eq!(class_of("Disgust", Database::Casme2, LabelScheme::Cde3), "Negative");
        assert_eq!(class_of("Sadness", Database::Casme2, LabelScheme::Cdmer3), "Negative");
        assert_eq!(class_of("Repression", Database::Casme2, LabelScheme::Single4), "Others");
    }

    #[test]
    fn scheme_specific_negatives() {
        assert_eq!(class_of("Repression", Database::Casme2, LabelScheme::Cde3), "Negative");
        assert_eq!(class_of("Fear", Database::Casme2, LabelScheme::Cde3), "EXCLUDED");
        assert_eq!(
            class_of("Repression", Database::Casme2, LabelScheme::Cdmer3),
            "EXCLUDED"
        );
        assert_eq!(class_of("Contempt", Database::Samm, LabelScheme::Cde3), "Negative");
        assert_eq!(class_of("Other", Database::Samm, LabelScheme::Single4), "Others");
        assert_eq!(
            class_of("happiness", Database::Casme2, LabelScheme::Casme2Five),
            "Happiness"
        );
        assert_eq!(class_of("Fear", Database::Casme2, LabelScheme::Casme2Five), "EXCLUDED");
        assert_eq!(class_of("positive", Database::SmicNir, LabelScheme::Cdmer3), "Positive");
        assert_eq!(class_of("Surprise", Database::Synth, LabelScheme::Cde3), "Surprise");
    }

    #[test]
    fn unknown_labels_and_uncovered_databases_fail() {
        assert!(matches!(
            LabelScheme::Cde3.regroup("Joy", Database::Casme2),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            LabelScheme::Cde3.regroup("negative", Database::SmicVis),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            LabelScheme::Cdmer3.regroup("Anger", Database::Samm),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            LabelScheme::Cde3.regroup("Others", Database::Synth),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn mapped_classes_belong_to_scheme() {
        let raw = [
            "negative",
            "positive",
            "surprise",
            "happiness",
            "disgust",
            "repression",
            "sadness",
            "fear",
            "anger",
            "contempt",
            "others",
        ];
        for scheme in LabelScheme::ALL {
            for db in Database::ALL {
                for label in raw {
                    if let Ok(Regrouped::Class(k)) = scheme.regroup(label, db) {
                        assert!(k < scheme.num_classes());
                    }
                }
            }
        }
    }

    // Raw-label histogram whose regrouped totals must match the composite
    // distribution 250 / 109 / 83.
    #[test]
    fn composite_histogram_regroups_to_table_totals() {
        let histogram: &[(Database, &str, usize)] = &[
            (Database::SmicHs, "negative", 70),
            (Database::SmicHs, "positive", 51),
            (Database::SmicHs, "surprise", 43),
            (Database::Casme2, "Disgust", 61),
            (Database::Casme2, "Repression", 27),
            (Database::Casme2, "Happiness", 32),
            (Database::Casme2, "Surprise", 25),
            (Database::Casme2, "Sadness", 7),
            (Database::Casme2, "Fear", 2),
            (Database::Casme2, "Others", 99),
            (Database::Samm, "Anger", 57),
            (Database::Samm, "Contempt", 12),
            (Database::Samm, "Disgust", 9),
            (Database::Samm, "Fear", 8),
            (Database::Samm, "Sadness", 6),
            (Database::Samm, "Happiness", 26),
            (Database::Samm, "Surprise", 15),
            (Database::Samm, "Other", 26),
        ];
        let mut per_db = std::collections::BTreeMap::new();
        let mut total = [0usize; 3];
        for &(db, label, n) in histogram {
            if let Regrouped::Class(k) = LabelScheme::Cde3.regroup(label, db).unwrap() {
                total[k] += n;
                per_db.entry(db).or_insert([0usize; 3])[k] += n;
            }
        }
        assert_eq!(per_db[&Database::SmicHs], [70, 51, 43]);
        assert_eq!(per_db[&Database::Casme2], [88, 32, 25]);
        assert_eq!(per_db[&Database::Samm], [92, 26, 15]);
        assert_eq!(total, [250, 109, 83]);
    }
}
