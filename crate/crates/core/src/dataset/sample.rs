use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;

/// Source database of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Database {
    #[serde(rename = "SMIC-HS")]
    SmicHs,
    #[serde(rename = "SMIC-VIS")]
    SmicVis,
    #[serde(rename = "SMIC-NIR")]
    SmicNir,
    #[serde(rename = "CASME2")]
    Casme2,
    #[serde(rename = "SAMM")]
    Samm,
    #[serde(rename = "SYNTH")]
    Synth,
}

impl Database {
    pub const ALL: [Database; 6] = [
        Database::SmicHs,
        Database::SmicVis,
        Database::SmicNir,
        Database::Casme2,
        Database::Samm,
        Database::Synth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Database::SmicHs => "SMIC-HS",
            Database::SmicVis => "SMIC-VIS",
            Database::SmicNir => "SMIC-NIR",
            Database::Casme2 => "CASME2",
            Database::Samm => "SAMM",
            Database::Synth => "SYNTH",
        }
    }

    pub fn is_smic(self) -> bool {
        matches!(self, Database::SmicHs | Database::SmicVis | Database::SmicNir)
    }
}

impl fmt::Display for Database {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Database {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        match key.as_str() {
            "SMICHS" | "H" => Ok(Database::SmicHs),
            "SMICVIS" | "V" => Ok(Database::SmicVis),
            "SMICNIR" | "N" => Ok(Database::SmicNir),
            "CASME2" | "CASMEII" | "C" => Ok(Database::Casme2),
            "SAMM" => Ok(Database::Samm),
            "SYNTH" => Ok(Database::Synth),
            _ => Err(Error::Usage(format!("unknown database '{s}'"))),
        }
    }
}

/// One micro-expression clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub clip_id: String,
    pub subject_id: String,
    pub database: Database,
    pub frame_paths: Vec<PathBuf>,
    pub onset_index: usize,
    pub apex_index: Option<usize>,
    pub raw_label: String,
}

impl Sample {
    /// Subject key unique across databases and safe as a directory name.
    pub fn subject_key(&self) -> String {
        let safe: String = self
            .subject_id
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        format!("{}_{safe}", self.database.name().replace('-', ""))
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &'static str, msg: String| Error::Validation {
            clip_id: self.clip_id.clone(),
            field,
            msg,
        };
        // Both ids end up in file names (flow cache, fold directories).
        for (field, id) in [("clip_id", &self.clip_id), ("subject_id", &self.subject_id)] {
            if id.trim().is_empty() {
                return Err(invalid(field, "must be non-empty".into()));
            }
            if id == "." || id == ".." || id.chars().any(|c| c == '/' || c == '\\' || c.is_control()) {
                return Err(invalid(field, format!("{id:?} cannot be used as a file name")));
            }
        }
        if self.raw_label.trim().is_empty() {
            return Err(invalid("label", "must be non-empty".into()));
        }
        let n = self.frame_paths.len();
        if n < 2 {
            return Err(invalid("frames", format!("need at least 2 frames, got {n}")));
        }
        if self.onset_index >= n {
            return Err(invalid(
                "onset",
                format!("{} is not below the frame count {n}", self.onset_index),
            ));
        }
        if let Some(apex) = self.apex_index {
            if apex <= self.onset_index || apex >= n {
                return Err(invalid(
                    "apex",
                    format!(
                        "{apex} must lie after onset {} and before frame count {n}",
                        self.onset_index
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    clip_id: String,
    subject_id: String,
    database: Database,
    frames: Vec<String>,
    onset: usize,
    apex: Option<usize>,
    label: String,
}

/// Parses manifest text. Relative frame paths are resolved against `base`.
/// Does not touch the file system.
pub fn parse_manifest(text: &str, base: &Path, source: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let sample = Sample {
            frame_paths: rec.frames.iter().map(|f| base.join(f)).collect(),
            clip_id: rec.clip_id,
            subject_id: rec.subject_id,
            database: rec.database,
            onset_index: rec.onset,
            apex_index: rec.apex,
            raw_label: rec.label,
        };
        sample.validate()?;
        if !seen.insert(sample.clip_id.clone()) {
            return Err(Error::Validation {
                clip_id: sample.clip_id,
                field: "clip_id",
                msg: "duplicate clip id".into(),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Reads and validates a JSON-lines manifest, including that every frame file
/// exists.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let bytes = io_util::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let samples = parse_manifest(&text, base, path)?;
    for s in &samples {
        if let Some(missing) = s.frame_paths.iter().find(|p| !p.is_file()) {
            return Err(Error::Validation {
                clip_id: s.clip_id.clone(),
                field: "frames",
                msg: format!("missing frame file {}", missing.display()),
            });
        }
    }
    Ok(samples)
}

/// Serializes samples as manifest lines with frame paths relative to `base`.
pub fn manifest_text(samples: &[Sample], base: &Path) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        let frames = s
            .frame_paths
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(base).unwrap_or(p);
                rel.to_str()
                    .map(|r| r.replace('\\', "/"))
                    .ok_or_else(|| Error::Data(format!("non UTF-8 frame path {}", p.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = Record {
            clip_id: s.clip_id.clone(),
            subject_id: s.subject_id.clone(),
            database: s.database,
            frames,
            onset: s.onset_index,
            apex: s.apex_index,
            label: s.raw_label.clone(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    io_util::write_atomic(path, manifest_text(samples, base)?.as_bytes())
}
