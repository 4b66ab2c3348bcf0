//! Clip manifests, label re-grouping and the synthetic dataset generator.

mod labels;
mod sample;
mod synth;

pub use labels::{labelled, regroup_label, LabelScheme, Regrouped};
pub use sample::{load_manifest, manifest_text, parse_manifest, write_manifest, Database, Sample};
pub use synth::{
    generate_synthetic, motion_template, read_truth, synthesize, SynthClip, SynthSpec, SynthTruth, SYNTH_LABELS,
};
