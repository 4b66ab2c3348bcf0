use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::flow::{
    flow_to_inputs, read_flow, spot_apex, tvl1_flow, write_flow, FlowField, GrayFrame, TvL1Params, NET_INPUT_SIZE,
};

const PLANE: usize = NET_INPUT_SIZE * NET_INPUT_SIZE;

/// Annotated apex if present, otherwise the spotted one (absolute index).
pub fn select_apex(sample: &Sample) -> Result<usize> {
    if let Some(apex) = sample.apex_index {
        return Ok(apex);
    }
    let frames = sample.frame_paths[sample.onset_index..]
        .iter()
        .map(|p| GrayFrame::load(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(sample.onset_index + spot_apex(&frames)?)
}

/// TV-L1 flow from the onset frame to the apex frame of `sample`.
pub fn clip_flow(sample: &Sample, params: &TvL1Params) -> Result<FlowField> {
    let apex = select_apex(sample)?;
    let onset = GrayFrame::load(&sample.frame_paths[sample.onset_index])?;
    let apex = GrayFrame::load(&sample.frame_paths[apex])?;
    tvl1_flow(&onset, &apex, params)
}

/// Like [`clip_flow`], but reads `<dir>/<clip_id>.flow` when present and
/// writes it otherwise. The cache is keyed by clip id only.
pub fn cached_clip_flow(sample: &Sample, params: &TvL1Params, dir: &Path) -> Result<FlowField> {
    let path = dir.join(format!("{}.flow", sample.clip_id));
    if path.is_file() {
        return read_flow(&path);
    }
    let flow = clip_flow(sample, params)?;
    write_flow(&path, &flow)?;
    Ok(flow)
}

/// A network input pair with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub clip_id: String,
    pub label: usize,
    pub u: Tensor<f32>,
    pub v: Tensor<f32>,
}

/// Standardized 28×28 inputs of every clip, by clip id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowInputs {
    map: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl FlowInputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Computes (or loads from `cache_dir`) the flow of every sample.
    pub fn compute(samples: &[Sample], params: &TvL1Params, cache_dir: Option<&Path>) -> Result<Self> {
        params.validate()?;
        let mut out = Self::new();
        for (i, s) in samples.iter().enumerate() {
            let flow = match cache_dir {
                Some(dir) => cached_clip_flow(s, params, dir)?,
                None => clip_flow(s, params)?,
            };
            out.insert(&s.clip_id, &flow)?;
            log::debug!("flow {}/{}: {}", i + 1, samples.len(), s.clip_id);
        }
        Ok(out)
    }

    pub fn insert(&mut self, clip_id: &str, flow: &FlowField) -> Result<()> {
        self.map.insert(clip_id.to_string(), flow_to_inputs(flow)?);
        Ok(())
    }

    pub fn get(&self, clip_id: &str) -> Option<(&Tensor<f32>, &Tensor<f32>)> {
        self.map.get(clip_id).map(|(u, v)| (u, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Examples for `ids`, labelled from `labels`.
    pub fn examples(&self, ids: &[String], labels: &BTreeMap<String, usize>) -> Result<Vec<Example>> {
        ids.iter()
            .map(|id| {
                let (u, v) = self
                    .get(id)
                    .ok_or_else(|| Error::Protocol(format!("no flow computed for clip {id}")))?;
                let label = *labels
                    .get(id)
                    .ok_or_else(|| Error::Protocol(format!("no label for clip {id}")))?;
                Ok(Example {
                    clip_id: id.clone(),
                    label,
                    u: u.clone(),
                    v: v.clone(),
                })
            })
            .collect()
    }
}

/// Stacks examples into `[B, 1, 28, 28]` inputs and their labels.
pub fn stack(batch: &[&Example]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<usize>)> {
    let n = batch.len();
    let mut u = Vec::with_capacity(n * PLANE);
    let mut v = Vec::with_capacity(n * PLANE);
    for e in batch {
        u.extend_from_slice(e.u.data());
        v.extend_from_slice(e.v.data());
    }
    let shape = [n, 1, NET_INPUT_SIZE, NET_INPUT_SIZE];
    Ok((
        Tensor::new(shape, u)?,
        Tensor::new(shape, v)?,
        batch.iter().map(|e| e.label).collect(),
    ))
}
