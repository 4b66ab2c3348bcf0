//! The recognition network: two-stream Inception backbone, per-expression
//! attention and detector branches, fusion, classifier and joint loss.

mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{
    canonical_json, decode_checkpoint, decode_tensor_file, encode_checkpoint, encode_tensor_file, read_checkpoint,
    write_checkpoint, TensorFile, CHECKPOINT_MAGIC, FEATURES_MAGIC,
};
pub use config::{ModelConfig, Variant};
pub use network::{
    classify, forward, forward_shared, fuse, joint_loss, proposal_loss, propose, total_loss, ForwardOutput,
};
pub use params::{build_model, count_parameters, param_specs, Bound, ModelParams, ParamSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, Tensor};
use crate::error::Result;

/// Features and logits of an evaluation-mode pass.
#[derive(Debug, Clone)]
pub struct Evaluation<T = f32> {
    pub z: Tensor<T>,
    pub fused: Tensor<T>,
    pub logits: Tensor<T>,
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = build_model(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Model { config, params })
    }

    /// Evaluation-mode forward pass on `[N, 1, 28, 28]` inputs.
    pub fn evaluate(&self, u: &Tensor<T>, v: &Tensor<T>) -> Result<Evaluation<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (u, v) = (tape.param(u), tape.param(v));
        // Dropout is inactive in evaluation mode, so the generator is never drawn from.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&mut tape, &bound, &self.config, u, v, false, &mut unused)?;
        Ok(Evaluation {
            z: tape.tensor(out.z),
            fused: tape.tensor(out.fused),
            logits: tape.tensor(out.logits),
        })
    }

    /// Arg-max class of each sample; ties go to the lower class index.
    pub fn predict(&self, u: &Tensor<T>, v: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.evaluate(u, v)?.logits;
        let k = self.config.num_classes;
        Ok(logits.data().chunks_exact(k).map(argmax).collect())
    }
}

pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
