use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inputs::{stack, Example};
use super::sgd::Sgd;
use super::TrainConfig;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{argmax, forward, joint_loss, Model, ModelConfig};
use crate::protocols::ConfusionMatrix;

const EVAL_BATCH: usize = 64;

/// A model with its optimizer state and dropout stream.
pub struct Trainer {
    pub model: Model<f32>,
    sgd: Sgd,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh model initialized from `seed`.
    pub fn new(model_config: &ModelConfig, config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config.clone(), seed)?;
        let sgd = Sgd::new(&model.params, config.learning_rate, config.momentum);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(2);
        Ok(Trainer {
            model,
            sgd,
            dropout_rng,
        })
    }

    /// One SGD step on a batch; returns the batch loss before the update.
    pub fn step(&mut self, u: &Tensor<f32>, v: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let (loss, grads) = {
            let mut tape = Tape::new();
            let bound = self.model.params.bind(&mut tape);
            let (u, v) = (tape.param(u), tape.param(v));
            let out = forward(&mut tape, &bound, &self.model.config, u, v, true, &mut self.dropout_rng)?;
            let loss = joint_loss(&mut tape, &self.model.config, &out, labels)?;
            tape.backward(loss)?;
            let value = f64::from(tape.value(loss)[0]);
            let grads: Vec<Option<Vec<f32>>> = bound.vars().iter().map(|&p| tape.take_grad(p)).collect();
            (value, grads)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        self.sgd.step(&mut self.model.params, &grads)?;
        Ok(loss)
    }

    /// Joint loss in evaluation mode (dropout off), without updating.
    pub fn loss(&self, u: &Tensor<f32>, v: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let (u, v) = (tape.param(u), tape.param(v));
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&mut tape, &bound, &self.model.config, u, v, false, &mut unused)?;
        let loss = joint_loss(&mut tape, &self.model.config, &out, labels)?;
        Ok(f64::from(tape.value(loss)[0]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean batch loss over the last epoch.
    pub final_train_loss: f64,
    pub epochs_run: usize,
}

/// Trains a fresh model on `train` with per-epoch shuffling from `seed`.
pub fn train_fold(
    model_config: &ModelConfig,
    train: &[Example],
    config: &TrainConfig,
    seed: u64,
) -> Result<(Model<f32>, TrainStats)> {
    if train.is_empty() {
        return Err(Error::Protocol("training set is empty".into()));
    }
    let k = model_config.num_classes;
    if let Some(bad) = train.iter().find(|e| e.label >= k) {
        return Err(Error::Data(format!(
            "clip {} has class {} but the model has {k}",
            bad.clip_id, bad.label
        )));
    }
    for class in 0..k {
        if !train.iter().any(|e| e.label == class) {
            log::warn!("class {class} is absent from the training set; its detector only sees negatives");
        }
    }
    let mut trainer = Trainer::new(model_config, config, seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_epoch_loss = f64::NAN;
    let started = Instant::now();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (u, v, labels) = stack(&batch)?;
            total += trainer.step(&u, &v, &labels)?;
            batches += 1;
        }
        last_epoch_loss = total / batches as f64;
        log::debug!("epoch {}/{}: loss {last_epoch_loss:.5}", epoch + 1, config.epochs);
    }
    log::debug!("trained on {} clips in {:.1?}", train.len(), started.elapsed());
    Ok((
        trainer.model,
        TrainStats {
            final_train_loss: last_epoch_loss,
            epochs_run: config.epochs,
        },
    ))
}

/// Shared and fused features of evaluated clips, row-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Features {
    pub z: Vec<f32>,
    pub fused: Vec<f32>,
}

/// Predicted class of every example, plus features when asked for.
pub fn predict_examples(model: &Model<f32>, examples: &[Example], features: bool) -> Result<(Vec<usize>, Features)> {
    if !model.params.is_finite() {
        return Err(Error::NonFinite("model parameters"));
    }
    let k = model.config.num_classes;
    let mut preds = Vec::with_capacity(examples.len());
    let mut feats = Features::default();
    for chunk in examples.chunks(EVAL_BATCH) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let (u, v, _) = stack(&batch)?;
        let out = model.evaluate(&u, &v)?;
        preds.extend(out.logits.data().chunks_exact(k).map(argmax));
        if features {
            feats.z.extend_from_slice(out.z.data());
            feats.fused.extend_from_slice(out.fused.data());
        }
    }
    Ok((preds, feats))
}

/// Evaluation-mode confusion matrix over `test`.
pub fn evaluate_fold(model: &Model<f32>, test: &[Example]) -> Result<ConfusionMatrix> {
    let (preds, _) = predict_examples(model, test, false)?;
    let truth: Vec<usize> = test.iter().map(|e| e.label).collect();
    ConfusionMatrix::from_labels(model.config.num_classes, &truth, &preds)
}
