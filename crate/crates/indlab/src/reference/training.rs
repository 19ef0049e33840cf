//! Training loop for the standard transformer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::stream_seed;
use crate::train::DIVERGENCE_LOSS;

use super::model::{
    std_backward_into, std_forward, std_loss_and_probs, StdGradients, StdModel, StdModelConfig,
};
use super::task::{gen_token_batch, TokenTaskBatch};
use super::AdamW;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StdTrainConfig {
    pub model: StdModelConfig,
    pub n_pairs: usize,
    pub batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl StdTrainConfig {
    /// Desk-scale defaults: the embedding dimension is reduced from the
    /// full-scale run, everything else keeps the reference values.
    pub fn desk_scale(seed: u64) -> Self {
        StdTrainConfig {
            model: StdModelConfig {
                dim: 128,
                head_dim: 128,
                vocab: 32,
                block: 32,
                init_std: 0.02,
            },
            n_pairs: 8,
            batch: 512,
            steps: 300,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed,
            log_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch < 1 {
            return Err(Error::Invalid("batch must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if self.log_every < 1 {
            return Err(Error::Invalid("log_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StdTrainRecord {
    pub step: usize,
    pub loss: f64,
    /// Fraction of the batch whose argmax logit at the query position is the
    /// target label.
    pub accuracy: f64,
}

/// Fixed chunk width for deterministic parallel reduction.
const BATCH_CHUNK: usize = 64;

/// Mean loss, query-label accuracy, and mean gradients over a batch.
pub fn std_batch_grad(
    batch: &TokenTaskBatch,
    model: &StdModel,
) -> Result<(f64, f64, StdGradients)> {
    if batch.is_empty() {
        return Err(Error::Invalid("std_batch_grad: empty batch".into()));
    }
    let indices: Vec<usize> = (0..batch.len()).collect();
    let partials: Vec<Result<(f64, usize, StdGradients)>> = indices
        .par_chunks(BATCH_CHUNK)
        .map(|chunk| {
            let mut loss_sum = 0.0;
            let mut hits = 0usize;
            let mut grad_sum = StdGradients::zeros_like(model);
            for &i in chunk {
                let cache = std_forward(&batch.sequences[i], batch.offsets[i], model)?;
                let (loss, probs) = std_loss_and_probs(&cache, batch.targets[i]);
                loss_sum += loss;
                let argmax = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(idx, _)| idx)
                    .unwrap();
                if argmax == batch.targets[i] {
                    hits += 1;
                }
                std_backward_into(&cache, model, batch.targets[i], &mut grad_sum);
            }
            Ok((loss_sum, hits, grad_sum))
        })
        .collect();

    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let mut grad_sum = StdGradients::zeros_like(model);
    for partial in partials {
        let (l, h, g) = partial?;
        loss_sum += l;
        hits += h;
        grad_sum.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    grad_sum.scale(inv);
    Ok((loss_sum * inv, hits as f64 * inv, grad_sum))
}

/// AdamW training on fresh batches; returns the trained model and the
/// logged (loss, accuracy) curve. The final record always reflects the
/// final weights on a fresh batch.
pub fn std_train(cfg: &StdTrainConfig) -> Result<(StdModel, Vec<StdTrainRecord>)> {
    cfg.validate()?;
    let mut model = StdModel::init(&cfg.model, cfg.seed)?;
    let sizes: Vec<usize> = model
        .tensors()
        .iter()
        .map(|m| m.rows() * m.cols())
        .collect();
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, &sizes);
    let mut curve = Vec::new();
    for step in 0..=cfg.steps {
        let batch = gen_token_batch(
            cfg.model.vocab,
            cfg.model.block,
            cfg.n_pairs,
            cfg.batch,
            stream_seed(cfg.seed, step as u64),
        )?;
        let (loss, accuracy, grads) = std_batch_grad(&batch, &model)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Numerical(format!(
                "std_train diverged at step {step}: loss {loss}"
            )));
        }
        if step % cfg.log_every == 0 || step == cfg.steps {
            curve.push(StdTrainRecord {
                step,
                loss,
                accuracy,
            });
        }
        if step < cfg.steps {
            let grad_tensors = grads.tensors();
            let mut params = model.tensors_mut();
            opt.step(&mut params, &grad_tensors);
            if !model.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite model after step {step}"
                )));
            }
        }
    }
    Ok((model, curve))
}
