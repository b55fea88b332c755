//! Mini-batch Adam on the nodal mean squared error, with early stopping on
//! the validation split.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{GUNetModel, NormalizationMode};
use crate::error::{Error, Result};
use crate::mesh::NormalizedAdjacency;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    /// Seeds the per-epoch shuffle of the training split.
    pub rng_seed: u64,
    pub normalization_mode: NormalizationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            patience_epochs: 50,
            max_epochs: 1000,
            rng_seed: 0,
            normalization_mode: NormalizationMode::Raw,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.patience_epochs == 0 {
            return Err(Error::Contract("batch size and patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// One LD input and its ground-truth change, both nodal on the same graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainHistory {
    pub initial_val_mse: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub seconds: f64,
}

fn check_sample(adj: &NormalizedAdjacency, s: &TrainingSample) -> Result<()> {
    let n = adj.node_count();
    if s.input.len() != n || s.target.len() != n {
        return Err(Error::Contract(format!(
            "sample with {} inputs and {} targets on a graph of {n} nodes",
            s.input.len(),
            s.target.len()
        )));
    }
    Ok(())
}

/// Nodal MSE of the network output against `sample.target`.
pub fn sample_mse(model: &GUNetModel, adj: &NormalizedAdjacency, sample: &TrainingSample) -> Result<f64> {
    check_sample(adj, sample)?;
    let (y, _) = model.run(adj, &sample.input, false)?;
    Ok(mse(&y, &sample.target))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Nodal MSE and its gradient with respect to every parameter.
pub fn loss_and_gradient(
    model: &GUNetModel,
    adj: &NormalizedAdjacency,
    sample: &TrainingSample,
) -> Result<(f64, Vec<f64>)> {
    check_sample(adj, sample)?;
    let (y, tape) = model.run(adj, &sample.input, true)?;
    let tape = tape.expect("recording was requested");
    let n = y.len() as f64;
    let d_out: Vec<f64> = y.iter().zip(&sample.target).map(|(a, b)| 2.0 * (a - b) / n).collect();
    let mut grad = vec![0.0; model.parameter_count()];
    model.backward(adj, &tape, &d_out, &mut grad);
    Ok((mse(&y, &sample.target), grad))
}

/// Nodal MSE with the activation pattern and pooling selection of `at`.
#[cfg(test)]
pub(crate) fn branch_mse(
    model: &GUNetModel,
    at: &GUNetModel,
    adj: &NormalizedAdjacency,
    sample: &TrainingSample,
) -> Result<f64> {
    let (_, tape) = at.run(adj, &sample.input, true)?;
    let (y, _) = model.run_on_branch(adj, &sample.input, false, tape.as_ref())?;
    Ok(mse(&y, &sample.target))
}

/// Gradient of `<w, f(x)>` with respect to the input `x`.
pub fn input_vjp(model: &GUNetModel, adj: &NormalizedAdjacency, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let (_, tape) = model.run(adj, x, true)?;
    let mut scratch = vec![0.0; model.parameter_count()];
    Ok(model.backward(adj, &tape.expect("recording was requested"), w, &mut scratch))
}

fn mean_mse(model: &GUNetModel, adj: &NormalizedAdjacency, set: &[TrainingSample]) -> Result<f64> {
    let losses: Vec<f64> = set
        .par_iter()
        .map(|s| sample_mse(model, adj, s))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains a copy of `model` and returns the weights with the lowest
/// validation MSE seen, including the initial ones.
pub fn train(
    model: &GUNetModel,
    adj: &NormalizedAdjacency,
    train_set: &[TrainingSample],
    val_set: &[TrainingSample],
    config: &TrainConfig,
) -> Result<(GUNetModel, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("training needs non-empty train and validation splits".into()));
    }
    for s in train_set.iter().chain(val_set) {
        check_sample(adj, s)?;
    }
    let start = Instant::now();
    let mut current = model.clone();
    current.normalization = config.normalization_mode;
    let initial_val_mse = mean_mse(&current, adj, val_set)?;
    if !initial_val_mse.is_finite() {
        return Err(Error::Training {
            epoch: 0,
            message: "initial validation loss is not finite".into(),
        });
    }
    let mut best = current.clone();
    let mut history = TrainHistory {
        initial_val_mse,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mse: initial_val_mse,
        stopped_early: false,
        seconds: 0.0,
    };

    let np = current.parameter_count();
    let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| loss_and_gradient(&current, adj, &train_set[i]))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; np];
            // fixed summation order keeps training independent of the thread count
            for (loss, g) in &results {
                loss_sum += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            step += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(step);
            let c2 = 1.0 - ADAM_BETA2.powi(step);
            for (k, w) in current.parameters_mut().iter_mut().enumerate() {
                let g = grad[k] * scale;
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
                *w -= config.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPSILON);
            }
        }
        let train_mse = loss_sum / train_set.len() as f64;
        let val_mse = mean_mse(&current, adj, val_set)?;
        if !(train_mse.is_finite() && val_mse.is_finite()) {
            return Err(Error::Training {
                epoch,
                message: format!("loss became non-finite (train {train_mse}, validation {val_mse})"),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < history.best_val_mse {
            history.best_val_mse = val_mse;
            history.best_epoch = epoch;
            best = current.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience_epochs {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.seconds = start.elapsed().as_secs_f64();
    Ok((best, history))
}
