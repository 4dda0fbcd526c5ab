use rand::seq::SliceRandom;

use super::{GradientSet, ModelParams};
use crate::data::Dataset;
use crate::error::{shape, Error, Result};
use crate::{rng, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 64,
            lr: 0.05,
        }
    }
}

/// Plain mini-batch SGD on a client shard.
///
/// Returns the client's upload `W_before − W_after`, so the server applies it
/// by subtraction. Shuffling is seeded; the same inputs always produce the
/// same bits.
pub fn local_train<S: Scalar>(
    model: &ModelParams<S>,
    shard: &Dataset<S>,
    params: &TrainParams,
    seed: u64,
) -> Result<GradientSet<S>> {
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    let batch_size = params.batch_size.max(1);
    let lr = S::of(params.lr);
    let mut r = rng::rng(seed);
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..params.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(batch_size) {
            let (x, y) = shard.batch(chunk);
            let trace = current.forward(&x)?;
            let grads = current.backward(&trace, &y, false)?;
            for (p, g) in current.params_mut().into_iter().zip(&grads.tensors) {
                p.axpy(-lr, g);
            }
        }
    }
    let before = GradientSet::from_params(model);
    let after = GradientSet::from_params(&current);
    let mut update = before;
    update.axpy(-S::one(), &after);
    Ok(update)
}

/// `W' = W − scale · update`
pub fn apply_update<S: Scalar>(model: &ModelParams<S>, update: &GradientSet<S>, scale: S) -> Result<ModelParams<S>> {
    if !update.congruent(model) {
        return shape("update is not congruent with the model");
    }
    let mut out = model.clone();
    for (p, u) in out.params_mut().into_iter().zip(&update.tensors) {
        p.axpy(-scale, u);
    }
    Ok(out)
}
