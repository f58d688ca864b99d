use rand::seq::SliceRandom;

use super::{gradients, LabeledDataset, ParameterSet};
use crate::compression::SparseMask;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub local_epochs: usize,
    /// A final short batch is kept when the dataset size is not a multiple.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            local_epochs: 2,
            batch_size: 16,
            learning_rate: 0.1,
            rng_seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "local_epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Minibatch SGD for `cfg.local_epochs` epochs.
///
/// The shuffle order is a function of `cfg.rng_seed` and `round`. With a
/// mask, pruned weights get zero gradient and are reset to exactly zero after
/// every step; biases always train.
pub fn local_training(
    params: &ParameterSet,
    data: &LabeledDataset,
    cfg: &TrainingConfig,
    mask: Option<&SparseMask>,
    round: u64,
) -> Result<ParameterSet> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    if let Some(m) = mask {
        if !m.matches(params) {
            return Err(Error::Shape("mask does not match parameter shapes".into()));
        }
    }

    let mut current = params.clone();
    if let Some(m) = mask {
        m.apply(&mut current);
    }
    let mut rng = seed::rng(cfg.rng_seed, &[round]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.subset(chunk);
            let mut grad = gradients(&current, &batch)?;
            if let Some(m) = mask {
                m.apply(&mut grad);
            }
            current.axpy(-cfg.learning_rate, &grad);
            if let Some(m) = mask {
                m.apply(&mut current);
            }
        }
    }
    Ok(current)
}
