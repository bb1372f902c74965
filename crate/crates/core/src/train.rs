//! Shared training-loop settings.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::AdamConfig;
use crate::util::{seeded, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Probability of zeroing each ground-truth frame fed back to the decoder.
    pub prev_dropout: f64,
    /// NFMG only: epochs over which the KL weight ramps linearly up to its
    /// configured value. 0 disables the ramp.
    pub kl_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            seed: 0,
            adam: AdamConfig::default(),
            prev_dropout: 0.0,
            kl_warmup: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.prev_dropout) {
            return Err(Error::InvalidArgument(format!(
                "prev_dropout {} outside [0, 1)",
                self.prev_dropout
            )));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be > 0",
                self.adam.lr
            )));
        }
        Ok(())
    }

    /// Multiplier on the KL weight during `epoch`.
    pub fn kl_ramp(&self, epoch: usize) -> f64 {
        if self.kl_warmup == 0 {
            1.0
        } else {
            ((epoch + 1) as f64 / self.kl_warmup as f64).min(1.0)
        }
    }

    pub(crate) fn draw_keep<R: Rng>(&self, rng: &mut R, t: usize) -> Option<Vec<bool>> {
        (self.prev_dropout > 0.0).then(|| {
            (0..t.saturating_sub(1))
                .map(|_| !rng.random_bool(self.prev_dropout))
                .collect()
        })
    }
}

/// Per-epoch RNG so a resumed run draws the same noise as an uninterrupted one.
pub(crate) fn epoch_rng(seed: u64, epoch: usize) -> SeededRng {
    seeded(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
