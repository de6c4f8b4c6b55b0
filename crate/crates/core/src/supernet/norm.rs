use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::quant::QuantMode;
use crate::tensor::{Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Running statistics of an [`ElasticNorm`], per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub counts: Vec<usize>,
    pub mode: QuantMode,
}

/// Batch normalization over a leading slice of channels.
///
/// Training uses batch statistics. Calibration also uses them and keeps a
/// running arithmetic mean of the per-batch mean and variance of every
/// channel it sees, which evaluation then uses.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: NormStats,
}

impl ElasticNorm {
    pub fn new(channels: usize, gamma: f64) -> Self {
        Self {
            gamma: Tensor::full(&[channels], gamma).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            stats: NormStats {
                mean: vec![0.0; channels],
                var: vec![0.0; channels],
                counts: vec![0; channels],
                mode: QuantMode::Train,
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Entering calibration discards previous statistics.
    pub fn set_mode(&mut self, mode: QuantMode) {
        if mode == QuantMode::Calibrate {
            let c = self.channels();
            self.stats.mean = vec![0.0; c];
            self.stats.var = vec![0.0; c];
            self.stats.counts = vec![0; c];
        }
        self.stats.mode = mode;
    }

    /// Normalizes `x` (channels last) with the first `x.shape().last()`
    /// channels; returns the output and the `(γ, β)` leaves.
    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<(Var, Var, Var)> {
        let c = *tape.value(x).shape().last().unwrap_or(&0);
        if c == 0 || c > self.channels() {
            return Err(QfaError::Dimension(format!(
                "norm has {} channels, input has {c}",
                self.channels()
            )));
        }
        let gamma = tape.param(self.gamma.clone());
        let beta = tape.param(self.beta.clone());
        let (g, b) = if c == self.channels() {
            (gamma, beta)
        } else {
            (tape.crop(gamma, &[0], &[c])?, tape.crop(beta, &[0], &[c])?)
        };
        let out = match self.stats.mode {
            QuantMode::Train => tape.batch_norm(x, g, b, None, NORM_EPS)?.0,
            QuantMode::Calibrate => {
                let (out, mean, var) = tape.batch_norm(x, g, b, None, NORM_EPS)?;
                for ch in 0..c {
                    self.stats.counts[ch] += 1;
                    let k = self.stats.counts[ch] as f64;
                    self.stats.mean[ch] += (mean[ch] - self.stats.mean[ch]) / k;
                    self.stats.var[ch] += (var[ch] - self.stats.var[ch]) / k;
                }
                out
            }
            QuantMode::Eval => {
                if self.stats.counts[..c].contains(&0) {
                    return Err(QfaError::State(
                        "normalization statistics missing; calibrate the subnet first".into(),
                    ));
                }
                let stats = (&self.stats.mean[..c], &self.stats.var[..c]);
                tape.batch_norm(x, g, b, Some(stats), NORM_EPS)?.0
            }
        };
        Ok((out, gamma, beta))
    }
}
