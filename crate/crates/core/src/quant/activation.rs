use serde::{Deserialize, Serialize};

use super::batch::scale_and_zero;
use super::{
    affine_derive, affine_quantize, bq_calibrate, bq_estimate, bq_op, bq_quantize, ema_update,
    BatchQuantState, Bitwidth, EmaState, Estimator, QuantMode, SCALE_FLOOR,
};
use crate::error::{QfaError, Result};
use crate::tensor::{scalar_param, Tape, Tensor, Var};

/// How activations are quantized across a network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationScheme {
    BatchQuant {
        estimator: Estimator,
        residuals: bool,
    },
    /// Uniform affine with EMA-tracked extremes.
    EmaAffine { momentum: f64 },
    /// Learnable scale and offset, initialized from `mean ∓ 3·std` of the first batch.
    LearnedScale,
}

impl Default for ActivationScheme {
    fn default() -> Self {
        Self::BatchQuant {
            estimator: Estimator::ChannelMeanMinmax,
            residuals: true,
        }
    }
}

/// Learnable-scale activation quantizer (`x̂ = (round(clamp(x/s + o)) - o)·s`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedScaleState {
    #[serde(with = "scalar_param")]
    pub scale: Tensor,
    #[serde(with = "scalar_param")]
    pub offset: Tensor,
    pub bitwidth: Bitwidth,
    pub initialized: bool,
}

/// Learnable scalars of an activation quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActParam {
    /// γ for BatchQuant, the scale for the learned-scale quantizer.
    Scale,
    /// β for BatchQuant, the offset for the learned-scale quantizer.
    Offset,
}

/// One activation quantizer of any scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationQuantizer {
    Batch(BatchQuantState),
    Ema {
        ema: EmaState,
        bitwidth: Bitwidth,
        mode: QuantMode,
    },
    Learned(LearnedScaleState),
}

impl ActivationQuantizer {
    pub fn new(scheme: ActivationScheme, bitwidth: Bitwidth) -> Result<Self> {
        Ok(match scheme {
            ActivationScheme::BatchQuant {
                estimator,
                residuals,
            } => {
                let s = BatchQuantState::new(estimator, bitwidth);
                Self::Batch(if residuals { s } else { s.without_residuals() })
            }
            ActivationScheme::EmaAffine { momentum } => Self::Ema {
                ema: EmaState::new(momentum)?,
                bitwidth,
                mode: QuantMode::Train,
            },
            ActivationScheme::LearnedScale => Self::Learned(LearnedScaleState {
                scale: Tensor::scalar(1.0).with_grad(),
                offset: Tensor::scalar(0.0).with_grad(),
                bitwidth,
                initialized: false,
            }),
        })
    }

    pub fn bitwidth(&self) -> Bitwidth {
        match self {
            Self::Batch(s) => s.bitwidth,
            Self::Ema { bitwidth, .. } => *bitwidth,
            Self::Learned(s) => s.bitwidth,
        }
    }

    pub fn set_mode(&mut self, mode: QuantMode) {
        match self {
            Self::Batch(s) => s.set_mode(mode),
            Self::Ema { mode: m, .. } => *m = mode,
            Self::Learned(_) => {}
        }
    }

    /// True once the quantizer can run in evaluation mode.
    pub fn is_calibrated(&self) -> bool {
        match self {
            Self::Batch(s) => s.calib_count > 0,
            Self::Ema { ema, .. } => ema.initialized,
            Self::Learned(s) => s.initialized,
        }
    }

    /// Quantizes `x`; returns the output and the learnable scalars recorded on the tape.
    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<(ActParam, Var)>)> {
        if self.bitwidth().is_full() {
            return Ok((x, Vec::new()));
        }
        match self {
            Self::Batch(state) => {
                if state.mode == QuantMode::Calibrate {
                    bq_calibrate(state, tape.value(x))?;
                }
                let v = bq_quantize(tape, x, state)?;
                let params = if state.learn_residuals {
                    vec![(ActParam::Scale, v.gamma), (ActParam::Offset, v.beta)]
                } else {
                    Vec::new()
                };
                Ok((v.out, params))
            }
            Self::Ema {
                ema,
                bitwidth,
                mode,
            } => {
                if *mode != QuantMode::Eval {
                    let (lo, hi) = bq_estimate(tape.value(x), Estimator::Minmax)?;
                    *ema = ema_update(*ema, lo, hi)?;
                } else if !ema.initialized {
                    return Err(QfaError::State("EMA quantizer never observed data".into()));
                }
                let params = affine_derive(ema.running_min, ema.running_max, *bitwidth)?;
                Ok((affine_quantize(tape, x, &params, *bitwidth)?, Vec::new()))
            }
            Self::Learned(state) => {
                let (n, p) = state.bitwidth.unsigned_range();
                if !state.initialized {
                    let (lo, hi) = bq_estimate(tape.value(x), Estimator::MeanStd3)?;
                    let (scale, zero) = scale_and_zero(lo, hi, state.bitwidth);
                    state.scale = Tensor::scalar(scale).with_grad();
                    state.offset = Tensor::scalar(zero).with_grad();
                    state.initialized = true;
                }
                let numel = tape.value(x).numel() as f64;
                let s = tape.param(state.scale.clone());
                let o = tape.param(state.offset.clone());
                let s_scaled = tape.grad_scale(s, 1.0 / (numel * (p - n)).sqrt());
                let out = bq_op(tape, x, 1.0, 0.0, s_scaled, o, state.bitwidth)?;
                Ok((out, vec![(ActParam::Scale, s), (ActParam::Offset, o)]))
            }
        }
    }

    pub fn param_mut(&mut self, which: ActParam) -> Option<&mut Tensor> {
        match (self, which) {
            (Self::Batch(s), ActParam::Scale) => Some(&mut s.gamma),
            (Self::Batch(s), ActParam::Offset) => Some(&mut s.beta),
            (Self::Learned(s), ActParam::Scale) => Some(&mut s.scale),
            (Self::Learned(s), ActParam::Offset) => Some(&mut s.offset),
            (Self::Ema { .. }, _) => None,
        }
    }

    /// Learnable scalars in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Batch(s) if s.learn_residuals => vec![&mut s.gamma, &mut s.beta],
            Self::Learned(s) => vec![&mut s.scale, &mut s.offset],
            _ => Vec::new(),
        }
    }

    /// Keeps multiplicative scales positive after an update.
    pub fn enforce_floor(&mut self) {
        match self {
            Self::Batch(s) => s.enforce_floor(),
            Self::Learned(s) => {
                let v = &mut s.scale.data_mut()[0];
                if !(*v >= SCALE_FLOOR) {
                    *v = SCALE_FLOOR;
                }
            }
            Self::Ema { .. } => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn ema_lags_behind_a_range_jump() {
        let mut q =
            ActivationQuantizer::new(ActivationScheme::EmaAffine { momentum: 0.9 }, Bitwidth::B4)
                .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch(&[0.0, 1.0]));
        q.forward(&mut tape, x).unwrap();
        let x = tape.constant(batch(&[0.0, 10.0]));
        let (y, _) = q.forward(&mut tape, x).unwrap();
        // Running max is 1.9, so 10 saturates near it.
        let top = tape.value(y).data()[1];
        assert!(top < 2.0, "{top}");
    }

    #[test]
    fn learned_scale_initializes_once() {
        let mut q = ActivationQuantizer::new(ActivationScheme::LearnedScale, Bitwidth::B3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch(&[0.0, 1.0, 2.0, 3.0]));
        let (_, params) = q.forward(&mut tape, x).unwrap();
        assert_eq!(params.len(), 2);
        let ActivationQuantizer::Learned(s) = &q else {
            unreachable!()
        };
        let first = s.scale.item();
        let x = tape.constant(batch(&[0.0, 100.0]));
        q.forward(&mut tape, x).unwrap();
        let ActivationQuantizer::Learned(s) = &q else {
            unreachable!()
        };
        assert_eq!(s.scale.item(), first);
    }

    #[test]
    fn full_precision_passthrough() {
        for scheme in [
            ActivationScheme::default(),
            ActivationScheme::EmaAffine { momentum: 0.9 },
            ActivationScheme::LearnedScale,
        ] {
            let mut q = ActivationQuantizer::new(scheme, Bitwidth::FULL).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(batch(&[0.3, -1.7]));
            let (y, p) = q.forward(&mut tape, x).unwrap();
            assert_eq!(y, x);
            assert!(p.is_empty());
        }
    }

    #[test]
    fn batch_calibrates_in_forward() {
        let mut q = ActivationQuantizer::new(ActivationScheme::default(), Bitwidth::B2).unwrap();
        q.set_mode(QuantMode::Calibrate);
        let mut tape = Tape::new();
        let x = tape.constant(batch(&[0.0, 2.0]));
        q.forward(&mut tape, x).unwrap();
        assert!(q.is_calibrated());
        q.set_mode(QuantMode::Eval);
        assert!(q.forward(&mut tape, x).is_ok());
    }
}
