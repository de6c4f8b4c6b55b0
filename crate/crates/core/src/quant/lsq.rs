use serde::{Deserialize, Serialize};

use super::{Bitwidth, SCALE_FLOOR};
use crate::error::{QfaError, Result};
use crate::tensor::{round_half_even, scalar_param, Tape, Tensor, Var};

/// Learnable step size of a symmetric weight quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsqState {
    #[serde(with = "scalar_param")]
    pub scale: Tensor,
    pub bitwidth: Bitwidth,
}

impl LsqState {
    pub fn new(scale: f64, bitwidth: Bitwidth) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(QfaError::Parameter(format!(
                "LSQ scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            scale: Tensor::scalar(scale).with_grad(),
            bitwidth,
        })
    }

    /// Initializes the step size from the weights it will quantize.
    pub fn from_weights(weights: &[f64], bitwidth: Bitwidth) -> Result<Self> {
        Self::new(lsq_init_scale(weights, bitwidth), bitwidth)
    }

    pub fn scale_value(&self) -> f64 {
        self.scale.item()
    }

    /// Keeps the step size above the floor after an optimizer update.
    pub fn enforce_floor(&mut self) {
        let v = &mut self.scale.data_mut()[0];
        if !(*v >= SCALE_FLOOR) {
            *v = SCALE_FLOOR;
        }
    }

    /// Records the step size on `tape` and quantizes `x` with it.
    pub fn quantize(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let s = tape.param(self.scale.clone());
        let out = lsq_quantize(tape, x, s, self.bitwidth)?;
        Ok((out, s))
    }
}

/// `2·mean(|w|)/sqrt(p)`.
pub fn lsq_init_scale(weights: &[f64], bw: Bitwidth) -> f64 {
    if bw.is_full() || weights.is_empty() {
        return 1.0;
    }
    let (_, p) = bw.signed_range();
    let mean_abs = weights.iter().map(|w| w.abs()).sum::<f64>() / weights.len() as f64;
    (2.0 * mean_abs / p.sqrt()).max(SCALE_FLOOR)
}

/// Signed integer codes `round(clamp(x/Δ, n, p))`.
pub fn lsq_codes(x: &[f64], scale: f64, bw: Bitwidth) -> Vec<f64> {
    let (n, p) = bw.signed_range();
    x.iter()
        .map(|v| round_half_even((v / scale).clamp(n, p)))
        .collect()
}

/// Symmetric quantizer `x̂ = round(clamp(x/Δ, n, p))·Δ` with a learnable `Δ`.
///
/// Backward: `∂x̂/∂x` is 1 inside the clamp range and 0 outside;
/// `∂x̂/∂Δ` is `round(x/Δ) - x/Δ` inside and `n` or `p` outside, scaled by
/// `1/sqrt(N·p)`.
pub fn lsq_quantize(tape: &mut Tape, x: Var, scale: Var, bw: Bitwidth) -> Result<Var> {
    if bw.is_full() {
        return Ok(x);
    }
    let s = tape.value(scale);
    if s.numel() != 1 {
        return Err(QfaError::Dimension("LSQ scale must be a scalar".into()));
    }
    let delta = s.item();
    if !(delta > 0.0) {
        return Err(QfaError::Parameter(format!(
            "LSQ scale must be positive, got {delta}"
        )));
    }
    let (n, p) = bw.signed_range();
    let vx = tape.value(x);
    let data = lsq_codes(vx.data(), delta, bw)
        .into_iter()
        .map(|q| q * delta)
        .collect();
    let out = Tensor::new(vx.shape().to_vec(), data)?;
    let grad_factor = 1.0 / (vx.numel() as f64 * p).sqrt();
    Ok(tape.custom(
        out,
        &[x, scale],
        Box::new(move |ctx| {
            let xs = ctx.inputs[0].data();
            let delta = ctx.inputs[1].item();
            let mut gx = ctx.needs[0].then(|| vec![0.0; xs.len()]);
            let mut gs = 0.0;
            for (i, (&v, &g)) in xs.iter().zip(ctx.grad).enumerate() {
                let u = v / delta;
                if u < n {
                    gs += g * n;
                } else if u > p {
                    gs += g * p;
                } else {
                    if let Some(gx) = gx.as_mut() {
                        gx[i] = g;
                    }
                    gs += g * (round_half_even(u) - u);
                }
            }
            vec![gx, ctx.needs[1].then(|| vec![gs * grad_factor])]
        }),
    ))
}
