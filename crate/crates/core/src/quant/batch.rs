use serde::{Deserialize, Serialize};

use super::{Bitwidth, SCALE_FLOOR};
use crate::error::{QfaError, Result};
use crate::tensor::{round_half_even, scalar_param, Tape, Tensor, Var};

/// Batch extreme-value estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Estimator {
    /// Global min and max of the batch.
    Minmax,
    /// Per-channel min and max over all other dimensions, averaged over channels.
    ChannelMeanMinmax,
    /// `mean ∓ 3·std` over the whole tensor.
    MeanStd3,
}

impl std::str::FromStr for Estimator {
    type Err = QfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "minmax" => Ok(Self::Minmax),
            "channel_mean_minmax" => Ok(Self::ChannelMeanMinmax),
            "mean_std3" => Ok(Self::MeanStd3),
            other => Err(QfaError::Parameter(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Channels are the last dimension (NHWC activations, `[batch, features]` vectors).
pub fn bq_estimate(x: &Tensor, estimator: Estimator) -> Result<(f64, f64)> {
    let data = x.data();
    if data.is_empty() {
        return Err(QfaError::Parameter(
            "cannot estimate range of an empty tensor".into(),
        ));
    }
    match estimator {
        Estimator::Minmax => Ok(data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })),
        Estimator::ChannelMeanMinmax => {
            if x.shape().len() < 2 {
                return Err(QfaError::Parameter(
                    "channel-mean estimator needs a channel dimension".into(),
                ));
            }
            let c = *x.shape().last().expect("rank checked");
            let mut lo = vec![f64::INFINITY; c];
            let mut hi = vec![f64::NEG_INFINITY; c];
            for row in data.chunks_exact(c) {
                for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(row) {
                    *l = l.min(v);
                    *h = h.max(v);
                }
            }
            let cf = c as f64;
            Ok((lo.iter().sum::<f64>() / cf, hi.iter().sum::<f64>() / cf))
        }
        Estimator::MeanStd3 => {
            let n = data.len() as f64;
            let mean = data.iter().sum::<f64>() / n;
            let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            Ok((mean - 3.0 * std, mean + 3.0 * std))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QuantMode {
    Train,
    Calibrate,
    Eval,
}

/// Activation quantizer driven by batch statistics with learnable residuals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchQuantState {
    #[serde(with = "scalar_param")]
    pub gamma: Tensor,
    #[serde(with = "scalar_param")]
    pub beta: Tensor,
    pub estimator: Estimator,
    pub bitwidth: Bitwidth,
    pub calib_min: f64,
    pub calib_max: f64,
    pub calib_count: u64,
    pub mode: QuantMode,
    /// When false, γ and β stay fixed at 1 and 0.
    pub learn_residuals: bool,
}

/// Tape handles produced by one BatchQuant application.
#[derive(Clone, Copy, Debug)]
pub struct BqVars {
    pub out: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl BatchQuantState {
    pub fn new(estimator: Estimator, bitwidth: Bitwidth) -> Self {
        Self {
            gamma: Tensor::scalar(1.0).with_grad(),
            beta: Tensor::scalar(0.0).with_grad(),
            estimator,
            bitwidth,
            calib_min: 0.0,
            calib_max: 0.0,
            calib_count: 0,
            mode: QuantMode::Train,
            learn_residuals: true,
        }
    }

    pub fn without_residuals(mut self) -> Self {
        self.learn_residuals = false;
        self
    }

    pub fn gamma_value(&self) -> f64 {
        self.gamma.item()
    }

    pub fn beta_value(&self) -> f64 {
        self.beta.item()
    }

    /// Clears calibration statistics and enters `mode`.
    pub fn set_mode(&mut self, mode: QuantMode) {
        if mode == QuantMode::Calibrate {
            self.calib_min = 0.0;
            self.calib_max = 0.0;
            self.calib_count = 0;
        }
        self.mode = mode;
    }

    /// Keeps γ strictly positive after an optimizer update.
    pub fn enforce_floor(&mut self) {
        let v = &mut self.gamma.data_mut()[0];
        if !(*v >= SCALE_FLOOR) {
            *v = SCALE_FLOOR;
        }
    }

    /// `(x̂_min, x̂_max)` this state would use for `x` in its current mode.
    pub fn range_for(&self, x: &Tensor) -> Result<(f64, f64)> {
        match self.mode {
            QuantMode::Train | QuantMode::Calibrate => bq_estimate(x, self.estimator),
            QuantMode::Eval => {
                if self.calib_count == 0 {
                    return Err(QfaError::State(
                        "BatchQuant evaluated before calibration".into(),
                    ));
                }
                Ok((self.calib_min, self.calib_max))
            }
        }
    }
}

/// `(Δ̂, ẑ)` of the unsigned grid for a range.
pub(crate) fn scale_and_zero(x_min: f64, x_max: f64, bw: Bitwidth) -> (f64, f64) {
    let (n, p) = bw.unsigned_range();
    let scale = ((x_max - x_min) / (p - n)).max(SCALE_FLOOR);
    let zero = (-round_half_even(x_min / scale)).clamp(n, p);
    (scale, zero)
}

/// Codes `x_q = round(clamp(x/(Δ̂γ) + ẑ + β, n, p))`.
pub fn bq_codes(x: &[f64], dhat: f64, zhat: f64, gamma: f64, beta: f64, bw: Bitwidth) -> Vec<f64> {
    let (n, p) = bw.unsigned_range();
    let s = dhat * gamma;
    x.iter()
        .map(|v| round_half_even((v / s + zhat + beta).clamp(n, p)))
        .collect()
}

/// `x̂ = (x_q - ẑ - β)·Δ̂·γ` with fixed statistics `Δ̂, ẑ`.
///
/// Straight-through backward. Inside the clamp range
/// `∂x̂/∂x = 1`, `∂x̂/∂β = 0`, `∂x̂/∂γ = (x_q - ẑ - β)Δ̂ - x/γ`; outside
/// `∂x̂/∂x = 0`, `∂x̂/∂β = -Δ̂γ`, `∂x̂/∂γ = (x_q - ẑ - β)Δ̂`.
pub fn bq_op(
    tape: &mut Tape,
    x: Var,
    dhat: f64,
    zhat: f64,
    gamma: Var,
    beta: Var,
    bw: Bitwidth,
) -> Result<Var> {
    if bw.is_full() {
        return Ok(x);
    }
    let (g0, b0) = (tape.value(gamma), tape.value(beta));
    if g0.numel() != 1 || b0.numel() != 1 {
        return Err(QfaError::Dimension("γ and β must be scalars".into()));
    }
    let (g0, b0) = (g0.item(), b0.item());
    if !(g0 > 0.0) {
        return Err(QfaError::Parameter(format!("γ must be positive, got {g0}")));
    }
    let (n, p) = bw.unsigned_range();
    let vx = tape.value(x);
    let s = dhat * g0;
    let data = bq_codes(vx.data(), dhat, zhat, g0, b0, bw)
        .into_iter()
        .map(|q| (q - zhat - b0) * s)
        .collect();
    let out = Tensor::new(vx.shape().to_vec(), data)?;
    Ok(tape.custom(
        out,
        &[x, gamma, beta],
        Box::new(move |ctx| {
            let xs = ctx.inputs[0].data();
            let gamma = ctx.inputs[1].item();
            let beta = ctx.inputs[2].item();
            let s = dhat * gamma;
            let mut gx = ctx.needs[0].then(|| vec![0.0; xs.len()]);
            let (mut g_gamma, mut g_beta) = (0.0, 0.0);
            for (i, (&v, &g)) in xs.iter().zip(ctx.grad).enumerate() {
                let u = v / s + zhat + beta;
                let q = round_half_even(u.clamp(n, p));
                let offset = (q - zhat - beta) * dhat;
                if u >= n && u <= p {
                    if let Some(gx) = gx.as_mut() {
                        gx[i] = g;
                    }
                    g_gamma += g * (offset - v / gamma);
                } else {
                    g_gamma += g * offset;
                    g_beta -= g * s;
                }
            }
            vec![
                gx,
                ctx.needs[1].then(|| vec![g_gamma]),
                ctx.needs[2].then(|| vec![g_beta]),
            ]
        }),
    ))
}

/// Applies `state` to `x`, recording γ and β on the tape. Their gradients
/// are scaled by `1/sqrt(N·(p - n))` for an `N`-element input.
///
/// In `Calibrate` mode this only quantizes: use [`bq_calibrate`] to fold
/// the batch into the running statistics.
pub fn bq_quantize(tape: &mut Tape, x: Var, state: &BatchQuantState) -> Result<BqVars> {
    let (gamma, beta) = if state.learn_residuals {
        (
            tape.param(state.gamma.clone()),
            tape.param(state.beta.clone()),
        )
    } else {
        (
            tape.constant(Tensor::scalar(1.0)),
            tape.constant(Tensor::scalar(0.0)),
        )
    };
    if state.bitwidth.is_full() {
        return Ok(BqVars {
            out: x,
            gamma,
            beta,
        });
    }
    let (lo, hi) = state.range_for(tape.value(x))?;
    let (dhat, zhat) = scale_and_zero(lo, hi, state.bitwidth);
    // residual gradients sum over every element; scale them like an LSQ step
    let (n, p) = state.bitwidth.unsigned_range();
    let factor = 1.0 / (tape.value(x).numel() as f64 * (p - n)).sqrt();
    let (g, b) = if state.learn_residuals {
        (
            tape.grad_scale(gamma, factor),
            tape.grad_scale(beta, factor),
        )
    } else {
        (gamma, beta)
    };
    let out = bq_op(tape, x, dhat, zhat, g, b, state.bitwidth)?;
    Ok(BqVars { out, gamma, beta })
}

/// Folds the batch estimate of `x` into the running means.
pub fn bq_calibrate(state: &mut BatchQuantState, x: &Tensor) -> Result<()> {
    if state.mode != QuantMode::Calibrate {
        return Err(QfaError::State(format!(
            "calibration requires CALIBRATE mode, quantizer is in {:?}",
            state.mode
        )));
    }
    let (lo, hi) = bq_estimate(x, state.estimator)?;
    state.calib_count += 1;
    let k = state.calib_count as f64;
    state.calib_min += (lo - state.calib_min) / k;
    state.calib_max += (hi - state.calib_max) / k;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{affine_derive, affine_quantize};
    use rand::Rng;

    fn nhwc(b: usize, c: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let mut data = Vec::new();
        for bi in 0..b {
            for ci in 0..c {
                data.push(f(bi, ci));
            }
        }
        Tensor::new(vec![b, 1, 1, c], data).unwrap()
    }

    #[test]
    fn constant_tensor_estimates() {
        let x = Tensor::full(&[2, 3, 3, 2], 1.25);
        assert_eq!(bq_estimate(&x, Estimator::Minmax).unwrap(), (1.25, 1.25));
        let (lo, hi) = bq_estimate(&x, Estimator::MeanStd3).unwrap();
        assert!((lo - 1.25).abs() < 1e-12 && (hi - 1.25).abs() < 1e-12);
    }

    #[test]
    fn channel_mean_by_hand() {
        // channel 0 spans [0, 1], channel 1 spans [2, 5]
        let x = nhwc(2, 2, |b, c| match (b, c) {
            (0, 0) => 0.0,
            (1, 0) => 1.0,
            (0, 1) => 5.0,
            _ => 2.0,
        });
        assert_eq!(
            bq_estimate(&x, Estimator::ChannelMeanMinmax).unwrap(),
            (1.0, 3.0)
        );
    }

    #[test]
    fn empty_and_rankless_inputs_rejected() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(bq_estimate(&x, Estimator::ChannelMeanMinmax).is_err());
        assert!(bq_estimate(&Tensor::from_vec(vec![]), Estimator::Minmax).is_err());
    }

    #[test]
    fn std3_of_standard_normal() {
        let mut rng = crate::rng::seeded(11);
        let n = 1_000_000;
        // Box-Muller
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let x = Tensor::from_vec(data);
        let (lo, hi) = bq_estimate(&x, Estimator::MeanStd3).unwrap();
        assert!((lo + 3.0).abs() < 0.05, "lo={lo}");
        assert!((hi - 3.0).abs() < 0.05, "hi={hi}");
    }

    #[test]
    fn grid_over_zero_to_three() {
        let grid: Vec<f64> = (0..=30).map(|i| i as f64 * 0.1).collect();
        let x = Tensor::new(vec![grid.len(), 1], grid).unwrap();
        let state = BatchQuantState::new(Estimator::Minmax, Bitwidth::B2);
        let (lo, hi) = state.range_for(&x).unwrap();
        let (dhat, zhat) = scale_and_zero(lo, hi, Bitwidth::B2);
        assert!((dhat - 1.0).abs() < 1e-12);
        assert_eq!(zhat, 0.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = bq_quantize(&mut tape, xv, &state).unwrap();
        for v in tape.value(y.out).data() {
            assert!(
                [0.0, 1.0, 2.0, 3.0].iter().any(|c| (c - v).abs() < 1e-12),
                "{v}"
            );
        }
    }

    #[test]
    fn identity_residuals_match_affine() {
        let mut rng = crate::rng::seeded(5);
        let data: Vec<f64> = (0..4 * 3 * 3 * 5)
            .map(|_| rng.gen_range(-2.0..3.0))
            .collect();
        let x = Tensor::new(vec![4, 3, 3, 5], data).unwrap();
        for est in [
            Estimator::Minmax,
            Estimator::ChannelMeanMinmax,
            Estimator::MeanStd3,
        ] {
            for bw in [Bitwidth::B2, Bitwidth::B3, Bitwidth::B4, Bitwidth::B8] {
                let state = BatchQuantState::new(est, bw);
                let (lo, hi) = bq_estimate(&x, est).unwrap();
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let bq = bq_quantize(&mut tape, xv, &state).unwrap();
                let aff = affine_quantize(&mut tape, xv, &affine_derive(lo, hi, bw).unwrap(), bw)
                    .unwrap();
                assert_eq!(tape.value(bq.out).data(), tape.value(aff).data());
            }
        }
    }

    #[test]
    fn eval_requires_calibration() {
        let mut state = BatchQuantState::new(Estimator::ChannelMeanMinmax, Bitwidth::B2);
        state.set_mode(QuantMode::Eval);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 1, 2], 0.5));
        assert!(matches!(
            bq_quantize(&mut tape, x, &state),
            Err(QfaError::State(_))
        ));
    }

    #[test]
    fn calibration_running_mean() {
        let mut state = BatchQuantState::new(Estimator::Minmax, Bitwidth::B3);
        assert!(bq_calibrate(&mut state, &Tensor::from_vec(vec![0.0])).is_err());
        state.set_mode(QuantMode::Calibrate);
        bq_calibrate(&mut state, &Tensor::from_vec(vec![-1.0, 2.0])).unwrap();
        assert_eq!(
            (state.calib_min, state.calib_max, state.calib_count),
            (-1.0, 2.0, 1)
        );
        bq_calibrate(&mut state, &Tensor::from_vec(vec![-1.0, 4.0])).unwrap();
        assert_eq!(state.calib_max, 3.0);
        assert_eq!(state.calib_min, -1.0);

        let batch = Tensor::from_vec(vec![-0.3, 0.1, 1.7]);
        for k in [1, 2, 7, 50] {
            state.set_mode(QuantMode::Calibrate);
            for _ in 0..k {
                bq_calibrate(&mut state, &batch).unwrap();
            }
            assert_eq!((state.calib_min, state.calib_max), (-0.3, 1.7));
        }
    }

    #[test]
    fn no_residuals_records_constants() {
        let state = BatchQuantState::new(Estimator::Minmax, Bitwidth::B2).without_residuals();
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 4], vec![0.0, 1.0, 2.0, 3.3]).unwrap());
        let v = bq_quantize(&mut tape, x, &state).unwrap();
        assert!(!tape.requires_grad(v.gamma));
        assert!(!tape.requires_grad(v.beta));
    }
}
