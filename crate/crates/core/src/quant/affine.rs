use serde::{Deserialize, Serialize};

use super::{Bitwidth, SCALE_FLOOR};
use crate::error::{QfaError, Result};
use crate::tensor::{round_half_even, Tape, Tensor, Var};

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.9;

/// Scale and zero-point of a uniform affine quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: f64,
    pub zero_point: i64,
}

/// Derives `(scale, zero_point)` from an observed range on the unsigned grid.
pub fn affine_derive(x_min: f64, x_max: f64, bw: Bitwidth) -> Result<AffineParams> {
    if !(x_min <= x_max) {
        return Err(QfaError::Parameter(format!(
            "range inverted: x_min={x_min} > x_max={x_max}"
        )));
    }
    if bw.is_full() {
        return Err(QfaError::Parameter(
            "full precision has no affine parameters".into(),
        ));
    }
    let (n, p) = bw.unsigned_range();
    let scale = ((x_max - x_min) / (p - n)).max(SCALE_FLOOR);
    let zero_point = (-round_half_even(x_min / scale)).clamp(n, p) as i64;
    Ok(AffineParams { scale, zero_point })
}

/// Integer codes `x_q` of `x` (as reals).
pub fn affine_codes(x: &[f64], params: &AffineParams, bw: Bitwidth) -> Vec<f64> {
    let (n, p) = bw.unsigned_range();
    let z = params.zero_point as f64;
    x.iter()
        .map(|v| round_half_even((v / params.scale + z).clamp(n, p)))
        .collect()
}

/// Dequantized `x̂ = (x_q - z)·Δ`; gradient passes where `x/Δ + z` is inside `[n, p]`.
pub fn affine_quantize(
    tape: &mut Tape,
    x: Var,
    params: &AffineParams,
    bw: Bitwidth,
) -> Result<Var> {
    if bw.is_full() {
        return Ok(x);
    }
    if !(params.scale > 0.0) {
        return Err(QfaError::Parameter(format!(
            "affine scale must be positive, got {}",
            params.scale
        )));
    }
    let (n, p) = bw.unsigned_range();
    let (scale, z) = (params.scale, params.zero_point as f64);
    let vx = tape.value(x);
    let data = affine_codes(vx.data(), params, bw)
        .into_iter()
        .map(|q| (q - z) * scale)
        .collect();
    let out = Tensor::new(vx.shape().to_vec(), data)?;
    Ok(tape.custom(
        out,
        &[x],
        Box::new(move |ctx| {
            let g = ctx
                .grad
                .iter()
                .zip(ctx.inputs[0].data())
                .map(|(g, v)| {
                    let u = v / scale + z;
                    if u >= n && u <= p {
                        *g
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![Some(g)]
        }),
    ))
}

/// Exponential moving average of observed extremes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub running_min: f64,
    pub running_max: f64,
    pub momentum: f64,
    pub initialized: bool,
}

impl EmaState {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(QfaError::Parameter(format!(
                "EMA momentum must lie in (0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            running_min: 0.0,
            running_max: 0.0,
            momentum,
            initialized: false,
        })
    }
}

impl Default for EmaState {
    fn default() -> Self {
        Self::new(DEFAULT_EMA_MOMENTUM).expect("default momentum is valid")
    }
}

/// `r <- m·r + (1 - m)·observed`; the first observation initializes directly.
pub fn ema_update(s: EmaState, batch_min: f64, batch_max: f64) -> Result<EmaState> {
    if !(batch_min <= batch_max) {
        return Err(QfaError::Parameter(format!(
            "observed range inverted: {batch_min} > {batch_max}"
        )));
    }
    if !s.initialized {
        return Ok(EmaState {
            running_min: batch_min,
            running_max: batch_max,
            initialized: true,
            ..s
        });
    }
    let m = s.momentum;
    Ok(EmaState {
        running_min: m * s.running_min + (1.0 - m) * batch_min,
        running_max: m * s.running_max + (1.0 - m) * batch_max,
        ..s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_by_hand() {
        let p = affine_derive(-1.0, 2.0, Bitwidth::B2).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero_point, 1);
        let p = affine_derive(0.0, 15.0, Bitwidth::B4).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, 0));
    }

    #[test]
    fn derive_degenerate_range_floors_scale() {
        let p = affine_derive(0.0, 0.0, Bitwidth::B2).unwrap();
        assert_eq!(p.scale, SCALE_FLOOR);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn derive_rejects_inverted_range() {
        assert!(matches!(
            affine_derive(1.0, 0.0, Bitwidth::B2),
            Err(QfaError::Parameter(_))
        ));
    }

    #[test]
    fn quantize_by_hand() {
        let params = AffineParams {
            scale: 1.0,
            zero_point: 1,
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.4, 0.0]));
        let y = affine_quantize(&mut tape, x, &params, Bitwidth::B2).unwrap();
        assert_eq!(affine_codes(&[0.4], &params, Bitwidth::B2), vec![1.0]);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_is_exact() {
        let params = affine_derive(-0.37, 1.91, Bitwidth::B3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![0.0]));
        let y = affine_quantize(&mut tape, x, &params, Bitwidth::B3).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn ema_by_hand() {
        let s = ema_update(EmaState::default(), -1.0, 1.0).unwrap();
        assert_eq!((s.running_min, s.running_max), (-1.0, 1.0));
        let s = ema_update(s, -1.0, 2.0).unwrap();
        assert!((s.running_max - 1.1).abs() < 1e-12);
        assert!(ema_update(s, 2.0, 1.0).is_err());
    }

    #[test]
    fn ema_constant_stream_converges() {
        let mut s = ema_update(EmaState::default(), -5.0, 5.0).unwrap();
        for _ in 0..500 {
            s = ema_update(s, 0.25, 0.75).unwrap();
        }
        assert!((s.running_min - 0.25).abs() < 1e-12);
        assert!((s.running_max - 0.75).abs() < 1e-12);
    }
}
