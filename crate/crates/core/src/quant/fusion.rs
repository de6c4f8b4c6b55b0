use super::batch::scale_and_zero;
use super::{bq_codes, lsq_codes, BatchQuantState, LsqState};
use crate::error::{QfaError, Result};
use crate::tensor::matmul_raw;
use crate::tensor::Tensor;

/// Outcome of comparing a quantized linear layer with its fused form.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionCheck {
    /// Largest element-wise difference between `ŵx̂` and the fused form.
    pub max_abs_diff: f64,
    /// Precomputed per-output bias `Σ_k w_q Δ_w (ẑ + β) Δ̂ γ`.
    pub bias: Vec<f64>,
}

/// Evaluates `ŵx̂` for `w: [m, k]`, `x: [k, n]` both directly and as
/// `w_q x_q Δ_w Δ̂ γ - bias`, where the bias depends only on the weights and
/// the activation offsets and can be folded into the next layer.
pub fn fused_bias_check(
    w: &Tensor,
    x: &Tensor,
    wstate: &LsqState,
    astate: &BatchQuantState,
) -> Result<FusionCheck> {
    let (ws, xs) = (w.shape(), x.shape());
    if ws.len() != 2 || xs.len() != 2 || ws[1] != xs[0] {
        return Err(QfaError::Dimension(format!(
            "linear layer needs w:[m,k], x:[k,n]; got {ws:?} and {xs:?}"
        )));
    }
    let (m, k, n) = (ws[0], ws[1], xs[1]);

    let (w_q, dw) = if wstate.bitwidth.is_full() {
        (w.data().to_vec(), 1.0)
    } else {
        let d = wstate.scale_value();
        (lsq_codes(w.data(), d, wstate.bitwidth), d)
    };
    let (gamma, beta) = (astate.gamma_value(), astate.beta_value());
    let (x_q, dx, zhat, gamma, beta) = if astate.bitwidth.is_full() {
        (x.data().to_vec(), 1.0, 0.0, 1.0, 0.0)
    } else {
        let (lo, hi) = astate.range_for(x)?;
        let (dhat, zhat) = scale_and_zero(lo, hi, astate.bitwidth);
        let codes = bq_codes(x.data(), dhat, zhat, gamma, beta, astate.bitwidth);
        (codes, dhat, zhat, gamma, beta)
    };

    let w_hat: Vec<f64> = w_q.iter().map(|q| q * dw).collect();
    let x_hat: Vec<f64> = x_q.iter().map(|q| (q - zhat - beta) * dx * gamma).collect();
    let direct = matmul_raw(&w_hat, &x_hat, m, k, n);

    let integer = matmul_raw(&w_q, &x_q, m, k, n);
    let out_scale = dw * dx * gamma;
    let bias: Vec<f64> = w_q
        .chunks_exact(k)
        .map(|row| row.iter().sum::<f64>() * dw * (zhat + beta) * dx * gamma)
        .collect();
    let max_abs_diff = integer
        .iter()
        .enumerate()
        .map(|(idx, acc)| (acc * out_scale - bias[idx / n] - direct[idx]).abs())
        .fold(0.0, f64::max);
    Ok(FusionCheck { max_abs_diff, bias })
}
