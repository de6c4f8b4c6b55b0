//! Expected maximum of `N` i.i.d. exponential samples.
//!
//! For `x_i ~ Exp(λ)` the maximum `M_N` has `E[M_N] = H_N / λ`, with `H_N`
//! the `N`-th harmonic number, so it grows like `ln(N) / λ`. A range
//! estimator that averages batch extremes over time therefore tracks the
//! tensor size as much as the distribution, which is what breaks it when
//! the sampled subnet changes every step.
//!
//! Sampling uses inverse transform `-ln(u)/λ` on ChaCha8 streams (see
//! [`crate::rng`]); trial `t` of a run seeded with `s` always uses stream
//! `derived(s, t)`, so results do not depend on evaluation order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::rng;

/// `Σ_{k=1..n} 1/k`, summed in increasing `k`.
pub fn harmonic(n: u64) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

pub fn analytic_max_mean(lambda: f64, n: u64) -> Result<f64> {
    if !(lambda > 0.0) || n < 1 {
        return Err(QfaError::Parameter(format!(
            "need lambda > 0 and n >= 1, got lambda={lambda}, n={n}"
        )));
    }
    Ok(harmonic(n) / lambda)
}

/// Mean and sample standard deviation of the maximum of `n` Exp(λ) draws
/// over `trials` independent batches.
pub fn empirical_max_mean(lambda: f64, n: u64, trials: u64, seed: u64) -> Result<(f64, f64)> {
    if trials < 1 {
        return Err(QfaError::Parameter("trials must be at least 1".into()));
    }
    if !(lambda > 0.0) || n < 1 {
        return Err(QfaError::Parameter(format!(
            "need lambda > 0 and n >= 1, got lambda={lambda}, n={n}"
        )));
    }
    let maxima: Vec<f64> = (0..trials)
        .map(|t| {
            let mut r = rng::derived(seed, t);
            (0..n)
                .map(|_| -(1.0 - r.gen::<f64>()).ln() / lambda)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(mean_std(&maxima))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremeValueReport {
    pub lambda: f64,
    pub sizes: Vec<u64>,
    pub analytic_mean: Vec<f64>,
    pub empirical_mean: Vec<f64>,
    pub empirical_std: Vec<f64>,
    pub trials: u64,
    /// Correlation of `empirical_mean` with `ln(N)`.
    pub log_correlation: f64,
    /// Least-squares slope of `empirical_mean` against `ln(N)`; ≈ 1/λ.
    pub log_slope: f64,
}

impl ExtremeValueReport {
    /// Standard error of the empirical mean at index `i`.
    pub fn standard_error(&self, i: usize) -> f64 {
        self.empirical_std[i] / (self.trials as f64).sqrt()
    }
}

pub fn drift_report(
    lambda: f64,
    sizes: &[u64],
    trials: u64,
    seed: u64,
) -> Result<ExtremeValueReport> {
    if sizes.is_empty() {
        return Err(QfaError::Parameter("sizes must be non-empty".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(QfaError::Parameter(
            "sizes must be strictly ascending".into(),
        ));
    }
    let mut analytic_mean = Vec::with_capacity(sizes.len());
    let mut empirical_mean = Vec::with_capacity(sizes.len());
    let mut empirical_std = Vec::with_capacity(sizes.len());
    for (i, &n) in sizes.iter().enumerate() {
        analytic_mean.push(analytic_max_mean(lambda, n)?);
        let (m, s) =
            empirical_max_mean(lambda, n, trials, seed.wrapping_add(i as u64 * 0x9E37_79B9))?;
        empirical_mean.push(m);
        empirical_std.push(s);
    }
    let logs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let (log_correlation, log_slope) = if sizes.len() >= 2 {
        let mx = logs.iter().sum::<f64>() / logs.len() as f64;
        let my = empirical_mean.iter().sum::<f64>() / logs.len() as f64;
        let sxy: f64 = logs
            .iter()
            .zip(&empirical_mean)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum();
        let sxx: f64 = logs.iter().map(|x| (x - mx) * (x - mx)).sum();
        (pearson(&logs, &empirical_mean), sxy / sxx)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(ExtremeValueReport {
        lambda,
        sizes: sizes.to_vec(),
        analytic_mean,
        empirical_mean,
        empirical_std,
        trials,
        log_correlation,
        log_slope,
    })
}

/// Element counts of the smallest and largest incoming activation of the
/// second block of a MobileNetV3-style space at batch 64:
/// `[64, 72, 64, 64]` and `[64, 144, 112, 112]`.
pub const REFERENCE_ACTIVATION_SIZES: [u64; 2] = [64 * 72 * 64 * 64, 64 * 144 * 112 * 112];

/// `E[M_N2] - E[M_N1]` for `λ`.
pub fn analytic_gap(lambda: f64, n1: u64, n2: u64) -> Result<f64> {
    Ok(analytic_max_mean(lambda, n2)? - analytic_max_mean(lambda, n1)?)
}

/// Rule used to choose histogram bin widths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub enum BinRule {
    /// `2·IQR·n^(-1/3)`.
    #[default]
    FreedmanDiaconis,
    Fixed(usize),
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

const MAX_BINS: usize = 512;

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn histogram(values: &[f64], rule: BinRule) -> Result<Histogram> {
    if values.is_empty() {
        return Err(QfaError::Parameter(
            "cannot build a histogram of nothing".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let bins = match rule {
        BinRule::Fixed(b) => b.max(1),
        BinRule::FreedmanDiaconis => {
            let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
            let width = 2.0 * iqr / (sorted.len() as f64).cbrt();
            if width > 0.0 && hi > lo {
                (((hi - lo) / width).ceil() as usize).clamp(1, MAX_BINS)
            } else {
                1
            }
        }
    };
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for v in &sorted {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Distribution of per-batch maxima for one probed layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMaxHistogram {
    pub layer: String,
    pub maxima: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
}

/// Collects per-batch activation maxima from `stream` and bins them per layer.
///
/// `stream(batch_index)` returns `(layer name, max)` pairs for one batch.
/// Layers are reported in first-seen order.
pub fn activation_max_histogram<F>(
    mut stream: F,
    batches: usize,
    rule: BinRule,
) -> Result<Vec<LayerMaxHistogram>>
where
    F: FnMut(usize) -> Result<Vec<(String, f64)>>,
{
    if batches == 0 {
        return Err(QfaError::Parameter(
            "histogram needs at least one batch".into(),
        ));
    }
    let mut layers: Vec<(String, Vec<f64>)> = Vec::new();
    for b in 0..batches {
        for (name, value) in stream(b)? {
            match layers.iter_mut().find(|(n, _)| *n == name) {
                Some((_, v)) => v.push(value),
                None => layers.push((name, vec![value])),
            }
        }
    }
    layers
        .into_iter()
        .map(|(layer, maxima)| {
            let (mean, std) = mean_std(&maxima);
            let histogram = histogram(&maxima, rule)?;
            Ok(LayerMaxHistogram {
                layer,
                maxima,
                mean,
                std,
                histogram,
            })
        })
        .collect()
}
