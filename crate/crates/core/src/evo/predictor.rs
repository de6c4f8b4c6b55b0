use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::PredictorSample;
use crate::error::{QfaError, Result};
use crate::rng;
use crate::supernet::{encode_onehot, encoding_len, Genotype, SearchSpaceSpec};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size.
    pub lr: f64,
    /// Fraction of samples held out for the report.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `[inputs, outputs]`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Two-hidden-layer ReLU regressor from the one-hot genotype encoding to
/// accuracy, clamped to `[0, 1]` at inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    space: SearchSpaceSpec,
    layers: Vec<Dense>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub train_mae: f64,
    pub holdout_mae: f64,
    /// Kendall τ-b on the holdout; absent when either side is constant.
    pub kendall_tau: Option<f64>,
}

impl Predictor {
    pub fn space(&self) -> &SearchSpaceSpec {
        &self.space
    }

    fn encode(&self, gs: &[&Genotype]) -> Result<Tensor> {
        let d = encoding_len(&self.space);
        let mut data = Vec::with_capacity(gs.len() * d);
        for g in gs {
            data.extend(encode_onehot(g, &self.space)?.into_iter().map(f64::from));
        }
        Tensor::new(vec![gs.len(), d], data)
    }

    fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let mut h = x;
        for (l, pair) in params.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.add_row_bias(h, pair[1])?;
            if l + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        let mut vars = Vec::with_capacity(2 * self.layers.len());
        for d in &self.layers {
            let w = Tensor::new(vec![d.inputs, d.outputs], d.weight.clone())?;
            let b = Tensor::new(vec![d.outputs], d.bias.clone())?;
            if trainable {
                vars.push(tape.param(w));
                vars.push(tape.param(b));
            } else {
                vars.push(tape.constant(w));
                vars.push(tape.constant(b));
            }
        }
        Ok(vars)
    }

    fn raw(&self, gs: &[&Genotype]) -> Result<Vec<f64>> {
        if gs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.constant(self.encode(gs)?);
        let params = self.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, x, &params)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn predict_batch(&self, gs: &[&Genotype]) -> Result<Vec<f64>> {
        Ok(self
            .raw(gs)?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect())
    }

    pub fn predict(&self, g: &Genotype) -> Result<f64> {
        Ok(self.predict_batch(&[g])?[0])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        let d = encoding_len(&p.space);
        let mut inputs = d;
        for (i, l) in p.layers.iter().enumerate() {
            if l.inputs != inputs
                || l.weight.len() != l.inputs * l.outputs
                || l.bias.len() != l.outputs
            {
                return Err(QfaError::Format(format!(
                    "predictor layer {i} has inconsistent shapes"
                )));
            }
            inputs = l.outputs;
        }
        if inputs != 1 {
            return Err(QfaError::Format(
                "predictor must end in a single output".into(),
            ));
        }
        Ok(p)
    }
}

/// Kendall τ-b between two equally long sequences.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 && db == 0.0 {
                continue;
            } else if da == 0.0 {
                ties_a += 1;
            } else if db == 0.0 {
                ties_b += 1;
            } else if (da > 0.0) == (db > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let base = (concordant + discordant) as f64;
    let denom = ((base + ties_a as f64) * (base + ties_b as f64)).sqrt();
    (denom > 0.0).then(|| (concordant - discordant) as f64 / denom)
}

fn mae(pred: &[f64], target: &[f64]) -> f64 {
    if pred.is_empty() {
        return f64::NAN;
    }
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for i in 0..p.len() {
                self.m[k][i] = Self::B1 * self.m[k][i] + (1.0 - Self::B1) * g[i];
                self.v[k][i] = Self::B2 * self.v[k][i] + (1.0 - Self::B2) * g[i] * g[i];
                let mh = self.m[k][i] / c1;
                let vh = self.v[k][i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

/// Fits a [`Predictor`] on `samples` by minibatch MSE with Adam and reports
/// errors on a seeded holdout split.
pub fn train_predictor(
    samples: &[PredictorSample],
    space: &SearchSpaceSpec,
    cfg: &PredictorConfig,
) -> Result<(Predictor, PredictorReport)> {
    if samples.len() < 2 {
        return Err(QfaError::Parameter(format!(
            "predictor training needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if cfg.hidden == 0
        || cfg.batch_size == 0
        || !(0.0..1.0).contains(&cfg.holdout)
        || !(cfg.lr > 0.0)
    {
        return Err(QfaError::Config(
            "predictor needs hidden, batch size > 0, lr > 0 and holdout in [0, 1)".into(),
        ));
    }
    for s in samples {
        s.genotype.validate(space)?;
        if !(0.0..=1.0).contains(&s.accuracy) {
            return Err(QfaError::Validation(format!(
                "accuracy {} outside [0, 1]",
                s.accuracy
            )));
        }
    }
    let mut r = rng::seeded(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut r);
    let n_hold = ((samples.len() as f64 * cfg.holdout).round() as usize).min(samples.len() - 1);
    let (hold, train) = order.split_at(n_hold);

    let d = encoding_len(space);
    let mean = train.iter().map(|&i| samples[i].accuracy).sum::<f64>() / train.len() as f64;
    let mut layers = Vec::new();
    let dims = [d, cfg.hidden, cfg.hidden, 1];
    for (l, w) in dims.windows(2).enumerate() {
        let last = l == 2;
        let std = (2.0 / w[0] as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        layers.push(Dense {
            inputs: w[0],
            outputs: w[1],
            weight: (0..w[0] * w[1])
                .map(|_| if last { 0.0 } else { normal.sample(&mut r) })
                .collect(),
            bias: if last { vec![mean] } else { vec![0.0; w[1]] },
        });
    }
    let mut model = Predictor {
        space: space.clone(),
        layers,
    };
    let shapes: Vec<usize> = model
        .layers
        .iter()
        .flat_map(|l| [l.weight.len(), l.bias.len()])
        .collect();
    let mut adam = Adam {
        m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        t: 0,
    };

    let mut idx = train.to_vec();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut r);
        for batch in idx.chunks(cfg.batch_size) {
            let gs: Vec<&Genotype> = batch.iter().map(|&i| &samples[i].genotype).collect();
            let y: Vec<f64> = batch.iter().map(|&i| samples[i].accuracy).collect();
            let mut tape = Tape::new();
            let x = tape.constant(model.encode(&gs)?);
            let params = model.bind(&mut tape, true)?;
            let out = model.forward(&mut tape, x, &params)?;
            let loss = tape.mse(out, &y)?;
            let grads = tape.backward(loss);
            let g: Vec<Vec<f64>> = params
                .iter()
                .zip(&shapes)
                .map(|(&p, &n)| grads.get(p).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
                .collect();
            let mut flat: Vec<&mut Vec<f64>> = model
                .layers
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect();
            adam.step(&mut flat, &g, cfg.lr);
        }
    }

    let eval = |ids: &[usize]| -> Result<(Vec<f64>, Vec<f64>)> {
        let gs: Vec<&Genotype> = ids.iter().map(|&i| &samples[i].genotype).collect();
        let pred = model.predict_batch(&gs)?;
        Ok((pred, ids.iter().map(|&i| samples[i].accuracy).collect()))
    };
    let (tp, tt) = eval(train)?;
    let (hp, ht) = eval(hold)?;
    let report = PredictorReport {
        train_samples: train.len(),
        holdout_samples: hold.len(),
        train_mae: mae(&tp, &tt),
        holdout_mae: mae(&hp, &ht),
        kendall_tau: kendall_tau(&hp, &ht),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kendall_examples() {
        assert_eq!(
            kendall_tau(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]),
            Some(1.0)
        );
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]), None);
        // one discordant pair out of three: (2 - 1)/3
        let t = kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((t - 1.0 / 3.0).abs() < 1e-12);
    }
}
