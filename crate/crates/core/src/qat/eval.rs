use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::error::{QfaError, Result};
use crate::quant::QuantMode;
use crate::supernet::{Genotype, Supernet};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

/// Streams `batches` batches of `data` (in order, wrapping around) through
/// `g` with the quantizers in calibration mode, then leaves them in
/// evaluation mode.
pub fn calibrate_subnet(
    net: &mut Supernet,
    g: &Genotype,
    data: &Dataset,
    batches: usize,
    batch_size: usize,
) -> Result<()> {
    if batches == 0 || batch_size == 0 {
        return Err(QfaError::Parameter(
            "calibration needs at least one non-empty batch".into(),
        ));
    }
    if data.is_empty() {
        return Err(QfaError::Parameter("calibration data is empty".into()));
    }
    net.set_mode(QuantMode::Calibrate);
    for b in 0..batches {
        let idx: Vec<usize> = (0..batch_size)
            .map(|i| (b * batch_size + i) % data.len())
            .collect();
        let (x, _) = data.batch(&idx)?;
        let mut tape = Tape::new();
        net.forward(&mut tape, g, &x, None)?;
    }
    net.set_mode(QuantMode::Eval);
    Ok(())
}

/// Top-1 accuracy and mean cross-entropy of `g` on all of `data`, with the
/// quantizers in evaluation mode.
pub fn eval_subnet(
    net: &mut Supernet,
    g: &Genotype,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalResult> {
    net.set_mode(QuantMode::Eval);
    eval_batches(net, g, data, data.len(), batch_size)
}

/// Like [`eval_subnet`] on the first `n` samples, in whatever mode the
/// quantizers are in.
pub fn eval_batches(
    net: &mut Supernet,
    g: &Genotype,
    data: &Dataset,
    n: usize,
    batch_size: usize,
) -> Result<EvalResult> {
    let n = n.min(data.len());
    if n == 0 || batch_size == 0 {
        return Err(QfaError::Parameter(
            "evaluation needs a non-empty dataset and batch".into(),
        ));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut start = 0;
    while start < n {
        let (x, y) = data.range(start, batch_size.min(n - start))?;
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, g, &x, None)?;
        let l = tape.softmax_cross_entropy(out.logits, &y)?;
        loss += tape.value(l).item() * y.len() as f64;
        let logits = tape.value(out.logits);
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0;
            correct += usize::from(pred == label);
        }
        start += y.len();
    }
    Ok(EvalResult {
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
    })
}
