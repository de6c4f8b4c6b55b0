use super::data::Dataset;
use crate::error::{QfaError, Result};
use crate::extreme_value::{activation_max_histogram, BinRule, LayerMaxHistogram};
use crate::quant::{Bitwidth, QuantMode};
use crate::rng;
use crate::supernet::{sample_with_bits, Genotype, Supernet};
use crate::tensor::Tape;

/// Which subnet runs on each probed batch.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeSampling {
    Fixed(Genotype),
    /// A fresh uniform genotype per batch with bitwidths from `bits`.
    Random {
        bits: Vec<Bitwidth>,
        seed: u64,
    },
}

/// Per-batch maxima of the inputs to the quantized layers in `layers`,
/// binned per layer. Normalization runs on batch statistics.
///
/// A layer that the sampled subnet skips contributes no value for that batch.
pub fn activation_maxima(
    net: &mut Supernet,
    data: &Dataset,
    layers: &[usize],
    sampling: &ProbeSampling,
    batches: usize,
    batch_size: usize,
    rule: BinRule,
) -> Result<Vec<LayerMaxHistogram>> {
    if batch_size == 0 || data.is_empty() {
        return Err(QfaError::Parameter(
            "probing needs a non-empty dataset and batch".into(),
        ));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= net.layers.len()) {
        return Err(QfaError::Parameter(format!(
            "no layer {l}; the network has {}",
            net.layers.len()
        )));
    }
    net.set_mode(QuantMode::Train);
    let mut r = rng::seeded(match sampling {
        ProbeSampling::Random { seed, .. } => *seed,
        ProbeSampling::Fixed(_) => 0,
    });
    let stream = |b: usize| -> Result<Vec<(String, f64)>> {
        let g = match sampling {
            ProbeSampling::Fixed(g) => g.clone(),
            ProbeSampling::Random { bits, .. } => sample_with_bits(net.space(), bits, &mut r),
        };
        let idx: Vec<usize> = (0..batch_size)
            .map(|i| (b * batch_size + i) % data.len())
            .collect();
        let (x, _) = data.batch(&idx)?;
        let mut found = Vec::new();
        let mut probe = |l: usize, t: &crate::tensor::Tensor| {
            if layers.contains(&l) {
                let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                found.push((l, max));
            }
        };
        let mut tape = Tape::new();
        net.forward(&mut tape, &g, &x, Some(&mut probe))?;
        // report in the caller's layer order
        Ok(layers
            .iter()
            .filter_map(|l| {
                found
                    .iter()
                    .find(|(k, _)| k == l)
                    .map(|&(k, v)| (format!("layer{k}"), v))
            })
            .collect())
    };
    activation_max_histogram(stream, batches, rule)
}
