use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::space::{Genotype, SearchSpaceSpec};
use crate::error::{QfaError, Result};
use crate::quant::Bitwidth;

/// Cost of one subnet.
///
/// A layer whose weights and activations are both 32-bit adds its FLOPs
/// `a` to `fp_flops`; any other layer adds `m·n·a` to `bitops`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub fp_flops: f64,
    pub bitops: f64,
    pub effective_flops: f64,
}

impl ComplexityReport {
    /// From `(flops, wbits, abits)` per layer.
    pub fn from_layers(layers: &[(f64, Bitwidth, Bitwidth)]) -> Self {
        let mut fp_flops = 0.0;
        let mut bitops = 0.0;
        for &(a, w, x) in layers {
            if w.is_full() && x.is_full() {
                fp_flops += a;
            } else {
                bitops += f64::from(w.bits()) * f64::from(x.bits()) * a;
            }
        }
        Self {
            fp_flops,
            bitops,
            effective_flops: fp_flops + bitops / 64.0,
        }
    }

    pub fn effective_mflops(&self) -> f64 {
        self.effective_flops / 1e6
    }
}

/// Identifies one layer of a subnet for FLOPs lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerQuery {
    Stem {
        resolution: usize,
    },
    Block {
        stage: usize,
        block: usize,
        conv: usize,
        resolution: usize,
        kernel: usize,
        expand: usize,
    },
    Classifier {
        resolution: usize,
    },
}

/// Full-precision FLOPs of individual layers.
pub trait LayerFlopsTable {
    fn flops(&self, layer: &LayerQuery) -> Result<f64>;

    /// Precision of the final classifier in quantized subnets.
    fn classifier_bits(&self) -> Bitwidth {
        Bitwidth::B8
    }
}

impl LayerFlopsTable for BTreeMap<LayerQuery, f64> {
    fn flops(&self, layer: &LayerQuery) -> Result<f64> {
        self.get(layer)
            .copied()
            .ok_or_else(|| QfaError::Config(format!("no FLOPs entry for {layer:?}")))
    }
}

/// Effective FLOPs of `g`.
///
/// The stem is always full precision. The classifier runs at
/// `table.classifier_bits()` unless every conv layer of `g` is 32-bit, in
/// which case the whole subnet is the full-precision network.
pub fn complexity(
    g: &Genotype,
    spec: &SearchSpaceSpec,
    table: &dyn LayerFlopsTable,
) -> Result<ComplexityReport> {
    let all_bits: Vec<Bitwidth> = Bitwidth::ALLOWED
        .iter()
        .map(|&b| Bitwidth::new(b).expect("allowed"))
        .collect();
    g.validate_with_bits(spec, &all_bits)?;
    let resolution = spec.resolution_options[g.resolution];
    let mut layers = vec![(
        table.flops(&LayerQuery::Stem { resolution })?,
        Bitwidth::FULL,
        Bitwidth::FULL,
    )];
    for stage in 0..spec.stages {
        for block in 0..g.depths[stage] {
            for conv in 0..spec.convs_per_block {
                let q = LayerQuery::Block {
                    stage,
                    block,
                    conv,
                    resolution,
                    kernel: g.kernels[stage][block],
                    expand: g.expands[stage][block],
                };
                layers.push((
                    table.flops(&q)?,
                    g.wbits[stage][block][conv],
                    g.abits[stage][block][conv],
                ));
            }
        }
    }
    let cls = if g.all_bits().all(Bitwidth::is_full) {
        Bitwidth::FULL
    } else {
        table.classifier_bits()
    };
    layers.push((
        table.flops(&LayerQuery::Classifier { resolution })?,
        cls,
        cls,
    ));
    Ok(ComplexityReport::from_layers(&layers))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_by_four_bits() {
        let r = ComplexityReport::from_layers(&[(1000.0, Bitwidth::B4, Bitwidth::B4)]);
        assert_eq!(r.bitops, 16000.0);
        assert_eq!(r.fp_flops, 0.0);
        assert_eq!(r.effective_flops, 250.0);
    }

    #[test]
    fn eight_bit_fixed_point() {
        for a in [1.0, 1000.0, 123_456.0] {
            let r = ComplexityReport::from_layers(&[(a, Bitwidth::B8, Bitwidth::B8)]);
            assert_eq!(r.effective_flops, a);
        }
    }

    #[test]
    fn full_precision_layers() {
        let r = ComplexityReport::from_layers(&[
            (10.0, Bitwidth::FULL, Bitwidth::FULL),
            (5.0, Bitwidth::FULL, Bitwidth::FULL),
        ]);
        assert_eq!(r.bitops, 0.0);
        assert_eq!(r.effective_flops, 15.0);
    }

    fn one_layer_spec() -> SearchSpaceSpec {
        SearchSpaceSpec {
            stages: 1,
            blocks_per_stage: 1,
            min_blocks_per_stage: 1,
            kernel_options: vec![3],
            expand_options: vec![1],
            convs_per_block: 1,
            bitwidth_options: vec![Bitwidth::B4],
            resolution_options: vec![8],
        }
    }

    #[test]
    fn table_lookup_and_missing_entry() {
        let spec = one_layer_spec();
        let g = super::super::min_genotype(&spec);
        let mut table = BTreeMap::new();
        table.insert(LayerQuery::Stem { resolution: 8 }, 100.0);
        table.insert(
            LayerQuery::Block {
                stage: 0,
                block: 0,
                conv: 0,
                resolution: 8,
                kernel: 3,
                expand: 1,
            },
            1000.0,
        );
        assert!(matches!(
            complexity(&g, &spec, &table),
            Err(QfaError::Config(_))
        ));
        table.insert(LayerQuery::Classifier { resolution: 8 }, 64.0);
        let r = complexity(&g, &spec, &table).unwrap();
        assert_eq!(r.fp_flops, 100.0);
        assert_eq!(r.bitops, 16000.0 + 64.0 * 64.0);
        assert_eq!(r.effective_flops, 100.0 + 250.0 + 64.0);
    }
}
