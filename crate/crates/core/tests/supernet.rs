use std::collections::{BTreeMap, HashSet};

use num_bigint::BigUint;
use proptest::prelude::*;
use qfa_core::quant::{lsq_init_scale, lsq_quantize, ActivationScheme, Bitwidth, LsqState};
use qfa_core::rng;
use qfa_core::supernet::*;
use qfa_core::tensor::{Tape, Tensor};
use rand::Rng;

fn small_spec() -> impl Strategy<Value = SearchSpaceSpec> {
    let bits = prop::sample::subsequence(vec![Bitwidth::B2, Bitwidth::B3, Bitwidth::B4], 1..=2);
    let kernels = prop::sample::subsequence(vec![3usize, 5, 7], 1..=2);
    let expands = prop::sample::subsequence(vec![3usize, 4, 6], 1..=2);
    (1usize..=2, 1usize..=2, kernels, expands, bits).prop_flat_map(|(stages, blocks, k, e, b)| {
        (1..=blocks).prop_map(move |min| SearchSpaceSpec {
            stages,
            blocks_per_stage: blocks,
            min_blocks_per_stage: min,
            kernel_options: k.clone(),
            expand_options: e.clone(),
            convs_per_block: 1,
            bitwidth_options: b.clone(),
            resolution_options: vec![8],
        })
    })
}

/// Independent count: per stage, Σ over depths of block_configs^depth.
fn count_by_formula(spec: &SearchSpaceSpec) -> u128 {
    let block = (spec.kernel_options.len() * spec.expand_options.len()) as u128
        * ((spec.bitwidth_options.len() as u128).pow(2)).pow(spec.convs_per_block as u32);
    let stage: u128 = (spec.min_blocks_per_stage..=spec.blocks_per_stage)
        .map(|d| block.pow(d as u32))
        .sum();
    stage.pow(spec.stages as u32)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counts_match_exhaustive_enumeration(spec in small_spec()) {
        let expected = count_by_formula(&spec);
        prop_assume!(expected <= 10_000);
        let all = enumerate_genotypes(&spec, 10_000).unwrap();
        prop_assert_eq!(all.len() as u128, expected);
        prop_assert_eq!(spec.count_total(), BigUint::from(expected));
        let distinct: HashSet<&Genotype> = all.iter().collect();
        prop_assert_eq!(distinct.len(), all.len());
        let codes: HashSet<Vec<u8>> = all.iter().map(|g| encode_onehot(g, &spec).unwrap()).collect();
        prop_assert_eq!(codes.len(), all.len());
    }
}

#[test]
fn onehot_roundtrip_on_ten_thousand_genotypes() {
    for spec in [SearchSpaceSpec::paper(), SearchSpaceSpec::desk()] {
        let mut r = rng::seeded(6);
        let len = encoding_len(&spec);
        for _ in 0..10_000 {
            let g = sample_uniform(&spec, &mut r);
            let code = encode_onehot(&g, &spec).unwrap();
            assert_eq!(code.len(), len);
            assert_eq!(decode_onehot(&code, &spec).unwrap(), g);
        }
    }
}

#[test]
fn paper_space_cardinality() {
    let spec = SearchSpaceSpec::paper();
    assert_eq!(spec.count_block_configs(), BigUint::from(6561u32));
    let b = BigUint::from(6561u32);
    let one = BigUint::from(1u32);
    let stage = &b * &b * (&one + &b * (&one + &b));
    assert_eq!(spec.count_stage_configs(), stage);
    assert_eq!(spec.count_stage_configs().to_string(), "1853302661435043");
    assert_eq!(scientific_rounded(&stage, 3), (1.85, 15));
    let total = spec.count_total();
    assert_eq!(total, stage.pow(5));
    assert_eq!(scientific_rounded(&total, 3), (2.19, 76));
}

#[test]
fn uniform_sampling_frequencies() {
    let spec = SearchSpaceSpec::paper();
    let mut r = rng::seeded(13);
    let mut counts: BTreeMap<(&str, u32), u64> = BTreeMap::new();
    for _ in 0..100_000 {
        let g = sample_uniform(&spec, &mut r);
        g.validate(&spec).unwrap();
        for (s, &d) in g.depths.iter().enumerate() {
            *counts.entry(("depth", d as u32)).or_default() += 1;
            for b in 0..d {
                *counts
                    .entry(("kernel", g.kernels[s][b] as u32))
                    .or_default() += 1;
                *counts
                    .entry(("expand", g.expands[s][b] as u32))
                    .or_default() += 1;
                for c in 0..spec.convs_per_block {
                    *counts
                        .entry(("wbits", g.wbits[s][b][c].bits()))
                        .or_default() += 1;
                    *counts
                        .entry(("abits", g.abits[s][b][c].bits()))
                        .or_default() += 1;
                }
            }
        }
    }
    for field in ["depth", "kernel", "expand", "wbits", "abits"] {
        let cells: Vec<u64> = counts
            .iter()
            .filter(|((f, _), _)| *f == field)
            .map(|(_, &c)| c)
            .collect();
        assert_eq!(cells.len(), 3, "{field}");
        let total: u64 = cells.iter().sum();
        let p = 1.0 / 3.0;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for c in cells {
            assert!(
                (c as f64 - total as f64 * p).abs() < 3.0 * sigma,
                "{field}: {c} of {total}"
            );
        }
    }
}

#[test]
fn extreme_genotypes_of_the_paper_space() {
    let spec = SearchSpaceSpec::paper();
    let small = min_genotype(&spec);
    small.validate(&spec).unwrap();
    assert!(small.depths.iter().all(|&d| d == 2));
    assert!(small.kernels.iter().flatten().all(|&k| k == 3));
    assert!(small.expands.iter().flatten().all(|&e| e == 3));
    assert!(small.all_bits().all(|b| b == Bitwidth::B2));
    let big = max_genotype(&spec, Bitwidth::B4);
    big.validate(&spec).unwrap();
    assert!(big.depths.iter().all(|&d| d == 4));
    assert!(big.kernels.iter().flatten().all(|&k| k == 7));
    assert!(big.expands.iter().flatten().all(|&e| e == 6));
    assert!(big.all_bits().all(|b| b == Bitwidth::B4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn raising_one_layer_bitwidth_never_lowers_cost(seed in any::<u64>(), which in any::<prop::sample::Index>(), weight_side in any::<bool>()) {
        let mut spec = SearchSpaceSpec::desk();
        spec.bitwidth_options = vec![Bitwidth::B2, Bitwidth::B3, Bitwidth::B4, Bitwidth::B8];
        let net = NetworkConfig::desk();
        let g = sample_uniform(&spec, &mut rng::seeded(seed));
        let base = complexity(&g, &spec, &net).unwrap().effective_flops;
        let layers: Vec<(usize, usize, usize)> = (0..spec.stages)
            .flat_map(|s| (0..g.depths[s]).flat_map(move |b| (0..3).map(move |c| (s, b, c))))
            .collect();
        let (s, b, c) = layers[which.index(layers.len())];
        let mut h = g.clone();
        let slot = if weight_side { &mut h.wbits[s][b][c] } else { &mut h.abits[s][b][c] };
        let higher: Vec<Bitwidth> = spec.bitwidth_options.iter().copied().filter(|x| x.bits() > slot.bits()).collect();
        prop_assume!(!higher.is_empty());
        *slot = higher[0];
        prop_assert!(complexity(&h, &spec, &net).unwrap().effective_flops >= base);
    }

    #[test]
    fn effective_flops_identity(seed in any::<u64>()) {
        let spec = SearchSpaceSpec::desk();
        let net = NetworkConfig::desk();
        let g = sample_uniform(&spec, &mut rng::seeded(seed));
        let rep = complexity(&g, &spec, &net).unwrap();
        prop_assert_eq!(rep.effective_flops, rep.fp_flops + rep.bitops / 64.0);
    }
}

#[test]
fn eight_bit_layers_cost_their_flops() {
    // all conv layers at 8/8: every quantized layer costs exactly a, the
    // classifier runs at 8 bits too, so effective = Σa
    let mut spec = SearchSpaceSpec::desk();
    spec.bitwidth_options = vec![Bitwidth::B8];
    let net = NetworkConfig::desk();
    let g = max_genotype(&spec, Bitwidth::B8);
    let rep = complexity(&g, &spec, &net).unwrap();
    let fp = complexity(&max_genotype(&spec, Bitwidth::FULL), &spec, &net).unwrap();
    assert_eq!(rep.effective_flops, fp.effective_flops);
    assert_eq!(fp.bitops, 0.0);
}

fn quantized_net() -> Supernet {
    let mut net = Supernet::new(SearchSpaceSpec::desk(), NetworkConfig::desk(), 3).unwrap();
    net.install_quantizers(
        &[Bitwidth::B2, Bitwidth::B3, Bitwidth::B4],
        ActivationScheme::default(),
    )
    .unwrap();
    net
}

#[test]
fn shared_slices_read_identical_quantized_weights() {
    let net = quantized_net();
    let spec = net.space().clone();
    let mut r = rng::seeded(1);
    for _ in 0..50 {
        let a = sample_uniform(&spec, &mut r);
        let mut b = sample_uniform(&spec, &mut r);
        // share stage 1, block 0: same weight bits, possibly other kernel and expand
        b.wbits[1][0] = a.wbits[1][0].clone();
        for conv in 0..3 {
            let wa = net.effective_weight(&a, 1, 0, conv).unwrap();
            let wb = net.effective_weight(&b, 1, 0, conv).unwrap();
            let (sa, sb) = (wa.shape(), wb.shape());
            // compare the overlapping leading (or centred, for kernels) region
            let common: Vec<usize> = sa.iter().zip(sb).map(|(x, y)| *x.min(y)).collect();
            let pick = |t: &Tensor, s: &[usize]| -> Vec<f64> {
                let mut tape = Tape::new();
                let v = tape.constant(t.clone());
                let off: Vec<usize> = if conv == 1 {
                    vec![(s[0] - common[0]) / 2, (s[1] - common[1]) / 2, 0]
                } else {
                    vec![0; s.len()]
                };
                let c = tape.crop(v, &off, &common).unwrap();
                tape.value(c).data().to_vec()
            };
            assert_eq!(pick(&wa, sa), pick(&wb, sb));
        }
    }
}

#[test]
fn slices_are_cut_from_the_quantized_full_tensor() {
    let net = quantized_net();
    let spec = net.space().clone();
    let g = sample_uniform(&spec, &mut rng::seeded(9));
    let (s, b) = (2, 0);
    let l = net.layer_index(s, b, 0);
    let bits = g.wbits[s][b][0];
    let full = net.layers[l].weight.clone();
    let scale = net.layers[l].quantizers.weight[&bits].scale_value();
    let mut tape = Tape::new();
    let w = tape.constant(full.clone());
    let sv = tape.constant(Tensor::scalar(scale));
    let q = lsq_quantize(&mut tape, w, sv, bits).unwrap();
    let sub = net.effective_weight(&g, s, b, 0).unwrap();
    let lens = sub.shape().to_vec();
    let c = tape.crop(q, &[0, 0], &lens).unwrap();
    assert_eq!(tape.value(c).data(), sub.data());
}

#[test]
fn quantizing_after_slicing_differs() {
    // a crafted weight whose large entries sit outside the leading slice:
    // a scale derived from the sub-tensor alone is much finer
    let (rows, cols) = (4, 8);
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = if c >= 4 {
                2.0
            } else if (r + c) % 2 == 0 {
                0.05
            } else {
                0.15
            };
        }
    }
    let full = Tensor::new(vec![rows, cols], data).unwrap();
    let bits = Bitwidth::B2;
    let slice = |t: &Tensor| -> Vec<f64> {
        (0..rows)
            .flat_map(|r| t.data()[r * cols..r * cols + 4].to_vec())
            .collect()
    };

    let full_state = LsqState::from_weights(full.data(), bits).unwrap();
    let mut tape = Tape::new();
    let w = tape.constant(full.clone());
    let (qf, _) = full_state.quantize(&mut tape, w).unwrap();
    let quant_then_slice = slice(tape.value(qf));

    let sub = slice(&full);
    let sub_state = LsqState::new(lsq_init_scale(&sub, bits), bits).unwrap();
    let mut t2 = Tape::new();
    let sv = t2.constant(Tensor::from_vec(sub));
    let (qs, _) = sub_state.quantize(&mut t2, sv).unwrap();
    let slice_then_quant = t2.value(qs).data().to_vec();

    assert!(quant_then_slice.iter().all(|&v| v == 0.0));
    assert!(slice_then_quant.iter().any(|&v| v > 0.0));
}

#[test]
fn full_precision_forward_ignores_quantizers() {
    let spec = SearchSpaceSpec::desk();
    let plain = Supernet::new(spec.clone(), NetworkConfig::desk(), 5).unwrap();
    let mut quant = plain.clone();
    quant
        .install_quantizers(&[Bitwidth::B2, Bitwidth::B4], ActivationScheme::default())
        .unwrap();
    let mut plain = plain;
    let mut r = rng::seeded(2);
    let x = Tensor::new(
        vec![3, 12, 12, 3],
        (0..3 * 144 * 3).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    for _ in 0..5 {
        let g = sample_with_bits(&spec, &[Bitwidth::FULL], &mut r);
        let mut t1 = Tape::new();
        let a = plain.forward(&mut t1, &g, &x, None).unwrap();
        let mut t2 = Tape::new();
        let b = quant.forward(&mut t2, &g, &x, None).unwrap();
        assert_eq!(t1.value(a.logits).data(), t2.value(b.logits).data());
        assert_eq!(
            t1.value(a.logits).shape(),
            &[3, NetworkConfig::desk().num_classes]
        );
    }
}

#[test]
fn forward_rejects_invalid_genotypes() {
    let mut net = Supernet::new(SearchSpaceSpec::desk(), NetworkConfig::desk(), 5).unwrap();
    let mut g = max_genotype(net.space(), Bitwidth::FULL);
    g.depths[0] = 7;
    let x = Tensor::zeros(&[1, 12, 12, 3]);
    assert!(matches!(
        net.forward(&mut Tape::new(), &g, &x, None),
        Err(qfa_core::QfaError::Validation(_))
    ));
}
