use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::quant::Bitwidth;

/// Version of the genotype JSON layout documented in the README.
pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;

/// Shape of the joint architecture / bitwidth search space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub min_blocks_per_stage: usize,
    pub kernel_options: Vec<usize>,
    pub expand_options: Vec<usize>,
    pub convs_per_block: usize,
    pub bitwidth_options: Vec<Bitwidth>,
    pub resolution_options: Vec<usize>,
}

impl SearchSpaceSpec {
    /// 5 stages of 4 MobileNetV3-style blocks, kernels {3,5,7},
    /// expansions {3,4,6}, 3 convs per block, bitwidths {2,3,4}.
    pub fn paper() -> Self {
        Self {
            stages: 5,
            blocks_per_stage: 4,
            min_blocks_per_stage: 2,
            kernel_options: vec![3, 5, 7],
            expand_options: vec![3, 4, 6],
            convs_per_block: 3,
            bitwidth_options: vec![Bitwidth::B2, Bitwidth::B3, Bitwidth::B4],
            resolution_options: vec![160, 176, 192, 208, 224],
        }
    }

    /// Same combinatorics as [`Self::paper`] at toy input sizes.
    pub fn desk() -> Self {
        Self {
            resolution_options: vec![8, 12],
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(QfaError::Validation(m));
        if self.stages == 0 || self.blocks_per_stage == 0 || self.convs_per_block == 0 {
            return fail("stages, blocks_per_stage and convs_per_block must be positive".into());
        }
        if self.min_blocks_per_stage == 0 || self.min_blocks_per_stage > self.blocks_per_stage {
            return fail(format!(
                "min_blocks_per_stage {} must lie in 1..={}",
                self.min_blocks_per_stage, self.blocks_per_stage
            ));
        }
        fn ascending<T: Ord>(v: &[T]) -> bool {
            !v.is_empty() && v.windows(2).all(|w| w[0] < w[1])
        }
        if !ascending(&self.kernel_options) || self.kernel_options.iter().any(|k| k % 2 == 0) {
            return fail("kernel_options must be non-empty, ascending and odd".into());
        }
        if !ascending(&self.expand_options) || self.expand_options[0] == 0 {
            return fail("expand_options must be non-empty, ascending and positive".into());
        }
        if !ascending(&self.bitwidth_options) {
            return fail("bitwidth_options must be non-empty and ascending".into());
        }
        if !ascending(&self.resolution_options) || self.resolution_options[0] == 0 {
            return fail("resolution_options must be non-empty, ascending and positive".into());
        }
        Ok(())
    }

    pub fn depth_options(&self) -> std::ops::RangeInclusive<usize> {
        self.min_blocks_per_stage..=self.blocks_per_stage
    }

    pub fn total_blocks(&self) -> usize {
        self.stages * self.blocks_per_stage
    }

    /// `|kernel|·|expand|·(|bits|²)^convs`.
    pub fn count_block_configs(&self) -> BigUint {
        let per_conv = BigUint::from(self.bitwidth_options.len()).pow(2);
        BigUint::from(self.kernel_options.len())
            * BigUint::from(self.expand_options.len())
            * per_conv.pow(self.convs_per_block as u32)
    }

    /// `Σ_{d ∈ depths} block^d`.
    pub fn count_stage_configs(&self) -> BigUint {
        let block = self.count_block_configs();
        self.depth_options().map(|d| block.pow(d as u32)).sum()
    }

    /// `stage^stages`, ignoring resolution choices.
    pub fn count_total(&self) -> BigUint {
        self.count_stage_configs().pow(self.stages as u32)
    }
}

/// `(mantissa, exponent)` with `digits` significant digits, truncated.
pub fn scientific(value: &BigUint, digits: usize) -> (String, usize) {
    let s = value.to_str_radix(10);
    let exponent = s.len() - 1;
    let digits = digits.max(1).min(s.len());
    let mut mantissa = s[..1].to_string();
    if digits > 1 {
        mantissa.push('.');
        mantissa.push_str(&s[1..digits]);
    }
    (mantissa, exponent)
}

/// `value / 10^exponent` rounded to `digits` significant digits.
pub fn scientific_rounded(value: &BigUint, digits: usize) -> (f64, usize) {
    let s = value.to_str_radix(10);
    let exponent = s.len() - 1;
    let take = (digits + 3).min(s.len());
    let lead: f64 = s[..take].parse().expect("decimal digits");
    let lead = lead / 10f64.powi(take as i32 - 1);
    let factor = 10f64.powi(digits as i32 - 1);
    ((lead * factor).round() / factor, exponent)
}

/// Joint architecture and per-layer bitwidth choice.
///
/// Only active blocks carry choices: stage `s` has `depths[s]` entries in
/// `kernels[s]`, `expands[s]`, `wbits[s]` and `abits[s]`; each block has
/// one weight and one activation bitwidth per conv layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    pub depths: Vec<usize>,
    pub kernels: Vec<Vec<usize>>,
    pub expands: Vec<Vec<usize>>,
    pub wbits: Vec<Vec<Vec<Bitwidth>>>,
    pub abits: Vec<Vec<Vec<Bitwidth>>>,
    pub resolution: usize,
}

impl Genotype {
    pub fn validate(&self, spec: &SearchSpaceSpec) -> Result<()> {
        self.validate_with_bits(spec, &spec.bitwidth_options)
    }

    /// Validates against `spec` but with an explicit bitwidth option set.
    pub fn validate_with_bits(&self, spec: &SearchSpaceSpec, bits: &[Bitwidth]) -> Result<()> {
        let fail = |m: String| Err(QfaError::Validation(m));
        let s = spec.stages;
        if self.depths.len() != s
            || self.kernels.len() != s
            || self.expands.len() != s
            || self.wbits.len() != s
            || self.abits.len() != s
        {
            return fail(format!("genotype must describe exactly {s} stages"));
        }
        for st in 0..s {
            let d = self.depths[st];
            if !spec.depth_options().contains(&d) {
                return fail(format!(
                    "stage {st}: depth {d} outside {:?}",
                    spec.depth_options()
                ));
            }
            if self.kernels[st].len() != d
                || self.expands[st].len() != d
                || self.wbits[st].len() != d
                || self.abits[st].len() != d
            {
                return fail(format!(
                    "stage {st}: choices must exist for exactly {d} blocks"
                ));
            }
            for b in 0..d {
                if !spec.kernel_options.contains(&self.kernels[st][b]) {
                    return fail(format!(
                        "stage {st} block {b}: kernel {} not allowed",
                        self.kernels[st][b]
                    ));
                }
                if !spec.expand_options.contains(&self.expands[st][b]) {
                    return fail(format!(
                        "stage {st} block {b}: expand {} not allowed",
                        self.expands[st][b]
                    ));
                }
                for layer in [&self.wbits[st][b], &self.abits[st][b]] {
                    if layer.len() != spec.convs_per_block {
                        return fail(format!(
                            "stage {st} block {b}: expected {} bitwidths per block",
                            spec.convs_per_block
                        ));
                    }
                    if let Some(bad) = layer.iter().find(|w| !bits.contains(w)) {
                        return fail(format!("stage {st} block {b}: bitwidth {bad} not allowed"));
                    }
                }
            }
        }
        if self.resolution >= spec.resolution_options.len() {
            return fail(format!("resolution index {} out of range", self.resolution));
        }
        Ok(())
    }

    /// Every per-layer `(wbits, abits)` pair, in network order.
    pub fn layer_bits(&self) -> impl Iterator<Item = (Bitwidth, Bitwidth)> + '_ {
        self.wbits
            .iter()
            .zip(&self.abits)
            .flat_map(|(ws, as_)| ws.iter().zip(as_))
            .flat_map(|(w, a)| w.iter().copied().zip(a.iter().copied()))
    }

    /// All bitwidths (weights and activations).
    pub fn all_bits(&self) -> impl Iterator<Item = Bitwidth> + '_ {
        self.layer_bits().flat_map(|(w, a)| [w, a])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("genotype serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn pick<T: Copy, R: Rng + ?Sized>(options: &[T], rng: &mut R) -> T {
    *options.choose(rng).expect("option sets are non-empty")
}

/// Uniform sample over `spec` (bitwidths from `spec.bitwidth_options`).
pub fn sample_uniform<R: Rng + ?Sized>(spec: &SearchSpaceSpec, rng: &mut R) -> Genotype {
    sample_with_bits(spec, &spec.bitwidth_options, rng)
}

/// Uniform sample with bitwidths drawn independently per layer from `bits`.
pub fn sample_with_bits<R: Rng + ?Sized>(
    spec: &SearchSpaceSpec,
    bits: &[Bitwidth],
    rng: &mut R,
) -> Genotype {
    let depths: Vec<usize> = (0..spec.stages)
        .map(|_| rng.gen_range(spec.min_blocks_per_stage..=spec.blocks_per_stage))
        .collect();
    let mut g = Genotype {
        depths: depths.clone(),
        kernels: Vec::new(),
        expands: Vec::new(),
        wbits: Vec::new(),
        abits: Vec::new(),
        resolution: 0,
    };
    for &d in &depths {
        let mut ks = Vec::with_capacity(d);
        let mut es = Vec::with_capacity(d);
        let mut ws = Vec::with_capacity(d);
        let mut as_ = Vec::with_capacity(d);
        for _ in 0..d {
            ks.push(pick(&spec.kernel_options, rng));
            es.push(pick(&spec.expand_options, rng));
            let mut w = Vec::with_capacity(spec.convs_per_block);
            let mut a = Vec::with_capacity(spec.convs_per_block);
            for _ in 0..spec.convs_per_block {
                w.push(pick(bits, rng));
                a.push(pick(bits, rng));
            }
            ws.push(w);
            as_.push(a);
        }
        g.kernels.push(ks);
        g.expands.push(es);
        g.wbits.push(ws);
        g.abits.push(as_);
    }
    g.resolution = rng.gen_range(0..spec.resolution_options.len());
    g
}

fn uniform_genotype(
    spec: &SearchSpaceSpec,
    depth: usize,
    kernel: usize,
    expand: usize,
    bits: Bitwidth,
    resolution: usize,
) -> Genotype {
    let per_stage = |v: usize| vec![vec![v; depth]; spec.stages];
    let layer_bits = vec![vec![vec![bits; spec.convs_per_block]; depth]; spec.stages];
    Genotype {
        depths: vec![depth; spec.stages],
        kernels: per_stage(kernel),
        expands: per_stage(expand),
        wbits: layer_bits.clone(),
        abits: layer_bits,
        resolution,
    }
}

/// Smallest subnet: minimum depth, kernel, expansion, bitwidth and resolution.
pub fn min_genotype(spec: &SearchSpaceSpec) -> Genotype {
    min_genotype_with_bits(spec, spec.bitwidth_options[0])
}

pub fn min_genotype_with_bits(spec: &SearchSpaceSpec, bits: Bitwidth) -> Genotype {
    uniform_genotype(
        spec,
        spec.min_blocks_per_stage,
        spec.kernel_options[0],
        spec.expand_options[0],
        bits,
        0,
    )
}

/// Largest subnet with every layer at `bits`, at the largest resolution.
pub fn max_genotype(spec: &SearchSpaceSpec, bits: Bitwidth) -> Genotype {
    uniform_genotype(
        spec,
        spec.blocks_per_stage,
        *spec.kernel_options.last().expect("non-empty"),
        *spec.expand_options.last().expect("non-empty"),
        bits,
        spec.resolution_options.len() - 1,
    )
}

/// Length of the one-hot encoding of genotypes of `spec`.
pub fn encoding_len(spec: &SearchSpaceSpec) -> usize {
    let nb = spec.bitwidth_options.len();
    let per_block =
        spec.kernel_options.len() + spec.expand_options.len() + 2 * nb * spec.convs_per_block;
    let depths = spec.blocks_per_stage - spec.min_blocks_per_stage + 1;
    spec.stages * (depths + spec.blocks_per_stage * per_block) + spec.resolution_options.len()
}

fn one_hot<T: PartialEq>(out: &mut Vec<u8>, options: &[T], value: Option<&T>) {
    for o in options {
        out.push(u8::from(value == Some(o)));
    }
}

/// Binary feature vector; inactive block slots are all-zero groups.
pub fn encode_onehot(g: &Genotype, spec: &SearchSpaceSpec) -> Result<Vec<u8>> {
    g.validate(spec)?;
    let depths: Vec<usize> = spec.depth_options().collect();
    let mut out = Vec::with_capacity(encoding_len(spec));
    for st in 0..spec.stages {
        one_hot(&mut out, &depths, Some(&g.depths[st]));
        for b in 0..spec.blocks_per_stage {
            let active = b < g.depths[st];
            one_hot(
                &mut out,
                &spec.kernel_options,
                active.then(|| &g.kernels[st][b]),
            );
            one_hot(
                &mut out,
                &spec.expand_options,
                active.then(|| &g.expands[st][b]),
            );
            for c in 0..spec.convs_per_block {
                one_hot(
                    &mut out,
                    &spec.bitwidth_options,
                    active.then(|| &g.wbits[st][b][c]),
                );
                one_hot(
                    &mut out,
                    &spec.bitwidth_options,
                    active.then(|| &g.abits[st][b][c]),
                );
            }
        }
    }
    one_hot(
        &mut out,
        &spec.resolution_options,
        Some(&spec.resolution_options[g.resolution]),
    );
    debug_assert_eq!(out.len(), encoding_len(spec));
    Ok(out)
}

/// Inverse of [`encode_onehot`].
pub fn decode_onehot(bits: &[u8], spec: &SearchSpaceSpec) -> Result<Genotype> {
    if bits.len() != encoding_len(spec) {
        return Err(QfaError::Validation(format!(
            "encoding has {} entries, expected {}",
            bits.len(),
            encoding_len(spec)
        )));
    }
    let mut pos = 0;
    let mut read = |n: usize| -> Result<Option<usize>> {
        let group = &bits[pos..pos + n];
        pos += n;
        let hot: Vec<usize> = group
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| i)
            .collect();
        match hot.as_slice() {
            [] => Ok(None),
            [i] => Ok(Some(*i)),
            _ => Err(QfaError::Validation(
                "one-hot group with several bits set".into(),
            )),
        }
    };
    let missing = || QfaError::Validation("active group is empty".into());
    let depths: Vec<usize> = spec.depth_options().collect();
    let nb = spec.bitwidth_options.len();
    let mut g = Genotype {
        depths: Vec::new(),
        kernels: Vec::new(),
        expands: Vec::new(),
        wbits: Vec::new(),
        abits: Vec::new(),
        resolution: 0,
    };
    for _ in 0..spec.stages {
        let d = depths[read(depths.len())?.ok_or_else(missing)?];
        let (mut ks, mut es, mut ws, mut as_) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for b in 0..spec.blocks_per_stage {
            let k = read(spec.kernel_options.len())?;
            let e = read(spec.expand_options.len())?;
            let mut w = Vec::new();
            let mut a = Vec::new();
            for _ in 0..spec.convs_per_block {
                w.push(read(nb)?);
                a.push(read(nb)?);
            }
            let groups = [k, e]
                .into_iter()
                .chain(w.iter().copied())
                .chain(a.iter().copied());
            if b < d {
                let vals: Option<Vec<usize>> = groups.collect();
                vals.ok_or_else(missing)?;
                ks.push(spec.kernel_options[k.expect("checked")]);
                es.push(spec.expand_options[e.expect("checked")]);
                ws.push(
                    w.iter()
                        .map(|i| spec.bitwidth_options[i.expect("checked")])
                        .collect(),
                );
                as_.push(
                    a.iter()
                        .map(|i| spec.bitwidth_options[i.expect("checked")])
                        .collect(),
                );
            } else if groups.into_iter().any(|v| v.is_some()) {
                return Err(QfaError::Validation(
                    "inactive block slot is not all-zero".into(),
                ));
            }
        }
        g.depths.push(d);
        g.kernels.push(ks);
        g.expands.push(es);
        g.wbits.push(ws);
        g.abits.push(as_);
    }
    g.resolution = read(spec.resolution_options.len())?.ok_or_else(missing)?;
    Ok(g)
}

/// Every genotype of `spec` at resolution index 0, or an error when there
/// are more than `limit`.
pub fn enumerate_genotypes(spec: &SearchSpaceSpec, limit: usize) -> Result<Vec<Genotype>> {
    let total = spec.count_total();
    if total > BigUint::from(limit) {
        return Err(QfaError::Parameter(format!(
            "space has {total} genotypes, more than the limit {limit}"
        )));
    }
    let nb = spec.bitwidth_options.len();
    let conv_pairs: Vec<(Bitwidth, Bitwidth)> = (0..nb * nb)
        .map(|i| (spec.bitwidth_options[i / nb], spec.bitwidth_options[i % nb]))
        .collect();
    // All single-block choices: (kernel, expand, wbits, abits).
    let mut blocks: Vec<(usize, usize, Vec<Bitwidth>, Vec<Bitwidth>)> = Vec::new();
    for &k in &spec.kernel_options {
        for &e in &spec.expand_options {
            let mut idx = vec![0usize; spec.convs_per_block];
            loop {
                let w = idx.iter().map(|&i| conv_pairs[i].0).collect();
                let a = idx.iter().map(|&i| conv_pairs[i].1).collect();
                blocks.push((k, e, w, a));
                if !advance(&mut idx, conv_pairs.len()) {
                    break;
                }
            }
        }
    }
    // All stage choices.
    type Stage = (
        usize,
        Vec<usize>,
        Vec<usize>,
        Vec<Vec<Bitwidth>>,
        Vec<Vec<Bitwidth>>,
    );
    let mut stages: Vec<Stage> = Vec::new();
    for d in spec.depth_options() {
        let mut idx = vec![0usize; d];
        loop {
            let chosen: Vec<_> = idx.iter().map(|&i| &blocks[i]).collect();
            stages.push((
                d,
                chosen.iter().map(|b| b.0).collect(),
                chosen.iter().map(|b| b.1).collect(),
                chosen.iter().map(|b| b.2.clone()).collect(),
                chosen.iter().map(|b| b.3.clone()).collect(),
            ));
            if !advance(&mut idx, blocks.len()) {
                break;
            }
        }
    }
    let mut out = Vec::new();
    let mut idx = vec![0usize; spec.stages];
    loop {
        let chosen: Vec<&Stage> = idx.iter().map(|&i| &stages[i]).collect();
        out.push(Genotype {
            depths: chosen.iter().map(|s| s.0).collect(),
            kernels: chosen.iter().map(|s| s.1.clone()).collect(),
            expands: chosen.iter().map(|s| s.2.clone()).collect(),
            wbits: chosen.iter().map(|s| s.3.clone()).collect(),
            abits: chosen.iter().map(|s| s.4.clone()).collect(),
            resolution: 0,
        });
        if !advance(&mut idx, stages.len()) {
            break;
        }
    }
    Ok(out)
}

/// Odometer increment; false after the last combination.
fn advance(idx: &mut [usize], base: usize) -> bool {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < base {
            return true;
        }
        idx[d] = 0;
    }
    false
}
