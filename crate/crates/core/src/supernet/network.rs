use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::complexity::{complexity, ComplexityReport, LayerFlopsTable, LayerQuery};
use super::norm::ElasticNorm;
use super::space::{Genotype, SearchSpaceSpec};
use crate::error::{QfaError, Result};
use crate::quant::{
    ActParam, ActivationQuantizer, ActivationScheme, Bitwidth, LsqState, QuantMode,
};
use crate::rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Channel and stride layout of the weight-sharing network.
///
/// Widths are fixed per stage; only depth, kernel size and expansion ratio
/// are elastic. Blocks are pointwise expand → depthwise → pointwise
/// project, each followed by batch normalization, with an identity skip
/// when the shape is preserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stage_widths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub classifier_bits: Bitwidth,
}

impl NetworkConfig {
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            num_classes: 10,
            stem_width: 8,
            stem_stride: 2,
            stage_widths: vec![8, 8, 12, 16, 16],
            stage_strides: vec![2, 1, 2, 1, 1],
            classifier_bits: Bitwidth::B8,
        }
    }

    pub fn validate(&self, space: &SearchSpaceSpec) -> Result<()> {
        space.validate()?;
        let fail = |m: String| Err(QfaError::Config(m));
        if space.convs_per_block != 3 {
            return fail(format!(
                "the network has 3 conv layers per block, spec asks for {}",
                space.convs_per_block
            ));
        }
        if self.stage_widths.len() != space.stages || self.stage_strides.len() != space.stages {
            return fail(format!(
                "stage_widths and stage_strides need {} entries",
                space.stages
            ));
        }
        if self.in_channels == 0
            || self.num_classes < 2
            || self.stem_width == 0
            || self.stem_stride == 0
        {
            return fail(
                "in_channels, stem_width and stem_stride must be positive, num_classes ≥ 2".into(),
            );
        }
        if self.stage_widths.contains(&0) || self.stage_strides.contains(&0) {
            return fail("stage widths and strides must be positive".into());
        }
        if self.classifier_bits.is_full() {
            return fail("classifier_bits must be a quantized bitwidth".into());
        }
        Ok(())
    }

    /// `(in_width, out_width, stride)` of a block slot.
    pub fn block_shape(&self, stage: usize, block: usize) -> (usize, usize, usize) {
        let cout = self.stage_widths[stage];
        if block == 0 {
            let cin = if stage == 0 {
                self.stem_width
            } else {
                self.stage_widths[stage - 1]
            };
            (cin, cout, self.stage_strides[stage])
        } else {
            (cout, cout, 1)
        }
    }

    pub fn has_skip(&self, stage: usize, block: usize) -> bool {
        let (cin, cout, stride) = self.block_shape(stage, block);
        stride == 1 && cin == cout
    }

    /// Side length of the feature map entering `(stage, block)`.
    pub fn block_input_size(&self, resolution: usize, stage: usize, block: usize) -> usize {
        let mut size = conv_out(resolution, self.stem_stride);
        for s in 0..stage {
            size = conv_out(size, self.stage_strides[s]);
        }
        if block > 0 {
            size = conv_out(size, self.stage_strides[stage]);
        }
        size
    }
}

fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

/// FLOPs are `2 × multiply-accumulates`:
///
/// - stem: `2·H'·W'·9·C_in·C_stem`
/// - expand: `2·H·W·C_in·C_mid`
/// - depthwise: `2·H'·W'·k²·C_mid`
/// - project: `2·H'·W'·C_mid·C_out`
/// - classifier: `2·C_last·classes`
///
/// where `C_mid = C_in·expand` and primes denote the output size.
impl LayerFlopsTable for NetworkConfig {
    fn flops(&self, layer: &LayerQuery) -> Result<f64> {
        let bad = || QfaError::Config(format!("layer {layer:?} is outside the network"));
        Ok(match *layer {
            LayerQuery::Stem { resolution } => {
                let o = conv_out(resolution, self.stem_stride) as f64;
                2.0 * o * o * 9.0 * (self.in_channels * self.stem_width) as f64
            }
            LayerQuery::Block {
                stage,
                block,
                conv,
                resolution,
                kernel,
                expand,
            } => {
                if stage >= self.stage_widths.len() {
                    return Err(bad());
                }
                let (cin, cout, stride) = self.block_shape(stage, block);
                let hi = self.block_input_size(resolution, stage, block);
                let ho = conv_out(hi, stride) as f64;
                let hi = hi as f64;
                let mid = (cin * expand) as f64;
                match conv {
                    0 => 2.0 * hi * hi * cin as f64 * mid,
                    1 => 2.0 * ho * ho * (kernel * kernel) as f64 * mid,
                    2 => 2.0 * ho * ho * mid * cout as f64,
                    _ => return Err(bad()),
                }
            }
            LayerQuery::Classifier { .. } => {
                2.0 * (self.stage_widths.last().copied().unwrap_or(0) * self.num_classes) as f64
            }
        })
    }

    fn classifier_bits(&self) -> Bitwidth {
        self.classifier_bits
    }
}

/// Per-bitwidth quantizers of one layer, shared by every subnet.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantizers {
    pub weight: BTreeMap<Bitwidth, LsqState>,
    pub act: BTreeMap<Bitwidth, ActivationQuantizer>,
}

/// Full weight tensor of a layer plus its quantizers.
///
/// Subnets use a leading slice (and, for depthwise kernels, the centered
/// `k×k` window) of the quantized full tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticLayer {
    pub weight: Tensor,
    pub quantizers: LayerQuantizers,
    /// Normalization of the layer output; the classifier has none.
    pub norm: Option<ElasticNorm>,
}

/// Affine parameters of a normalization layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormParam {
    Gamma,
    Beta,
}

/// Names every trainable tensor of a [`Supernet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Stem,
    StemNorm(NormParam),
    Weight(usize),
    Norm(usize, NormParam),
    WeightScale(usize, Bitwidth),
    Act(usize, Bitwidth, ActParam),
    ClassifierBias,
}

impl ParamId {
    pub fn name(&self) -> String {
        match self {
            Self::Stem => "stem".into(),
            Self::StemNorm(NormParam::Gamma) => "stem.norm.gamma".into(),
            Self::StemNorm(NormParam::Beta) => "stem.norm.beta".into(),
            Self::Weight(l) => format!("layer{l}.weight"),
            Self::Norm(l, NormParam::Gamma) => format!("layer{l}.norm.gamma"),
            Self::Norm(l, NormParam::Beta) => format!("layer{l}.norm.beta"),
            Self::WeightScale(l, b) => format!("layer{l}.w{b}.scale"),
            Self::Act(l, b, ActParam::Scale) => format!("layer{l}.a{b}.scale"),
            Self::Act(l, b, ActParam::Offset) => format!("layer{l}.a{b}.offset"),
            Self::ClassifierBias => "classifier.bias".into(),
        }
    }
}

/// Recorded forward pass of one subnet.
pub struct SubnetOutput {
    pub logits: Var,
    pub params: Vec<(ParamId, Var)>,
}

/// Receives `(layer index, input activation)` before each quantized layer.
pub type Probe<'a> = &'a mut dyn FnMut(usize, &Tensor);

/// Weight-sharing elastic network.
///
/// Layer `3·(stage·blocks_per_stage + block) + conv` is conv `conv` of the
/// given block slot; the last layer is the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Supernet {
    space: SearchSpaceSpec,
    net: NetworkConfig,
    pub stem: Tensor,
    pub stem_norm: ElasticNorm,
    pub layers: Vec<ElasticLayer>,
    pub classifier_bias: Tensor,
    scheme: Option<ActivationScheme>,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut rng::Rng64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("shape matches")
        .with_grad()
}

impl Supernet {
    /// Full-precision network with freshly initialized weights.
    pub fn new(space: SearchSpaceSpec, net: NetworkConfig, seed: u64) -> Result<Self> {
        net.validate(&space)?;
        let mut r = rng::seeded(seed);
        let stem = normal_tensor(
            &[3, 3, net.in_channels, net.stem_width],
            (2.0 / (9 * net.in_channels) as f64).sqrt(),
            &mut r,
        );
        let kmax = *space.kernel_options.last().expect("non-empty");
        let emax = *space.expand_options.last().expect("non-empty");
        let mut layers = Vec::new();
        let mut push = |w: Tensor, norm: Option<ElasticNorm>| {
            layers.push(ElasticLayer {
                weight: w,
                quantizers: LayerQuantizers::default(),
                norm,
            })
        };
        for stage in 0..space.stages {
            for block in 0..space.blocks_per_stage {
                let (cin, cout, _) = net.block_shape(stage, block);
                let mid = cin * emax;
                push(
                    normal_tensor(&[cin, mid], (2.0 / cin as f64).sqrt(), &mut r),
                    Some(ElasticNorm::new(mid, 1.0)),
                );
                push(
                    normal_tensor(
                        &[kmax, kmax, mid],
                        (2.0 / (kmax * kmax) as f64).sqrt(),
                        &mut r,
                    ),
                    Some(ElasticNorm::new(mid, 1.0)),
                );
                // residual branches start at zero
                let gamma = if net.has_skip(stage, block) { 0.0 } else { 1.0 };
                push(
                    normal_tensor(&[mid, cout], (1.0 / mid as f64).sqrt(), &mut r),
                    Some(ElasticNorm::new(cout, gamma)),
                );
            }
        }
        let last = *net.stage_widths.last().expect("validated");
        push(
            normal_tensor(&[last, net.num_classes], (1.0 / last as f64).sqrt(), &mut r),
            None,
        );
        let stem_norm = ElasticNorm::new(net.stem_width, 1.0);
        let classifier_bias = Tensor::zeros(&[net.num_classes]).with_grad();
        Ok(Self {
            space,
            net,
            stem,
            stem_norm,
            layers,
            classifier_bias,
            scheme: None,
        })
    }

    /// Reassembles a network from stored parts.
    pub fn from_parts(
        space: SearchSpaceSpec,
        net: NetworkConfig,
        stem: Tensor,
        stem_norm: ElasticNorm,
        layers: Vec<ElasticLayer>,
        classifier_bias: Tensor,
        scheme: Option<ActivationScheme>,
    ) -> Result<Self> {
        let reference = Self::new(space.clone(), net.clone(), 0)?;
        let shapes_match = reference.stem.shape() == stem.shape()
            && reference.classifier_bias.shape() == classifier_bias.shape()
            && reference.layers.len() == layers.len()
            && reference.stem_norm.channels() == stem_norm.channels()
            && reference.layers.iter().zip(&layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape()
                    && a.norm.as_ref().map(ElasticNorm::channels)
                        == b.norm.as_ref().map(ElasticNorm::channels)
            });
        if !shapes_match {
            return Err(QfaError::Format(
                "stored tensors do not match the network layout".into(),
            ));
        }
        Ok(Self {
            space,
            net,
            stem,
            stem_norm,
            layers,
            classifier_bias,
            scheme,
        })
    }

    pub fn space(&self) -> &SearchSpaceSpec {
        &self.space
    }

    pub fn net(&self) -> &NetworkConfig {
        &self.net
    }

    /// Activation scheme of the installed quantizers, if any.
    pub fn scheme(&self) -> Option<ActivationScheme> {
        self.scheme
    }

    pub fn has_quantizers(&self) -> bool {
        self.layers
            .iter()
            .any(|l| !l.quantizers.weight.is_empty() || !l.quantizers.act.is_empty())
    }

    pub fn classifier_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer_index(&self, stage: usize, block: usize, conv: usize) -> usize {
        3 * (stage * self.space.blocks_per_stage + block) + conv
    }

    /// Creates weight and activation quantizers for every block layer and
    /// each non-32 bitwidth in `bits`, plus the classifier's. Existing
    /// states are kept.
    pub fn install_quantizers(
        &mut self,
        bits: &[Bitwidth],
        scheme: ActivationScheme,
    ) -> Result<()> {
        if let Some(current) = self.scheme {
            if current != scheme {
                return Err(QfaError::Config(format!(
                    "quantizers already installed with {current:?}, asked for {scheme:?}"
                )));
            }
        }
        self.scheme = Some(scheme);
        let cls = self.classifier_layer();
        let cls_bits = self.net.classifier_bits;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let wanted: Vec<Bitwidth> = if l == cls {
                vec![cls_bits]
            } else {
                bits.iter().copied().filter(|b| !b.is_full()).collect()
            };
            for b in wanted {
                if !layer.quantizers.weight.contains_key(&b) {
                    let st = LsqState::from_weights(layer.weight.data(), b)?;
                    layer.quantizers.weight.insert(b, st);
                }
                if let std::collections::btree_map::Entry::Vacant(e) = layer.quantizers.act.entry(b) {
                    e.insert(ActivationQuantizer::new(scheme, b)?);
                }
            }
        }
        Ok(())
    }

    /// Switches every quantizer and normalization layer to `mode`.
    pub fn set_mode(&mut self, mode: QuantMode) {
        self.stem_norm.set_mode(mode);
        for layer in &mut self.layers {
            if let Some(n) = layer.norm.as_mut() {
                n.set_mode(mode);
            }
            for q in layer.quantizers.act.values_mut() {
                q.set_mode(mode);
            }
        }
    }

    /// Every trainable tensor in a fixed order.
    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut Tensor)> {
        let mut out: Vec<(ParamId, &mut Tensor)> = vec![
            (ParamId::Stem, &mut self.stem),
            (
                ParamId::StemNorm(NormParam::Gamma),
                &mut self.stem_norm.gamma,
            ),
            (ParamId::StemNorm(NormParam::Beta), &mut self.stem_norm.beta),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((ParamId::Weight(l), &mut layer.weight));
            if let Some(n) = layer.norm.as_mut() {
                out.push((ParamId::Norm(l, NormParam::Gamma), &mut n.gamma));
                out.push((ParamId::Norm(l, NormParam::Beta), &mut n.beta));
            }
            for (&b, q) in layer.quantizers.weight.iter_mut() {
                out.push((ParamId::WeightScale(l, b), &mut q.scale));
            }
            for (&b, q) in layer.quantizers.act.iter_mut() {
                for (which, t) in [ActParam::Scale, ActParam::Offset]
                    .into_iter()
                    .zip(q.params_mut())
                {
                    out.push((ParamId::Act(l, b, which), t));
                }
            }
        }
        out.push((ParamId::ClassifierBias, &mut self.classifier_bias));
        out
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::Stem => Some(&mut self.stem),
            ParamId::StemNorm(NormParam::Gamma) => Some(&mut self.stem_norm.gamma),
            ParamId::StemNorm(NormParam::Beta) => Some(&mut self.stem_norm.beta),
            ParamId::Norm(l, which) => {
                let n = self.layers.get_mut(l)?.norm.as_mut()?;
                Some(match which {
                    NormParam::Gamma => &mut n.gamma,
                    NormParam::Beta => &mut n.beta,
                })
            }
            ParamId::ClassifierBias => Some(&mut self.classifier_bias),
            ParamId::Weight(l) => self.layers.get_mut(l).map(|x| &mut x.weight),
            ParamId::WeightScale(l, b) => self
                .layers
                .get_mut(l)?
                .quantizers
                .weight
                .get_mut(&b)
                .map(|q| &mut q.scale),
            ParamId::Act(l, b, which) => self
                .layers
                .get_mut(l)?
                .quantizers
                .act
                .get_mut(&b)?
                .param_mut(which),
        }
    }

    /// Adds the gradients of a recorded forward pass into the parameters.
    pub fn accumulate_grads(&mut self, params: &[(ParamId, Var)], grads: &Gradients) -> Result<()> {
        for &(id, var) in params {
            let Some(g) = grads.get(var) else { continue };
            let t = self
                .param_mut(id)
                .ok_or_else(|| QfaError::State(format!("unknown parameter {}", id.name())))?;
            t.accumulate_grad(g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.grad = None;
        }
    }

    /// Clamps quantizer scales back above their floor.
    pub fn enforce_floors(&mut self) {
        for layer in &mut self.layers {
            layer
                .quantizers
                .weight
                .values_mut()
                .for_each(LsqState::enforce_floor);
            layer
                .quantizers
                .act
                .values_mut()
                .for_each(ActivationQuantizer::enforce_floor);
        }
    }

    pub fn complexity(&self, g: &Genotype) -> Result<ComplexityReport> {
        complexity(g, &self.space, &self.net)
    }

    fn check_genotype(&self, g: &Genotype) -> Result<()> {
        let all: Vec<Bitwidth> = Bitwidth::ALLOWED
            .iter()
            .map(|&b| Bitwidth::new(b).expect("allowed"))
            .collect();
        g.validate_with_bits(&self.space, &all)
    }

    /// Quantized (if `bits < 32`) full weight of layer `l`, then the slice.
    fn weight_var(
        &self,
        tape: &mut Tape,
        l: usize,
        bits: Bitwidth,
        offsets: &[usize],
        lens: &[usize],
        params: &mut Vec<(ParamId, Var)>,
    ) -> Result<Var> {
        let layer = &self.layers[l];
        let w = tape.param(layer.weight.clone());
        params.push((ParamId::Weight(l), w));
        let q = if bits.is_full() {
            w
        } else {
            let st = layer.quantizers.weight.get(&bits).ok_or_else(|| {
                QfaError::State(format!("layer {l} has no {bits}-bit weight quantizer"))
            })?;
            let (q, s) = st.quantize(tape, w)?;
            params.push((ParamId::WeightScale(l, bits), s));
            q
        };
        if lens == layer.weight.shape() {
            Ok(q)
        } else {
            tape.crop(q, offsets, lens)
        }
    }

    fn act_var(
        &mut self,
        tape: &mut Tape,
        l: usize,
        bits: Bitwidth,
        x: Var,
        probe: &mut Option<Probe<'_>>,
        params: &mut Vec<(ParamId, Var)>,
    ) -> Result<Var> {
        if let Some(p) = probe.as_mut() {
            p(l, tape.value(x));
        }
        if bits.is_full() {
            return Ok(x);
        }
        let q = self.layers[l]
            .quantizers
            .act
            .get_mut(&bits)
            .ok_or_else(|| {
                QfaError::State(format!("layer {l} has no {bits}-bit activation quantizer"))
            })?;
        let (out, ps) = q.forward(tape, x)?;
        params.extend(
            ps.into_iter()
                .map(|(which, v)| (ParamId::Act(l, bits, which), v)),
        );
        Ok(out)
    }

    fn norm_var(
        &mut self,
        tape: &mut Tape,
        l: usize,
        x: Var,
        params: &mut Vec<(ParamId, Var)>,
    ) -> Result<Var> {
        let norm = self.layers[l]
            .norm
            .as_mut()
            .expect("block layers are normalized");
        let (out, g, b) = norm.forward(tape, x)?;
        params.push((ParamId::Norm(l, NormParam::Gamma), g));
        params.push((ParamId::Norm(l, NormParam::Beta), b));
        Ok(out)
    }

    /// Quantized weight slice subnet `g` uses for `(stage, block, conv)`.
    pub fn effective_weight(
        &self,
        g: &Genotype,
        stage: usize,
        block: usize,
        conv: usize,
    ) -> Result<Tensor> {
        self.check_genotype(g)?;
        if block >= g.depths[stage] || conv >= 3 {
            return Err(QfaError::Parameter(format!(
                "layer ({stage},{block},{conv}) inactive in genotype"
            )));
        }
        let (offsets, lens) = self.slice_of(g, stage, block, conv);
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let l = self.layer_index(stage, block, conv);
        let v = self.weight_var(
            &mut tape,
            l,
            g.wbits[stage][block][conv],
            &offsets,
            &lens,
            &mut params,
        )?;
        Ok(tape.value(v).clone())
    }

    fn slice_of(
        &self,
        g: &Genotype,
        stage: usize,
        block: usize,
        conv: usize,
    ) -> (Vec<usize>, Vec<usize>) {
        let (cin, cout, _) = self.net.block_shape(stage, block);
        let mid = cin * g.expands[stage][block];
        let k = g.kernels[stage][block];
        let kmax = *self.space.kernel_options.last().expect("non-empty");
        let off = (kmax - k) / 2;
        match conv {
            0 => (vec![0, 0], vec![cin, mid]),
            1 => (vec![off, off, 0], vec![k, k, mid]),
            _ => (vec![0, 0], vec![mid, cout]),
        }
    }

    /// Records subnet `g` on `images` (`[B, H, W, C]`, resized to the
    /// genotype's resolution when needed) and returns the logits.
    ///
    /// A genotype whose conv layers are all 32-bit runs the full-precision
    /// network, classifier included; otherwise the classifier runs at
    /// `classifier_bits`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        g: &Genotype,
        images: &Tensor,
        mut probe: Option<Probe<'_>>,
    ) -> Result<SubnetOutput> {
        self.check_genotype(g)?;
        let s = images.shape();
        if s.len() != 4 || s[3] != self.net.in_channels {
            return Err(QfaError::Dimension(format!(
                "expected [B, H, W, {}] images, got {s:?}",
                self.net.in_channels
            )));
        }
        let res = self.space.resolution_options[g.resolution];
        let input = if s[1] == res && s[2] == res {
            images.clone()
        } else {
            resize_bilinear(images, res)?
        };
        let mut params = Vec::new();
        let x = tape.constant(input);
        let stem = tape.param(self.stem.clone());
        params.push((ParamId::Stem, stem));
        let h = tape.conv2d(x, stem, self.net.stem_stride)?;
        let (h, ng, nb) = self.stem_norm.forward(tape, h)?;
        params.push((ParamId::StemNorm(NormParam::Gamma), ng));
        params.push((ParamId::StemNorm(NormParam::Beta), nb));
        let mut h = tape.relu(h);
        for stage in 0..self.space.stages {
            for block in 0..g.depths[stage] {
                let (cin, cout, stride) = self.net.block_shape(stage, block);
                let base = self.layer_index(stage, block, 0);
                let wb = g.wbits[stage][block].clone();
                let ab = g.abits[stage][block].clone();
                let mid = cin * g.expands[stage][block];
                let skip = h;

                let [b, hh, ww] = dims3(tape.value(h));
                let a = self.act_var(tape, base, ab[0], h, &mut probe, &mut params)?;
                let (o, l) = self.slice_of(g, stage, block, 0);
                let w = self.weight_var(tape, base, wb[0], &o, &l, &mut params)?;
                let t = tape.reshape(a, &[b * hh * ww, cin])?;
                let t = tape.matmul(t, w)?;
                let t = tape.reshape(t, &[b, hh, ww, mid])?;
                let t = self.norm_var(tape, base, t, &mut params)?;
                let t = tape.relu(t);

                let a = self.act_var(tape, base + 1, ab[1], t, &mut probe, &mut params)?;
                let (o, l) = self.slice_of(g, stage, block, 1);
                let w = self.weight_var(tape, base + 1, wb[1], &o, &l, &mut params)?;
                let t = tape.depthwise_conv2d(a, w, stride)?;
                let t = self.norm_var(tape, base + 1, t, &mut params)?;
                let t = tape.relu(t);

                let [b, hh, ww] = dims3(tape.value(t));
                let a = self.act_var(tape, base + 2, ab[2], t, &mut probe, &mut params)?;
                let (o, l) = self.slice_of(g, stage, block, 2);
                let w = self.weight_var(tape, base + 2, wb[2], &o, &l, &mut params)?;
                let t = tape.reshape(a, &[b * hh * ww, mid])?;
                let t = tape.matmul(t, w)?;
                let t = tape.reshape(t, &[b, hh, ww, cout])?;
                let t = self.norm_var(tape, base + 2, t, &mut params)?;

                h = if stride == 1 && cin == cout {
                    tape.add(t, skip)?
                } else {
                    t
                };
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let cls = self.classifier_layer();
        let bits = if g.all_bits().all(Bitwidth::is_full) {
            Bitwidth::FULL
        } else {
            self.net.classifier_bits
        };
        let a = self.act_var(tape, cls, bits, pooled, &mut probe, &mut params)?;
        let full = self.layers[cls].weight.shape().to_vec();
        let w = self.weight_var(tape, cls, bits, &[0, 0], &full, &mut params)?;
        let logits = tape.matmul(a, w)?;
        let bias = tape.param(self.classifier_bias.clone());
        params.push((ParamId::ClassifierBias, bias));
        let logits = tape.add_row_bias(logits, bias)?;
        Ok(SubnetOutput { logits, params })
    }
}

fn dims3(t: &Tensor) -> [usize; 3] {
    let s = t.shape();
    [s[0], s[1], s[2]]
}

/// Bilinear resize of `[B, H, W, C]` images to `size × size` (half-pixel centers).
pub fn resize_bilinear(x: &Tensor, size: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || size == 0 {
        return Err(QfaError::Dimension(format!(
            "cannot resize {s:?} to {size}"
        )));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let src = x.data();
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = f.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, f - lo as f64)
            })
            .collect()
    };
    let ys = coords(size, h);
    let xs = coords(size, w);
    let mut out = vec![0.0; b * size * size * c];
    for bi in 0..b {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let px = |y: usize, xx: usize| ((bi * h + y) * w + xx) * c;
                let dst = ((bi * size + oy) * size + ox) * c;
                for ch in 0..c {
                    let top = src[px(y0, x0) + ch] * (1.0 - fx) + src[px(y0, x1) + ch] * fx;
                    let bot = src[px(y1, x0) + ch] * (1.0 - fx) + src[px(y1, x1) + ch] * fx;
                    out[dst + ch] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Tensor::new(vec![b, size, size, c], out)
}

#[cfg(test)]
mod tests {
    use super::super::{max_genotype, min_genotype, sample_with_bits};
    use super::*;

    fn net() -> Supernet {
        Supernet::new(SearchSpaceSpec::desk(), NetworkConfig::desk(), 3).unwrap()
    }

    fn images(b: usize, res: usize) -> Tensor {
        let mut r = rng::seeded(9);
        normal_tensor(&[b, res, res, 3], 1.0, &mut r)
    }

    #[test]
    fn logits_shape_depends_on_batch_only() {
        let mut s = net();
        s.install_quantizers(&[Bitwidth::B2, Bitwidth::B4], ActivationScheme::default())
            .unwrap();
        for g in [
            min_genotype(s.space()),
            max_genotype(s.space(), Bitwidth::B4),
        ] {
            let mut tape = Tape::new();
            let out = s.forward(&mut tape, &g, &images(3, 12), None).unwrap();
            assert_eq!(tape.value(out.logits).shape(), &[3, 10]);
        }
    }

    #[test]
    fn full_precision_matches_unquantized_network() {
        let plain = net();
        let mut quant = plain.clone();
        quant
            .install_quantizers(&[Bitwidth::B2, Bitwidth::B3], ActivationScheme::default())
            .unwrap();
        let g = max_genotype(plain.space(), Bitwidth::FULL);
        let x = images(2, 12);
        let mut t1 = Tape::new();
        let a = plain.clone().forward(&mut t1, &g, &x, None).unwrap();
        let mut t2 = Tape::new();
        let b = quant.forward(&mut t2, &g, &x, None).unwrap();
        assert_eq!(t1.value(a.logits).data(), t2.value(b.logits).data());
    }

    #[test]
    fn missing_quantizer_is_a_state_error() {
        let mut s = net();
        let g = min_genotype(s.space());
        let mut tape = Tape::new();
        assert!(matches!(
            s.forward(&mut tape, &g, &images(1, 8), None),
            Err(QfaError::State(_))
        ));
    }

    #[test]
    fn flops_table_formulas() {
        let n = NetworkConfig::desk();
        // 12 → stem stride 2 → 6; stage 0 block 0 halves to 3; stage 1 keeps 3.
        let q = LayerQuery::Block {
            stage: 0,
            block: 0,
            conv: 0,
            resolution: 12,
            kernel: 5,
            expand: 3,
        };
        assert_eq!(n.flops(&q).unwrap(), 2.0 * 36.0 * 8.0 * 24.0);
        let q = LayerQuery::Block {
            stage: 0,
            block: 0,
            conv: 1,
            resolution: 12,
            kernel: 5,
            expand: 3,
        };
        assert_eq!(n.flops(&q).unwrap(), 2.0 * 9.0 * 25.0 * 24.0);
        let q = LayerQuery::Block {
            stage: 1,
            block: 0,
            conv: 0,
            resolution: 12,
            kernel: 3,
            expand: 4,
        };
        assert_eq!(n.flops(&q).unwrap(), 2.0 * 9.0 * 8.0 * 32.0);
        let q = LayerQuery::Block {
            stage: 2,
            block: 0,
            conv: 2,
            resolution: 12,
            kernel: 3,
            expand: 4,
        };
        assert_eq!(n.flops(&q).unwrap(), 2.0 * 4.0 * 32.0 * 12.0);
        assert_eq!(
            n.flops(&LayerQuery::Stem { resolution: 12 }).unwrap(),
            2.0 * 36.0 * 9.0 * 24.0
        );
    }

    #[test]
    fn params_are_bound_and_grads_flow() {
        let mut s = net();
        s.install_quantizers(
            &[Bitwidth::B2, Bitwidth::B3, Bitwidth::B4],
            ActivationScheme::default(),
        )
        .unwrap();
        let mut r = rng::seeded(5);
        let g = sample_with_bits(
            s.space(),
            &[Bitwidth::B2, Bitwidth::B3, Bitwidth::B4],
            &mut r,
        );
        let mut tape = Tape::new();
        let out = s.forward(&mut tape, &g, &images(4, 8), None).unwrap();
        let loss = tape
            .softmax_cross_entropy(out.logits, &[0, 1, 2, 3])
            .unwrap();
        let grads = tape.backward(loss);
        s.accumulate_grads(&out.params, &grads).unwrap();
        assert!(s.stem.grad.is_some());
        let touched = s
            .params_mut()
            .into_iter()
            .filter(|(_, t)| t.grad.is_some())
            .count();
        assert!(touched > 10);
        // inactive block slots receive nothing
        let unused = s.layer_index(0, 3, 0);
        if g.depths[0] < 4 {
            assert!(s.layers[unused].weight.grad.is_none());
        }
    }

    #[test]
    fn resize_keeps_constants() {
        let x = Tensor::full(&[1, 12, 12, 2], 0.75);
        let y = resize_bilinear(&x, 8).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
        assert_eq!(resize_bilinear(&x, 12).unwrap(), x);
    }
}
