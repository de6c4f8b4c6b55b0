//! Binary container: the 8-byte magic `QFACKPT1`, the manifest length as a
//! little-endian `u64`, the JSON manifest, then the raw little-endian `f64`
//! payload. Manifest entries locate every tensor by byte offset and element
//! count within the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::engine::{Engine, Progress, TrainConfig, TrainLog};
use super::optim::Sgd;
use crate::error::{QfaError, Result};
use crate::quant::ActivationScheme;
use crate::supernet::{
    ElasticLayer, ElasticNorm, LayerQuantizers, NetworkConfig, NormParam, NormStats, ParamId,
    SearchSpaceSpec, Supernet,
};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"QFACKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    space: SearchSpaceSpec,
    net: NetworkConfig,
    scheme: Option<ActivationScheme>,
    config: TrainConfig,
    progress: Progress,
    log: TrainLog,
    forward_passes: u64,
    tensors: Vec<TensorEntry>,
    quantizers: Vec<LayerQuantizers>,
    stem_norm: NormStats,
    norms: Vec<Option<NormStats>>,
    momentum: Vec<TensorEntry>,
}

struct Payload(Vec<u8>);

impl Payload {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f64]) -> TensorEntry {
        let offset = self.0.len();
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        TensorEntry {
            name,
            shape,
            dtype: "f64".into(),
            offset,
            len: data.len(),
        }
    }
}

fn read_entry(payload: &[u8], e: &TensorEntry) -> Result<Vec<f64>> {
    if e.dtype != "f64" {
        return Err(QfaError::Format(format!(
            "tensor {} has unsupported dtype {}",
            e.name, e.dtype
        )));
    }
    let end = e
        .len
        .checked_mul(8)
        .and_then(|n| n.checked_add(e.offset))
        .filter(|&end| end <= payload.len())
        .ok_or_else(|| QfaError::Format(format!("tensor {} runs past the payload", e.name)))?;
    Ok(payload[e.offset..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn tensor_from(payload: &[u8], e: &TensorEntry) -> Result<Tensor> {
    Ok(Tensor::new(e.shape.clone(), read_entry(payload, e)?)?.with_grad())
}

impl Engine {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = &self.supernet;
        let mut payload = Payload(Vec::new());
        let mut tensors = Vec::new();
        let mut push = |id: ParamId, t: &Tensor| {
            tensors.push(payload.push(id.name(), t.shape().to_vec(), t.data()))
        };
        push(ParamId::Stem, &net.stem);
        push(ParamId::StemNorm(NormParam::Gamma), &net.stem_norm.gamma);
        push(ParamId::StemNorm(NormParam::Beta), &net.stem_norm.beta);
        for (l, layer) in net.layers.iter().enumerate() {
            push(ParamId::Weight(l), &layer.weight);
            if let Some(n) = &layer.norm {
                push(ParamId::Norm(l, NormParam::Gamma), &n.gamma);
                push(ParamId::Norm(l, NormParam::Beta), &n.beta);
            }
        }
        push(ParamId::ClassifierBias, &net.classifier_bias);
        let momentum = self
            .optimizer
            .buffers
            .iter()
            .map(|(id, v)| payload.push(id.name(), vec![v.len()], v))
            .collect();
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            space: net.space().clone(),
            net: net.net().clone(),
            scheme: net.scheme(),
            config: self.config.clone(),
            progress: self.progress.clone(),
            log: self.log.clone(),
            forward_passes: self.forward_passes,
            tensors,
            quantizers: net.layers.iter().map(|l| l.quantizers.clone()).collect(),
            stem_norm: net.stem_norm.stats.clone(),
            norms: net
                .layers
                .iter()
                .map(|l| l.norm.as_ref().map(|n| n.stats.clone()))
                .collect(),
            momentum,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.0.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload.0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(QfaError::Format("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| QfaError::Format("truncated checkpoint manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..json_end])?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(QfaError::Format(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        let payload = &bytes[json_end..];
        let mut by_name: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
        for e in &manifest.tensors {
            by_name.insert(e.name.as_str(), e);
        }
        let get = |name: String| -> Result<Tensor> {
            let e = by_name
                .get(name.as_str())
                .ok_or_else(|| QfaError::Format(format!("checkpoint lacks tensor {name}")))?;
            tensor_from(payload, e)
        };
        let norm = |gamma: ParamId, beta: ParamId, stats: &NormStats| -> Result<ElasticNorm> {
            let n = ElasticNorm {
                gamma: get(gamma.name())?,
                beta: get(beta.name())?,
                stats: stats.clone(),
            };
            let c = n.channels();
            if n.beta.numel() != c
                || [n.stats.mean.len(), n.stats.var.len(), n.stats.counts.len()] != [c; 3]
            {
                return Err(QfaError::Format(format!(
                    "inconsistent normalization for {}",
                    gamma.name()
                )));
            }
            Ok(n)
        };
        if manifest.norms.len() != manifest.quantizers.len() {
            return Err(QfaError::Format(
                "layer count mismatch in checkpoint".into(),
            ));
        }
        let stem = get(ParamId::Stem.name())?;
        let stem_norm = norm(
            ParamId::StemNorm(NormParam::Gamma),
            ParamId::StemNorm(NormParam::Beta),
            &manifest.stem_norm,
        )?;
        let mut layers = Vec::with_capacity(manifest.quantizers.len());
        for (l, (q, stats)) in manifest.quantizers.iter().zip(&manifest.norms).enumerate() {
            let norm = match stats {
                Some(s) => Some(norm(
                    ParamId::Norm(l, NormParam::Gamma),
                    ParamId::Norm(l, NormParam::Beta),
                    s,
                )?),
                None => None,
            };
            layers.push(ElasticLayer {
                weight: get(ParamId::Weight(l).name())?,
                quantizers: q.clone(),
                norm,
            });
        }
        let bias = get(ParamId::ClassifierBias.name())?;
        let mut supernet = Supernet::from_parts(
            manifest.space,
            manifest.net,
            stem,
            stem_norm,
            layers,
            bias,
            manifest.scheme,
        )?;
        let ids: BTreeMap<String, ParamId> = supernet
            .params_mut()
            .into_iter()
            .map(|(id, _)| (id.name(), id))
            .collect();
        let mut optimizer = Sgd::new(manifest.config.momentum);
        for e in &manifest.momentum {
            let id = ids.get(&e.name).ok_or_else(|| {
                QfaError::Format(format!("momentum for unknown parameter {}", e.name))
            })?;
            optimizer.buffers.insert(*id, read_entry(payload, e)?);
        }
        Ok(Engine {
            supernet,
            config: manifest.config,
            optimizer,
            progress: manifest.progress,
            log: manifest.log,
            forward_passes: manifest.forward_passes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
