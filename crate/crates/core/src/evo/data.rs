use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::qat::{calibrate_subnet, eval_subnet, Dataset};
use crate::quant::Bitwidth;
use crate::rng;
use crate::supernet::{sample_with_bits, Genotype, Supernet};

/// One line of the predictor dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorSample {
    pub genotype: Genotype,
    pub accuracy: f64,
}

pub fn write_jsonl<W: Write>(mut w: W, samples: &[PredictorSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Blank lines are skipped; any other malformed line is a format error
/// naming its line number.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<PredictorSample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line)
            .map_err(|e| QfaError::Format(format!("predictor data line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, samples: &[PredictorSample]) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, samples)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<PredictorSample>> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub subnets: usize,
    pub calib_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            subnets: 512,
            calib_batches: 4,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Samples distinct subnets with bitwidths from `bits`, calibrates each on
/// `calib` and measures its accuracy on `eval`.
pub fn collect_predictor_data(
    net: &mut Supernet,
    bits: &[Bitwidth],
    calib: &Dataset,
    eval: &Dataset,
    cfg: &CollectConfig,
) -> Result<Vec<PredictorSample>> {
    if bits.is_empty() {
        return Err(QfaError::Parameter("no bitwidths to sample from".into()));
    }
    let mut r = rng::seeded(cfg.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cfg.subnets);
    let mut attempts = 0;
    while out.len() < cfg.subnets && attempts < 20 * cfg.subnets.max(1) {
        attempts += 1;
        let g = sample_with_bits(net.space(), bits, &mut r);
        if !seen.insert(g.clone()) {
            continue;
        }
        calibrate_subnet(net, &g, calib, cfg.calib_batches, cfg.batch_size)?;
        let res = eval_subnet(net, &g, eval, cfg.batch_size)?;
        out.push(PredictorSample {
            genotype: g,
            accuracy: res.accuracy,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::{sample_uniform, SearchSpaceSpec};

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let spec = SearchSpaceSpec::desk();
        let mut r = rng::seeded(1);
        let samples: Vec<PredictorSample> = (0..3)
            .map(|i| PredictorSample {
                genotype: sample_uniform(&spec, &mut r),
                accuracy: 0.1 * i as f64 + 0.123456789,
            })
            .collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &samples).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(
            read_jsonl(format!("{text}\n\n").as_bytes()).unwrap(),
            samples
        );
        let err = read_jsonl("{\"genotype\": 1}\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
