use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Labelled NHWC images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    /// Wraps externally loaded images (`[N, H, W, C]`) and labels.
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(QfaError::Dimension(format!(
                "need [N, H, W, C] images for {} labels, got {s:?}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(QfaError::Validation(format!(
                "label {bad} ≥ {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [h, w, c] = self.image_shape();
        let per = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(QfaError::Parameter(format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), h, w, c], data)?, labels))
    }

    /// Consecutive samples `[start, start + n)`, clipped to the dataset.
    pub fn range(&self, start: usize, n: usize) -> Result<(Tensor, Vec<usize>)> {
        let end = (start + n).min(self.len());
        let idx: Vec<usize> = (start.min(end)..end).collect();
        self.batch(&idx)
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.len() / batch_size.max(1)
    }
}

/// Shuffled sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::derived(seed, stream));
    idx
}

/// Synthetic classification task: each class is a Gaussian cluster around
/// a smooth random prototype image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDataConfig {
    pub classes: usize,
    pub resolution: usize,
    pub channels: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Per-pixel standard deviation around the prototype.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            resolution: 12,
            channels: 3,
            train_size: 512,
            test_size: 256,
            noise: 3.0,
            seed: 0,
        }
    }
}

/// Train and test splits drawn from the same class prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn toy_task(cfg: &ToyDataConfig) -> Result<ToyTask> {
    if cfg.classes < 2 || cfg.resolution == 0 || cfg.channels == 0 || cfg.train_size == 0 {
        return Err(QfaError::Parameter(
            "toy task needs ≥ 2 classes and positive resolution, channels and train_size".into(),
        ));
    }
    if !(cfg.noise >= 0.0) {
        return Err(QfaError::Parameter(format!(
            "noise must be ≥ 0, got {}",
            cfg.noise
        )));
    }
    let (r, c) = (cfg.resolution, cfg.channels);
    let mut proto_rng = rng::derived(cfg.seed, 0);
    let pos = Uniform::new(0.0, r as f64);
    let width = Uniform::new(0.15 * r as f64, 0.35 * r as f64);
    let amp = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let mut img = vec![0.0; r * r * c];
            for ch in 0..c {
                for _ in 0..2 {
                    let (cy, cx) = (pos.sample(&mut proto_rng), pos.sample(&mut proto_rng));
                    let s = width.sample(&mut proto_rng);
                    let a = 1.5 * amp.sample(&mut proto_rng);
                    for y in 0..r {
                        for x in 0..r {
                            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                            img[(y * r + x) * c + ch] += a * (-d2 / (2.0 * s * s)).exp();
                        }
                    }
                }
            }
            img
        })
        .collect();
    let split = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = rng::derived(cfg.seed, stream);
        let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite");
        let mut data = Vec::with_capacity(n * r * r * c);
        let labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
        for &l in &labels {
            data.extend(prototypes[l].iter().map(|p| {
                if cfg.noise > 0.0 {
                    p + noise.sample(&mut rng)
                } else {
                    *p
                }
            }));
        }
        Dataset::new(Tensor::new(vec![n, r, r, c], data)?, labels, cfg.classes)
    };
    Ok(ToyTask {
        train: split(cfg.train_size, 1)?,
        test: split(cfg.test_size.max(1), 2)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_balanced_and_deterministic() {
        let cfg = ToyDataConfig::default();
        let a = toy_task(&cfg).unwrap();
        assert_eq!(a, toy_task(&cfg).unwrap());
        for k in 0..cfg.classes {
            let n = a.train.labels().iter().filter(|&&l| l == k).count();
            assert!((51..=52).contains(&n));
        }
        assert_ne!(
            a.train.range(0, 1).unwrap().0,
            a.test.range(0, 1).unwrap().0
        );
    }

    #[test]
    fn batches_gather_rows() {
        let t = toy_task(&ToyDataConfig {
            train_size: 20,
            ..Default::default()
        })
        .unwrap();
        let (x, y) = t.train.batch(&[3, 7]).unwrap();
        assert_eq!(x.shape(), &[2, 12, 12, 3]);
        assert_eq!(y, vec![3, 7]);
        assert!(t.train.batch(&[20]).is_err());
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(50, 1, 2);
        assert_ne!(o, (0..50).collect::<Vec<_>>());
        o.sort_unstable();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }
}
