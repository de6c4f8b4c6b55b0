use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{epoch_order, Dataset};
use super::eval::{eval_batches, EvalResult};
use super::optim::{cosine_lr, Sgd};
use crate::error::{QfaError, Result};
use crate::quant::{ActivationScheme, Bitwidth, QuantMode};
use crate::rng;
use crate::supernet::{
    max_genotype, min_genotype_with_bits, sample_with_bits, Genotype, NetworkConfig,
    SearchSpaceSpec, Supernet,
};
use crate::tensor::{global_grad_norm_clip, Tape, Tensor};

const SAMPLE_STREAM: u64 = 0x5a4d_0001;
const ORDER_STREAM: u64 = 0x5a4d_0002;

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_bits: Vec<Bitwidth>,
    pub stage2_bits: Vec<Bitwidth>,
    /// Random subnets per step, on top of the smallest and largest.
    pub subnets_per_step: usize,
    /// Adds the smallest and largest subnet to every step.
    pub sandwich: bool,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub activation: ActivationScheme,
    /// A loss above `divergence_factor ×` the phase's first loss counts as divergence.
    pub divergence_factor: f64,
    /// Evaluate the smallest and largest subnet after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 10,
            stage1_epochs: 4,
            stage2_epochs: 8,
            stage1_bits: vec![Bitwidth::B2, Bitwidth::B3, Bitwidth::B4, Bitwidth::FULL],
            stage2_bits: vec![Bitwidth::B2, Bitwidth::B3, Bitwidth::B4],
            subnets_per_step: 4,
            sandwich: true,
            lr: 0.08,
            momentum: 0.9,
            grad_clip: 500.0,
            batch_size: 16,
            seed: 0,
            activation: ActivationScheme::default(),
            divergence_factor: 1e4,
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    /// Values of the original ImageNet-scale schedule, for reference.
    pub fn paper_faithful() -> Self {
        Self {
            stage1_epochs: 65,
            stage2_epochs: 125,
            batch_size: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(QfaError::Validation(m));
        if self.stage1_bits.is_empty() || self.stage2_bits.is_empty() {
            return fail("bit sets must be non-empty".into());
        }
        if self.stage1_epochs > 0
            && self.stage2_epochs > 0
            && !self
                .stage2_bits
                .iter()
                .all(|b| self.stage1_bits.contains(b))
        {
            return fail("stage2_bits must be a subset of stage1_bits".into());
        }
        if self.subnets_per_step == 0 {
            return fail("subnets_per_step must be at least 1".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.grad_clip > 0.0) {
            return fail("need lr > 0, momentum in [0,1) and grad_clip > 0".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.divergence_factor > 1.0) {
            return fail("divergence_factor must exceed 1".into());
        }
        Ok(())
    }
}

/// Training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Stage1,
    Stage2,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Stage1 => "stage1",
            Self::Stage2 => "stage2",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// Serializes non-finite values as strings so logs of diverged runs survive JSON.
mod any_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    #[serde(with = "any_f64")]
    pub loss: f64,
    /// Global gradient norm before clipping.
    #[serde(with = "any_f64")]
    pub grad_norm: f64,
    #[serde(with = "any_f64")]
    pub clipped_norm: f64,
    pub lr: f64,
    pub subnets: usize,
    /// Distinct bitwidths used by the sampled subnets.
    pub bits_seen: Vec<Bitwidth>,
    pub diverged: bool,
}

/// Smallest / largest subnet metrics after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    #[serde(with = "any_f64")]
    pub min_loss: f64,
    pub min_accuracy: f64,
    #[serde(with = "any_f64")]
    pub max_loss: f64,
    pub max_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub diverged: bool,
}

impl TrainLog {
    /// Records belonging to `phases`.
    pub fn filter(&self, phases: &[Phase]) -> TrainLog {
        let steps: Vec<StepRecord> = self
            .steps
            .iter()
            .filter(|s| phases.contains(&s.phase))
            .cloned()
            .collect();
        TrainLog {
            diverged: steps.iter().any(|s| s.diverged),
            epochs: self
                .epochs
                .iter()
                .filter(|e| phases.contains(&e.phase))
                .cloned()
                .collect(),
            steps,
        }
    }

    /// Mean loss over the last tenth of the steps (at least one);
    /// infinite after divergence, NaN when empty.
    pub fn final_loss(&self) -> f64 {
        if self.diverged {
            return f64::INFINITY;
        }
        let n = self.steps.len();
        if n == 0 {
            return f64::NAN;
        }
        let k = (n / 10).max(1);
        self.steps[n - k..].iter().map(|s| s.loss).sum::<f64>() / k as f64
    }

    pub fn best_loss(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.loss)
            .filter(|l| l.is_finite())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Position in the training schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Option<Phase>,
    pub bits: Vec<Bitwidth>,
    pub phase_step: usize,
    pub phase_steps: usize,
    pub global_step: usize,
    pub completed: Vec<Phase>,
    pub initial_loss: Option<f64>,
    pub diverged: bool,
}

/// Supernet, optimizer and schedule state.
#[derive(Clone, Debug, PartialEq)]
pub struct Engine {
    pub supernet: Supernet,
    pub config: TrainConfig,
    pub optimizer: Sgd,
    pub progress: Progress,
    pub log: TrainLog,
    /// Forward/backward passes run so far.
    pub forward_passes: u64,
}

impl Engine {
    pub fn new(supernet: Supernet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.momentum);
        Ok(Self {
            supernet,
            config,
            optimizer,
            progress: Progress::default(),
            log: TrainLog::default(),
            forward_passes: 0,
        })
    }

    /// Fresh full-precision supernet.
    pub fn fresh(space: SearchSpaceSpec, net: NetworkConfig, config: TrainConfig) -> Result<Self> {
        let supernet = Supernet::new(space, net, config.seed)?;
        Self::new(supernet, config)
    }

    pub fn phase_bits(&self, phase: Phase) -> Vec<Bitwidth> {
        match phase {
            Phase::Pretrain => vec![Bitwidth::FULL],
            Phase::Stage1 => self.config.stage1_bits.clone(),
            Phase::Stage2 => self.config.stage2_bits.clone(),
        }
    }

    /// Starts `phase` with an explicit step budget and its own cosine schedule.
    pub fn begin_phase_steps(
        &mut self,
        phase: Phase,
        bits: Vec<Bitwidth>,
        steps: usize,
    ) -> Result<()> {
        if bits.is_empty() {
            return Err(QfaError::Validation(
                "phase needs at least one bitwidth".into(),
            ));
        }
        if bits.iter().any(|b| !b.is_full()) {
            self.supernet
                .install_quantizers(&bits, self.config.activation)?;
        }
        self.progress.phase = Some(phase);
        self.progress.bits = bits;
        self.progress.phase_step = 0;
        self.progress.phase_steps = steps;
        self.progress.initial_loss = None;
        Ok(())
    }

    /// Starts `phase` for `epochs` passes over `data`.
    pub fn begin_phase(&mut self, phase: Phase, epochs: usize, data: &Dataset) -> Result<()> {
        let steps = epochs * data.steps_per_epoch(self.config.batch_size);
        self.begin_phase_steps(phase, self.phase_bits(phase), steps)
    }

    pub fn sample_genotypes(&self) -> Vec<Genotype> {
        let space = self.supernet.space();
        let bits = &self.progress.bits;
        let mut r = rng::derived(
            self.config.seed ^ SAMPLE_STREAM,
            self.progress.global_step as u64,
        );
        let mut out: Vec<Genotype> = (0..self.config.subnets_per_step)
            .map(|_| sample_with_bits(space, bits, &mut r))
            .collect();
        if self.config.sandwich {
            let lowest = *bits.iter().min().expect("non-empty");
            out.push(min_genotype_with_bits(space, lowest));
            let b = *bits.choose(&mut r).expect("non-empty");
            out.push(max_genotype(space, b));
        }
        out
    }

    /// One sandwich update on `(images, labels)`: gradients of every sampled
    /// subnet are averaged, clipped by global norm, and applied once.
    pub fn sandwich_step(&mut self, images: &Tensor, labels: &[usize]) -> Result<StepRecord> {
        let phase = self
            .progress
            .phase
            .ok_or_else(|| QfaError::State("no training phase started".into()))?;
        if labels.is_empty() {
            return Err(QfaError::Parameter("empty batch".into()));
        }
        let genotypes = self.sample_genotypes();
        let n = genotypes.len();
        let lr = cosine_lr(
            self.config.lr,
            self.progress.phase_step,
            self.progress.phase_steps,
        );
        self.supernet.set_mode(QuantMode::Train);
        self.supernet.zero_grads();
        let mut loss_sum = 0.0;
        for g in &genotypes {
            let mut tape = Tape::new();
            let out = self.supernet.forward(&mut tape, g, images, None)?;
            let loss = tape.softmax_cross_entropy(out.logits, labels)?;
            loss_sum += tape.value(loss).item();
            let scaled = tape.scale(loss, 1.0 / n as f64);
            let grads = tape.backward(scaled);
            self.supernet.accumulate_grads(&out.params, &grads)?;
            self.forward_passes += 1;
        }
        let loss = loss_sum / n as f64;
        let mut params: Vec<&mut Tensor> = self
            .supernet
            .params_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let grad_norm = global_grad_norm_clip(&mut params, self.config.grad_clip);
        let clipped_norm = params
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let initial = *self.progress.initial_loss.get_or_insert(loss);
        let mut diverged = !loss.is_finite()
            || !grad_norm.is_finite()
            || loss > self.config.divergence_factor * initial;
        if !diverged {
            self.optimizer.step(&mut self.supernet, lr);
            diverged = self
                .supernet
                .params_mut()
                .iter()
                .any(|(_, t)| !t.all_finite());
        } else {
            self.supernet.zero_grads();
        }
        let mut bits_seen: Vec<Bitwidth> = genotypes.iter().flat_map(|g| g.all_bits()).collect();
        bits_seen.sort_unstable();
        bits_seen.dedup();
        let rec = StepRecord {
            step: self.progress.global_step,
            phase,
            loss,
            grad_norm,
            clipped_norm,
            lr,
            subnets: n,
            bits_seen,
            diverged,
        };
        self.progress.global_step += 1;
        self.progress.phase_step += 1;
        if diverged {
            self.progress.diverged = true;
            self.log.diverged = true;
        }
        self.log.steps.push(rec.clone());
        Ok(rec)
    }

    /// Runs the next scheduled step; `None` when the phase is over or diverged.
    pub fn step(&mut self, data: &Dataset) -> Result<Option<StepRecord>> {
        let Some(phase) = self.progress.phase else {
            return Ok(None);
        };
        if self.progress.diverged || self.progress.phase_step >= self.progress.phase_steps {
            return Ok(None);
        }
        let bs = self.config.batch_size;
        let spe = data.steps_per_epoch(bs);
        if spe == 0 {
            return Err(QfaError::Parameter(format!(
                "dataset of {} samples is smaller than batch_size {bs}",
                data.len()
            )));
        }
        let epoch = self.progress.phase_step / spe;
        let within = self.progress.phase_step % spe;
        let stream = (phase.index() << 32) | epoch as u64;
        let order = epoch_order(data.len(), self.config.seed ^ ORDER_STREAM, stream);
        let (x, y) = data.batch(&order[within * bs..(within + 1) * bs])?;
        self.sandwich_step(&x, &y).map(Some)
    }

    /// Runs the current phase to completion (or divergence).
    pub fn run_phase(&mut self, data: &Dataset, eval: Option<&Dataset>) -> Result<()> {
        let phase = self
            .progress
            .phase
            .ok_or_else(|| QfaError::State("no training phase started".into()))?;
        let spe = data.steps_per_epoch(self.config.batch_size).max(1);
        while self.step(data)?.is_some() {
            if self.progress.phase_step.is_multiple_of(spe) && self.config.eval_each_epoch {
                if let Some(eval) = eval {
                    let rec = self.epoch_eval(phase, self.progress.phase_step / spe - 1, eval)?;
                    self.log.epochs.push(rec);
                }
            }
        }
        if !self.progress.diverged {
            self.progress.completed.push(phase);
        }
        self.progress.phase = None;
        Ok(())
    }

    fn epoch_eval(&self, phase: Phase, epoch: usize, data: &Dataset) -> Result<EpochRecord> {
        let bits = self.phase_bits(phase);
        let lowest = *bits.iter().min().expect("non-empty");
        let highest = bits
            .iter()
            .copied()
            .filter(|b| !b.is_full())
            .max()
            .unwrap_or(Bitwidth::FULL);
        let space = self.supernet.space();
        let mut net = self.supernet.clone();
        net.set_mode(QuantMode::Train);
        let n = data.len().min(256);
        let small: EvalResult = eval_batches(
            &mut net,
            &min_genotype_with_bits(space, lowest),
            data,
            n,
            64,
        )?;
        let large: EvalResult = eval_batches(&mut net, &max_genotype(space, highest), data, n, 64)?;
        Ok(EpochRecord {
            phase,
            epoch,
            min_loss: small.loss,
            min_accuracy: small.accuracy,
            max_loss: large.loss,
            max_accuracy: large.accuracy,
        })
    }

    /// Pretraining without quantizers.
    pub fn pretrain(&mut self, data: &Dataset, eval: Option<&Dataset>) -> Result<()> {
        self.begin_phase(Phase::Pretrain, self.config.pretrain_epochs, data)?;
        self.run_phase(data, eval)
    }

    fn require_pretrained(&self) -> Result<()> {
        if !self.progress.completed.contains(&Phase::Pretrain) {
            return Err(QfaError::State(
                "quantization-aware training needs a pretrained supernet".into(),
            ));
        }
        Ok(())
    }

    /// Stage 1 on `stage1_bits`, then stage 2 on `stage2_bits`; `boundary`
    /// receives the engine between the two. Returns the log of both stages.
    pub fn run_two_stage(
        &mut self,
        data: &Dataset,
        eval: Option<&Dataset>,
        mut boundary: Option<&mut dyn FnMut(&Engine) -> Result<()>>,
    ) -> Result<TrainLog> {
        self.require_pretrained()?;
        let start = self.log.steps.len();
        let start_epochs = self.log.epochs.len();
        if self.config.stage1_epochs > 0 {
            self.begin_phase(Phase::Stage1, self.config.stage1_epochs, data)?;
            self.run_phase(data, eval)?;
        }
        if let Some(cb) = boundary.as_mut() {
            cb(self)?;
        }
        if self.config.stage2_epochs > 0 && !self.progress.diverged {
            self.begin_phase(Phase::Stage2, self.config.stage2_epochs, data)?;
            self.run_phase(data, eval)?;
        }
        Ok(self.log_since(start, start_epochs))
    }

    /// Stage-2 bitwidths only, for `stage1_epochs + stage2_epochs` epochs.
    pub fn run_single_stage(&mut self, data: &Dataset, eval: Option<&Dataset>) -> Result<TrainLog> {
        self.require_pretrained()?;
        let start = self.log.steps.len();
        let start_epochs = self.log.epochs.len();
        let epochs = self.config.stage1_epochs + self.config.stage2_epochs;
        if epochs > 0 {
            self.begin_phase(Phase::Stage2, epochs, data)?;
            self.run_phase(data, eval)?;
        }
        Ok(self.log_since(start, start_epochs))
    }

    fn log_since(&self, steps: usize, epochs: usize) -> TrainLog {
        let steps = self.log.steps[steps..].to_vec();
        TrainLog {
            diverged: steps.iter().any(|s| s.diverged),
            steps,
            epochs: self.log.epochs[epochs..].to_vec(),
        }
    }
}
