use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::engine::{Engine, Phase};
use crate::error::{QfaError, Result};
use crate::quant::{ActivationScheme, Estimator, DEFAULT_EMA_MOMENTUM};

/// Activation-quantizer variants compared by [`ablation_suite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// BatchQuant with channel-mean extremes and learnable residuals (reference).
    BqChannelMean,
    BqMinmax,
    BqMeanStd3,
    /// Channel-mean BatchQuant with γ and β frozen at 1 and 0.
    BqNoResiduals,
    EmaAffine,
    LearnedScale,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        Self::BqChannelMean,
        Self::BqMinmax,
        Self::BqMeanStd3,
        Self::BqNoResiduals,
        Self::EmaAffine,
        Self::LearnedScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::BqChannelMean => "bq_channel_mean",
            Self::BqMinmax => "bq_minmax",
            Self::BqMeanStd3 => "bq_mean_std3",
            Self::BqNoResiduals => "bq_no_residuals",
            Self::EmaAffine => "ema_affine",
            Self::LearnedScale => "learned_scale",
        }
    }

    pub fn scheme(self) -> ActivationScheme {
        let bq = |estimator, residuals| ActivationScheme::BatchQuant {
            estimator,
            residuals,
        };
        match self {
            Self::BqChannelMean => bq(Estimator::ChannelMeanMinmax, true),
            Self::BqMinmax => bq(Estimator::Minmax, true),
            Self::BqMeanStd3 => bq(Estimator::MeanStd3, true),
            Self::BqNoResiduals => bq(Estimator::ChannelMeanMinmax, false),
            Self::EmaAffine => ActivationScheme::EmaAffine {
                momentum: DEFAULT_EMA_MOMENTUM,
            },
            Self::LearnedScale => ActivationScheme::LearnedScale,
        }
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = QfaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
                QfaError::Parameter(format!("unknown variant {s:?}; expected one of {names:?}"))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seed: u64,
    pub diverged: bool,
    pub final_loss: f64,
    pub best_loss: f64,
    pub steps_run: usize,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains each variant for `steps` sandwich steps on stage-2 bitwidths,
/// starting from the same pretrained engine and data order.
pub fn ablation_suite(
    pretrained: &Engine,
    variants: &[AblationVariant],
    steps: usize,
    data: &Dataset,
) -> Result<AblationReport> {
    if !pretrained.progress.completed.contains(&Phase::Pretrain)
        || pretrained.supernet.has_quantizers()
    {
        return Err(QfaError::State(
            "ablations start from a pretrained, unquantized supernet".into(),
        ));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut engine = pretrained.clone();
        engine.config.activation = variant.scheme();
        engine.config.eval_each_epoch = false;
        let start = engine.log.steps.len();
        let bits = engine.config.stage2_bits.clone();
        engine.begin_phase_steps(Phase::Stage2, bits, steps)?;
        engine.run_phase(data, None)?;
        let log = engine.log.steps[start..].to_vec();
        let log = super::engine::TrainLog {
            diverged: log.iter().any(|s| s.diverged),
            steps: log,
            epochs: Vec::new(),
        };
        rows.push(AblationRow {
            variant,
            seed: engine.config.seed,
            diverged: log.diverged,
            final_loss: log.final_loss(),
            best_loss: log.best_loss(),
            steps_run: log.steps.len(),
            losses: log.steps.iter().map(|s| s.loss).collect(),
        });
    }
    Ok(AblationReport { rows })
}
