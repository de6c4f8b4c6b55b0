//! Quantization-aware training of the weight-sharing supernet.

mod ablation;
mod checkpoint;
mod data;
mod engine;
mod eval;
mod optim;
mod probe;

pub use ablation::{ablation_suite, AblationReport, AblationRow, AblationVariant};
pub use checkpoint::{TensorEntry, CHECKPOINT_VERSION};
pub use data::{epoch_order, toy_task, Dataset, ToyDataConfig, ToyTask};
pub use engine::{Engine, EpochRecord, Phase, Progress, StepRecord, TrainConfig, TrainLog};
pub use eval::{calibrate_subnet, eval_batches, eval_subnet, EvalResult};
pub use optim::{cosine_lr, Sgd};
pub use probe::{activation_maxima, ProbeSampling};
