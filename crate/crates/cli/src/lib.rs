//! Command-line driver: space counting, extreme-value analysis, supernet
//! training, calibration, evaluation, predictor fitting, search and
//! ablations. Every run writes `manifest.json` next to its artifacts.

pub mod commands;
pub mod config;
pub mod demo;
pub mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use qfa_core::qat::{AblationVariant, Engine};
use qfa_core::quant::Bitwidth;
use qfa_core::supernet::Supernet;
use serde::Serialize;

use config::{RunConfig, SpaceKind};
use manifest::Recorder;

#[derive(Debug, Parser)]
#[command(
    name = "qfa",
    version,
    about = "Quantized supernet training and mixed-precision search"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; falls back to the config file, then QFA_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: qfa-runs/<command>].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact size of the search space.
    CountSpace {
        #[arg(long, value_enum, default_value = "paper")]
        space: SpaceKind,
    },
    /// Extreme-value analyses of batch activation maxima.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Full-precision supernet pretraining.
    Pretrain(TrainArgs),
    /// Quantization-aware training from a pretrained checkpoint.
    Train {
        /// Pretrained checkpoint; pretrains first when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// One stage on the stage-2 bitwidths for the combined epoch budget.
        #[arg(long)]
        single_stage: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Accumulates quantizer and norm statistics for one subnet.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `min`, `max`, `min:<bits>`, `max:<bits>`, `@file` or JSON.
        #[arg(long)]
        genotype: String,
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Test accuracy of a calibrated subnet.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        genotype: String,
    },
    /// Calibrates and evaluates random subnets for predictor training.
    CollectPredictorData {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subnets: Option<usize>,
    },
    /// Fits the accuracy predictor on collected subnet measurements.
    TrainPredictor {
        /// JSON-lines file from collect-predictor-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// NSGA-II over accuracy and effective FLOPs.
    Search {
        /// Predictor JSON; a capacity heuristic stands in when absent.
        #[arg(long)]
        predictor: Option<PathBuf>,
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        generations: Option<usize>,
    },
    /// Activation-quantizer stability comparison from a pretrained checkpoint.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<AblationVariant>>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Pretrain, train, collect, fit the predictor and search in one go.
    Demo,
}

#[derive(Debug, Subcommand)]
pub enum Analyze {
    /// Expected maximum of N exponential samples, analytic and simulated.
    ExtremeValue {
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<u64>>,
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Batch maxima of layer inputs under fixed and random subnets.
    ActivationMax {
        /// Supernet checkpoint; a freshly initialized one when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Layer indices [default: the depthwise conv of stage 2 and the first conv of stage 3].
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long, default_value = "32")]
        bits: Bitwidth,
        #[arg(long)]
        batches: Option<usize>,
    },
}

/// Flags mirroring [`qfa_core::qat::TrainConfig`].
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    /// Stage-2 bitwidths, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub bits: Option<Vec<Bitwidth>>,
    #[arg(long, value_delimiter = ',')]
    pub stage1_bits: Option<Vec<Bitwidth>>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub subnets_per_step: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        macro_rules! set {
            ($($f:ident => $dst:expr),*) => { $( if let Some(v) = self.$f.clone() { $dst = v; } )* };
        }
        set!(
            pretrain_epochs => t.pretrain_epochs,
            stage1_epochs => t.stage1_epochs,
            stage2_epochs => t.stage2_epochs,
            bits => t.stage2_bits,
            stage1_bits => t.stage1_bits,
            lr => t.lr,
            momentum => t.momentum,
            grad_clip => t.grad_clip,
            batch_size => t.batch_size,
            subnets_per_step => t.subnets_per_step
        );
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::CountSpace { .. } => "count-space",
            Self::Analyze(Analyze::ExtremeValue { .. }) => "analyze-extreme-value",
            Self::Analyze(Analyze::ActivationMax { .. }) => "analyze-activation-max",
            Self::Pretrain(_) => "pretrain",
            Self::Train { .. } => "train",
            Self::Calibrate { .. } => "calibrate",
            Self::Eval { .. } => "eval",
            Self::CollectPredictorData { .. } => "collect-predictor-data",
            Self::TrainPredictor { .. } => "train-predictor",
            Self::Search { .. } => "search",
            Self::Ablate { .. } => "ablate",
            Self::Demo => "demo",
        }
    }

    /// Folds subcommand flags into the config.
    fn apply(&self, cfg: &mut RunConfig) {
        match self {
            Self::Analyze(Analyze::ExtremeValue {
                lambda,
                sizes,
                trials,
            }) => {
                let a = &mut cfg.analysis;
                if let Some(v) = lambda {
                    a.lambda = *v;
                }
                if let Some(v) = sizes {
                    a.sizes = v.clone();
                }
                if let Some(v) = trials {
                    a.trials = *v;
                }
            }
            Self::Analyze(Analyze::ActivationMax {
                batches: Some(b), ..
            }) => cfg.analysis.probe_batches = *b,
            Self::Pretrain(t) | Self::Train { train: t, .. } => t.apply(cfg),
            Self::Calibrate {
                batches: Some(b), ..
            } => cfg.calibration.batches = *b,
            Self::CollectPredictorData {
                subnets: Some(n), ..
            } => cfg.collect.subnets = *n,
            Self::TrainPredictor {
                epochs: Some(e), ..
            } => cfg.predictor.epochs = *e,
            Self::Search {
                population,
                generations,
                ..
            } => {
                if let Some(p) = population {
                    cfg.search.population = *p;
                }
                if let Some(g) = generations {
                    cfg.search.generations = *g;
                }
            }
            Self::Ablate {
                variants, steps, ..
            } => {
                if let Some(v) = variants {
                    cfg.ablation.variants = v.clone();
                }
                if let Some(s) = steps {
                    cfg.ablation.steps = *s;
                }
            }
            _ => {}
        }
    }

    /// Options recorded in the manifest beyond the resolved config.
    fn options(&self) -> serde_json::Value {
        use serde_json::json;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        match self {
            Self::CountSpace { space } => json!({ "space": space }),
            Self::Analyze(Analyze::ActivationMax {
                checkpoint,
                layers,
                bits,
                ..
            }) => {
                json!({ "checkpoint": path(checkpoint), "layers": layers, "bits": bits })
            }
            Self::Train {
                checkpoint,
                single_stage,
                ..
            } => {
                json!({ "checkpoint": path(checkpoint), "single_stage": single_stage })
            }
            Self::Calibrate { genotype, .. } | Self::Eval { genotype, .. } => {
                json!({ "genotype": genotype })
            }
            _ => json!({}),
        }
    }
}

/// Parses `argv` and runs it. Returns the process exit code: 0 on success,
/// 2 for usage errors, 1 for anything that fails after parsing.
pub fn dispatch<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{text}")
            } else {
                write!(stdout, "{text}")
            };
            return e.exit_code();
        }
    };
    match run(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            1
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    cli.command.apply(&mut cfg);
    let cfg = cfg.finish()?;
    let name = cli.command.name();
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| Path::new("qfa-runs").join(name));
    if let Command::Demo = cli.command {
        let summary = demo::pipeline_demo(&cfg, &dir, out)?;
        writeln!(
            out,
            "pareto front: {} subnets, {:.4} to {:.4} effective MFLOPs, written to {}",
            summary.front_size,
            summary.mflops_range.0,
            summary.mflops_range.1,
            summary.pareto_csv.display()
        )?;
        return Ok(());
    }
    let mut rec = Recorder::new(name, &dir, &dir, cli.command.options())?;
    match &cli.command {
        Command::CountSpace { space } => {
            commands::count_space(&space.spec(), &mut rec, out)?;
        }
        Command::Analyze(Analyze::ExtremeValue { .. }) => {
            commands::extreme_value(&cfg, &mut rec, out)?;
        }
        Command::Analyze(Analyze::ActivationMax {
            checkpoint,
            layers,
            bits,
            ..
        }) => {
            let mut net = match checkpoint {
                Some(p) => {
                    rec.input(p);
                    commands::load_engine(p)?.supernet
                }
                None => Supernet::new(cfg.spec(), cfg.net.clone(), cfg.seed)?,
            };
            let layers = layers
                .clone()
                .unwrap_or_else(|| vec![net.layer_index(2, 0, 1), net.layer_index(3, 0, 0)]);
            commands::activation_max(&cfg, &mut rec, &mut net, &layers, *bits, out)?;
        }
        Command::Pretrain(_) => {
            commands::pretrain(&cfg, &mut rec, out)?;
        }
        Command::Train {
            checkpoint,
            single_stage,
            ..
        } => {
            let engine = match checkpoint {
                Some(p) => {
                    rec.input(p);
                    commands::load_engine(p)?
                }
                None => {
                    let task = commands::data(&cfg)?;
                    let mut e = Engine::fresh(cfg.spec(), cfg.net.clone(), cfg.train.clone())?;
                    e.pretrain(&task.train, Some(&task.test))?;
                    e
                }
            };
            commands::train(&cfg, &mut rec, engine, *single_stage, out)?;
        }
        Command::Calibrate {
            checkpoint,
            genotype,
            ..
        } => {
            rec.input(checkpoint);
            let g = commands::parse_genotype(genotype, &cfg)?;
            commands::calibrate(&cfg, &mut rec, commands::load_engine(checkpoint)?, &g, out)?;
        }
        Command::Eval {
            checkpoint,
            genotype,
        } => {
            rec.input(checkpoint);
            let g = commands::parse_genotype(genotype, &cfg)?;
            commands::eval(&cfg, &mut rec, commands::load_engine(checkpoint)?, &g, out)?;
        }
        Command::CollectPredictorData { checkpoint, .. } => {
            rec.input(checkpoint);
            commands::collect(&cfg, &mut rec, commands::load_engine(checkpoint)?, out)?;
        }
        Command::TrainPredictor { data, .. } => {
            rec.input(data);
            let samples = commands::load_samples(data)?;
            commands::fit_predictor(&cfg, &mut rec, &samples, out)?;
        }
        Command::Search { predictor, .. } => {
            let p = match predictor {
                Some(path) => {
                    rec.input(path);
                    Some(commands::load_predictor(path)?)
                }
                None => None,
            };
            commands::search(&cfg, &mut rec, p.as_ref(), out)?;
        }
        Command::Ablate { checkpoint, .. } => {
            rec.input(checkpoint);
            commands::ablate(&cfg, &mut rec, &commands::load_engine(checkpoint)?, out)?;
        }
        Command::Demo => unreachable!("handled above"),
    }
    rec.finish(&cfg)?;
    Ok(())
}
