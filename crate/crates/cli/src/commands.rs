use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use num_bigint::BigUint;
use qfa_core::evo::{
    collect_predictor_data, evolve, load_jsonl, save_jsonl, train_predictor, Individual, Predictor,
    PredictorReport, PredictorSample, SearchResult,
};
use qfa_core::extreme_value::{drift_report, BinRule, ExtremeValueReport};
use qfa_core::qat::{
    ablation_suite, activation_maxima, calibrate_subnet, eval_subnet, toy_task, AblationReport,
    Engine, EvalResult, ProbeSampling, ToyTask, TrainLog,
};
use qfa_core::quant::Bitwidth;
use qfa_core::supernet::{
    complexity, max_genotype, min_genotype_with_bits, scientific_rounded, Genotype, NetworkConfig,
    SearchSpaceSpec, Supernet,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::Recorder;

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn data(cfg: &RunConfig) -> Result<ToyTask> {
    Ok(toy_task(&cfg.data)?)
}

pub fn load_engine(path: &Path) -> Result<Engine> {
    Engine::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Bitwidths a trained supernet can run.
fn trained_bits(cfg: &RunConfig) -> Vec<Bitwidth> {
    let mut bits: Vec<Bitwidth> = cfg
        .train
        .stage1_bits
        .iter()
        .chain(&cfg.train.stage2_bits)
        .copied()
        .collect();
    bits.sort();
    bits.dedup();
    bits
}

/// `min`, `max`, `min:<bits>`, `max:<bits>`, `@<file>` or a JSON literal.
pub fn parse_genotype(arg: &str, cfg: &RunConfig) -> Result<Genotype> {
    let spec = cfg.spec();
    let bits = trained_bits(cfg);
    let (head, tail) = match arg.split_once(':') {
        Some((h, t)) if h == "min" || h == "max" => (h, Some(t)),
        _ => (arg, None),
    };
    let g = match head {
        "min" | "max" => {
            let b = match tail {
                Some(t) => t.parse::<Bitwidth>()?,
                None if head == "min" => cfg
                    .train
                    .stage2_bits
                    .iter()
                    .copied()
                    .min()
                    .expect("validated"),
                None => cfg
                    .train
                    .stage2_bits
                    .iter()
                    .copied()
                    .max()
                    .expect("validated"),
            };
            if head == "min" {
                min_genotype_with_bits(&spec, b)
            } else {
                max_genotype(&spec, b)
            }
        }
        _ => {
            let text = match arg.strip_prefix('@') {
                Some(path) => {
                    std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?
                }
                None => arg.to_string(),
            };
            Genotype::from_json(text.trim()).context("parsing genotype JSON")?
        }
    };
    g.validate_with_bits(&spec, &bits)?;
    Ok(g)
}

#[derive(Debug, Serialize)]
pub struct CountReport {
    pub block_configs: String,
    pub stage_configs: String,
    pub total: String,
    pub stage_scientific: String,
    pub total_scientific: String,
}

fn sci(v: &BigUint) -> String {
    let (lead, exp) = scientific_rounded(v, 3);
    format!("{lead:.2}e{exp}")
}

pub fn count_space(
    spec: &SearchSpaceSpec,
    rec: &mut Recorder,
    out: &mut dyn Write,
) -> Result<CountReport> {
    spec.validate()?;
    let stage = spec.count_stage_configs();
    let total = spec.count_total();
    let report = CountReport {
        block_configs: spec.count_block_configs().to_string(),
        stage_configs: stage.to_string(),
        total: total.to_string(),
        stage_scientific: sci(&stage),
        total_scientific: sci(&total),
    };
    writeln!(out, "block configurations: {}", report.block_configs)?;
    writeln!(
        out,
        "stage configurations: {} ({})",
        report.stage_configs, report.stage_scientific
    )?;
    writeln!(
        out,
        "search space size: {} ({})",
        report.total, report.total_scientific
    )?;
    write_json(&rec.artifact("count.json"), &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct DriftRow {
    n: u64,
    analytic_mean: f64,
    empirical_mean: f64,
    empirical_std: f64,
    standard_error: f64,
}

pub fn extreme_value(
    cfg: &RunConfig,
    rec: &mut Recorder,
    out: &mut dyn Write,
) -> Result<ExtremeValueReport> {
    let a = &cfg.analysis;
    let rep = drift_report(a.lambda, &a.sizes, a.trials, cfg.seed)?;
    let rows: Vec<DriftRow> = (0..rep.sizes.len())
        .map(|i| DriftRow {
            n: rep.sizes[i],
            analytic_mean: rep.analytic_mean[i],
            empirical_mean: rep.empirical_mean[i],
            empirical_std: rep.empirical_std[i],
            standard_error: rep.standard_error(i),
        })
        .collect();
    for r in &rows {
        writeln!(
            out,
            "N={:<8} analytic {:.4}  empirical {:.4} ± {:.4}",
            r.n, r.analytic_mean, r.empirical_mean, r.standard_error
        )?;
    }
    writeln!(
        out,
        "corr(mean, ln N) = {:.5}, slope {:.4}",
        rep.log_correlation, rep.log_slope
    )?;
    write_csv(&rec.artifact("extreme_value.csv"), rows)?;
    write_json(&rec.artifact("extreme_value.json"), &rep)?;
    Ok(rep)
}

#[derive(Serialize)]
struct MaxRow<'a> {
    layer: &'a str,
    sampling: &'a str,
    batch: usize,
    max: f64,
}

#[derive(Serialize)]
struct MaxSummary<'a> {
    layer: &'a str,
    sampling: &'a str,
    mean: f64,
    std: f64,
}

/// Per-batch input maxima of `layers` under a fixed largest subnet and
/// under uniformly sampled subnets.
pub fn activation_max(
    cfg: &RunConfig,
    rec: &mut Recorder,
    net: &mut Supernet,
    layers: &[usize],
    bits: Bitwidth,
    out: &mut dyn Write,
) -> Result<()> {
    let task = data(cfg)?;
    let modes = [
        (
            "fixed",
            ProbeSampling::Fixed(max_genotype(net.space(), bits)),
        ),
        (
            "random",
            ProbeSampling::Random {
                bits: vec![bits],
                seed: cfg.seed,
            },
        ),
    ];
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut results = Vec::new();
    for (name, sampling) in &modes {
        let hs = activation_maxima(
            net,
            &task.train,
            layers,
            sampling,
            cfg.analysis.probe_batches,
            cfg.train.batch_size,
            BinRule::default(),
        )?;
        results.push((*name, hs));
    }
    for (name, hs) in &results {
        for h in hs {
            writeln!(
                out,
                "{:<8} {:<7} mean {:.4} std {:.4}",
                h.layer, name, h.mean, h.std
            )?;
            summary.push(MaxSummary {
                layer: &h.layer,
                sampling: name,
                mean: h.mean,
                std: h.std,
            });
            rows.extend(h.maxima.iter().enumerate().map(|(batch, &max)| MaxRow {
                layer: &h.layer,
                sampling: name,
                batch,
                max,
            }));
        }
    }
    write_csv(&rec.artifact("activation_max.csv"), rows)?;
    write_csv(&rec.artifact("activation_max_summary.csv"), summary)?;
    Ok(())
}

#[derive(Serialize)]
struct StepRow {
    step: usize,
    stage: &'static str,
    loss: f64,
    grad_norm: f64,
    clipped_norm: f64,
    lr: f64,
    diverged: bool,
}

#[derive(Serialize)]
struct EpochRow {
    stage: &'static str,
    epoch: usize,
    min_loss: f64,
    min_accuracy: f64,
    max_loss: f64,
    max_accuracy: f64,
}

pub fn write_log(rec: &mut Recorder, log: &TrainLog) -> Result<()> {
    write_csv(
        &rec.artifact("train_log.csv"),
        log.steps.iter().map(|s| StepRow {
            step: s.step,
            stage: s.phase.name(),
            loss: s.loss,
            grad_norm: s.grad_norm,
            clipped_norm: s.clipped_norm,
            lr: s.lr,
            diverged: s.diverged,
        }),
    )?;
    write_csv(
        &rec.artifact("epochs.csv"),
        log.epochs.iter().map(|e| EpochRow {
            stage: e.phase.name(),
            epoch: e.epoch,
            min_loss: e.min_loss,
            min_accuracy: e.min_accuracy,
            max_loss: e.max_loss,
            max_accuracy: e.max_accuracy,
        }),
    )
}

fn summarize(out: &mut dyn Write, what: &str, log: &TrainLog) -> Result<()> {
    if let Some(e) = log.epochs.last() {
        writeln!(
            out,
            "{what}: {} steps, final loss {:.4}, smallest subnet acc {:.3}, largest acc {:.3}",
            log.steps.len(),
            log.final_loss(),
            e.min_accuracy,
            e.max_accuracy
        )?;
    } else {
        writeln!(
            out,
            "{what}: {} steps, final loss {:.4}",
            log.steps.len(),
            log.final_loss()
        )?;
    }
    if log.diverged {
        writeln!(out, "{what}: training diverged")?;
    }
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, rec: &mut Recorder, out: &mut dyn Write) -> Result<Engine> {
    let task = data(cfg)?;
    let mut engine = Engine::fresh(cfg.spec(), cfg.net.clone(), cfg.train.clone())?;
    engine.pretrain(&task.train, Some(&task.test))?;
    engine.save(&rec.artifact("pretrained.ckpt"))?;
    write_log(rec, &engine.log)?;
    summarize(out, "pretrain", &engine.log)?;
    Ok(engine)
}

/// Quantization-aware training from a pretrained engine. The two-stage
/// schedule also writes the engine at the stage boundary.
pub fn train(
    cfg: &RunConfig,
    rec: &mut Recorder,
    mut engine: Engine,
    single_stage: bool,
    out: &mut dyn Write,
) -> Result<Engine> {
    let task = data(cfg)?;
    engine.config = cfg.train.clone();
    let qat = if single_stage {
        engine.run_single_stage(&task.train, Some(&task.test))?
    } else {
        let boundary = rec.artifact("stage1.ckpt");
        let mut save = |e: &Engine| e.save(&boundary);
        engine.run_two_stage(&task.train, Some(&task.test), Some(&mut save))?
    };
    engine.save(&rec.artifact("supernet.ckpt"))?;
    write_log(rec, &engine.log)?;
    summarize(
        out,
        if single_stage {
            "single-stage"
        } else {
            "two-stage"
        },
        &qat,
    )?;
    Ok(engine)
}

pub fn calibrate(
    cfg: &RunConfig,
    rec: &mut Recorder,
    mut engine: Engine,
    g: &Genotype,
    out: &mut dyn Write,
) -> Result<Engine> {
    let task = data(cfg)?;
    let c = &cfg.calibration;
    calibrate_subnet(
        &mut engine.supernet,
        g,
        &task.train,
        c.batches,
        c.batch_size,
    )?;
    engine.save(&rec.artifact("calibrated.ckpt"))?;
    std::fs::write(rec.artifact("genotype.json"), format!("{}\n", g.to_json()))?;
    writeln!(
        out,
        "calibrated on {} batches of {}",
        c.batches, c.batch_size
    )?;
    Ok(engine)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    genotype: &'a Genotype,
    accuracy: f64,
    loss: f64,
    effective_mflops: f64,
}

pub fn eval(
    cfg: &RunConfig,
    rec: &mut Recorder,
    mut engine: Engine,
    g: &Genotype,
    out: &mut dyn Write,
) -> Result<EvalResult> {
    let task = data(cfg)?;
    let res = eval_subnet(
        &mut engine.supernet,
        g,
        &task.test,
        cfg.calibration.batch_size,
    )?;
    let mflops = engine.supernet.complexity(g)?.effective_mflops();
    writeln!(
        out,
        "accuracy {:.4}  loss {:.4}  effective MFLOPs {:.4}",
        res.accuracy, res.loss, mflops
    )?;
    write_json(
        &rec.artifact("eval.json"),
        &EvalOutput {
            genotype: g,
            accuracy: res.accuracy,
            loss: res.loss,
            effective_mflops: mflops,
        },
    )?;
    Ok(res)
}

pub fn collect(
    cfg: &RunConfig,
    rec: &mut Recorder,
    mut engine: Engine,
    out: &mut dyn Write,
) -> Result<Vec<PredictorSample>> {
    let task = data(cfg)?;
    let bits = cfg.spec().bitwidth_options;
    let samples = collect_predictor_data(
        &mut engine.supernet,
        &bits,
        &task.train,
        &task.test,
        &cfg.collect,
    )?;
    save_jsonl(&rec.artifact("predictor_data.jsonl"), &samples)?;
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.accuracy), hi.max(s.accuracy))
        });
    writeln!(
        out,
        "{} subnets, accuracy {lo:.3} to {hi:.3}",
        samples.len()
    )?;
    Ok(samples)
}

pub fn load_samples(path: &Path) -> Result<Vec<PredictorSample>> {
    load_jsonl(path).with_context(|| format!("loading {}", path.display()))
}

pub fn fit_predictor(
    cfg: &RunConfig,
    rec: &mut Recorder,
    samples: &[PredictorSample],
    out: &mut dyn Write,
) -> Result<(Predictor, PredictorReport)> {
    let (p, report) = train_predictor(samples, &cfg.spec(), &cfg.predictor)?;
    std::fs::write(rec.artifact("predictor.json"), p.to_json()?)?;
    write_json(&rec.artifact("predictor_report.json"), &report)?;
    let tau = report
        .kendall_tau
        .map_or("n/a".to_string(), |t| format!("{t:.3}"));
    writeln!(
        out,
        "predictor: train MAE {:.4}, holdout MAE {:.4}, holdout Kendall tau {tau}",
        report.train_mae, report.holdout_mae
    )?;
    Ok((p, report))
}

pub fn load_predictor(path: &Path) -> Result<Predictor> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Predictor::from_json(&text)?)
}

/// Stand-in accuracy when no predictor is given: saturating in the
/// precision-weighted capacity of the active blocks and in resolution.
pub fn proxy_accuracy(g: &Genotype, spec: &SearchSpaceSpec) -> f64 {
    let capacity = |g: &Genotype| -> f64 {
        let mut c = 0.0;
        for s in 0..g.depths.len() {
            for b in 0..g.depths[s] {
                let width = (g.expands[s][b] as f64 * (g.kernels[s][b] * g.kernels[s][b]) as f64
                    / 9.0)
                    .ln_1p();
                let precision = g.wbits[s][b]
                    .iter()
                    .zip(&g.abits[s][b])
                    .map(|(w, a)| 1.0 - 0.5f64.powi(w.bits().min(a.bits()) as i32 - 1))
                    .sum::<f64>()
                    / g.wbits[s][b].len() as f64;
                c += width * precision;
            }
        }
        c * (1.0 + (g.resolution + 1) as f64 / spec.resolution_options.len() as f64)
    };
    let top = spec
        .bitwidth_options
        .iter()
        .copied()
        .max()
        .unwrap_or(Bitwidth::FULL);
    let scale = capacity(&max_genotype(spec, top)) / 3.0;
    1.0 - (-capacity(g) / scale).exp()
}

#[derive(Serialize)]
struct ParetoRow {
    genotype_json: String,
    predicted_accuracy: f64,
    effective_mflops: f64,
    rank: usize,
    crowding: f64,
}

#[derive(Serialize)]
struct HistoryRow {
    generation: usize,
    hypervolume: f64,
    front_size: usize,
    evaluations: usize,
}

fn pareto_row(i: &Individual) -> ParetoRow {
    ParetoRow {
        genotype_json: i.genotype.to_json(),
        predicted_accuracy: i.predicted_accuracy(),
        effective_mflops: i.effective_flops() / 1e6,
        rank: i.rank,
        crowding: i.crowding,
    }
}

/// NSGA-II over predicted accuracy (or the proxy) and effective FLOPs.
pub fn search(
    cfg: &RunConfig,
    rec: &mut Recorder,
    predictor: Option<&Predictor>,
    out: &mut dyn Write,
) -> Result<SearchResult> {
    let spec = match predictor {
        Some(p) => p.space().clone(),
        None => cfg.spec(),
    };
    let net: &NetworkConfig = &cfg.net;
    net.validate(&spec)?;
    let accuracy = |g: &Genotype| -> qfa_core::Result<f64> {
        match predictor {
            Some(p) => p.predict(g),
            None => Ok(proxy_accuracy(g, &spec)),
        }
    };
    let flops =
        |g: &Genotype| -> qfa_core::Result<f64> { Ok(complexity(g, &spec, net)?.effective_flops) };
    let res = evolve(&cfg.search, &spec, &accuracy, &flops)?;
    write_csv(
        &rec.artifact("pareto.csv"),
        res.front.iter().map(pareto_row),
    )?;
    write_csv(
        &rec.artifact("population.csv"),
        res.population.iter().map(pareto_row),
    )?;
    write_csv(
        &rec.artifact("search_history.csv"),
        res.history.iter().map(|h| HistoryRow {
            generation: h.generation,
            hypervolume: h.hypervolume,
            front_size: h.front_size,
            evaluations: h.evaluations,
        }),
    )?;
    let (lo, hi) = mflops_range(&res);
    writeln!(
        out,
        "{} rank-0 subnets, effective MFLOPs {lo:.4} to {hi:.4}, final hypervolume {:.6}",
        res.front.len(),
        res.history.last().map_or(0.0, |h| h.hypervolume)
    )?;
    Ok(res)
}

pub fn mflops_range(res: &SearchResult) -> (f64, f64) {
    res.front
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            let m = i.effective_flops() / 1e6;
            (lo.min(m), hi.max(m))
        })
}

#[derive(Serialize)]
struct AblationSummaryRow {
    variant: String,
    seed: u64,
    diverged: bool,
    final_loss: f64,
    best_loss: f64,
    steps_run: usize,
}

#[derive(Serialize)]
struct AblationLossRow {
    variant: String,
    step: usize,
    loss: f64,
}

pub fn ablate(
    cfg: &RunConfig,
    rec: &mut Recorder,
    engine: &Engine,
    out: &mut dyn Write,
) -> Result<AblationReport> {
    if cfg.ablation.variants.is_empty() {
        bail!("no ablation variants selected");
    }
    let task = data(cfg)?;
    let mut base = engine.clone();
    base.config = cfg.train.clone();
    let report = ablation_suite(
        &base,
        &cfg.ablation.variants,
        cfg.ablation.steps,
        &task.train,
    )?;
    for r in &report.rows {
        writeln!(
            out,
            "{:<16} final {:<10.4} best {:<10.4} steps {:<5} {}",
            r.variant.name(),
            r.final_loss,
            r.best_loss,
            r.steps_run,
            if r.diverged { "diverged" } else { "" }
        )?;
    }
    write_csv(
        &rec.artifact("ablation.csv"),
        report.rows.iter().map(|r| AblationSummaryRow {
            variant: r.variant.name().to_string(),
            seed: r.seed,
            diverged: r.diverged,
            final_loss: r.final_loss,
            best_loss: r.best_loss,
            steps_run: r.steps_run,
        }),
    )?;
    write_csv(
        &rec.artifact("ablation_losses.csv"),
        report.rows.iter().flat_map(|r| {
            r.losses
                .iter()
                .enumerate()
                .map(|(step, &loss)| AblationLossRow {
                    variant: r.variant.name().to_string(),
                    step,
                    loss,
                })
        }),
    )?;
    Ok(report)
}
