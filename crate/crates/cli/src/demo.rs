use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use crate::commands;
use crate::config::RunConfig;
use crate::manifest::{Recorder, RunManifest, MANIFEST_FILE};

pub const DEMO_STAGES: [&str; 5] = ["pretrain", "train", "collect", "predictor", "search"];

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSummary {
    pub front_size: usize,
    pub mflops_range: (f64, f64),
    pub pareto_csv: PathBuf,
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().with_context(|| format!("demo stage `{name}` failed"))
}

/// Pretraining, two-stage QAT, predictor data, predictor fit and search,
/// one subdirectory and manifest per stage under `root`.
pub fn pipeline_demo(cfg: &RunConfig, root: &Path, out: &mut dyn Write) -> Result<DemoSummary> {
    std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let rec = |name: &str| Recorder::new(name, &root.join(name), root, json!({ "demo": true }));

    let engine = stage("pretrain", || {
        let mut r = rec("pretrain")?;
        let e = commands::pretrain(cfg, &mut r, out)?;
        r.finish(cfg)?;
        Ok(e)
    })?;
    let engine = stage("train", || {
        let mut r = rec("train")?;
        r.input(&root.join("pretrain/pretrained.ckpt"));
        let e = commands::train(cfg, &mut r, engine, false, out)?;
        r.finish(cfg)?;
        Ok(e)
    })?;
    let samples = stage("collect", || {
        let mut r = rec("collect")?;
        r.input(&root.join("train/supernet.ckpt"));
        let s = commands::collect(cfg, &mut r, engine, out)?;
        r.finish(cfg)?;
        Ok(s)
    })?;
    let (predictor, _) = stage("predictor", || {
        let mut r = rec("predictor")?;
        r.input(&root.join("collect/predictor_data.jsonl"));
        let p = commands::fit_predictor(cfg, &mut r, &samples, out)?;
        r.finish(cfg)?;
        Ok(p)
    })?;
    let result = stage("search", || {
        let mut r = rec("search")?;
        r.input(&root.join("predictor/predictor.json"));
        let res = commands::search(cfg, &mut r, Some(&predictor), out)?;
        r.finish(cfg)?;
        Ok(res)
    })?;

    // stage manifests carry wall-clock times, so link them by path and
    // hash their artifacts instead
    let manifests: Vec<String> = DEMO_STAGES
        .iter()
        .map(|s| format!("{s}/{MANIFEST_FILE}"))
        .collect();
    let mut top = Recorder::new("demo", root, root, json!({ "stage_manifests": manifests }))?;
    for m in &manifests {
        let text = std::fs::read_to_string(root.join(m))?;
        let stage: RunManifest = serde_json::from_str(&text)?;
        for a in &stage.artifacts {
            top.input(&root.join(&a.path));
        }
    }
    let pareto = root.join("search/pareto.csv");
    top.finish(cfg)?;

    Ok(DemoSummary {
        front_size: result.front.len(),
        mflops_range: commands::mflops_range(&result),
        pareto_csv: pareto,
    })
}
