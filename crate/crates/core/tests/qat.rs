use qfa_core::qat::*;
use qfa_core::quant::Bitwidth;
use qfa_core::supernet::{
    max_genotype, min_genotype_with_bits, NetworkConfig, ParamId, SearchSpaceSpec,
};
use qfa_core::QfaError;

fn task(seed: u64, train: usize) -> ToyTask {
    toy_task(&ToyDataConfig {
        train_size: train,
        test_size: 128,
        seed,
        ..ToyDataConfig::default()
    })
    .unwrap()
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        pretrain_epochs: 2,
        stage1_epochs: 1,
        stage2_epochs: 1,
        eval_each_epoch: false,
        seed,
        ..TrainConfig::default()
    }
}

fn engine(seed: u64) -> Engine {
    Engine::fresh(SearchSpaceSpec::desk(), NetworkConfig::desk(), config(seed)).unwrap()
}

fn pretrained(seed: u64, data: &Dataset) -> Engine {
    let mut e = engine(seed);
    e.pretrain(data, None).unwrap();
    e
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn sandwich_runs_six_subnets_and_one_update() {
    let t = task(0, 64);
    let mut e = engine(1);
    e.begin_phase(Phase::Pretrain, 1, &t.train).unwrap();
    e.step(&t.train).unwrap();
    let before = e.supernet.clone();
    let passes = e.forward_passes;
    let rec = e.step(&t.train).unwrap().unwrap();
    assert_eq!(rec.subnets, 6);
    assert_eq!(e.forward_passes - passes, 6);
    // every weight moved by exactly -lr times its momentum buffer
    for l in 0..before.layers.len() {
        let Some(buf) = e.optimizer.buffers.get(&ParamId::Weight(l)) else {
            continue;
        };
        let old = before.layers[l].weight.data();
        let new = e.supernet.layers[l].weight.data();
        for i in 0..old.len() {
            assert_eq!(new[i], old[i] - rec.lr * buf[i]);
        }
    }
}

#[test]
fn clipped_norm_never_exceeds_the_threshold() {
    let t = task(0, 64);
    let mut e = Engine::fresh(
        SearchSpaceSpec::desk(),
        NetworkConfig::desk(),
        TrainConfig {
            grad_clip: 0.5,
            ..config(2)
        },
    )
    .unwrap();
    e.pretrain(&t.train, None).unwrap();
    e.run_two_stage(&t.train, None, None).unwrap();
    assert!(e.log.steps.iter().any(|s| s.grad_norm > 0.5));
    for s in &e.log.steps {
        assert!(s.clipped_norm <= 0.5 * (1.0 + 1e-12), "{s:?}");
    }
    let d = TrainConfig::default();
    assert_eq!(d.grad_clip, 500.0);
}

#[test]
fn stages_use_their_bit_sets() {
    let t = task(0, 64);
    let mut e = pretrained(3, &t.train);
    let log = e.run_two_stage(&t.train, None, None).unwrap();
    let s1 = log.filter(&[Phase::Stage1]);
    let s2 = log.filter(&[Phase::Stage2]);
    assert_eq!(s1.steps.len(), 4);
    assert_eq!(s2.steps.len(), 4);
    assert!(s1
        .steps
        .iter()
        .any(|s| s.bits_seen.contains(&Bitwidth::FULL)));
    assert!(s2
        .steps
        .iter()
        .all(|s| !s.bits_seen.contains(&Bitwidth::FULL)));
    assert!(s2
        .steps
        .iter()
        .all(|s| s.bits_seen.iter().all(|b| e.config.stage2_bits.contains(b))));
}

#[test]
fn zero_epoch_stages_do_nothing() {
    let t = task(0, 64);
    let mut e = pretrained(4, &t.train);
    e.config.stage1_epochs = 0;
    e.config.stage2_epochs = 0;
    let before = e.supernet.clone();
    let log = e.run_two_stage(&t.train, None, None).unwrap();
    assert!(log.steps.is_empty());
    assert_eq!(e.supernet, before);
}

#[test]
fn quantized_training_needs_pretraining() {
    let t = task(0, 64);
    let mut e = engine(5);
    assert!(matches!(
        e.run_two_stage(&t.train, None, None),
        Err(QfaError::State(_))
    ));
    assert!(matches!(
        e.run_single_stage(&t.train, None),
        Err(QfaError::State(_))
    ));
}

#[test]
fn training_is_deterministic() {
    let t = task(0, 64);
    let run = || {
        let mut e = pretrained(6, &t.train);
        e.run_two_stage(&t.train, None, None).unwrap();
        e
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn pretraining_leaves_no_quantizers_and_lowers_the_loss() {
    let t = task(0, 128);
    let mut improved = Vec::new();
    for seed in 0..5 {
        let mut e = engine(seed);
        e.config.pretrain_epochs = 4;
        e.pretrain(&t.train, None).unwrap();
        assert!(!e.supernet.has_quantizers());
        let restored = Engine::from_bytes(&e.to_bytes().unwrap()).unwrap();
        assert!(restored
            .supernet
            .layers
            .iter()
            .all(|l| l.quantizers.weight.is_empty() && l.quantizers.act.is_empty()));
        let steps = &e.log.steps;
        let k = 4;
        let first = steps[..k].iter().map(|s| s.loss).sum::<f64>() / k as f64;
        let last = steps[steps.len() - k..].iter().map(|s| s.loss).sum::<f64>() / k as f64;
        improved.push(first - last);
    }
    assert!(median(improved) > 0.0);
}

#[test]
fn checkpoint_roundtrip_preserves_everything() {
    let t = task(0, 64);
    let mut e = pretrained(7, &t.train);
    e.run_two_stage(&t.train, None, None).unwrap();
    let bytes = e.to_bytes().unwrap();
    let back = Engine::from_bytes(&bytes).unwrap();
    assert_eq!(back, e);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = std::env::temp_dir().join(format!("qfa-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("engine.ckpt");
    e.save(&path).unwrap();
    assert_eq!(Engine::load(&path).unwrap(), e);
    std::fs::remove_dir_all(&dir).ok();

    assert!(matches!(
        Engine::from_bytes(b"garbage"),
        Err(QfaError::Format(_))
    ));
    assert!(matches!(
        Engine::from_bytes(&bytes[..bytes.len() / 2]),
        Err(QfaError::Format(_))
    ));
}

#[test]
fn resuming_from_the_stage_boundary_is_bit_identical() {
    let t = task(0, 64);
    let base = pretrained(8, &t.train);

    let mut saved = None;
    let mut straight = base.clone();
    let mut grab = |e: &Engine| -> qfa_core::Result<()> {
        saved = Some(e.to_bytes()?);
        Ok(())
    };
    straight
        .run_two_stage(&t.train, None, Some(&mut grab))
        .unwrap();

    let mut resumed = Engine::from_bytes(&saved.unwrap()).unwrap();
    resumed.config.stage1_epochs = 0;
    resumed.run_two_stage(&t.train, None, None).unwrap();
    resumed.config.stage1_epochs = straight.config.stage1_epochs;
    assert_eq!(resumed.log, straight.log);
    assert_eq!(resumed.supernet, straight.supernet);
}

#[test]
fn mid_phase_checkpoint_then_one_step_matches() {
    let t = task(0, 64);
    let mut e = pretrained(9, &t.train);
    e.begin_phase(Phase::Stage2, 2, &t.train).unwrap();
    for _ in 0..3 {
        e.step(&t.train).unwrap();
    }
    let mut copy = Engine::from_bytes(&e.to_bytes().unwrap()).unwrap();
    let a = e.step(&t.train).unwrap().unwrap();
    let b = copy.step(&t.train).unwrap().unwrap();
    assert_eq!(a, b);
    assert_eq!(e.to_bytes().unwrap(), copy.to_bytes().unwrap());
}

#[test]
fn calibration_contract() {
    let t = task(0, 64);
    let mut e = pretrained(10, &t.train);
    e.run_two_stage(&t.train, None, None).unwrap();
    let net = &mut e.supernet;
    let g = min_genotype_with_bits(net.space(), Bitwidth::B2);
    assert!(matches!(
        calibrate_subnet(net, &g, &t.train, 0, 16),
        Err(QfaError::Parameter(_))
    ));

    let mut fresh = net.clone();
    fresh.set_mode(qfa_core::quant::QuantMode::Calibrate);
    assert!(matches!(
        eval_subnet(&mut fresh, &g, &t.test, 32),
        Err(QfaError::State(_))
    ));

    calibrate_subnet(net, &g, &t.train, 4, 16).unwrap();
    let first = net.clone();
    calibrate_subnet(net, &g, &t.train, 4, 16).unwrap();
    assert_eq!(*net, first);
    let a = eval_subnet(net, &g, &t.test, 32).unwrap();
    let b = eval_subnet(net, &g, &t.test, 32).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.accuracy));
}

#[test]
fn untrained_network_is_at_chance() {
    let t = task(1, 64);
    let mut e = engine(11);
    let g = max_genotype(e.supernet.space(), Bitwidth::FULL);
    calibrate_subnet(&mut e.supernet, &g, &t.train, 4, 16).unwrap();
    let tt = toy_task(&ToyDataConfig {
        test_size: 1000,
        seed: 1,
        ..ToyDataConfig::default()
    })
    .unwrap();
    let acc = eval_subnet(&mut e.supernet, &g, &tt.test, 100)
        .unwrap()
        .accuracy;
    // 1000 balanced samples over 10 classes: σ ≈ 0.0095
    assert!((acc - 0.1).abs() < 0.05, "{acc}");
}

#[test]
fn short_and_long_calibration_agree_and_precision_helps() {
    let t = toy_task(&ToyDataConfig {
        train_size: 128,
        seed: 0,
        ..ToyDataConfig::default()
    })
    .unwrap();
    let mut gaps = Vec::new();
    let mut precision = Vec::new();
    for seed in 0..5 {
        let mut e = pretrained(20 + seed, &t.train);
        e.run_two_stage(&t.train, None, None).unwrap();
        let space = e.supernet.space().clone();
        let low = max_genotype(&space, Bitwidth::B4);
        let mut short = e.supernet.clone();
        calibrate_subnet(&mut short, &low, &t.train, 4, 16).unwrap();
        let mut long = e.supernet.clone();
        calibrate_subnet(&mut long, &low, &t.train, 32, 16).unwrap();
        let a = eval_subnet(&mut short, &low, &t.test, 64).unwrap().accuracy;
        let b = eval_subnet(&mut long, &low, &t.test, 64).unwrap().accuracy;
        gaps.push((a - b).abs());

        let mut net = e.supernet.clone();
        let full = max_genotype(&space, Bitwidth::FULL);
        let two = max_genotype(&space, Bitwidth::B2);
        calibrate_subnet(&mut net, &full, &t.train, 4, 16).unwrap();
        let fa = eval_subnet(&mut net, &full, &t.test, 64).unwrap().accuracy;
        calibrate_subnet(&mut net, &two, &t.train, 4, 16).unwrap();
        let ta = eval_subnet(&mut net, &two, &t.test, 64).unwrap().accuracy;
        precision.push(fa - ta);
    }
    assert!(median(gaps.clone()) <= 0.02, "{gaps:?}");
    assert!(median(precision.clone()) >= 0.0, "{precision:?}");
}

#[test]
fn ablation_report_format_and_determinism() {
    let t = task(0, 64);
    let e = pretrained(12, &t.train);
    let variants = AblationVariant::ALL;
    let a = ablation_suite(&e, &variants, 6, &t.train).unwrap();
    assert_eq!(a.rows.len(), variants.len());
    for (row, v) in a.rows.iter().zip(variants) {
        assert_eq!(row.variant, v);
        assert_eq!(row.losses.len(), row.steps_run);
        assert!(row.diverged || row.steps_run == 6);
    }
    let reference = a.row(AblationVariant::BqChannelMean).unwrap();
    assert!(!reference.diverged && reference.final_loss.is_finite());
    assert_eq!(ablation_suite(&e, &variants, 6, &t.train).unwrap(), a);
    let mut quantized = e.clone();
    quantized.run_two_stage(&t.train, None, None).unwrap();
    assert!(matches!(
        ablation_suite(&quantized, &variants, 2, &t.train),
        Err(QfaError::State(_))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig {
            stage2_bits: vec![Bitwidth::B8],
            ..TrainConfig::default()
        },
        TrainConfig {
            subnets_per_step: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(QfaError::Validation(_))));
    }
}
