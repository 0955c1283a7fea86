use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::backbone::{BackboneConfig, ModelConfig};
use crate::nn::max_gradient_error;
use crate::prompting::{InstructionRegistry, PlaceholderKind, TaskFamily};
use crate::testutil::small_world;
use crate::tokenizer::TokenizerConfig;

fn t1(v: &[f64]) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn t2(v: Vec<Vec<f64>>) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn tiny_model(num_segments: usize, vocab: usize) -> StModel {
    let cfg = ModelConfig {
        tokenizer: TokenizerConfig {
            hidden: 8,
            window: 2,
            gat_layers: 2,
            gat_heads: 2,
            token_dim: 16,
        },
        backbone: BackboneConfig {
            layers: 2,
            heads: 2,
            width: 16,
            ffn_width: 32,
            max_len: 64,
            lora_rank: 4,
            lora_alpha: 4.0,
            ..BackboneConfig::default()
        },
        head_hidden: Some(16),
        num_segments,
        vocab_size: vocab,
        seed: 1,
    };
    StModel::new(&cfg, DType::F64, &Device::Cpu).unwrap()
}

struct Env {
    world: crate::data::World,
    ds: Dataset,
    ctx: PromptContext,
    bank: FeatureBank,
    model: StModel,
}

fn env() -> Env {
    let (world, ds) = small_world(8, true);
    let ctx = PromptContext::new(InstructionRegistry::default(), ds.stats.clone());
    let bank = FeatureBank::new(&world.network, &world.store, &ds.stats, 2, DType::F64, &Device::Cpu).unwrap();
    let model = tiny_model(8, ctx.vocab.len());
    Env { world, ds, ctx, bank, model }
}

#[test]
fn reconstruction_masks() {
    let e = env();
    let seq = e.ds.trajectories.iter().find(|s| s.len() >= 6).unwrap();
    let seq = seq.select(&(0..6).collect::<Vec<_>>()).unwrap();
    let p = mask_for_reconstruction(&seq, 2, 3, &e.ds.stats).unwrap();
    assert_eq!(p.mask_positions.len(), 2);
    assert_eq!(p.placeholders.len(), 4);
    assert_eq!(p.mask_positions, mask_for_reconstruction(&seq, 2, 3, &e.ds.stats).unwrap().mask_positions);
    let none = mask_for_reconstruction(&seq, 0, 3, &e.ds.stats).unwrap();
    assert!(none.placeholders.is_empty() && none.mask_positions.is_empty());
    assert!(mask_for_reconstruction(&seq, 7, 3, &e.ds.stats).is_err());
    assert_eq!(mask_count(10, 0.15), 2);
    assert_eq!(mask_count(3, 0.15), 1);
}

#[test]
fn mrt_loss_is_zero_on_perfect_predictions() {
    let pred = Predictions {
        logits: Some(t2(vec![vec![0.0, -1e4, -1e4], vec![-1e4, -1e4, 0.0]])),
        labels: vec![0, 2],
        dynamic: Some((t2(vec![vec![1.0, 2.0, 3.0]]), t2(vec![vec![1.0, 2.0, 3.0]]))),
        time: Some((t1(&[0.5]), t1(&[0.5]))),
    };
    let loss = mrt_loss(&pred, &MrtWeights::default()).unwrap();
    assert_eq!(loss.total_value().unwrap(), 0.0);
}

#[test]
fn mrt_loss_weight_masking_and_uniform_ce() {
    let pred = Predictions {
        logits: Some(t2(vec![vec![0.3, 0.3], vec![-1.0, -1.0]])),
        labels: vec![0, 1],
        dynamic: Some((t2(vec![vec![1.0, 2.0, 3.0]]), t2(vec![vec![0.0, 0.0, 0.0]]))),
        time: Some((t1(&[2.0]), t1(&[0.0]))),
    };
    let w = MrtWeights {
        reg: 0.0,
        tim: 0.0,
        ..MrtWeights::default()
    };
    let loss = mrt_loss(&pred, &w).unwrap();
    assert!((loss.total_value().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    let full = mrt_loss(&pred, &MrtWeights::default()).unwrap();
    assert!((full.components["reg"] - 14.0 / 3.0).abs() < 1e-12);
    assert!((full.components["tim"] - 4.0).abs() < 1e-12);
    let norm = mrt_loss(
        &pred,
        &MrtWeights {
            normalize: true,
            ..MrtWeights::default()
        },
    )
    .unwrap();
    assert!((norm.total_value().unwrap() - full.total_value().unwrap() / 3.0).abs() < 1e-12);
}

#[test]
fn nan_loss_names_component() {
    let pred = Predictions {
        time: Some((t1(&[f64::NAN]), t1(&[0.0]))),
        ..Predictions::default()
    };
    match mrt_loss(&pred, &MrtWeights::default()) {
        Err(Error::Numeric { component }) => assert_eq!(component, "tim"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn pt_loss_single_family_and_perfect() {
    let pred = Predictions {
        logits: Some(t2(vec![vec![1.0, 2.0, 0.5]])),
        labels: vec![1],
        ..Predictions::default()
    };
    let loss = pt_loss(&[(TaskFamily::Classification, &pred)], &PtWeights::default()).unwrap();
    assert_eq!(loss.total_value().unwrap(), loss.components["clas"]);
    assert_eq!(loss.components["reg"], 0.0);
    let perfect = Predictions {
        dynamic: Some((t2(vec![vec![1.0, 1.0, 1.0]]), t2(vec![vec![1.0, 1.0, 1.0]]))),
        ..Predictions::default()
    };
    assert_eq!(
        pt_loss(&[(TaskFamily::Regression, &perfect)], &PtWeights::default())
            .unwrap()
            .total_value()
            .unwrap(),
        0.0
    );
}

#[test]
fn pt_loss_matches_hand_computation() {
    // Sample 1: next hop, logits (2, 0, -1), label 0.
    // Sample 2: one-step, prediction (1, 0, 2) against (0, 0, 0).
    let clas = Predictions {
        logits: Some(t2(vec![vec![2.0, 0.0, -1.0]])),
        labels: vec![0],
        ..Predictions::default()
    };
    let reg = Predictions {
        dynamic: Some((t2(vec![vec![1.0, 0.0, 2.0]]), t2(vec![vec![0.0, 0.0, 0.0]]))),
        ..Predictions::default()
    };
    let w = PtWeights { reg: 0.5, gen: 2.0 };
    let loss = pt_loss(&[(TaskFamily::Classification, &clas), (TaskFamily::Regression, &reg)], &w).unwrap();
    let ce = -(2.0f64.exp() / (2.0f64.exp() + 1.0 + (-1.0f64).exp())).ln();
    let mse = (1.0 + 0.0 + 4.0) / 3.0;
    assert!((loss.total_value().unwrap() - (ce + 0.5 * mse)).abs() < 1e-12);
    assert_eq!(loss.components["gen"], 0.0);
}

proptest! {
    #[test]
    fn losses_nonnegative_and_order_free(rows in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), 0u32..3, -3.0f64..3.0, -3.0f64..3.0), 1..8), shift in 0usize..8) {
        let make = |rows: &[(Vec<f64>, u32, f64, f64)]| Predictions {
            logits: Some(t2(rows.iter().map(|r| r.0.clone()).collect())),
            labels: rows.iter().map(|r| r.1).collect(),
            dynamic: None,
            time: Some((t1(&rows.iter().map(|r| r.2).collect::<Vec<_>>()), t1(&rows.iter().map(|r| r.3).collect::<Vec<_>>()))),
        };
        let a = mrt_loss(&make(&rows), &MrtWeights::default()).unwrap().total_value().unwrap();
        let mut rotated = rows.clone();
        let k = shift % rotated.len();
        rotated.rotate_left(k);
        let b = mrt_loss(&make(&rotated), &MrtWeights::default()).unwrap().total_value().unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn round_robin_interleaves() {
    assert_eq!(round_robin(&[2, 1, 3]), vec![(0, 0), (1, 0), (2, 0), (0, 1), (2, 1), (2, 2)]);
}

#[test]
fn trace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let rows = vec![TraceRow {
        epoch: 1,
        task: "tte".into(),
        component: "valid".into(),
        value: 0.25,
    }];
    write_trace(&rows, &path).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("epoch,task,component,value\n"));
    assert_eq!(read_trace(&path).unwrap(), rows);
}

fn hashes(model: &StModel) -> BTreeMap<String, String> {
    model.groups().iter().map(|g| (g.name().to_string(), g.hash().unwrap())).collect()
}

#[test]
fn zero_epochs_leave_initialization() {
    let e = env();
    let before = hashes(&e.model);
    let cfg = MrtConfig {
        epochs: 0,
        ..MrtConfig::default()
    };
    assert!(run_mrt_stage(&e.model, &e.bank, &e.ds, &cfg).unwrap().epochs.is_empty());
    assert_eq!(before, hashes(&e.model));
}

#[test]
fn stages_update_only_their_groups() {
    let e = env();
    let before = hashes(&e.model);
    let cfg = MrtConfig {
        epochs: 2,
        batch_size: 8,
        ..MrtConfig::default()
    };
    let report = run_mrt_stage(&e.model, &e.bank, &e.ds, &cfg).unwrap();
    assert_eq!(report.epochs.len(), 2);
    let after = hashes(&e.model);
    assert_eq!(before["base"], after["base"]);
    for g in ["tokenizer", "lora", "heads", "placeholders"] {
        assert_ne!(before[g], after[g], "{g} did not train");
    }
    let tune = TuneConfig {
        epochs: 2,
        batch_size: 8,
        ..TuneConfig::default()
    };
    let report = run_prompt_tuning(&e.model, &e.bank, &e.ds, &e.ctx, &tune).unwrap();
    let tuned = hashes(&e.model);
    assert_eq!(after["base"], tuned["base"]);
    assert_eq!(after["tokenizer"], tuned["tokenizer"]);
    assert_ne!(after["lora"], tuned["lora"]);
    assert_eq!(report.series(TaskId::Tte, "train").len(), 2);
    assert_eq!(report.series(TaskId::Recovery, "valid").len(), 2);
}

#[test]
fn mrt_is_deterministic() {
    let cfg = MrtConfig {
        epochs: 1,
        batch_size: 8,
        ..MrtConfig::default()
    };
    let a = env();
    let b = env();
    let ra = run_mrt_stage(&a.model, &a.bank, &a.ds, &cfg).unwrap();
    let rb = run_mrt_stage(&b.model, &b.bank, &b.ds, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(hashes(&a.model), hashes(&b.model));
}

#[test]
fn tuning_config_errors() {
    let e = env();
    let empty = TuneConfig {
        task_mix: vec![],
        ..TuneConfig::default()
    };
    assert!(matches!(
        run_prompt_tuning(&e.model, &e.bank, &e.ds, &e.ctx, &empty),
        Err(Error::Config(_))
    ));
    let single = TuneConfig {
        epochs: 1,
        task_mix: vec![TaskShare {
            task: TaskId::NextHop,
            proportion: 1.0,
        }],
        ..TuneConfig::default()
    };
    let report = run_prompt_tuning(&e.model, &e.bank, &e.ds, &e.ctx, &single).unwrap();
    let tasks: std::collections::BTreeSet<&str> = report.trace.iter().map(|r| r.task.as_str()).collect();
    assert_eq!(tasks.len(), 1);
}

#[test]
fn task_batches_follow_rules() {
    let e = env();
    let samples = task_samples(&e.ds, TaskId::Recovery, SplitName::Train);
    let batch = build_task_batch(&e.ctx, TaskId::Recovery, &samples, &e.ds, &TaskParams::default()).unwrap();
    assert_eq!(batch.prompts.len() + batch.rejected, samples.len());
    for p in &batch.prompts {
        assert_eq!(p.placeholders.len(), p.mask_positions.len());
        assert!(p.placeholders.iter().all(|k| *k == PlaceholderKind::Cls));
    }
    let series = task_samples(&e.ds, TaskId::Imputation, SplitName::Train);
    let batch = build_task_batch(&e.ctx, TaskId::Imputation, &series, &e.ds, &TaskParams::default()).unwrap();
    assert!(batch.prompts.iter().all(|p| p.mask_positions.len() == 3));
    let _ = &e.world;
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let e = env();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for adapter in e.model.backbone.adapters() {
        let b: Vec<f64> = (0..adapter.b.elem_count()).map(|_| rng.random_range(-0.1..0.1)).collect();
        adapter.b.set(&Tensor::from_vec(b, adapter.b.dims(), &Device::Cpu).unwrap()).unwrap();
    }
    let seqs: Vec<&StUnitSequence> = e.ds.trajectory_part(SplitName::Train).into_iter().take(3).collect();
    let prompts: Vec<PromptInstance> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| mask_for_reconstruction(s, 2.min(s.len()), i as u64, &e.ds.stats).unwrap())
        .collect();
    let units: Vec<_> = prompts.iter().map(|p| p.units.clone()).collect();
    let loss = || -> Result<LossBreakdown> {
        let tokens = e.model.tokenizer.tokenize(&e.bank, &units)?;
        let out = e.model.forward(&prompts, &tokens)?;
        mrt_loss(&predict(&e.model, &out, &prompts, 0)?, &MrtWeights::default())
    };
    let grads = loss().unwrap().total.backward().unwrap();
    let checks = [
        e.model.backbone.adapters()[0].b.clone(),
        e.model.backbone.adapters()[1].a.clone(),
        e.model.heads.time.layers[0].weight.clone(),
        e.model.tokenizer.queries.clone(),
        e.model.cls.clone(),
    ];
    for var in checks {
        let g = grads.get(var.as_tensor()).expect("gradient present");
        let n = var.elem_count();
        let coords: Vec<usize> = (0..6).map(|k| k * 7 % n).collect();
        let err = max_gradient_error(&var, g, &coords, 1e-4, 1e-6, || loss()?.total_value()).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
