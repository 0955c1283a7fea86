//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stfoundry::backbone::{BackboneConfig, ModelConfig, StModel};
use stfoundry::data::{generate_synthetic_world, Dataset, DatasetConfig, SplitName, StUnitSequence, World, WorldConfig};
use stfoundry::evaluation::{binary_auc, masked_outputs, rank_by_score, ranking_metrics, EvalConfig, MaskedValues};
use stfoundry::nn::max_gradient_error;
use stfoundry::pipeline::{self, ExperimentConfig, Precision, RunLayout};
use stfoundry::prompting::{build_prompt, InstructionRegistry, PlaceholderKind, PromptContext, TaskId, TaskParams};
use stfoundry::tokenizer::{fuse_with_queries, FeatureBank, TokenizerConfig};
use stfoundry::training::{
    evaluate_mrt, run_mrt_stage, run_prompt_tuning, MrtConfig, TaskShare, TuneConfig,
};

/// Runs `body`, writes the verdict line unbuffered to stderr and re-raises
/// any failure.
fn criterion(id: u8, name: &str, budget: Option<Duration>, body: impl FnOnce() -> String) {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let elapsed = started.elapsed();
    let over_budget = budget.is_some_and(|b| elapsed > b);
    let line = match &outcome {
        Ok(detail) if !over_budget => format!("criterion {id:>2} PASS {name}: {detail} ({elapsed:.1?})"),
        Ok(detail) => format!("criterion {id:>2} FAIL {name}: {detail}; runtime {elapsed:.1?} exceeds {budget:?}"),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            format!("criterion {id:>2} FAIL {name}: {msg} ({elapsed:.1?})")
        }
    };
    let _ = writeln!(std::io::stderr(), "{line}");
    match outcome {
        Err(e) => std::panic::resume_unwind(e),
        Ok(_) => assert!(!over_budget, "{line}"),
    }
}

fn world(cfg: WorldConfig, seed: u64) -> (World, Dataset) {
    let w = generate_synthetic_world(&cfg, seed).unwrap();
    let ds = Dataset::build(&w, &DatasetConfig::default()).unwrap();
    (w, ds)
}

fn small_world_config(segments: usize, trajectories: usize) -> WorldConfig {
    WorldConfig {
        num_segments: segments,
        num_trajectories: trajectories,
        min_trajectory_len: 5,
        max_trajectory_len: 12,
        num_users: 3,
        days: 1,
        ..WorldConfig::default()
    }
}

fn tiny_model_config(num_segments: usize, vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
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
            max_len: 96,
            lora_rank: 4,
            lora_alpha: 4.0,
            ..BackboneConfig::default()
        },
        head_hidden: Some(16),
        num_segments,
        vocab_size,
        seed,
    }
}

struct Setup {
    ds: Dataset,
    ctx: PromptContext,
    bank: FeatureBank,
    model: StModel,
}

fn setup(cfg: WorldConfig, window: usize, seed: u64) -> Setup {
    let (w, ds) = world(cfg, seed);
    let ctx = PromptContext::new(InstructionRegistry::default(), ds.stats.clone());
    let mut mc = tiny_model_config(w.network.num_segments(), ctx.vocab.len(), seed);
    mc.tokenizer.window = window;
    let bank = FeatureBank::new(&w.network, &w.store, &ds.stats, window, DType::F64, &Device::Cpu).unwrap();
    let model = StModel::new(&mc, DType::F64, &Device::Cpu).unwrap();
    Setup { ds, ctx, bank, model }
}

fn oracle_rank(scores: &[f64], truth: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[truth] || (scores[j] == scores[truth] && j < truth))
        .count()
}

#[test]
fn criterion_01_metric_oracles() {
    criterion(1, "metric oracle equivalence", Some(Duration::from_secs(10)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 5;
        for _ in 0..1000 {
            let n = rng.random_range(1..=20);
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0u8..8))).collect();
            let truth = rng.random_range(0..n);
            let r = oracle_rank(&scores, truth);
            let m = ranking_metrics(&[rank_by_score(&scores)], &[truth], k).unwrap();
            let hit = r <= k;
            assert_eq!(m["acc"], if r == 1 { 1.0 } else { 0.0 });
            assert_eq!(m["mrr@5"], if hit { 1.0 / r as f64 } else { 0.0 });
            assert_eq!(m["ndcg@5"], if hit { 1.0 / (r as f64 + 1.0).log2() } else { 0.0 });
            assert_eq!(m["hr@5"], if hit { 1.0 } else { 0.0 });
            for kk in [1, 10] {
                let mk = ranking_metrics(&[rank_by_score(&scores)], &[truth], kk).unwrap();
                assert_eq!(mk[&format!("hr@{kk}")], if r <= kk { 1.0 } else { 0.0 });
            }
        }
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let n = rng.random_range(2..=20);
            let mut truths: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            truths[0] = 0;
            truths[1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0u8..6)) / 5.0).collect();
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if truths[i] == 1 && truths[j] == 0 {
                        den += 1.0;
                        num += if scores[i] > scores[j] {
                            1.0
                        } else if scores[i] == scores[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            worst = worst.max((binary_auc(&truths, &scores).unwrap() - num / den).abs());
        }
        assert!(worst < 1e-12, "AUC deviation {worst}");
        format!("1000 ranking instances exact, max AUC deviation {worst:.1e}")
    });
}

fn check_rows(att: &Tensor, what: &str) -> f64 {
    let rows = att.flatten_to(D::Minus2).unwrap().to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap();
    let mut worst = 0.0f64;
    for r in rows {
        assert!(r.iter().all(|&v| v >= 0.0), "{what} has a negative weight");
        worst = worst.max((r.iter().sum::<f64>() - 1.0).abs());
    }
    assert!(worst <= 1e-6, "{what} row sum deviates by {worst}");
    worst
}

#[test]
fn criterion_02_attention_normalization() {
    criterion(2, "attention normalization", Some(Duration::from_secs(30)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0f64;
        let mut rows = 0usize;
        for c in 0..100 {
            let segments = rng.random_range(3..25);
            let wc = WorldConfig {
                num_segments: segments,
                extra_edges_per_segment: rng.random_range(0..4),
                num_trajectories: 4,
                min_trajectory_len: 3,
                max_trajectory_len: 5,
                num_users: 2,
                days: 1,
                ..WorldConfig::default()
            };
            let w = generate_synthetic_world(&wc, c).unwrap();
            let ds = Dataset::build(&w, &DatasetConfig::default()).unwrap();
            let gat_heads = rng.random_range(1..4);
            let tc = TokenizerConfig {
                hidden: gat_heads * rng.random_range(1..5),
                window: rng.random_range(1..5),
                gat_layers: rng.random_range(1..4),
                gat_heads,
                token_dim: 8,
            };
            let bank = FeatureBank::new(&w.network, &w.store, &ds.stats, tc.window, DType::F64, &Device::Cpu).unwrap();
            let mut init = stfoundry::nn::Init::new(c, DType::F64, Device::Cpu);
            let tok = stfoundry::tokenizer::StTokenizer::new(&tc, segments, &mut init).unwrap();
            let (hs, static_atts) = tok.encode_static_with_attention(&bank).unwrap();
            let (first, last) = bank.covered_slices().unwrap();
            let slices: Vec<i64> = (first..=last).step_by(((last - first) / 3).max(1) as usize).collect();
            let (hd, dyn_atts) = tok.encode_dynamic_with_attention(&bank, &slices).unwrap();
            let (_, fusion) = tok.fuse(&hs, &hd).unwrap();
            for a in static_atts.iter().chain(&dyn_atts) {
                worst = worst.max(check_rows(a, "GAT attention"));
                rows += a.elem_count() / segments;
            }
            worst = worst.max(check_rows(&fusion, "fusion attention"));
            rows += fusion.elem_count() / segments;
        }
        format!("{rows} rows over 100 configurations, max deviation {worst:.1e}")
    });
}

/// `sum(f(x) * r)` for a fixed random `r`.
fn probe(out: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..out.elem_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = Tensor::from_vec(r, out.shape(), out.device()).unwrap();
    (out * r).unwrap().sum_all().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn grad_error(var: &Var, loss: &dyn Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let g = grads.get(var.as_tensor()).expect("gradient present");
    let n = var.elem_count();
    let coords: Vec<usize> = (0..n.min(12)).map(|k| k * 7919 % n).collect();
    max_gradient_error(var, g, &coords, 1e-4, 1e-6, || Ok(scalar(&loss()))).unwrap()
}

#[test]
fn criterion_03_gradient_checks() {
    criterion(3, "gradient checks", Some(Duration::from_secs(120)), || {
        let s = setup(small_world_config(8, 20), 2, 3);
        let model = &s.model;
        let mut report = BTreeMap::new();
        let hs = model.tokenizer.encode_static(&s.bank).unwrap();
        let (first, _) = s.bank.covered_slices().unwrap();
        let hd = model.tokenizer.encode_dynamic(&s.bank, &[first, first + 1]).unwrap();
        let hs_var = Var::from_tensor(&hs.detach()).unwrap();
        let hd_var = Var::from_tensor(&hd.detach()).unwrap();
        let fusion = || probe(&fuse_with_queries(model.tokenizer.queries.as_tensor(), hs_var.as_tensor(), hd_var.as_tensor()).unwrap().0, 1);
        let mut worst = 0.0f64;
        for v in [&model.tokenizer.queries, &hs_var, &hd_var] {
            worst = worst.max(grad_error(v, &fusion));
        }
        report.insert("fusion", worst);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hidden = 2 * model.tokenizer.config.hidden;
        let spatial: Vec<f64> = (0..5 * hidden).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spatial = Tensor::from_vec(spatial, (5, hidden), &Device::Cpu).unwrap();
        let time: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let time = Tensor::from_vec(time, (5, 4), &Device::Cpu).unwrap();
        let mlp = || probe(&model.tokenizer.integrate(&spatial, &time).unwrap(), 2);
        let mut worst = 0.0f64;
        for l in [&model.tokenizer.token_mlp.hidden, &model.tokenizer.token_mlp.out] {
            worst = worst.max(grad_error(&l.weight, &mlp));
        }
        report.insert("token_mlp", worst);

        let z: Vec<f64> = (0..6 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = Tensor::from_vec(z, (6, 16), &Device::Cpu).unwrap();
        let heads = || {
            let logits = model.heads.decode_classification(&z).unwrap();
            let labels = Tensor::new(&[0u32, 3, 5, 1, 7, 2], &Device::Cpu).unwrap();
            let ce = candle_nn::loss::cross_entropy(&logits, &labels).unwrap();
            let reg = model.heads.decode_regression(&z).unwrap().sqr().unwrap().mean_all().unwrap();
            let time = model.heads.decode_time(&z).unwrap().sqr().unwrap().mean_all().unwrap();
            ((ce + reg).unwrap() + time).unwrap()
        };
        let mut worst = 0.0f64;
        for head in [&model.heads.classification, &model.heads.regression, &model.heads.time] {
            for l in &head.layers {
                worst = worst.max(grad_error(&l.weight, &heads));
            }
        }
        report.insert("heads", worst);

        for a in model.backbone.adapters() {
            let b: Vec<f64> = (0..a.b.elem_count()).map(|_| rng.random_range(-0.1..0.1)).collect();
            a.b.set(&Tensor::from_vec(b, a.b.dims(), &Device::Cpu).unwrap()).unwrap();
        }
        let x: Vec<f64> = (0..2 * 7 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(x, (2, 7, 16), &Device::Cpu).unwrap();
        let lora = || probe(&model.backbone.forward_embeddings(&x, true).unwrap(), 3);
        let mut worst = 0.0f64;
        for a in model.backbone.adapters() {
            worst = worst.max(grad_error(&a.a, &lora));
            worst = worst.max(grad_error(&a.b, &lora));
        }
        report.insert("lora", worst);

        let overall = report.values().copied().fold(0.0f64, f64::max);
        assert!(overall < 1e-4, "relative errors {report:?}");
        format!("max relative error {report:?}")
    });
}

fn hashes(model: &StModel) -> BTreeMap<String, String> {
    model.groups().iter().map(|g| (g.name().to_string(), g.hash().unwrap())).collect()
}

#[test]
fn criterion_04_frozen_contracts() {
    criterion(4, "frozen base and tokenizer", None, || {
        let s = setup(small_world_config(10, 60), 2, 4);
        let h0 = hashes(&s.model);
        let mrt = MrtConfig {
            epochs: 5,
            batch_size: 8,
            ..MrtConfig::default()
        };
        run_mrt_stage(&s.model, &s.bank, &s.ds, &mrt).unwrap();
        let h1 = hashes(&s.model);
        let tune = TuneConfig {
            epochs: 5,
            batch_size: 8,
            ..TuneConfig::default()
        };
        run_prompt_tuning(&s.model, &s.bank, &s.ds, &s.ctx, &tune).unwrap();
        let h2 = hashes(&s.model);
        assert_eq!(h0["base"], h1["base"], "base changed in stage 1");
        assert_eq!(h1["base"], h2["base"], "base changed in stage 2");
        assert_eq!(h1["tokenizer"], h2["tokenizer"], "tokenizer changed in stage 2");
        assert_ne!(h0["tokenizer"], h1["tokenizer"], "tokenizer did not train in stage 1");
        assert_ne!(h1["lora"], h2["lora"], "adapters did not train in stage 2");
        format!("base {} unchanged over 5 + 5 epochs", &h2["base"][..12])
    });
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect()
}

fn random_prompts(s: &Setup, count: usize, seed: u64) -> Vec<(TaskId, stfoundry::prompting::PromptInstance, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let task = TaskId::ALL[rng.random_range(0..TaskId::ALL.len())];
        let pool: Vec<&StUnitSequence> = match task.modality() {
            stfoundry::data::SequenceKind::Trajectory => s.ds.trajectories.iter().collect(),
            stfoundry::data::SequenceKind::TrafficSeries => s.ds.series.iter().collect(),
        };
        let seq = pool[rng.random_range(0..pool.len())];
        let trip = s.ds.trips.get(seq.id).filter(|_| seq.kind == stfoundry::data::SequenceKind::Trajectory);
        let params = TaskParams {
            seed: rng.random(),
            ..TaskParams::default()
        };
        match build_prompt(&s.ctx, task, seq, trip, &params) {
            Ok(p) => out.push((task, p, seq.len())),
            Err(stfoundry::Error::Input(_)) => {}
            Err(e) => panic!("{task}: {e}"),
        }
    }
    out
}

#[test]
fn criterion_05_zero_init_identity() {
    criterion(5, "zero-init LoRA identity", None, || {
        let s = setup(small_world_config(10, 40), 2, 5);
        let prompts: Vec<_> = random_prompts(&s, 10, 5).into_iter().map(|(_, p, _)| p).collect();
        let units: Vec<_> = prompts.iter().map(|p| p.units.clone()).collect();
        let tokens = s.model.tokenizer.tokenize(&s.bank, &units).unwrap();
        for (p, t) in prompts.iter().zip(&tokens) {
            let one = std::slice::from_ref(p);
            let tok = std::slice::from_ref(t);
            let adapted = s.model.forward_with(one, tok, true).unwrap().hidden;
            let base = s.model.forward_with(one, tok, false).unwrap().hidden;
            assert_eq!(bits(&adapted), bits(&base), "prompt {} differs", p.sequence_id);
        }
        "10 prompts bitwise equal".to_string()
    });
}

#[test]
fn criterion_06_token_algebra() {
    criterion(6, "token algebra", None, || {
        let s = setup(small_world_config(12, 80), 2, 6);
        let prompts = random_prompts(&s, 500, 6);
        let mut per_task: BTreeMap<TaskId, usize> = BTreeMap::new();
        for chunk in prompts.chunks(50) {
            let ps: Vec<_> = chunk.iter().map(|(_, p, _)| p.clone()).collect();
            let units: Vec<_> = ps.iter().map(|p| p.units.clone()).collect();
            let tokens = s.model.tokenizer.tokenize(&s.bank, &units).unwrap();
            let out = s.model.forward(&ps, &tokens).unwrap();
            for (b, (task, p, len)) in chunk.iter().enumerate() {
                *per_task.entry(*task).or_default() += 1;
                assert_eq!(out.z(b).unwrap().dim(0).unwrap(), p.placeholders.len());
                assert_eq!(out.v(b).unwrap().dim(0).unwrap(), p.text.len() + p.units.len());
                let cls = p.placeholders.iter().filter(|k| **k == PlaceholderKind::Cls).count();
                let reg = p.placeholders.len() - cls;
                match task {
                    TaskId::NextHop | TaskId::Classification => assert_eq!((cls, reg), (1, 0)),
                    TaskId::Tte => assert_eq!((cls, reg), (0, *len)),
                    TaskId::OneStep => assert_eq!((cls, reg), (0, 1)),
                    TaskId::MultiStep => assert_eq!((cls, reg), (0, 6)),
                    TaskId::Imputation => assert_eq!((cls, reg), (0, p.mask_positions.len())),
                    TaskId::Recovery => assert_eq!((cls, reg), (p.mask_positions.len(), 0)),
                    TaskId::SimilarSearch => assert_eq!((cls, reg), (0, 0)),
                }
            }
        }
        assert_eq!(per_task.len(), 8, "tasks covered: {per_task:?}");
        format!("500 prompts, per task {per_task:?}")
    });
}

fn components(c: &BTreeMap<String, f64>) -> String {
    ["clas", "reg", "tim"].iter().map(|k| format!("{k} {:.3}", c[*k])).collect::<Vec<_>>().join(", ")
}

#[test]
fn criterion_07_learning_signal() {
    criterion(7, "learning signal", Some(Duration::from_secs(60 * 60)), || {
        let (w, ds) = world(WorldConfig::default(), 0);
        let ctx = PromptContext::new(InstructionRegistry::default(), ds.stats.clone());
        let exp = ExperimentConfig::default();
        let mc = ModelConfig {
            tokenizer: exp.tokenizer.clone(),
            backbone: exp.backbone.clone(),
            head_hidden: exp.head_hidden,
            num_segments: w.network.num_segments(),
            vocab_size: ctx.vocab.len(),
            seed: 0,
        };
        let model = StModel::new(&mc, DType::F32, &Device::Cpu).unwrap();
        let bank = FeatureBank::new(&w.network, &w.store, &ds.stats, mc.tokenizer.window, DType::F32, &Device::Cpu).unwrap();
        let cfg = exp.mrt.clone();
        assert_eq!(cfg.epochs, 20);
        let report = run_mrt_stage(&model, &bank, &ds, &cfg).unwrap();
        let first = report.epochs[0].components["total"];
        let last = report.epochs[19].components["total"];
        let held_out = evaluate_mrt(&model, &bank, &ds, SplitName::Valid, &cfg).unwrap();
        let baseline = 1.0 / w.network.num_segments() as f64;
        let detail = format!(
            "L_MRT {first:.3} -> {last:.3} (ratio {:.3}; epoch 1 {}; epoch 20 {}), validation accuracy {:.3} vs 5/I = {:.3}, training accuracy {:.3}",
            last / first,
            components(&report.epochs[0].components),
            components(&report.epochs[19].components),
            held_out.accuracy,
            5.0 * baseline,
            report.epochs[19].accuracy
        );
        assert!(last <= 0.5 * first, "{detail}");
        assert!(held_out.accuracy >= 5.0 * baseline, "{detail}");
        detail
    });
}

#[test]
fn criterion_08_co_training() {
    criterion(8, "multi-task co-training", None, || {
        let dir = tempfile::tempdir().unwrap();
        let layout = RunLayout::new(dir.path());
        let mut cfg = ExperimentConfig {
            world: WorldConfig {
                num_segments: 20,
                num_trajectories: 800,
                min_trajectory_len: 8,
                max_trajectory_len: 16,
                num_users: 4,
                days: 4,
                ..WorldConfig::default()
            },
            tokenizer: TokenizerConfig {
                hidden: 16,
                window: 3,
                token_dim: 32,
                ..TokenizerConfig::default()
            },
            backbone: BackboneConfig {
                layers: 2,
                heads: 2,
                width: 32,
                ffn_width: 64,
                max_len: 96,
                ..BackboneConfig::default()
            },
            head_hidden: Some(32),
            precision: Precision::F32,
            ..ExperimentConfig::default()
        };
        cfg.mrt.epochs = 10;
        cfg.mrt.batch_size = 16;
        cfg.tune.epochs = 8;
        cfg.tune.batch_size = 8;
        let tasks = [TaskId::NextHop, TaskId::Tte, TaskId::MultiStep];
        cfg.tune.task_mix = tasks.iter().map(|&task| TaskShare { task, proportion: 1.0 }).collect();
        let cfg = cfg.with_seed(8);
        pipeline::gen_data(&cfg, &layout, false).unwrap();
        pipeline::pretrain(&cfg, &layout).unwrap();
        let runs = pipeline::tune_ablation(&cfg, &layout, &tasks).unwrap();
        let co = &runs["co_trained"];
        let mut table = Vec::new();
        for t in tasks {
            let valid = co.series(t, "valid");
            let alone = runs[t.as_str()].series(t, "valid");
            table.push(format!(
                "{t}: co-trained {:.4} -> {:.4}, alone {:.4} -> {:.4}",
                valid[0],
                valid[valid.len() - 1],
                alone[0],
                alone[alone.len() - 1]
            ));
            assert!(valid[valid.len() - 1] < valid[0], "{t} validation loss did not fall: {valid:?}");
            assert_eq!(alone.len(), valid.len());
        }
        let _ = writeln!(std::io::stderr(), "ablation table\n  {}", table.join("\n  "));
        table.join("; ")
    });
}

#[test]
fn criterion_09_masking_semantics() {
    criterion(9, "recovery/imputation masking semantics", None, || {
        let s = setup(small_world_config(10, 80), 2, 9);
        let cfg = EvalConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut trials = 0;
        for task in [TaskId::Recovery, TaskId::Imputation] {
            let base = masked_outputs(&s.model, &s.bank, &s.ds, &s.ctx, task, &cfg).unwrap();
            let reference = base.metrics().unwrap();
            for _ in 0..100 {
                let mut perturbed = base.clone();
                match &mut perturbed.values {
                    MaskedValues::Labels { preds, truths } => {
                        for (i, &m) in base.mask.iter().enumerate() {
                            if !m {
                                preds[i] = rng.random_range(0..10);
                                truths[i] = rng.random_range(0..10);
                            }
                        }
                    }
                    MaskedValues::Values { preds, truths } => {
                        for (i, &m) in base.mask.iter().enumerate() {
                            if !m {
                                preds[i] = rng.random_range(-1e3..1e3);
                                truths[i] = rng.random_range(-1e3..1e3);
                            }
                        }
                    }
                }
                assert_eq!(perturbed.metrics().unwrap(), reference, "{task}");
                trials += 1;
            }
        }
        format!("{trials} perturbation trials, metrics identical")
    });
}

#[test]
fn criterion_10_end_to_end_determinism() {
    criterion(10, "end-to-end determinism", None, || {
        let mut cfg = ExperimentConfig {
            world: small_world_config(10, 60),
            tokenizer: TokenizerConfig {
                hidden: 8,
                window: 2,
                gat_layers: 1,
                gat_heads: 2,
                token_dim: 16,
            },
            backbone: BackboneConfig {
                layers: 2,
                heads: 2,
                width: 16,
                ffn_width: 32,
                max_len: 96,
                ..BackboneConfig::default()
            },
            head_hidden: Some(16),
            serial_mode: true,
            ..ExperimentConfig::default()
        };
        cfg.mrt.epochs = 2;
        cfg.tune.epochs = 2;
        let cfg = cfg.with_seed(10);
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            pipeline::run_all(&cfg, &RunLayout::new(d.path()), false).unwrap();
        }
        let mut files: Vec<String> = std::fs::read_dir(dirs[0].path().join("reports"))
            .unwrap()
            .map(|e| format!("reports/{}", e.unwrap().file_name().to_string_lossy()))
            .collect();
        files.sort();
        files.push("summary.json".into());
        files.push("traces/mrt.csv".into());
        files.push("traces/tune.csv".into());
        let mut distinct = HashSet::new();
        for f in &files {
            let a = std::fs::read(dirs[0].path().join(f)).unwrap();
            let b = std::fs::read(dirs[1].path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between runs");
            distinct.insert(a);
        }
        format!("{} artifacts byte-identical", files.len())
    });
}
