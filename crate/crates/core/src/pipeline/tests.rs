use super::*;
use crate::training::TaskShare;

/// Seconds-scale experiment on a small world.
pub(crate) fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        world: WorldConfig {
            num_segments: 10,
            num_trajectories: 60,
            min_trajectory_len: 5,
            max_trajectory_len: 9,
            num_users: 3,
            days: 1,
            ..WorldConfig::default()
        },
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
            max_len: 64,
            ..BackboneConfig::default()
        },
        head_hidden: Some(16),
        precision: Precision::F64,
        ..ExperimentConfig::default()
    };
    cfg.mrt.epochs = 1;
    cfg.tune.epochs = 1;
    cfg.tune.task_mix = vec![TaskShare {
        task: TaskId::NextHop,
        proportion: 1.0,
    }];
    cfg.eval_tasks = vec![TaskId::NextHop, TaskId::Recovery];
    cfg.with_seed(3)
}

#[test]
fn stages_require_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let layout = RunLayout::new(dir.path());
    let cfg = tiny_config();
    match pretrain(&cfg, &layout) {
        Err(Error::Dependency(p)) => assert!(p.ends_with("world_config.json")),
        other => panic!("unexpected {other:?}"),
    }
    gen_data(&cfg, &layout, false).unwrap();
    match tune(&cfg, &layout) {
        Err(Error::Dependency(p)) => assert!(p.ends_with("pretrain/model_config.json")),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(evaluate(&cfg, &layout, &[TaskId::Tte]), Err(Error::Dependency(_))));
    assert!(matches!(summarize(&cfg, &layout), Err(Error::Dependency(_))));
}

#[test]
fn gen_data_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let layout = RunLayout::new(dir.path());
    let cfg = tiny_config();
    gen_data(&cfg, &layout, false).unwrap();
    for f in ["network.csv", "trajectories.jsonl", "traffic_state.csv", "world_config.json"] {
        assert!(layout.data().join(f).exists(), "{f}");
    }
    assert!(matches!(gen_data(&cfg, &layout, false), Err(Error::Config(_))));
    gen_data(&cfg, &layout, true).unwrap();
}

#[test]
fn same_seed_gives_identical_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    gen_data(&cfg, &RunLayout::new(a.path()), false).unwrap();
    gen_data(&cfg, &RunLayout::new(b.path()), false).unwrap();
    for f in ["network.csv", "trajectories.jsonl", "traffic_state.csv"] {
        assert_eq!(
            fs::read(a.path().join("data").join(f)).unwrap(),
            fs::read(b.path().join("data").join(f)).unwrap()
        );
    }
}

#[test]
fn full_run_writes_verified_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let layout = RunLayout::new(dir.path());
    let cfg = tiny_config();
    let summary = run_all(&cfg, &layout, false).unwrap();
    assert_eq!(summary.reports.len(), 2);
    let manifest = RunManifest::load(&layout.manifest()).unwrap();
    manifest.verify(&layout).unwrap();
    assert_eq!(manifest.config_hash, cfg.hash().unwrap());
    for stage in ["gen_data", "pretrain", "tune", "eval", "report"] {
        assert!(manifest.stages.contains_key(stage), "{stage}");
    }
    assert!(!layout.manifest().with_extension("json.tmp").exists());
    let mut tampered = cfg.clone();
    tampered.seed += 1;
    write_json(&tampered, &layout.config()).unwrap();
    assert!(manifest.verify(&layout).is_err());
}

#[test]
fn config_file_resolves_world_path() {
    let dir = tempfile::tempdir().unwrap();
    let world = WorldConfig {
        num_segments: 12,
        ..WorldConfig::default()
    };
    write_json(&world, &dir.path().join("world.json")).unwrap();
    fs::write(dir.path().join("exp.json"), r#"{"world_config": "world.json", "seed": 9}"#).unwrap();
    let cfg = ExperimentConfig::load(&dir.path().join("exp.json")).unwrap();
    assert_eq!(cfg.world.num_segments, 12);
    assert!(cfg.world_config.is_none());
    assert!(matches!(
        ExperimentConfig::load(&dir.path().join("missing.json")),
        Err(Error::Config(_))
    ));
    fs::write(dir.path().join("bad.json"), r#"{"tokenizer": {"token_dim": 32}}"#).unwrap();
    assert!(matches!(ExperimentConfig::load(&dir.path().join("bad.json")), Err(Error::Config(_))));
}
