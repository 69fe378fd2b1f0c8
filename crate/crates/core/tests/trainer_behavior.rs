//! Trainer behavior on a tiny model: determinism, loss bookkeeping, the
//! schedule, staged freezing, queues and checkpoint round trips.

use globaldoc::datagen::{generate, GeneratorConfig};
use globaldoc::encoders::{GlobalDocModel, ModelConfig, ParamGroup};
use globaldoc::objectives::Setting;
use globaldoc::trainer::{lr_at, read_metrics, TrainConfig, Trainer, FINAL_CHECKPOINT_DIR, METRICS_FILE};
use globaldoc::DocumentPair;

fn docs() -> Vec<DocumentPair> {
    let cfg = GeneratorConfig {
        num_categories: 3,
        per_class: 8,
        image_size: 8,
        vocab_size: 12,
        min_body_len: 2,
        max_body_len: 5,
        test_fraction: 0.25,
        ..GeneratorConfig::default()
    };
    generate(&cfg).unwrap().train
}

fn config(setting: Setting, steps: usize) -> TrainConfig {
    TrainConfig {
        setting,
        batch_size: 4,
        total_steps: steps,
        stage2_start_step: steps / 2,
        queue_capacity: 8,
        ..TrainConfig::default()
    }
}

fn trainer(setting: Setting, steps: usize) -> Trainer {
    let mut cfg = config(setting, steps);
    cfg.objective.k_mine = 2;
    Trainer::new(cfg, GlobalDocModel::new(ModelConfig::tiny(8)).unwrap()).unwrap()
}

#[test]
fn identical_runs_are_bit_identical() {
    let d = docs();
    for setting in [Setting::S1, Setting::S2, Setting::S3] {
        let (mut a, mut b) = (trainer(setting, 6), trainer(setting, 6));
        a.train(&d, None).unwrap();
        b.train(&d, None).unwrap();
        assert_eq!(a.history, b.history, "{setting}");
        assert_eq!(a.model.params(), b.model.params(), "{setting}");
    }
}

#[test]
fn total_is_the_sum_of_enabled_terms() {
    let d = docs();
    let mut t = trainer(Setting::S3, 8);
    t.train(&d, None).unwrap();
    for m in &t.history {
        let l = m.losses;
        let sum = l.l2m_inter + l.l2m_intra + l.l2u + l.l2r_vision + l.l2r_language;
        assert!((l.total - sum).abs() <= 1e-9 * sum.abs().max(1.0), "{}", m.to_line());
        let stage2 = m.step >= 4;
        assert_eq!(l.l2r_vision != 0.0, stage2, "{}", m.to_line());
    }
    let mut s1 = trainer(Setting::S1, 3);
    s1.train(&d, None).unwrap();
    assert!(s1.history.iter().all(|m| m.losses.l2u == 0.0 && m.losses.l2r_vision == 0.0));
}

#[test]
fn schedule_warms_up_then_decays_to_final() {
    let cfg = TrainConfig {
        total_steps: 100,
        warmup_fraction: 0.1,
        peak_lr: 1e-3,
        final_lr: 5e-4,
        ..TrainConfig::default()
    };
    assert!((lr_at(0, &cfg) - 1e-4).abs() < 1e-15);
    assert!((lr_at(9, &cfg) - 1e-3).abs() < 1e-15);
    assert!((lr_at(99, &cfg) - 5e-4).abs() < 1e-15);
    let lrs: Vec<f64> = (0..100).map(|s| lr_at(s, &cfg)).collect();
    assert!(lrs[..10].windows(2).all(|w| w[0] < w[1]));
    assert!(lrs[9..].windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn stage_two_only_moves_cluster_heads() {
    let d = docs();
    let mut t = trainer(Setting::S3, 8);
    for _ in 0..4 {
        t.train_step(&d).unwrap();
    }
    let before = t.model.params().clone();
    t.train_step(&d).unwrap();
    let p = t.model.params();
    let mut cluster_moved = false;
    for id in p.ids() {
        let changed = p.get(id) != before.get(id);
        if p.group(id) == ParamGroup::Cluster {
            cluster_moved |= changed;
        } else {
            assert!(!changed, "{} moved in stage 2", p.name(id));
        }
    }
    assert!(cluster_moved);
    assert!(t.neighbors.is_some());
}

#[test]
fn cluster_heads_stay_fixed_before_stage_two() {
    let d = docs();
    let mut t = trainer(Setting::S3, 8);
    let before = t.model.params().clone();
    t.train_step(&d).unwrap();
    let p = t.model.params();
    for id in p.ids().filter(|&id| p.group(id) == ParamGroup::Cluster) {
        assert_eq!(p.get(id), before.get(id), "{}", p.name(id));
    }
}

#[test]
fn queues_fill_fifo_up_to_capacity() {
    let d = docs();
    let mut t = trainer(Setting::S2, 5);
    t.train_step(&d).unwrap();
    assert_eq!(t.vision_queue.len(), 4);
    t.train(&d, None).unwrap();
    assert_eq!(t.vision_queue.len(), 8);
    assert_eq!(t.language_queue.len(), 8);
    let seqs: Vec<u64> = t.vision_queue.entries().map(|e| e.sequence).collect();
    assert_eq!(seqs, (12..20).collect::<Vec<u64>>());
}

#[test]
fn metrics_and_checkpoints_round_trip() {
    let d = docs();
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(Setting::S2, 4);
    t.train(&d, Some(dir.path())).unwrap();
    let read = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(read, t.history);

    let mut cfg = config(Setting::S2, 6);
    cfg.objective.k_mine = 2;
    let resumed = Trainer::resume(cfg, GlobalDocModel::new(ModelConfig::tiny(8)).unwrap(), &dir.path().join(FINAL_CHECKPOINT_DIR)).unwrap();
    assert_eq!(resumed.step, 4);
    assert_eq!(resumed.model.params(), t.model.params());
    assert_eq!(resumed.rng.state(), t.rng.state());
    for id in t.model.params().ids() {
        assert_eq!(resumed.optimizer.moments(id), t.optimizer.moments(id));
    }
    assert!(resumed.vision_queue.is_empty(), "queues are not checkpointed");
}

#[test]
fn invalid_configs_are_rejected() {
    let model = || GlobalDocModel::new(ModelConfig::tiny(8)).unwrap();
    let mut bad_stage = config(Setting::S3, 4);
    bad_stage.stage2_start_step = 4;
    assert!(Trainer::new(bad_stage, model()).is_err());
    assert!(Trainer::new(TrainConfig { batch_size: 1, ..config(Setting::S2, 4) }, model()).is_err());
    let mut t = trainer(Setting::S2, 4);
    assert!(t.train_step(&docs()[..3]).is_err());
}
