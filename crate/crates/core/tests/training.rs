use rgl_core::checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION};
use rgl_core::config::Config;
use rgl_core::dataset::{synthesize, Dataset, VideoSample};
use rgl_core::inference::{generate_video, mean_mapping_loss, GenerateOptions};
use rgl_core::model::{LossWeights, Model, Phase};
use rgl_core::params::Graph;
use rgl_core::training::{Adam, AdamHyper, RunStatus, Trainer};

fn small() -> (Config, Dataset) {
    let mut cfg = Config::desk();
    cfg.synth.n_videos = 3;
    cfg.synth.n_heldout = 1;
    cfg.model.embed_dim = 8;
    cfg.model.unified_dim = 8;
    cfg.model.hidden_dim = 12;
    cfg.model.word_dim = 8;
    cfg.model.att_dim = 8;
    cfg.train.pretrain_epochs = 2;
    cfg.train.max_epochs = 3;
    let d = synthesize(&cfg.synth, cfg.seed).unwrap();
    (cfg, d)
}

fn losses(model: &Model, videos: &[VideoSample], phase: Phase, w: &LossWeights) -> [f64; 5] {
    let refs: Vec<&VideoSample> = videos.iter().collect();
    let mut g = Graph::new(&model.store);
    let l = model.batch_loss(&mut g, &refs, phase, w);
    [l.ce, l.lm, l.lr, l.lg, l.total].map(|v| g.tape.scalar(v))
}

fn trained(cfg: &Config, d: &Dataset) -> Trainer {
    let mut t = Trainer::new(cfg.clone(), d);
    t.run(d, None, None, &mut |_| {}).unwrap();
    t
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let (mut cfg, d) = small();
    cfg.train.max_epochs = 1;
    let t = trained(&cfg, &d);
    let ckpt = t.checkpoint();
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(back.model.store, t.model.store);
    assert_eq!(back.adam, t.adam);
    assert_eq!(back.state, ckpt.state);
    let w = LossWeights::from(&cfg.train);
    let a = losses(&t.model, &d.videos, Phase::Full, &w);
    let b = losses(&back.model, &d.videos, Phase::Full, &w);
    assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    let opts = GenerateOptions::default();
    assert_eq!(
        generate_video(&t.model, &d.vocab, &d.videos[0], &opts),
        generate_video(&back.model, &d.vocab, &d.videos[0], &opts)
    );
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (mut cfg, d) = small();
    cfg.train.pretrain_epochs = 1;
    cfg.train.max_epochs = 0;
    let bytes = trained(&cfg, &d).checkpoint().to_bytes();

    let truncated = &bytes[..bytes.len() - 100];
    assert!(matches!(Checkpoint::from_bytes(truncated), Err(CheckpointError::Corruption(_))));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    let err = Checkpoint::from_bytes(&flipped).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&future).unwrap_err();
    assert!(matches!(err, CheckpointError::Version { .. }));
    let msg = err.to_string();
    assert!(msg.contains(&(FORMAT_VERSION + 1).to_string()) && msg.contains(&FORMAT_VERSION.to_string()));

    assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(CheckpointError::Corruption(_))));
}

#[test]
fn load_checks_config_compatibility() {
    let (mut cfg, d) = small();
    cfg.train.pretrain_epochs = 1;
    cfg.train.max_epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    trained(&cfg, &d).checkpoint().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert!(ckpt.check_config(&cfg).is_ok());
    let mut other = cfg.clone();
    other.train.lr = 0.5;
    assert!(matches!(ckpt.check_config(&other), Err(CheckpointError::Incompatible(_))));
    assert!(matches!(
        Checkpoint::load(&dir.path().join("missing.ckpt")),
        Err(CheckpointError::Io { .. })
    ));
}

#[test]
fn identical_runs_give_identical_checkpoints_and_logs() {
    let (cfg, d) = small();
    let a = trained(&cfg, &d);
    let b = trained(&cfg, &d);
    assert_eq!(a.log_lines(), b.log_lines());
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
    assert_eq!(a.log_lines().lines().count(), a.state.epoch);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (cfg, d) = small();
    let full = trained(&cfg, &d);

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(cfg.clone(), &d);
    let status = first.run(&d, Some(dir.path()), Some(3), &mut |_| {}).unwrap();
    assert_eq!(status, RunStatus::Halted);
    drop(first);
    let ckpt = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
    resumed.run(&d, Some(dir.path()), None, &mut |_| {}).unwrap();

    assert_eq!(resumed.log_lines(), full.log_lines());
    assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
    let on_disk = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(on_disk, full.log_lines());
    assert!(dir.path().join("final.ckpt").exists());
    assert!(dir.path().join("best.ckpt").exists());
}

#[test]
fn log_entries_carry_all_losses() {
    let (cfg, d) = small();
    let t = trained(&cfg, &d);
    for line in t.log_lines().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "L_S", "L_M", "L_R", "L_G", "val_cider"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
    }
    let phases: Vec<Phase> = t.state.log.iter().map(|e| e.phase).collect();
    assert_eq!(phases.iter().filter(|&&p| p == Phase::Pretrain).count(), 2);
    assert!(phases.windows(2).all(|w| !(w[0] == Phase::Full && w[1] == Phase::Pretrain)));
}

#[test]
fn first_full_epoch_lowers_total_loss_on_desk_preset() {
    let mut cfg = Config::desk();
    cfg.train.pretrain_epochs = 0;
    cfg.train.max_epochs = 1;
    let d = synthesize(&cfg.synth, 0).unwrap();
    let w = LossWeights::from(&cfg.train);
    let init = Model::new(&cfg.model, &d, 0);
    let before = losses(&init, &d.videos, Phase::Full, &w)[4];
    let t = trained(&cfg, &d);
    assert_eq!(t.state.log.len(), 1);
    let after = losses(&t.model, &d.videos, Phase::Full, &w)[4];
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn mapping_loss_drops_with_training() {
    let (mut cfg, d) = small();
    cfg.train.max_epochs = 15;
    cfg.train.patience = 100;
    let t = trained(&cfg, &d);
    let at_start = t.state.heldout_lm_start.expect("second phase ran");
    assert!(mean_mapping_loss(&t.model, &d.heldout) < at_start);
}

#[test]
fn teacher_forced_loss_decreases_over_first_steps() {
    let (cfg, d) = small();
    let mut model = Model::new(&cfg.model, &d, 0);
    let mut adam = Adam::new(
        &model.store,
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
    );
    let w = LossWeights::from(&cfg.train);
    let batch = [&d.videos[0]];
    let ids = model.trainable(Phase::Pretrain);
    let mut prev = f64::INFINITY;
    for _ in 0..10 {
        let (grads, ce) = {
            let mut g = Graph::new(&model.store);
            let l = model.batch_loss(&mut g, &batch, Phase::Pretrain, &w);
            (g.gradients(l.ce), g.tape.scalar(l.ce))
        };
        assert!(ce < prev, "{ce} >= {prev}");
        prev = ce;
        adam.step(&mut model.store, &grads, &ids).unwrap();
    }
}
