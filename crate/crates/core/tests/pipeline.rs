use dualmask::config::RunConfig;
use dualmask::masks::Task;
use dualmask::pipeline::{checkpoint_path, evaluate, lookup, make_splits, state_path, Trainer};

fn small() -> RunConfig {
    RunConfig::from_text(
        "data.count = 10\ndata.heldout_count = 12\ntrain.steps = 10\neval.samples = 10\neval.loss_clips = 3\n",
    )
    .unwrap()
}

#[test]
fn config_text_round_trips() {
    let cfg = small();
    let again = RunConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(cfg.to_text(), again.to_text());
    assert_eq!(cfg.hash(), again.hash());
    let mut other = cfg.clone();
    other.set("train.lr", "0.002").unwrap();
    assert_ne!(cfg.hash(), other.hash());
}

#[test]
fn bad_config_names_the_key() {
    let err = RunConfig::from_text("model.gamma = 3\n").unwrap_err().to_string();
    assert!(err.contains("model."), "{err}");
    assert!(RunConfig::from_text("train.lr = abc\n").is_err());
    assert!(RunConfig::from_text("no_equals_sign\n").is_err());
}

#[test]
fn splits_are_deterministic_and_disjoint_in_seed() {
    let cfg = small();
    let (a, h) = make_splits(&cfg).unwrap();
    let (b, _) = make_splits(&cfg).unwrap();
    assert_eq!(a.clips, b.clips);
    assert!(h.clips.iter().all(|c| c.frame_count() == cfg.eval.frames));
}

#[test]
fn resume_rejects_a_foreign_checkpoint() {
    let mut cfg = small();
    cfg.set("train.checkpoint_every", "2").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = make_splits(&cfg).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    t.run(&train.clips, 3, Some(dir.path())).unwrap();
    let path = dir.path().join("m.ckpt");
    t.save(&path).unwrap();
    assert!(state_path(&path).exists());
    let mut other = cfg.clone();
    other.set("train.lr", "0.5").unwrap();
    assert!(Trainer::resume(&other, &path).is_err());
    assert_eq!(Trainer::resume(&cfg, &path).unwrap().step, 3);
    assert!(checkpoint_path(dir.path(), 2).exists());
    assert!(!checkpoint_path(dir.path(), 3).exists());
}

#[test]
fn evaluation_reports_every_metric_and_task() {
    let cfg = small();
    let (train, heldout) = make_splits(&cfg).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    t.run(&train.clips, 4, None).unwrap();
    let rows = evaluate(&t.params, &cfg, &heldout.clips).unwrap();
    assert_eq!(rows.len(), 9);
    for task in Task::ALL {
        for metric in ["toy_fvd", "psnr", "eval_loss"] {
            assert!(lookup(&rows, metric, task).unwrap().is_finite());
        }
    }
    assert_eq!(rows, evaluate(&t.params, &cfg, &heldout.clips).unwrap());
}
