use std::path::Path;

use hybrid_splat::checkpoint;
use hybrid_splat::config::{Ablation, TrainConfig};
use hybrid_splat::dataset::{Dataset, Split};
use hybrid_splat::error::Error;
use hybrid_splat::linalg::Vec3;
use hybrid_splat::scalar::logit;
use hybrid_splat::synth::{emit_dataset, make_box_scene, EmitOptions, RoomSpec};
use hybrid_splat::trainer::{EventKind, TrainState, Trainer};

const TINY: &str = r#"
[schedule]
pretrain_iters = 4
densify_from = 2
densify_until = 12
densify_every = 4
opacity_reset_every = 8
mask_loss_from = 12
additional_densify_from = 12
total_iters = 20
"#;

fn tiny_dataset(dir: &Path) -> Dataset<f32> {
    let scene = make_box_scene(&RoomSpec { seed: 3, ..RoomSpec::default() }).unwrap();
    let opts = EmitOptions { n_views: 8, width: 32, height: 32, num_points: 150, ..EmitOptions::default() };
    emit_dataset(&scene, &opts, dir).unwrap();
    Dataset::load(dir, 16).unwrap()
}

fn config(ablation: Ablation) -> TrainConfig {
    TrainConfig::compose(Some(ablation), Some(TINY)).unwrap()
}

#[test]
fn resume_from_checkpoint_reproduces_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let cfg = config(Ablation::Ours);

    let mut full = Trainer::new(cfg.clone(), &ds).unwrap();
    full.train().unwrap();

    let mut first = Trainer::new(cfg.clone(), &ds).unwrap();
    first.pretrain().unwrap();
    first.run_until(10).unwrap();
    let path = dir.path().join("mid.ckpt");
    checkpoint::save(&path, &first.state, &first.config).unwrap();
    let (state, cfg_back) = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(cfg_back, cfg);
    let mut resumed = Trainer::from_state(cfg_back, &ds, state).unwrap();
    resumed.train().unwrap();

    assert_eq!(resumed.trace.len(), 10);
    assert_eq!(&full.trace[10..], &resumed.trace[..]);
    assert_eq!(full.events.iter().filter(|e| e.iteration > 10).cloned().collect::<Vec<_>>(), resumed.events);
    assert_eq!(
        checkpoint::to_bytes(&full.state, &full.config).unwrap(),
        checkpoint::to_bytes(&resumed.state, &resumed.config).unwrap()
    );
}

#[test]
fn same_seed_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let run = |seed: u64| {
        let mut cfg = config(Ablation::D);
        cfg.seed = seed;
        let mut t = Trainer::new(cfg, &ds).unwrap();
        t.train().unwrap();
        (t.trace, checkpoint::to_bytes(&t.state, &t.config).unwrap())
    };
    let (a, ca) = run(5);
    let (b, cb) = run(5);
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let (c, _) = run(6);
    assert_ne!(a.iter().map(|r| r.view).collect::<Vec<_>>(), c.iter().map(|r| r.view).collect::<Vec<_>>());
}

#[test]
fn views_are_permuted_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let t = Trainer::new(config(Ablation::A), &ds).unwrap();
    let train: Vec<usize> = (0..ds.views.len()).filter(|&i| ds.views[i].split == Split::Train).collect();
    for epoch in 0..3 {
        let mut seen: Vec<usize> = (1..=train.len()).map(|k| t.view_for(epoch * train.len() + k)).collect();
        seen.sort_unstable();
        assert_eq!(seen, train);
    }
}

/// A trainer whose Gaussians all have opacity `alpha`, small scale and a
/// gradient statistic far above the densification threshold.
fn primed(ds: &Dataset<f32>, alpha: f32) -> Trainer<'_, f32> {
    let mut t = Trainer::new(config(Ablation::Ours), ds).unwrap();
    let set = &mut t.state.gaussians;
    for g in set.gaussians.iter_mut() {
        g.logit_opacity = logit(alpha);
        g.log_scale = Vec3::new(0.01f32.ln(), 0.01f32.ln(), 0.01f32.ln());
    }
    for (a, c) in set.grad_accum.iter_mut().zip(set.grad_count.iter_mut()) {
        *a = 1.0;
        *c = 1;
    }
    t
}

#[test]
fn additional_densification_splits_into_dimmer_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let mut t = primed(&ds, 0.9);
    let n = t.state.gaussians.len();
    t.densify_additional(13);
    let e = t.events.last().unwrap().clone();
    assert_eq!(e.kind, EventKind::AdditionalDensify);
    assert_eq!((e.split, e.pruned, e.count_before), (n, 0, n));
    assert_eq!(e.count_after, 2 * n);
    assert_eq!(t.state.gaussians.len(), 2 * n);
    assert_eq!(e.children_alpha.len(), 2 * n);
    for [parent, child] in &e.children_alpha {
        assert!((parent - 0.9).abs() < 1e-6);
        assert!((child - 0.72).abs() / 0.72 < 1e-5, "child alpha {child}");
    }
    for g in &t.state.gaussians.gaussians {
        assert!((g.alpha() - 0.72).abs() < 1e-5);
        assert!((g.scale().x - 0.01 / 1.6).abs() < 1e-6);
    }
    assert!(t.state.gaussians.is_consistent());

    // Below the threshold nothing is split.
    let mut quiet = primed(&ds, 0.5);
    quiet.state.gaussians.grad_accum.iter_mut().for_each(|a| *a = 0.0);
    quiet.densify_additional(13);
    assert_eq!(quiet.state.gaussians.len(), n);
}

#[test]
fn opacity_reset_caps_alpha_and_clears_moments() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let mut t = primed(&ds, 0.95);
    t.state.gaussians.moments.iter_mut().for_each(|m| m.m.logit_opacity = 3.0);
    t.opacity_reset(8);
    let e = t.events.last().unwrap();
    assert_eq!(e.kind, EventKind::OpacityReset);
    assert!((e.max_alpha_before - 0.95).abs() < 1e-6);
    assert!(e.max_alpha_after <= 0.01 * (1.0 + 1e-5));
    assert!(t.state.gaussians.gaussians.iter().all(|g| g.alpha() <= 0.01 * (1.0 + 1e-5)));
    assert!(t.state.gaussians.moments.iter().all(|m| m.m.logit_opacity == 0.0 && m.v.logit_opacity == 0.0));
}

#[test]
fn scheduled_events_happen_at_the_right_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let mut t = Trainer::new(config(Ablation::Ours), &ds).unwrap();
    t.train().unwrap();
    let at = |k: EventKind| t.events.iter().filter(|e| e.kind == k).map(|e| e.iteration).collect::<Vec<_>>();
    assert_eq!(at(EventKind::Densify), vec![4, 8]);
    assert_eq!(at(EventKind::OpacityReset), vec![8]);
    assert_eq!(at(EventKind::AdditionalDensify), vec![12, 16]);
    for e in t.events.iter().filter(|e| e.kind == EventKind::OpacityReset) {
        assert!(e.max_alpha_after <= 0.01 * (1.0 + 1e-5));
    }
    // The mask term is only reported from its start iteration on.
    for row in &t.trace {
        if row.iteration < 12 {
            assert_eq!(row.loss.total, row.loss.color);
        }
    }
    assert!(t.trace.iter().any(|r| r.iteration >= 12 && r.loss.total > r.loss.color));
}

#[test]
fn pretraining_reduces_the_mesh_loss() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let mut cfg = config(Ablation::A);
    cfg.schedule.pretrain_iters = 60;
    cfg.lr.mesh_sh_dc = 0.02;
    let mut t = Trainer::new(cfg, &ds).unwrap();
    let losses: Vec<f64> = (0..60).map(|_| t.pretrain_step().unwrap()).collect();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[55..].iter().sum::<f64>() / 5.0;
    println!("pretrain loss {head} -> {tail}");
    assert!(tail < 0.7 * head, "{head} -> {tail}");
    // Pretraining touches only the mesh.
    let fresh = Trainer::new(config(Ablation::A), &ds).unwrap();
    assert_eq!(t.state.gaussians, fresh.state.gaussians);
    assert_eq!(t.state.iteration, 0);
}

#[test]
fn zero_iterations_change_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path());
    let mut cfg = config(Ablation::Ours);
    cfg.schedule.pretrain_iters = 0;
    let mut t = Trainer::new(cfg, &ds).unwrap();
    let before: TrainState<f32> = t.state.clone();
    t.pretrain().unwrap();
    t.run_until(0).unwrap();
    assert_eq!(t.state, before);
    assert_eq!(t.state.mesh.vertices, ds.layout.vertices);
    assert!(t.trace.is_empty() && t.events.is_empty());
}

#[test]
fn mask_ablations_need_masks() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    std::fs::remove_dir_all(dir.path().join("masks")).unwrap();
    let ds: Dataset<f32> = Dataset::load(dir.path(), 16).unwrap();
    for a in [Ablation::B, Ablation::C, Ablation::D, Ablation::Ours] {
        match Trainer::new(config(a), &ds) {
            Err(Error::MissingMasks(name)) => assert!(name.starts_with("view_")),
            Err(e) => panic!("{}: unexpected error {e}", a.name()),
            Ok(_) => panic!("{} accepted a dataset without masks", a.name()),
        }
    }
    let mut t = Trainer::new(config(Ablation::A), &ds).unwrap();
    t.train().unwrap();
    assert_eq!(t.state.iteration, 20);
}
