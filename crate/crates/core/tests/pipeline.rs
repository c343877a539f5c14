use std::collections::BTreeMap;

use c3edit::editmodel::Trainable;
use c3edit::image::{Mask, ViewImage};
use c3edit::pipeline::{
    lift_scene, read_loss_log, read_manifest, EditSession, GtChoice, Phase, RunConfig, SessionLock, VisitOrder,
};
use c3edit::propagation::PassDirection;
use c3edit::scene::{make_ring_scene_with_resolution, render, Camera, SplatScene};
use c3edit::Error;

const PROMPT: &str = "make it look like autumn";

fn small_scene(n_views: usize) -> (SplatScene, Vec<Camera>) {
    make_ring_scene_with_resolution(n_views, 24, 3, 16).unwrap()
}

fn quick_config() -> RunConfig {
    RunConfig {
        intra_iters: 4,
        inter_iters_per_view: 2,
        num_denoise_steps: 2,
        lift_steps: 30,
        candidate_seeds: vec![0, 1],
        ..RunConfig::default()
    }
}

fn session(n_views: usize, seed: u64, cfg: RunConfig) -> EditSession {
    let (scene, cams) = small_scene(n_views);
    EditSession::in_memory(scene, cams, PROMPT, seed, cfg).unwrap()
}

fn pick(view: u32) -> impl FnOnce(&EditSession) -> c3edit::Result<GtChoice> {
    move |_| {
        Ok(GtChoice {
            view_id: view,
            override_image: None,
        })
    }
}

fn bank_bytes(s: &EditSession, which: Trainable) -> Vec<u8> {
    s.model().adapters().bank(which).unwrap().to_bytes()
}

#[test]
fn artifact_cardinality() {
    let cfg = quick_config();
    let mut s = session(5, 1, cfg.clone());
    s.run_until(Phase::Edited, None, pick(2)).unwrap();
    assert_eq!(s.candidates().len(), 5);
    assert!(s.candidates().values().all(|c| c.len() == 2));
    assert_eq!(s.edits().len(), 5);
    let visits = s.visit_plan().unwrap();
    assert_eq!(visits.len(), 2 * 4 - 1);
    assert_eq!(
        s.loss_log().len(),
        cfg.intra_iters + visits.len() * cfg.inter_iters_per_view
    );
}

#[test]
fn identical_seeds_give_identical_runs() {
    let run = |seed| {
        let mut s = session(4, seed, quick_config());
        s.run_until(Phase::Edited, None, pick(0)).unwrap();
        (s.edits().clone(), s.loss_log().to_vec())
    };
    let (a, la) = run(7);
    let (b, lb) = run(7);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let (c, _) = run(8);
    assert_ne!(a, c);
}

#[test]
fn final_edits_share_one_seed() {
    let mut s = session(4, 2, quick_config());
    s.run_until(Phase::Edited, None, pick(0)).unwrap();
    let seed = s.final_seed();
    let src = s.source(3).unwrap();
    let again = s.model().edit(&src, PROMPT, seed).unwrap().image;
    assert_eq!(&again, &s.edits()[&3]);
}

#[test]
fn gt_override_and_validation() {
    let mut s = session(4, 1, quick_config());
    s.generate_candidates().unwrap();
    let bad = ViewImage::filled(1, 8, 8, [0.3; 3]).unwrap();
    assert!(matches!(s.select_gt(1, Some(bad)), Err(Error::Shape(_))));
    assert_eq!(s.phase(), Phase::CandidatesReady);
    assert!(matches!(s.select_gt(99, None), Err(Error::UnknownView(99))));
    let custom = ViewImage::filled(0, 16, 16, [0.8, 0.4, 0.1]).unwrap();
    s.select_gt(1, Some(custom.clone())).unwrap();
    assert_eq!(s.gt_image().unwrap(), &custom.with_view_id(1));
    assert!(s.manifest().gt_overridden);
    assert_eq!(s.schedule().unwrap().ordered[0], 1);
}

#[test]
fn phases_must_run_in_order() {
    let mut s = session(4, 1, quick_config());
    for r in [s.fit_gt(), s.propagate(), s.select_gt(0, None)] {
        assert!(matches!(r, Err(Error::Phase { .. })), "{r:?}");
    }
    assert!(matches!(s.edit_all_views(), Err(Error::Phase { .. })));
    assert!(matches!(s.lift_to_3d(None), Err(Error::Phase { .. })));
    s.generate_candidates().unwrap();
    assert!(matches!(s.generate_candidates(), Err(Error::Phase { .. })));
    assert_eq!(s.phase(), Phase::CandidatesReady);
}

#[test]
fn run_until_is_a_no_op_when_already_past() {
    let mut s = session(4, 1, quick_config());
    s.run_until(Phase::GtSelected, None, pick(0)).unwrap();
    s.run_until(Phase::CandidatesReady, None, |_| unreachable!()).unwrap();
    assert_eq!(s.phase(), Phase::GtSelected);
}

#[test]
fn each_phase_trains_only_its_bank() {
    let mut s = session(4, 5, quick_config());
    s.run_until(Phase::GtSelected, None, pick(0)).unwrap();
    let (gt0, mv0) = (bank_bytes(&s, Trainable::Gt), bank_bytes(&s, Trainable::Mv));
    s.fit_gt().unwrap();
    let (gt1, mv1) = (bank_bytes(&s, Trainable::Gt), bank_bytes(&s, Trainable::Mv));
    assert_ne!(gt0, gt1);
    assert_eq!(mv0, mv1);
    s.propagate().unwrap();
    assert_eq!(gt1, bank_bytes(&s, Trainable::Gt));
    assert_ne!(mv1, bank_bytes(&s, Trainable::Mv));
}

#[test]
fn candidates_use_an_untrained_model() {
    let mut s = session(4, 5, quick_config());
    s.generate_candidates().unwrap();
    let src = s.source(2).unwrap();
    let c = &s.candidates()[&2][0];
    let base = s.model().edit_base(&src, PROMPT, c.provenance.seed).unwrap();
    assert_eq!(c.image, base);
}

#[test]
fn propagation_log_is_complete() {
    let cfg = quick_config();
    let mut s = session(5, 4, cfg.clone());
    s.run_until(Phase::Propagated, None, pick(3)).unwrap();
    let visits = s.visit_plan().unwrap();
    let recs: Vec<_> = s.loss_log().iter().filter(|r| r.phase == "propagate").collect();
    assert_eq!(recs.len(), visits.len() * cfg.inter_iters_per_view);
    for (i, r) in recs.iter().enumerate() {
        let k = i / cfg.inter_iters_per_view;
        assert_eq!(r.iteration, i);
        assert_eq!(r.visit_index, Some(k));
        assert_eq!(r.view_id, visits[k]);
        let dir = if k < 4 {
            PassDirection::Forward
        } else {
            PassDirection::Reverse
        };
        assert_eq!(r.direction, Some(dir));
        assert_ne!(r.closest_view, Some(r.view_id));
        assert!(r.loss.is_finite() && r.components.loss3 > 0.0);
    }
    let st = s.propagation_state().unwrap();
    assert_eq!(st.processed().len(), 5);
    assert_eq!(recs[0].closest_view, Some(3));
}

#[test]
fn random_order_visits_every_view() {
    let cfg = RunConfig {
        visit_order: VisitOrder::Random,
        ..quick_config()
    };
    let mut s = session(6, 4, cfg);
    s.run_until(Phase::GtSelected, None, pick(0)).unwrap();
    let mut seen = s.visit_plan().unwrap();
    seen.sort();
    seen.dedup();
    assert_eq!(seen, vec![1, 2, 3, 4, 5]);
}

#[test]
fn resumed_session_matches_uninterrupted_run() {
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sess");
    let (scene, cams) = small_scene(4);
    {
        let mut s = EditSession::create(&path, scene.clone(), cams.clone(), PROMPT, 9, cfg.clone(), false).unwrap();
        s.run_until(Phase::GtFitted, None, pick(1)).unwrap();
    }
    assert_eq!(read_manifest(&path).unwrap().phase, Phase::GtFitted);
    let mut resumed = EditSession::open(&path).unwrap();
    assert_eq!(resumed.phase(), Phase::GtFitted);
    resumed.run_until(Phase::Edited, None, |_| unreachable!()).unwrap();

    let mut straight = EditSession::in_memory(scene, cams, PROMPT, 9, cfg).unwrap();
    straight.run_until(Phase::Edited, None, pick(1)).unwrap();
    assert_eq!(resumed.edits(), straight.edits());
    assert_eq!(read_loss_log(&path).unwrap(), straight.loss_log());

    let reopened = EditSession::open(&path).unwrap();
    assert_eq!(reopened.edits(), straight.edits());
    assert!(path.join("edits/view3.png").exists());
    assert!(path.join("candidates/view2_seed1.png").exists());
}

#[test]
fn create_refuses_to_clobber_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, cams) = small_scene(3);
    EditSession::create(
        dir.path(),
        scene.clone(),
        cams.clone(),
        PROMPT,
        1,
        quick_config(),
        false,
    )
    .unwrap();
    let again = EditSession::create(
        dir.path(),
        scene.clone(),
        cams.clone(),
        PROMPT,
        1,
        quick_config(),
        false,
    );
    assert!(matches!(again, Err(Error::Invalid(_))));
    EditSession::create(dir.path(), scene, cams, PROMPT, 2, quick_config(), true).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap().rng_seed, 2);
}

#[test]
fn session_lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let lock = SessionLock::acquire(dir.path()).unwrap();
    assert!(matches!(SessionLock::acquire(dir.path()), Err(Error::Locked(_))));
    drop(lock);
    SessionLock::acquire(dir.path()).unwrap();
}

#[test]
fn config_round_trips_and_rejects_bad_input() {
    let cfg = quick_config();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    assert!(RunConfig::from_toml("intra_iters = 0").is_err());
    assert!(RunConfig::from_toml("lambda3 = -1.0").is_err());
    assert!(RunConfig::from_toml("bogus = 1").is_err());
    let d = RunConfig::default();
    assert_eq!((d.intra_iters, d.inter_iters_per_view, d.rank), (30, 3, 4));
    assert_eq!((d.lr, d.weight_decay), (1e-4, 1e-2));
}

#[test]
fn empty_prompt_is_rejected() {
    let (scene, cams) = small_scene(3);
    assert!(EditSession::in_memory(scene, cams, "  ", 0, quick_config()).is_err());
}

fn lift_targets(scene: &SplatScene, cams: &[Camera]) -> Vec<(Camera, ViewImage, Option<Mask>)> {
    cams.iter()
        .map(|c| (c.clone(), render(scene, c).unwrap(), None))
        .collect()
}

#[test]
fn lifting_own_renders_is_a_fixed_point() {
    let (scene, cams) = small_scene(4);
    let (out, rep) = lift_scene(&scene, &lift_targets(&scene, &cams), &quick_config(), |_, _| {}).unwrap();
    assert_eq!(out, scene);
    assert_eq!(rep.final_loss, 0.0);
}

#[test]
fn lifting_reduces_loss_towards_recolored_scene() {
    let (scene, cams) = small_scene(4);
    let mut tinted = scene.clone();
    for s in &mut tinted.splats {
        s.color = [s.color[0] * 0.5 + 0.4, s.color[1] * 0.7, s.color[2] * 0.3];
    }
    let cfg = RunConfig {
        lift_steps: 120,
        lift_lr: 0.02,
        ..quick_config()
    };
    let (_, rep) = lift_scene(&scene, &lift_targets(&tinted, &cams), &cfg, |_, _| {}).unwrap();
    assert!(rep.final_loss < 0.5 * rep.initial_loss, "{rep:?}");
}

#[test]
fn empty_masks_leave_scene_untouched() {
    let (scene, cams) = small_scene(4);
    let targets: Vec<_> = cams
        .iter()
        .map(|c| {
            let img = ViewImage::filled(c.id, 16, 16, [1.0, 0.0, 0.0]).unwrap();
            (c.clone(), img, Some(Mask::full(16, 16, false)))
        })
        .collect();
    let (out, rep) = lift_scene(&scene, &targets, &quick_config(), |_, _| {}).unwrap();
    assert_eq!(out, scene);
    assert!(rep.losses.iter().all(|&l| l == 0.0));
}

#[test]
fn full_run_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, cams) = small_scene(4);
    let mut s = EditSession::create(dir.path(), scene, cams, PROMPT, 3, quick_config(), false).unwrap();
    let events = std::sync::Arc::new(std::sync::Mutex::new(0usize));
    let ev = events.clone();
    s.set_observer(Box::new(move |_, _| *ev.lock().unwrap() += 1));
    let masks: BTreeMap<u32, Mask> = BTreeMap::new();
    s.run_until(Phase::Lifted, Some(&masks), pick(0)).unwrap();
    assert!(*events.lock().unwrap() > 0);
    let report = s.evaluate(&c3edit::evalmetrics::PyramidEmbedder).unwrap();
    assert_eq!(report.pair_scores.len(), 4);
    for f in [
        "report.json",
        "lifted_scene.json",
        "lift_log.jsonl",
        "adapters.json",
        "gt.png",
        "config.toml",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(read_manifest(dir.path()).unwrap().phase, Phase::Lifted);
}
