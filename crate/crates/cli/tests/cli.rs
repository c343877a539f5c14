use std::path::Path;
use std::process::{Command, Output};

use c3edit::evalmetrics::{image_image_score, EvalReport, PyramidEmbedder};
use c3edit::image::ViewImage;
use c3edit::pipeline::{read_manifest, EditSession, Phase};

const QUICK: &str =
    "intra_iters = 3\ninter_iters_per_view = 1\nnum_denoise_steps = 2\nlift_steps = 12\ncandidate_seeds = [0, 1]\n";

fn c3edit(session: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3edit"))
        .arg("--session")
        .arg(session)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Scene file and quick config in `root`, plus an initialized session path.
fn setup(root: &Path) -> std::path::PathBuf {
    let scene = root.join("scene.json");
    ok(&c3edit(
        root,
        &[
            "make-scene",
            "--out",
            scene.to_str().unwrap(),
            "--views",
            "4",
            "--splats",
            "30",
            "--resolution",
            "16",
        ],
    ));
    let cfg = root.join("quick.toml");
    std::fs::write(&cfg, QUICK).unwrap();
    let sess = root.join("sess");
    ok(&c3edit(
        &sess,
        &[
            "init",
            "--scene",
            scene.to_str().unwrap(),
            "--prompt",
            "turn it to bronze",
            "--seed",
            "5",
            "--config",
            cfg.to_str().unwrap(),
        ],
    ));
    sess
}

#[test]
fn init_validates_inputs() {
    let root = tempfile::tempdir().unwrap();
    let sess = setup(root.path());
    assert_eq!(read_manifest(&sess).unwrap().phase, Phase::Created);
    let scene = root.path().join("scene.json");
    let again = c3edit(&sess, &["init", "--scene", scene.to_str().unwrap(), "--prompt", "x"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    ok(&c3edit(
        &sess,
        &["init", "--scene", scene.to_str().unwrap(), "--prompt", "x", "--force"],
    ));
    let missing = c3edit(
        &root.path().join("other"),
        &["init", "--scene", "/nonexistent.json", "--prompt", "x"],
    );
    assert_ne!(missing.status.code(), Some(0));
}

#[test]
fn usage_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(c3edit(root.path(), &["select-gt"]).status.code(), Some(2));
    assert_eq!(c3edit(root.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn wrong_phase_exits_3_naming_required_phase() {
    let root = tempfile::tempdir().unwrap();
    let sess = setup(root.path());
    let out = c3edit(&sess, &["select-gt", "--view", "0"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("candidates_ready"), "{}", stderr(&out));
    let out = c3edit(&sess, &["fit"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("gt_selected"));
}

#[test]
fn locked_session_refuses_writers() {
    let root = tempfile::tempdir().unwrap();
    let sess = setup(root.path());
    let _lock = c3edit::pipeline::SessionLock::acquire(&sess).unwrap();
    let out = c3edit(&sess, &["candidates"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("locked"));
}

#[test]
fn scripted_run_matches_library() {
    let root = tempfile::tempdir().unwrap();
    let sess = setup(root.path());
    ok(&c3edit(&sess, &["candidates"]));
    let gt_png = sess.join("candidates/view2_seed1.png");
    ok(&c3edit(
        &sess,
        &["select-gt", "--view", "2", "--image", gt_png.to_str().unwrap()],
    ));
    ok(&c3edit(&sess, &["fit"]));
    ok(&c3edit(&sess, &["propagate"]));
    ok(&c3edit(&sess, &["edit"]));
    ok(&c3edit(&sess, &["lift"]));
    let eval_out = ok(&c3edit(&sess, &["eval"]));
    assert!(eval_out.contains("image-image score"));
    let table = ok(&c3edit(&sess, &["report"]));
    assert!(table.contains("frechet distance"));
    assert!(sess.join("loss_curve.csv").exists() && sess.join("scatter.csv").exists());

    let m = read_manifest(&sess).unwrap();
    assert_eq!(m.phase, Phase::Lifted);
    assert!(m.gt_overridden);
    let gt = ViewImage::load_raw(sess.join("gt.raw")).unwrap();
    assert_eq!(gt, ViewImage::load_png(2, &gt_png).unwrap());

    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(sess.join("report.json")).unwrap()).unwrap();
    let s = EditSession::open(&sess).unwrap();
    let edits: Vec<ViewImage> = s.edits().values().cloned().collect();
    let lib = image_image_score(&edits, &PyramidEmbedder).unwrap();
    assert!((report.image_image_score - lib).abs() <= 1e-10);
    let printed = eval_out
        .lines()
        .find_map(|l| l.strip_prefix("image_image_score_raw "))
        .unwrap();
    assert!((printed.trim().parse::<f64>().unwrap() - lib).abs() <= 1e-10);
}

#[test]
fn run_drives_the_whole_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let sess = setup(root.path());
    let out = c3edit(&sess, &["run"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("--view"));
    ok(&c3edit(&sess, &["run", "--view", "1", "--until", "gt_fitted"]));
    assert_eq!(read_manifest(&sess).unwrap().phase, Phase::GtFitted);
    ok(&c3edit(&sess, &["run"]));
    assert_eq!(read_manifest(&sess).unwrap().phase, Phase::Lifted);
    let status = ok(&c3edit(&sess, &["status"]));
    assert!(status.contains("\"lifted\""));
}
