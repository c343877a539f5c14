//! Command-line and HTTP front ends for an on-disk editing session.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use c3edit::evalmetrics::{EvalReport, PyramidEmbedder};
use c3edit::image::ViewImage;
use c3edit::pipeline::{
    load_masks, read_loss_log, read_manifest, EditSession, GtChoice, Phase, Progress, RunConfig, SessionLock,
    REPORT_FILE,
};
use c3edit::scene;
use clap::{Parser, Subcommand};

pub mod server;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PHASE: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const SCATTER_FILE: &str = "scatter.csv";

#[derive(Debug, Parser)]
#[command(name = "c3edit", version, about = "Consistent multi-view scene editing sessions")]
pub struct Cli {
    /// Session directory.
    #[arg(short, long, global = true, default_value = ".")]
    pub session: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic ring scene.
    MakeScene {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 200)]
        splats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = scene::DEFAULT_RESOLUTION)]
        resolution: usize,
    },
    /// Create a session directory.
    Init {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML run configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Generate candidate edits for every view.
    Candidates,
    /// Choose the GT view, optionally replacing its edit with a PNG.
    SelectGt {
        #[arg(long)]
        view: u32,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Fit the GT adapters.
    Fit,
    /// Propagate the edit across views.
    Propagate,
    /// Produce the final per-view edits.
    Edit,
    /// Fit the scene to the final edits.
    Lift {
        /// Directory of `view{id}.png` masks.
        #[arg(long)]
        mask_dir: Option<PathBuf>,
    },
    /// Score the final edits and write the report.
    Eval,
    /// Print the summary table and write loss-curve and scatter tables.
    Report {
        #[arg(long)]
        json: bool,
    },
    /// Run every remaining phase.
    Run {
        /// GT view, needed when the run passes GT selection.
        #[arg(long)]
        view: Option<u32>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value = "lifted")]
        until: String,
        #[arg(long)]
        mask_dir: Option<PathBuf>,
    },
    /// Print the session manifest.
    Status,
    /// Serve the session HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

/// Process exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<c3edit::Error>() {
        Some(c3edit::Error::Phase { .. }) => EXIT_PHASE,
        Some(c3edit::Error::Numeric { .. }) => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

/// Runs a parsed command, returning what it prints on success.
pub fn execute(cli: Cli) -> anyhow::Result<String> {
    let dir = cli.session;
    match cli.command {
        Command::MakeScene {
            out,
            views,
            splats,
            seed,
            resolution,
        } => {
            let (s, cams) = scene::make_ring_scene_with_resolution(views, splats, seed, resolution)?;
            scene::save_scene(&out, &s, &cams)?;
            Ok(format!("wrote {} ({views} views, {splats} splats)", out.display()))
        }
        Command::Init {
            scene: scene_path,
            prompt,
            seed,
            config,
            force,
        } => {
            let (s, cams) =
                scene::load_scene(&scene_path).with_context(|| format!("loading scene {}", scene_path.display()))?;
            let cfg = match config {
                Some(p) => {
                    RunConfig::from_toml(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?
                }
                None => RunConfig::default(),
            };
            EditSession::create(&dir, s, cams, &prompt, seed, cfg, force)?;
            Ok(format!("created session at {}", dir.display()))
        }
        Command::Candidates => mutate(&dir, |s| {
            s.generate_candidates()?;
            Ok(format!(
                "{} candidates written",
                s.candidates().values().map(Vec::len).sum::<usize>()
            ))
        }),
        Command::SelectGt { view, image } => {
            let override_image = image.map(|p| load_override(&p, view)).transpose()?;
            mutate(&dir, |s| {
                s.select_gt(view, override_image)?;
                Ok(format!("GT view {view} selected"))
            })
        }
        Command::Fit => mutate(&dir, |s| {
            s.fit_gt()?;
            Ok(last_loss_line(s, "fit_gt"))
        }),
        Command::Propagate => mutate(&dir, |s| {
            s.propagate()?;
            Ok(last_loss_line(s, "propagate"))
        }),
        Command::Edit => mutate(&dir, |s| {
            let edits = s.edit_all_views()?;
            Ok(format!("{} final edits written", edits.len()))
        }),
        Command::Lift { mask_dir } => mutate(&dir, |s| {
            let masks = mask_dir.as_deref().map(|d| load_masks(d, s.cameras())).transpose()?;
            s.lift_to_3d(masks.as_ref())?;
            Ok("lifted scene written".to_string())
        }),
        Command::Eval => mutate(&dir, |s| {
            let report = s.evaluate(&PyramidEmbedder)?;
            Ok(format!(
                "{}image_image_score_raw {:.17e}",
                report.table(),
                report.image_image_score
            ))
        }),
        Command::Report { json } => report(&dir, json),
        Command::Run {
            view,
            image,
            until,
            mask_dir,
        } => {
            let target: Phase = until.parse()?;
            let override_image = match (image, view) {
                (Some(p), Some(v)) => Some(load_override(&p, v)?),
                (Some(_), None) => bail!("--image needs --view"),
                _ => None,
            };
            mutate(&dir, |s| {
                let masks = mask_dir.as_deref().map(|d| load_masks(d, s.cameras())).transpose()?;
                s.run_until(target, masks.as_ref(), |_| match view {
                    Some(view_id) => Ok(GtChoice {
                        view_id,
                        override_image,
                    }),
                    None => Err(c3edit::Error::Invalid(
                        "this run reaches GT selection; pass --view".into(),
                    )),
                })?;
                Ok(format!("session at {}", s.phase()))
            })
        }
        Command::Status => {
            let m = read_manifest(&dir)?;
            Ok(serde_json::to_string_pretty(&m)?)
        }
        Command::Serve { port, host } => {
            read_manifest(&dir)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(dir, &host, port))?;
            Ok(String::new())
        }
    }
}

fn mutate(dir: &Path, f: impl FnOnce(&mut EditSession) -> anyhow::Result<String>) -> anyhow::Result<String> {
    let _lock = SessionLock::acquire(dir)?;
    let mut s = EditSession::open(dir)?;
    s.set_observer(Box::new(log_progress));
    f(&mut s)
}

fn log_progress(p: &Progress, _: Option<&c3edit::pipeline::LossRecord>) {
    if p.iteration == p.total || p.iteration.is_multiple_of(10) {
        match p.latest_loss {
            Some(l) => log::info!("{} {}/{} loss {l:.6}", p.phase, p.iteration, p.total),
            None => log::info!("{} {}/{}", p.phase, p.iteration, p.total),
        }
    }
}

fn last_loss_line(s: &EditSession, phase: &str) -> String {
    let recs: Vec<_> = s.loss_log().iter().filter(|r| r.phase == phase).collect();
    match (recs.first(), recs.last()) {
        (Some(a), Some(b)) => format!(
            "{phase}: {} iterations, loss {:.6} -> {:.6}",
            recs.len(),
            a.loss,
            b.loss
        ),
        _ => format!("{phase}: no iterations"),
    }
}

fn load_override(path: &Path, view: u32) -> anyhow::Result<ViewImage> {
    ViewImage::load_png(view, path).with_context(|| format!("reading GT image {}", path.display()))
}

/// Reads `report.json`, writes the loss-curve and scatter tables next to
/// it and returns the summary.
pub fn report(dir: &Path, json: bool) -> anyhow::Result<String> {
    let path = dir.join(REPORT_FILE);
    if !path.exists() {
        bail!("{} not found; run `c3edit eval` first", path.display());
    }
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let log = read_loss_log(dir)?;
    let mut curve = String::from("phase,iteration,view_id,loss,l1,perceptual,loss2,loss3\n");
    for r in &log {
        let c = &r.components;
        let _ = writeln!(
            curve,
            "{},{},{},{},{},{},{},{}",
            r.phase, r.iteration, r.view_id, r.loss, c.l1, c.perceptual, c.loss2, c.loss3
        );
    }
    fs::write(dir.join(LOSS_CURVE_FILE), curve)?;
    let mut scatter = String::from("group,view_id,x,y\n");
    for p in &report.scatter {
        let _ = writeln!(scatter, "{},{},{},{}", p.group, p.view_id, p.x, p.y);
    }
    fs::write(dir.join(SCATTER_FILE), scatter)?;
    if json {
        return Ok(serde_json::to_string_pretty(&report)?);
    }
    let mut out = format!("prompt: {}\n{}", report.prompt, report.table());
    let _ = writeln!(out, "adjacent pairs:");
    for p in &report.pair_scores {
        let _ = writeln!(out, "  {:>3} - {:<3} {:>8.2}", p.a, p.b, p.score * 100.0);
    }
    let _ = write!(
        out,
        "wrote {} ({} records) and {}",
        LOSS_CURVE_FILE,
        log.len(),
        SCATTER_FILE
    );
    Ok(out)
}
