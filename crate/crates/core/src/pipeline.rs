//! The editing session: candidate generation, GT selection, GT fitting,
//! view propagation, final per-view edits and lifting back into the scene.
//!
//! A session lives either in memory or in a directory:
//!
//! ```text
//! manifest.json      phase, prompt, seeds, GT choice, timestamps, config snapshot
//! config.toml        run configuration
//! scene.json         input scene and cameras
//! candidates/        view{v}_seed{s}.png (+ .raw lossless copy)
//! gt.png, gt.raw     selected GT edit
//! adapters.json      both adapter banks with optimizer moments
//! loss_log.jsonl     one record per training iteration
//! targets/           per-view propagation targets after Phase 3
//! edits/             final per-view edits
//! lifted_scene.json  scene after lifting
//! lift_log.jsonl     per-step lifting loss
//! report.json        evaluation report
//! ```
//!
//! Every phase writes its artifacts before the manifest, so the manifest
//! phase never runs ahead of what is on disk.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::editmodel::{EditResult, EditorConfig, EditorModel, Trainable};
use crate::error::{from_json, Error, Result};
use crate::evalmetrics::{self, Embedder, EvalReport};
use crate::image::{Mask, ViewImage};
use crate::losses::{inter_loss_with_grad, intra_loss, intra_loss_with_grad, LossComponents, LossWeights};
use crate::nn::{self, AdamWConfig};
use crate::propagation::{
    build_schedule, pass_direction, propagation_visits, random_order_visits, PassDirection, PropagationState,
    ViewSchedule,
};
use crate::scene::{self, masked_l1, render, render_backward, Camera, SplatScene, DEFAULT_BACKGROUND};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SCENE_FILE: &str = "scene.json";
pub const GT_PNG: &str = "gt.png";
pub const ADAPTERS_FILE: &str = "adapters.json";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const LIFT_LOG_FILE: &str = "lift_log.jsonl";
pub const LIFTED_SCENE_FILE: &str = "lifted_scene.json";
pub const REPORT_FILE: &str = "report.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Created,
    CandidatesReady,
    GtSelected,
    GtFitted,
    Propagated,
    Edited,
    Lifted,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Created,
        Phase::CandidatesReady,
        Phase::GtSelected,
        Phase::GtFitted,
        Phase::Propagated,
        Phase::Edited,
        Phase::Lifted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Created => "created",
            Phase::CandidatesReady => "candidates_ready",
            Phase::GtSelected => "gt_selected",
            Phase::GtFitted => "gt_fitted",
            Phase::Propagated => "propagated",
            Phase::Edited => "edited",
            Phase::Lifted => "lifted",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown phase `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisitOrder {
    /// Nearest views first, as built by [`build_schedule`].
    Distance,
    /// A seeded shuffle of the same views.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMode {
    /// GT fitting trains the gt bank, propagation trains the mv bank.
    Dual,
    /// Propagation keeps training the gt bank.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub intra_iters: usize,
    pub inter_iters_per_view: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub num_denoise_steps: usize,
    pub rank: usize,
    pub alpha: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub lift_steps: usize,
    pub lift_lr: f64,
    pub lift_positions: bool,
    pub candidate_seeds: Vec<u64>,
    pub visit_order: VisitOrder,
    pub adapter_mode: AdapterMode,
    /// Restrict the session to these view ids; all cameras when absent.
    pub view_subset: Option<Vec<u32>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let w = LossWeights::default();
        Self {
            intra_iters: 30,
            inter_iters_per_view: 3,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            lambda5: w.lambda5,
            lambda6: w.lambda6,
            num_denoise_steps: 5,
            rank: 4,
            alpha: 4.0,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            weight_decay: opt.weight_decay,
            eps: opt.eps,
            lift_steps: 200,
            lift_lr: 0.01,
            lift_positions: false,
            candidate_seeds: vec![0],
            visit_order: VisitOrder::Distance,
            adapter_mode: AdapterMode::Dual,
            view_subset: None,
        }
    }
}

impl RunConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
            lambda5: self.lambda5,
            lambda6: self.lambda6,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }

    pub fn editor(&self) -> EditorConfig {
        EditorConfig {
            num_denoise_steps: self.num_denoise_steps,
            rank: self.rank,
            alpha: self.alpha,
            ..EditorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("intra_iters", self.intra_iters),
            ("inter_iters_per_view", self.inter_iters_per_view),
            ("num_denoise_steps", self.num_denoise_steps),
            ("rank", self.rank),
            ("lift_steps", self.lift_steps),
        ] {
            if v < 1 {
                return Err(Error::Invalid(format!("{name} must be >= 1")));
            }
        }
        self.weights().validate()?;
        if self.candidate_seeds.is_empty() {
            return Err(Error::Invalid("candidate_seeds must not be empty".into()));
        }
        for (name, v) in [("lr", self.lr), ("lift_lr", self.lift_lr), ("alpha", self.alpha)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invalid(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::parse(CONFIG_FILE, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub phase: Phase,
    pub prompt: String,
    pub scene_path: String,
    pub gt_view_id: Option<u32>,
    /// Whether the GT image was supplied by the user instead of a candidate.
    pub gt_overridden: bool,
    pub rng_seed: u64,
    pub candidate_seeds: Vec<u64>,
    pub created_at: u64,
    pub updated_at: u64,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: String,
    pub iteration: usize,
    pub view_id: u32,
    pub loss: f64,
    pub components: LossComponents,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visit_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<PassDirection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closest_view: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisitInfo {
    pub visit_index: usize,
    pub view_id: u32,
    pub direction: PassDirection,
}

/// Snapshot published to the observer after every unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: String,
    pub iteration: usize,
    pub total: usize,
    pub latest_loss: Option<f64>,
    pub visit: Option<VisitInfo>,
}

pub type Observer = Box<dyn FnMut(&Progress, Option<&LossRecord>) + Send>;

/// The user's GT decision.
#[derive(Debug, Clone, PartialEq)]
pub struct GtChoice {
    pub view_id: u32,
    pub override_image: Option<ViewImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

const STREAM_ADAPTERS: u64 = 1;
const STREAM_CANDIDATE: u64 = 2;
const STREAM_FIT: u64 = 3;
const STREAM_TARGET: u64 = 4;
const STREAM_INTER: u64 = 5;
const STREAM_FINAL: u64 = 6;
const STREAM_ORDER: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `counter`-th draw of `stream` in a session seeded with `base`.
pub fn derive_seed(base: u64, stream: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ counter)
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_image_pair(img: &ViewImage, png: &Path) -> Result<()> {
    img.save_png(png)?;
    img.save_raw(png.with_extension("raw"))
}

pub fn candidate_file_name(view_id: u32, seed: u64) -> String {
    format!("view{view_id}_seed{seed}.png")
}

pub fn edit_file_name(view_id: u32) -> String {
    format!("view{view_id}.png")
}

/// Exclusive writer lock on a session directory, released on drop.
#[derive(Debug)]
pub struct SessionLock {
    path: PathBuf,
}

impl SessionLock {
    pub fn acquire(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.as_ref().to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct EditSession {
    dir: Option<PathBuf>,
    manifest: SessionManifest,
    scene: SplatScene,
    cameras: Vec<Camera>,
    model: EditorModel,
    sources: BTreeMap<u32, ViewImage>,
    candidates: BTreeMap<u32, Vec<EditResult>>,
    gt_image: Option<ViewImage>,
    schedule: Option<ViewSchedule>,
    prop_state: Option<PropagationState>,
    edits: BTreeMap<u32, ViewImage>,
    lifted: Option<SplatScene>,
    loss_log: Vec<LossRecord>,
    observer: Option<Observer>,
}

impl fmt::Debug for EditSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EditSession")
            .field("dir", &self.dir)
            .field("phase", &self.manifest.phase)
            .field("prompt", &self.manifest.prompt)
            .finish_non_exhaustive()
    }
}

impl EditSession {
    /// A session that is never written to disk.
    pub fn in_memory(
        scene: SplatScene,
        cameras: Vec<Camera>,
        prompt: &str,
        rng_seed: u64,
        config: RunConfig,
    ) -> Result<Self> {
        Self::build(None, "memory".into(), scene, cameras, prompt, rng_seed, config)
    }

    /// Creates a session directory. An existing session is only replaced
    /// with `force`.
    pub fn create(
        dir: impl AsRef<Path>,
        scene: SplatScene,
        cameras: Vec<Camera>,
        prompt: &str,
        rng_seed: u64,
        config: RunConfig,
        force: bool,
    ) -> Result<Self> {
        let dir = dir.as_ref();
        if dir.join(MANIFEST_FILE).exists() {
            if !force {
                return Err(Error::Invalid(format!(
                    "{} already holds a session; pass --force to replace it",
                    dir.display()
                )));
            }
            let _lock = SessionLock::acquire(dir)?;
            for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
                let entry = entry.map_err(|e| Error::io(dir, e))?;
                if entry.file_name() == LOCK_FILE {
                    continue;
                }
                let p = entry.path();
                let res = if p.is_dir() {
                    fs::remove_dir_all(&p)
                } else {
                    fs::remove_file(&p)
                };
                res.map_err(|e| Error::io(&p, e))?;
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "session".into());
        let session = Self::build(Some(dir.to_path_buf()), id, scene, cameras, prompt, rng_seed, config)?;
        scene::save_scene(dir.join(SCENE_FILE), &session.scene, &session.cameras)?;
        write_atomic(&dir.join(CONFIG_FILE), session.manifest.config.to_toml().as_bytes())?;
        File::create(dir.join(LOSS_LOG_FILE)).map_err(|e| Error::io(dir.join(LOSS_LOG_FILE), e))?;
        session.write_manifest()?;
        Ok(session)
    }

    fn build(
        dir: Option<PathBuf>,
        session_id: String,
        scene: SplatScene,
        cameras: Vec<Camera>,
        prompt: &str,
        rng_seed: u64,
        config: RunConfig,
    ) -> Result<Self> {
        if prompt.trim().is_empty() {
            return Err(Error::Invalid("edit prompt must be non-empty".into()));
        }
        config.validate()?;
        scene.validate()?;
        let cameras = select_views(cameras, config.view_subset.as_deref())?;
        let model = EditorModel::new(config.editor(), derive_seed(rng_seed, STREAM_ADAPTERS, 0))?;
        let t = now();
        Ok(Self {
            dir,
            manifest: SessionManifest {
                session_id,
                phase: Phase::Created,
                prompt: prompt.to_string(),
                scene_path: SCENE_FILE.into(),
                gt_view_id: None,
                gt_overridden: false,
                rng_seed,
                candidate_seeds: config.candidate_seeds.clone(),
                created_at: t,
                updated_at: t,
                config,
            },
            scene,
            cameras,
            model,
            sources: BTreeMap::new(),
            candidates: BTreeMap::new(),
            gt_image: None,
            schedule: None,
            prop_state: None,
            edits: BTreeMap::new(),
            lifted: None,
            loss_log: Vec::new(),
            observer: None,
        })
    }

    /// Loads a persisted session with every artifact its phase implies.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let cfg_path = dir.join(CONFIG_FILE);
        let config = match fs::read_to_string(&cfg_path) {
            Ok(text) => RunConfig::from_toml(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => manifest.config.clone(),
            Err(e) => return Err(Error::io(&cfg_path, e)),
        };
        let (scene, cameras) = scene::load_scene(dir.join(&manifest.scene_path))?;
        let mut s = Self::build(
            Some(dir.to_path_buf()),
            manifest.session_id.clone(),
            scene,
            cameras,
            &manifest.prompt,
            manifest.rng_seed,
            config,
        )?;
        s.manifest = SessionManifest {
            config: s.manifest.config.clone(),
            candidate_seeds: s.manifest.config.candidate_seeds.clone(),
            ..manifest
        };
        let phase = s.manifest.phase;
        if phase >= Phase::CandidatesReady {
            for cam in &s.cameras {
                let mut list = Vec::new();
                for &seed in &s.manifest.candidate_seeds {
                    let png = dir.join("candidates").join(candidate_file_name(cam.id, seed));
                    let image = ViewImage::load_raw(png.with_extension("raw"))?;
                    list.push(EditResult {
                        image,
                        provenance: crate::editmodel::Provenance {
                            view_id: cam.id,
                            prompt: s.manifest.prompt.clone(),
                            seed: derive_seed(s.manifest.rng_seed, STREAM_CANDIDATE, seed),
                            pass_label: "candidate".into(),
                        },
                    });
                }
                s.candidates.insert(cam.id, list);
            }
        }
        if phase >= Phase::GtSelected {
            let gt_view = s
                .manifest
                .gt_view_id
                .ok_or_else(|| Error::Invalid("manifest is past gt_selected but has no gt_view_id".into()))?;
            s.gt_image = Some(ViewImage::load_raw(dir.join("gt.raw"))?);
            s.schedule = Some(build_schedule(&s.cameras, gt_view)?);
        }
        let adapters = dir.join(ADAPTERS_FILE);
        if phase >= Phase::GtFitted || adapters.exists() {
            s.model.load_adapters(&adapters)?;
        }
        if phase >= Phase::Edited {
            for cam in &s.cameras {
                let raw = dir.join("edits").join(edit_file_name(cam.id)).with_extension("raw");
                s.edits.insert(cam.id, ViewImage::load_raw(raw)?);
            }
        }
        if phase >= Phase::Lifted {
            let (lifted, _) = scene::load_scene(dir.join(LIFTED_SCENE_FILE))?;
            s.lifted = Some(lifted);
        }
        s.loss_log = read_loss_log(dir)?;
        Ok(s)
    }

    pub fn set_observer(&mut self, observer: Observer) {
        self.observer = Some(observer);
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn manifest(&self) -> &SessionManifest {
        &self.manifest
    }

    pub fn phase(&self) -> Phase {
        self.manifest.phase
    }

    pub fn config(&self) -> &RunConfig {
        &self.manifest.config
    }

    pub fn prompt(&self) -> &str {
        &self.manifest.prompt
    }

    pub fn scene(&self) -> &SplatScene {
        &self.scene
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn model(&self) -> &EditorModel {
        &self.model
    }

    pub fn candidates(&self) -> &BTreeMap<u32, Vec<EditResult>> {
        &self.candidates
    }

    pub fn gt_view_id(&self) -> Option<u32> {
        self.manifest.gt_view_id
    }

    pub fn gt_image(&self) -> Option<&ViewImage> {
        self.gt_image.as_ref()
    }

    pub fn schedule(&self) -> Option<&ViewSchedule> {
        self.schedule.as_ref()
    }

    pub fn propagation_state(&self) -> Option<&PropagationState> {
        self.prop_state.as_ref()
    }

    pub fn edits(&self) -> &BTreeMap<u32, ViewImage> {
        &self.edits
    }

    pub fn lifted_scene(&self) -> Option<&SplatScene> {
        self.lifted.as_ref()
    }

    pub fn loss_log(&self) -> &[LossRecord] {
        &self.loss_log
    }

    fn require(&self, operation: &'static str, required: Phase) -> Result<()> {
        if self.manifest.phase != required {
            return Err(Error::Phase {
                operation,
                required: required.to_string(),
                actual: self.manifest.phase.to_string(),
            });
        }
        Ok(())
    }

    fn camera(&self, view_id: u32) -> Result<&Camera> {
        self.cameras
            .iter()
            .find(|c| c.id == view_id)
            .ok_or(Error::UnknownView(view_id))
    }

    /// Original render of a view, cached.
    pub fn source(&mut self, view_id: u32) -> Result<ViewImage> {
        if let Some(img) = self.sources.get(&view_id) {
            return Ok(img.clone());
        }
        let img = render(&self.scene, self.camera(view_id)?)?;
        self.sources.insert(view_id, img.clone());
        Ok(img)
    }

    /// Original renders of every session view, by ascending id.
    pub fn original_renders(&mut self) -> Result<Vec<ViewImage>> {
        let ids: Vec<u32> = self.cameras.iter().map(|c| c.id).collect();
        ids.into_iter().map(|id| self.source(id)).collect()
    }

    fn notify(&mut self, progress: Progress, record: Option<&LossRecord>) {
        if let Some(obs) = self.observer.as_mut() {
            obs(&progress, record);
        }
    }

    fn push_record(&mut self, record: LossRecord, total: usize, visit: Option<VisitInfo>) {
        let progress = Progress {
            phase: record.phase.clone(),
            iteration: record.iteration + 1,
            total,
            latest_loss: Some(record.loss),
            visit,
        };
        self.notify(progress, Some(&record));
        self.loss_log.push(record);
    }

    fn advance(&mut self, to: Phase) -> Result<()> {
        debug_assert!(to > self.manifest.phase);
        self.manifest.phase = to;
        self.manifest.updated_at = now();
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<()> {
        if let Some(dir) = &self.dir {
            let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
            write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        }
        Ok(())
    }

    fn append_log(&self, records: &[LossRecord]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(LOSS_LOG_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r).expect("record serializes"));
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    fn save_adapters(&self) -> Result<()> {
        match &self.dir {
            Some(dir) => self.model.save_adapters(dir.join(ADAPTERS_FILE)),
            None => Ok(()),
        }
    }

    /// Phase 1: one edit per view and candidate seed with the untouched model.
    pub fn generate_candidates(&mut self) -> Result<()> {
        self.require("candidates", Phase::Created)?;
        let ids: Vec<u32> = self.cameras.iter().map(|c| c.id).collect();
        let seeds = self.manifest.candidate_seeds.clone();
        let total = ids.len() * seeds.len();
        let mut out = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            let src = self.source(id)?;
            let mut list = Vec::new();
            for (k, &s) in seeds.iter().enumerate() {
                let seed = derive_seed(self.manifest.rng_seed, STREAM_CANDIDATE, s);
                let result = self
                    .model
                    .edit_labeled(&src, &self.manifest.prompt, seed, "candidate")
                    .map_err(|e| annotate_view(e, id))?;
                list.push(result);
                self.notify(
                    Progress {
                        phase: "candidates".into(),
                        iteration: i * seeds.len() + k + 1,
                        total,
                        latest_loss: None,
                        visit: None,
                    },
                    None,
                );
            }
            out.insert(id, list);
        }
        if let Some(dir) = &self.dir {
            for (id, list) in &out {
                for (r, &s) in list.iter().zip(&seeds) {
                    save_image_pair(&r.image, &dir.join("candidates").join(candidate_file_name(*id, s)))?;
                }
            }
        }
        self.candidates = out;
        self.advance(Phase::CandidatesReady)
    }

    /// Picks the GT view and image. Without an override the first candidate
    /// of the view is used.
    pub fn select_gt(&mut self, view_id: u32, override_image: Option<ViewImage>) -> Result<()> {
        self.require("select-gt", Phase::CandidatesReady)?;
        let candidate = self
            .candidates
            .get(&view_id)
            .and_then(|c| c.first())
            .ok_or(Error::UnknownView(view_id))?;
        let overridden = override_image.is_some();
        let image = match override_image {
            Some(img) => {
                let cam = self.camera(view_id)?;
                if img.dims() != cam.resolution {
                    return Err(Error::Shape(format!(
                        "override image is {}x{}, view {view_id} renders at {}x{}",
                        img.width(),
                        img.height(),
                        cam.resolution.0,
                        cam.resolution.1
                    )));
                }
                img.with_view_id(view_id)
            }
            None => candidate.image.clone(),
        };
        let schedule = build_schedule(&self.cameras, view_id)?;
        if let Some(dir) = &self.dir {
            save_image_pair(&image, &dir.join(GT_PNG))?;
        }
        self.gt_image = Some(image);
        self.schedule = Some(schedule);
        self.manifest.gt_view_id = Some(view_id);
        self.manifest.gt_overridden = overridden;
        self.advance(Phase::GtSelected)
    }

    /// Phase 2: trains the gt bank so fresh edits of the GT view reproduce
    /// the GT image.
    pub fn fit_gt(&mut self) -> Result<()> {
        self.require("fit", Phase::GtSelected)?;
        let gt_view = self.manifest.gt_view_id.expect("set with the phase");
        let gt = self.gt_image.clone().expect("set with the phase");
        let src = self.source(gt_view)?;
        let w = self.config().weights();
        let opt = self.config().optimizer();
        let iters = self.config().intra_iters;
        let start = self.loss_log.len();
        self.model.set_trainable(Trainable::Gt);
        for it in 0..iters {
            let seed = derive_seed(self.manifest.rng_seed, STREAM_FIT, it as u64);
            let (out, trace) = self
                .model
                .edit_traced(&src, &self.manifest.prompt, seed)
                .map_err(|e| at_iteration(e, "fit_gt", it))?;
            let (value, grad) = intra_loss_with_grad(&out, &gt, &w)?;
            if !value.total.is_finite() {
                return Err(Error::numeric("fit_gt iteration", it, "non-finite loss"));
            }
            let grads = self.model.backward(&trace, &grad)?;
            self.model.optimizer_step(&grads, &opt)?;
            let record = LossRecord {
                phase: "fit_gt".into(),
                iteration: it,
                view_id: gt_view,
                loss: value.total,
                components: value.components,
                visit_index: None,
                direction: None,
                closest_view: None,
            };
            self.push_record(record, iters, None);
        }
        self.model.set_trainable(Trainable::None);
        self.save_adapters()?;
        self.append_log(&self.loss_log[start..])?;
        self.advance(Phase::GtFitted)
    }

    /// The visit plan this session's configuration prescribes.
    pub fn visit_plan(&self) -> Result<Vec<u32>> {
        let schedule = self.schedule.as_ref().ok_or_else(|| Error::Phase {
            operation: "visit plan",
            required: Phase::GtSelected.to_string(),
            actual: self.manifest.phase.to_string(),
        })?;
        Ok(match self.config().visit_order {
            VisitOrder::Distance => propagation_visits(schedule),
            VisitOrder::Random => random_order_visits(schedule, derive_seed(self.manifest.rng_seed, STREAM_ORDER, 0)),
        })
    }

    /// Phase 3: visits views outward from the GT and back, training the mv
    /// bank (or the gt bank in shared mode) on the inter-view loss.
    pub fn propagate(&mut self) -> Result<()> {
        self.require("propagate", Phase::GtFitted)?;
        let gt_view = self.manifest.gt_view_id.expect("set with the phase");
        let gt = self.gt_image.clone().expect("set with the phase");
        let schedule = self.schedule.clone().expect("set with the phase");
        let visits = self.visit_plan()?;
        let w = self.config().weights();
        let opt = self.config().optimizer();
        let inner = self.config().inter_iters_per_view;
        let bank = match self.config().adapter_mode {
            AdapterMode::Dual => Trainable::Mv,
            AdapterMode::Shared => Trainable::Gt,
        };
        let n = schedule.len();
        let total = visits.len() * inner;
        let start = self.loss_log.len();
        let mut state = PropagationState::new(gt_view, gt.clone());
        self.model.set_trainable(bank);
        for (k, &view) in visits.iter().enumerate() {
            state.current_visit_index = k;
            let visit = VisitInfo {
                visit_index: k,
                view_id: view,
                direction: pass_direction(k, n),
            };
            let src = self.source(view)?;
            let target_seed = derive_seed(self.manifest.rng_seed, STREAM_TARGET, k as u64);
            let target = self
                .model
                .edit_labeled(&src, &self.manifest.prompt, target_seed, "target")
                .map_err(|e| at_iteration(e, "propagate visit", k))?
                .image;
            state.record_edit(view, target)?;
            let closest = state.closest_other_processed(&schedule, view)?;
            let own = state.stored_edit(view).expect("just recorded").clone();
            let anchor = state.stored_edit(closest).expect("processed views have edits").clone();
            for j in 0..inner {
                let counter = (k * inner + j) as u64;
                let seed = derive_seed(self.manifest.rng_seed, STREAM_INTER, counter);
                let (out, trace) = self
                    .model
                    .edit_traced(&src, &self.manifest.prompt, seed)
                    .map_err(|e| at_iteration(e, "propagate visit", k))?;
                let (value, grad) = inter_loss_with_grad(&out, &own, &anchor, &gt, &w)?;
                if !value.total.is_finite() {
                    return Err(Error::numeric("propagate visit", k, "non-finite loss"));
                }
                let grads = self.model.backward(&trace, &grad)?;
                self.model.optimizer_step(&grads, &opt)?;
                let record = LossRecord {
                    phase: "propagate".into(),
                    iteration: k * inner + j,
                    view_id: view,
                    loss: value.total,
                    components: value.components,
                    visit_index: Some(k),
                    direction: Some(visit.direction),
                    closest_view: Some(closest),
                };
                self.push_record(record, total, Some(visit));
            }
        }
        self.model.set_trainable(Trainable::None);
        if let Some(dir) = &self.dir {
            for (id, img) in state.stored_edits() {
                save_image_pair(img, &dir.join("targets").join(edit_file_name(*id)))?;
            }
        }
        self.prop_state = Some(state);
        self.save_adapters()?;
        self.append_log(&self.loss_log[start..])?;
        self.advance(Phase::Propagated)
    }

    /// Seed of the final per-view edits, shared by every view.
    pub fn final_seed(&self) -> u64 {
        derive_seed(self.manifest.rng_seed, STREAM_FINAL, 0)
    }

    /// Edits every view once with the trained model.
    pub fn edit_all_views(&mut self) -> Result<BTreeMap<u32, ViewImage>> {
        self.require("edit", Phase::Propagated)?;
        let ids: Vec<u32> = self.cameras.iter().map(|c| c.id).collect();
        let seed = self.final_seed();
        let mut out = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            let src = self.source(id)?;
            let r = self
                .model
                .edit_labeled(&src, &self.manifest.prompt, seed, "final")
                .map_err(|e| annotate_view(e, id))?;
            out.insert(id, r.image);
            self.notify(
                Progress {
                    phase: "edit".into(),
                    iteration: i + 1,
                    total: ids.len(),
                    latest_loss: None,
                    visit: None,
                },
                None,
            );
        }
        if let Some(dir) = &self.dir {
            for (id, img) in &out {
                save_image_pair(img, &dir.join("edits").join(edit_file_name(*id)))?;
            }
        }
        self.edits = out.clone();
        self.advance(Phase::Edited)?;
        Ok(out)
    }

    /// Fits splat colors (and positions when configured) to the final edits.
    pub fn lift_to_3d(&mut self, masks: Option<&BTreeMap<u32, Mask>>) -> Result<SplatScene> {
        self.require("lift", Phase::Edited)?;
        let cfg = self.config().clone();
        let targets: Vec<(Camera, ViewImage, Option<Mask>)> = self
            .cameras
            .iter()
            .map(|c| {
                let mask = masks.and_then(|m| m.get(&c.id)).cloned();
                (c.clone(), self.edits[&c.id].clone(), mask)
            })
            .collect();
        let mut observer = self.observer.take();
        let result = lift_scene(&self.scene, &targets, &cfg, |step, loss| {
            if let Some(obs) = observer.as_mut() {
                obs(
                    &Progress {
                        phase: "lift".into(),
                        iteration: step + 1,
                        total: cfg.lift_steps,
                        latest_loss: Some(loss),
                        visit: None,
                    },
                    None,
                );
            }
        });
        self.observer = observer;
        let (lifted, report) = result?;
        if let Some(dir) = &self.dir {
            scene::save_scene(dir.join(LIFTED_SCENE_FILE), &lifted, &self.cameras)?;
            let mut buf = String::new();
            for (step, loss) in report.losses.iter().enumerate() {
                buf.push_str(&serde_json::json!({ "step": step, "loss": loss }).to_string());
                buf.push('\n');
            }
            write_atomic(&dir.join(LIFT_LOG_FILE), buf.as_bytes())?;
        }
        self.lifted = Some(lifted.clone());
        self.advance(Phase::Lifted)?;
        Ok(lifted)
    }

    /// Runs every remaining phase up to `target`. GT selection asks
    /// `choose_gt`. Sessions already at or past `target` are left alone.
    pub fn run_until(
        &mut self,
        target: Phase,
        masks: Option<&BTreeMap<u32, Mask>>,
        choose_gt: impl FnOnce(&EditSession) -> Result<GtChoice>,
    ) -> Result<()> {
        if self.phase() >= target {
            log::info!("session already at {}; nothing to do for {}", self.phase(), target);
            return Ok(());
        }
        let mut choose_gt = Some(choose_gt);
        while self.phase() < target {
            match self.phase() {
                Phase::Created => self.generate_candidates()?,
                Phase::CandidatesReady => {
                    let choice = (choose_gt.take().expect("selection happens once"))(self)?;
                    self.select_gt(choice.view_id, choice.override_image)?;
                }
                Phase::GtSelected => self.fit_gt()?,
                Phase::GtFitted => self.propagate()?,
                Phase::Propagated => {
                    self.edit_all_views()?;
                }
                Phase::Edited => {
                    self.lift_to_3d(masks)?;
                }
                Phase::Lifted => unreachable!("loop ends at the terminal phase"),
            }
        }
        Ok(())
    }

    pub fn run_all(&mut self, choose_gt: impl FnOnce(&EditSession) -> Result<GtChoice>) -> Result<()> {
        self.run_until(Phase::Lifted, None, choose_gt)
    }

    /// Evaluates the final edits. Requires phase `edited` or later; the
    /// report is written to `report.json` for directory sessions.
    pub fn evaluate(&mut self, embedder: &dyn Embedder) -> Result<EvalReport> {
        if self.phase() < Phase::Edited {
            return Err(Error::Phase {
                operation: "eval",
                required: Phase::Edited.to_string(),
                actual: self.phase().to_string(),
            });
        }
        let original = self.original_renders()?;
        let edited: Vec<ViewImage> = self.edits.values().cloned().collect();
        let candidates: Vec<ViewImage> = self
            .candidates
            .values()
            .filter_map(|c| c.first())
            .map(|r| r.image.clone())
            .collect();
        let groups = vec![
            ("original".to_string(), original.clone()),
            ("candidates".to_string(), candidates),
            ("edited".to_string(), edited.clone()),
        ];
        let report = evalmetrics::evaluate(&original, &edited, &self.manifest.prompt, &groups, embedder)?;
        if let Some(dir) = &self.dir {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            write_atomic(&dir.join(REPORT_FILE), text.as_bytes())?;
        }
        Ok(report)
    }

    /// Intra loss of a fresh GT-view edit against the GT image.
    pub fn gt_reproduction_loss(&mut self, seed: u64) -> Result<f64> {
        let gt_view = self.manifest.gt_view_id.ok_or_else(|| Error::Phase {
            operation: "gt reproduction",
            required: Phase::GtSelected.to_string(),
            actual: self.phase().to_string(),
        })?;
        let src = self.source(gt_view)?;
        let out = self.model.edit(&src, &self.manifest.prompt, seed)?.image;
        intra_loss(
            &out,
            self.gt_image.as_ref().expect("set with gt_view_id"),
            &self.config().weights(),
        )
    }
}

fn select_views(cameras: Vec<Camera>, subset: Option<&[u32]>) -> Result<Vec<Camera>> {
    let mut cams = match subset {
        None => cameras,
        Some(ids) => {
            for id in ids {
                if !cameras.iter().any(|c| c.id == *id) {
                    return Err(Error::UnknownView(*id));
                }
            }
            cameras.into_iter().filter(|c| ids.contains(&c.id)).collect()
        }
    };
    if cams.len() < 2 {
        return Err(Error::Invalid(format!(
            "a session needs at least 2 views, got {}",
            cams.len()
        )));
    }
    cams.sort_by_key(|c| c.id);
    Ok(cams)
}

fn annotate_view(e: Error, view_id: u32) -> Error {
    match e {
        Error::Numeric { stage, message, .. } => Error::Numeric {
            stage,
            index: view_id as usize,
            message: format!("view {view_id}: {message}"),
        },
        other => other,
    }
}

fn at_iteration(e: Error, stage: &'static str, index: usize) -> Error {
    match e {
        Error::Numeric {
            stage: inner,
            index: step,
            message,
        } => Error::Numeric {
            stage,
            index,
            message: format!("{inner} {step}: {message}"),
        },
        other => other,
    }
}

pub fn read_manifest(dir: &Path) -> Result<SessionManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    from_json(&text, MANIFEST_FILE)
}

pub fn read_loss_log(dir: &Path) -> Result<Vec<LossRecord>> {
    let path = dir.join(LOSS_LOG_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| from_json(l, &format!("{LOSS_LOG_FILE} line {}", i + 1)))
        .collect()
}

/// Loads `view{id}.png` masks from a directory. Views without a file are
/// unmasked.
pub fn load_masks(dir: &Path, cameras: &[Camera]) -> Result<BTreeMap<u32, Mask>> {
    let mut out = BTreeMap::new();
    for cam in cameras {
        let path = dir.join(edit_file_name(cam.id));
        if path.exists() {
            let m = Mask::load_png(&path)?;
            if (m.width(), m.height()) != cam.resolution {
                return Err(Error::Shape(format!(
                    "mask {} is {}x{}, view {} renders at {}x{}",
                    path.display(),
                    m.width(),
                    m.height(),
                    cam.id,
                    cam.resolution.0,
                    cam.resolution.1
                )));
            }
            out.insert(cam.id, m);
        }
    }
    Ok(out)
}

/// Gradient descent (Adam moments, no decay) on splat colors, and positions
/// when `cfg.lift_positions`, cycling through `targets` one view per step.
pub fn lift_scene(
    scene: &SplatScene,
    targets: &[(Camera, ViewImage, Option<Mask>)],
    cfg: &RunConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(SplatScene, LiftReport)> {
    if targets.is_empty() {
        return Err(Error::Invalid("lifting needs at least one target view".into()));
    }
    let mut out = scene.clone();
    let n = scene.splats.len();
    let opt = AdamWConfig {
        lr: cfg.lift_lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let pos_opt = AdamWConfig {
        lr: cfg.lift_lr * 0.1,
        ..opt
    };
    let mut colors: Vec<f64> = out.colors_flat();
    let (mut m_c, mut v_c) = (vec![0.0; 3 * n], vec![0.0; 3 * n]);
    let mut positions: Vec<f64> = out.splats.iter().flat_map(|s| s.position).collect();
    let (mut m_p, mut v_p) = (vec![0.0; 3 * n], vec![0.0; 3 * n]);
    let mut initial = vec![None; targets.len()];
    let mut losses = Vec::with_capacity(cfg.lift_steps);
    for step in 0..cfg.lift_steps {
        let k = step % targets.len();
        let (cam, target, mask) = &targets[k];
        let rendered = render(&out, cam)?;
        let (loss, grad) = masked_l1(&rendered, target, mask.as_ref())?;
        if !loss.is_finite() {
            return Err(Error::numeric("lift step", step, "non-finite loss"));
        }
        let first = *initial[k].get_or_insert(loss);
        if loss > 10.0 * first && loss > 1e-12 {
            return Err(Error::numeric(
                "lift step",
                step,
                format!("loss {loss:.6} diverged from initial {first:.6} on view {}", cam.id),
            ));
        }
        losses.push(loss);
        on_step(step, loss);
        let g = render_backward(&out, cam, DEFAULT_BACKGROUND, &grad)?;
        let gc: Vec<f64> = g.color.iter().flatten().copied().collect();
        nn::adamw_update(&mut colors, &gc, &mut m_c, &mut v_c, step as u64 + 1, &opt);
        for c in colors.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
        if cfg.lift_positions {
            let gp: Vec<f64> = g.position.iter().flatten().copied().collect();
            nn::adamw_update(&mut positions, &gp, &mut m_p, &mut v_p, step as u64 + 1, &pos_opt);
        }
        for (i, s) in out.splats.iter_mut().enumerate() {
            s.color.copy_from_slice(&colors[3 * i..3 * i + 3]);
            s.position.copy_from_slice(&positions[3 * i..3 * i + 3]);
        }
    }
    let final_loss = targets
        .iter()
        .map(|(cam, target, mask)| Ok(masked_l1(&render(&out, cam)?, target, mask.as_ref())?.0))
        .sum::<Result<f64>>()?
        / targets.len() as f64;
    let initial_loss = targets
        .iter()
        .map(|(cam, target, mask)| Ok(masked_l1(&render(scene, cam)?, target, mask.as_ref())?.0))
        .sum::<Result<f64>>()?
        / targets.len() as f64;
    out.validate()?;
    Ok((
        out,
        LiftReport {
            initial_loss,
            final_loss,
            losses,
        },
    ))
}
