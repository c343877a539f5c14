//! Point-splat scenes, pinhole cameras, and a differentiable splat renderer.
//!
//! Splats are isotropic Gaussians. Each one projects to a screen-space
//! footprint of standard deviation `focal * radius / depth` and is
//! alpha-composited strictly back to front over a constant background.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{from_json, Error, Result};
use crate::image::{Mask, ViewImage};

pub const DEFAULT_BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];
pub const DEFAULT_RESOLUTION: usize = 64;

const NEAR_PLANE: f64 = 1e-3;
/// Footprints are truncated at this many standard deviations.
const FOOTPRINT_CUTOFF: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub center: Vector3<f64>,
    /// World-to-camera rotation; rows are the camera's right, down and forward axes.
    pub rotation: Matrix3<f64>,
    pub focal: f64,
    /// `(width, height)` in pixels.
    pub resolution: (usize, usize),
}

impl Camera {
    /// Builds a camera at `center` whose optical axis points at `target`.
    pub fn look_at(
        id: u32,
        center: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        resolution: (usize, usize),
    ) -> Result<Self> {
        let forward = (target - center)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Invalid("camera center coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Invalid("up vector parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let cam = Self {
            id,
            center,
            rotation,
            focal,
            resolution,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = self.rotation.transpose() * self.rotation - Matrix3::identity();
        if ortho.iter().any(|v| !v.is_finite() || v.abs() > 1e-6) {
            return Err(Error::Invalid(format!(
                "camera {}: rotation is not orthonormal",
                self.id
            )));
        }
        if self.resolution.0 < 8 || self.resolution.1 < 8 {
            return Err(Error::Invalid(format!(
                "camera {}: resolution {}x{} below 8x8",
                self.id, self.resolution.0, self.resolution.1
            )));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) || self.center.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "camera {}: focal and center must be finite, focal > 0",
                self.id
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.resolution.0
    }

    pub fn height(&self) -> usize {
        self.resolution.1
    }

    pub fn to_camera_space(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.center)
    }
}

/// Euclidean distance between camera centers.
pub fn camera_distance(a: &Camera, b: &Camera) -> f64 {
    (a.center - b.center).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub position: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatScene {
    pub splats: Vec<Splat>,
}

impl SplatScene {
    pub fn new(splats: Vec<Splat>) -> Result<Self> {
        let scene = Self { splats };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.splats.is_empty() {
            return Err(Error::Invalid("scene has no splats".into()));
        }
        for (i, s) in self.splats.iter().enumerate() {
            if s.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("splats[{i}].position is not finite")));
            }
            if let Some(c) = s.color.iter().find(|c| !(0.0..=1.0).contains(*c)) {
                return Err(Error::Invalid(format!(
                    "splats[{i}].color component {c} violates 0 <= color <= 1"
                )));
            }
            if !(0.0..=1.0).contains(&s.opacity) {
                return Err(Error::Invalid(format!(
                    "splats[{i}].opacity = {} violates 0 <= opacity <= 1",
                    s.opacity
                )));
            }
            if !(s.radius.is_finite() && s.radius > 0.0) {
                return Err(Error::Invalid(format!(
                    "splats[{i}].radius = {} violates radius > 0",
                    s.radius
                )));
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let sum = self
            .splats
            .iter()
            .fold(Vector3::zeros(), |acc, s| acc + Vector3::from(s.position));
        sum / self.splats.len() as f64
    }

    /// Flattened colors, three entries per splat.
    pub fn colors_flat(&self) -> Vec<f64> {
        self.splats.iter().flat_map(|s| s.color).collect()
    }
}

/// Gradient of a scalar loss with respect to every splat parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub color: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub position: Vec<[f64; 3]>,
}

impl SceneGrad {
    fn zeros(n: usize) -> Self {
        Self {
            color: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            position: vec![[0.0; 3]; n],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Projected {
    index: usize,
    cam: Vector3<f64>,
    u: f64,
    v: f64,
    sigma: f64,
}

struct Rasterizer<'a> {
    scene: &'a SplatScene,
    camera: &'a Camera,
    background: [f64; 3],
    /// Back to front.
    order: Vec<Projected>,
}

struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
}

impl<'a> Rasterizer<'a> {
    fn new(scene: &'a SplatScene, camera: &'a Camera, background: [f64; 3]) -> Result<Self> {
        camera.validate()?;
        let has_nan = scene
            .splats
            .iter()
            .any(|s| s.position.iter().chain(&s.color).any(|v| v.is_nan()) || s.opacity.is_nan() || s.radius.is_nan());
        if has_nan {
            return Err(Error::Invalid("scene contains NaN".into()));
        }
        let cx = camera.width() as f64 / 2.0;
        let cy = camera.height() as f64 / 2.0;
        let mut order: Vec<Projected> = scene
            .splats
            .iter()
            .enumerate()
            .filter_map(|(index, s)| {
                let cam = camera.to_camera_space(&Vector3::from(s.position));
                if cam.z <= NEAR_PLANE {
                    return None;
                }
                Some(Projected {
                    index,
                    cam,
                    u: camera.focal * cam.x / cam.z + cx,
                    v: camera.focal * cam.y / cam.z + cy,
                    sigma: camera.focal * s.radius / cam.z,
                })
            })
            .collect();
        order.sort_by(|a, b| b.cam.z.total_cmp(&a.cam.z).then(a.index.cmp(&b.index)));
        Ok(Self {
            scene,
            camera,
            background,
            order,
        })
    }

    fn contributions(&self, px: f64, py: f64, out: &mut Vec<Contribution>) {
        out.clear();
        for (slot, p) in self.order.iter().enumerate() {
            let dx = px - p.u;
            let dy = py - p.v;
            let d2 = dx * dx + dy * dy;
            let reach = FOOTPRINT_CUTOFF * p.sigma;
            if d2 > reach * reach {
                continue;
            }
            let gauss = (-d2 / (2.0 * p.sigma * p.sigma)).exp();
            let alpha = self.scene.splats[p.index].opacity * gauss;
            if alpha <= 0.0 {
                continue;
            }
            out.push(Contribution {
                slot,
                alpha,
                gauss,
                dx,
                dy,
            });
        }
    }

    fn render(&self) -> Array3<f64> {
        let (w, h) = self.camera.resolution;
        let mut img = Array3::zeros((h, w, 3));
        let mut contribs = Vec::new();
        for y in 0..h {
            for x in 0..w {
                self.contributions(x as f64 + 0.5, y as f64 + 0.5, &mut contribs);
                let mut c = self.background;
                for k in &contribs {
                    let color = self.scene.splats[self.order[k.slot].index].color;
                    for ch in 0..3 {
                        c[ch] = k.alpha * color[ch] + (1.0 - k.alpha) * c[ch];
                    }
                }
                for ch in 0..3 {
                    img[[y, x, ch]] = c[ch].clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    fn backward(&self, grad: &Array3<f64>) -> SceneGrad {
        let (w, h) = self.camera.resolution;
        let mut out = SceneGrad::zeros(self.scene.splats.len());
        let mut cam_grad = vec![Vector3::<f64>::zeros(); self.order.len()];
        let mut contribs = Vec::new();
        let mut history: Vec<[f64; 3]> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let g_px = [grad[[y, x, 0]], grad[[y, x, 1]], grad[[y, x, 2]]];
                if g_px == [0.0; 3] {
                    continue;
                }
                self.contributions(x as f64 + 0.5, y as f64 + 0.5, &mut contribs);
                // history[k] is the composite before contribution k is applied.
                history.clear();
                let mut c = self.background;
                for k in &contribs {
                    history.push(c);
                    let color = self.scene.splats[self.order[k.slot].index].color;
                    for ch in 0..3 {
                        c[ch] = k.alpha * color[ch] + (1.0 - k.alpha) * c[ch];
                    }
                }
                let mut g = g_px;
                for (k, before) in contribs.iter().zip(&history).rev() {
                    let p = &self.order[k.slot];
                    let splat = &self.scene.splats[p.index];
                    let mut d_alpha = 0.0;
                    for ch in 0..3 {
                        out.color[p.index][ch] += g[ch] * k.alpha;
                        d_alpha += g[ch] * (splat.color[ch] - before[ch]);
                        g[ch] *= 1.0 - k.alpha;
                    }
                    out.opacity[p.index] += d_alpha * k.gauss;
                    // alpha = o * exp(-(dx^2 + dy^2) / (2 sigma^2))
                    let s2 = p.sigma * p.sigma;
                    let d_u = d_alpha * k.alpha * k.dx / s2;
                    let d_v = d_alpha * k.alpha * k.dy / s2;
                    let d_sigma = d_alpha * k.alpha * (k.dx * k.dx + k.dy * k.dy) / (s2 * p.sigma);
                    let f = self.camera.focal;
                    let z = p.cam.z;
                    cam_grad[k.slot] += Vector3::new(
                        d_u * f / z,
                        d_v * f / z,
                        -d_u * f * p.cam.x / (z * z) - d_v * f * p.cam.y / (z * z) - d_sigma * p.sigma / z,
                    );
                }
            }
        }
        for (slot, g) in cam_grad.iter().enumerate() {
            let world = self.camera.rotation.transpose() * g;
            out.position[self.order[slot].index] = [world.x, world.y, world.z];
        }
        out
    }
}

/// Renders with the default mid-gray background.
pub fn render(scene: &SplatScene, camera: &Camera) -> Result<ViewImage> {
    render_with_background(scene, camera, DEFAULT_BACKGROUND)
}

pub fn render_with_background(scene: &SplatScene, camera: &Camera, background: [f64; 3]) -> Result<ViewImage> {
    let r = Rasterizer::new(scene, camera, background)?;
    ViewImage::new(camera.id, r.render())
}

/// Vector-Jacobian product of [`render_with_background`]: maps `dL/dimage`
/// (shaped `(H, W, 3)`) to gradients on every splat parameter.
pub fn render_backward(
    scene: &SplatScene,
    camera: &Camera,
    background: [f64; 3],
    grad_image: &Array3<f64>,
) -> Result<SceneGrad> {
    let (w, h) = camera.resolution;
    if grad_image.shape() != [h, w, 3] {
        return Err(Error::Shape(format!(
            "gradient image {:?} does not match camera {}x{}",
            grad_image.shape(),
            w,
            h
        )));
    }
    let r = Rasterizer::new(scene, camera, background)?;
    Ok(r.backward(grad_image))
}

/// Masked mean absolute error between a render and a target, with its
/// gradient with respect to the rendered pixels. An empty mask yields zero
/// loss and zero gradient.
pub fn masked_l1(rendered: &ViewImage, target: &ViewImage, mask: Option<&Mask>) -> Result<(f64, Array3<f64>)> {
    rendered.ensure_same_dims(target)?;
    let (w, h) = rendered.dims();
    if let Some(m) = mask {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match image {}x{}",
                m.width(),
                m.height(),
                w,
                h
            )));
        }
    }
    let active = mask.map_or(w * h, Mask::count);
    let mut grad = Array3::zeros((h, w, 3));
    if active == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / (active * 3) as f64;
    let mut loss = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| !m.get(x, y)) {
                continue;
            }
            let a = rendered.pixel(x, y);
            let b = target.pixel(x, y);
            for ch in 0..3 {
                let d = a[ch] - b[ch];
                loss += d.abs() * norm;
                grad[[y, x, ch]] = if d > 0.0 {
                    norm
                } else if d < 0.0 {
                    -norm
                } else {
                    0.0
                };
            }
        }
    }
    Ok((loss, grad))
}

/// Synthetic 360-degree fixture: a blob of colored splats with cameras
/// evenly spaced on a circle around its centroid.
pub fn make_ring_scene(n_views: usize, n_splats: usize, seed: u64) -> Result<(SplatScene, Vec<Camera>)> {
    make_ring_scene_with_resolution(n_views, n_splats, seed, DEFAULT_RESOLUTION)
}

pub fn make_ring_scene_with_resolution(
    n_views: usize,
    n_splats: usize,
    seed: u64,
    resolution: usize,
) -> Result<(SplatScene, Vec<Camera>)> {
    if n_views < 3 {
        return Err(Error::Invalid(format!(
            "ring scene needs at least 3 views, got {n_views}"
        )));
    }
    if n_splats < 1 {
        return Err(Error::Invalid("ring scene needs at least one splat".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splats = Vec::with_capacity(n_splats);
    while splats.len() < n_splats {
        let p: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.7..0.7),
        ];
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] > 1.0 {
            continue;
        }
        // Hue follows the azimuth so that each side of the blob looks different.
        let azimuth = p[1].atan2(p[0]);
        let jitter: f64 = rng.random_range(-0.08..0.08);
        let color = [
            (0.5 + 0.4 * azimuth.cos() + jitter).clamp(0.0, 1.0),
            (0.5 + 0.4 * (azimuth + 2.1).cos() + 0.3 * p[2]).clamp(0.0, 1.0),
            (0.5 + 0.4 * (azimuth + 4.2).cos() - jitter).clamp(0.0, 1.0),
        ];
        splats.push(Splat {
            position: p,
            color,
            opacity: rng.random_range(0.6..1.0),
            radius: rng.random_range(0.08..0.2),
        });
    }
    let scene = SplatScene::new(splats)?;
    let centroid = scene.centroid();
    let focal = 0.5 * resolution as f64 / (22.5f64.to_radians()).tan();
    let cameras = (0..n_views)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / n_views as f64;
            let center = centroid + Vector3::new(3.5 * theta.cos(), 3.5 * theta.sin(), 1.0);
            Camera::look_at(
                k as u32,
                center,
                centroid,
                Vector3::z(),
                focal,
                (resolution, resolution),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scene, cameras))
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    id: u32,
    center: [f64; 3],
    rotation: [f64; 9],
    focal: f64,
    resolution: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    splats: Vec<Splat>,
    cameras: Vec<CameraRecord>,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            id: c.id,
            center: [c.center.x, c.center.y, c.center.z],
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            focal: c.focal,
            resolution: c.resolution.into(),
        }
    }
}

impl From<&CameraRecord> for Camera {
    fn from(r: &CameraRecord) -> Self {
        Self {
            id: r.id,
            center: Vector3::from(r.center),
            rotation: Matrix3::from_row_slice(&r.rotation),
            focal: r.focal,
            resolution: (r.resolution[0], r.resolution[1]),
        }
    }
}

pub fn scene_to_json(scene: &SplatScene, cameras: &[Camera]) -> String {
    let file = SceneFile {
        splats: scene.splats.clone(),
        cameras: cameras.iter().map(CameraRecord::from).collect(),
    };
    serde_json::to_string_pretty(&file).expect("scene serializes")
}

pub fn scene_from_json(text: &str) -> Result<(SplatScene, Vec<Camera>)> {
    let file: SceneFile = from_json(text, "scene file")?;
    let scene = SplatScene::new(file.splats)?;
    let cameras: Vec<Camera> = file.cameras.iter().map(Camera::from).collect();
    let mut seen = BTreeSet::new();
    for c in &cameras {
        c.validate()?;
        if !seen.insert(c.id) {
            return Err(Error::Invalid(format!("cameras: duplicate id {}", c.id)));
        }
    }
    Ok((scene, cameras))
}

pub fn save_scene(path: impl AsRef<Path>, scene: &SplatScene, cameras: &[Camera]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scene_to_json(scene, cameras)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<(SplatScene, Vec<Camera>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text)
}
