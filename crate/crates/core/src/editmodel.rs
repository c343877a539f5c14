//! The 2D editing model: a small k-step conditional denoiser with two
//! independently trainable low-rank adapter banks.
//!
//! Every convolution kernel (flattened to `out x in*9`) and the style head
//! carry one adapter per bank. The effective kernel is
//! `m * (W0 + (alpha / rank) * (B_gt A_gt + B_mv A_mv))` for a fixed
//! per-kernel multiplier `m`. `W0` is frozen and regenerated
//! deterministically from a fixed seed; only the bank selected by
//! [`EditorModel::set_trainable`] ever receives optimizer updates.
//!
//! The seed draws a small style vector and the pixel noise of the initial
//! state. An edit runs `num_denoise_steps` refinement steps,
//! `x_{k+1} = (1 - g_k) x_k + g_k D(x_k, source, prompt, k)` with the
//! linear schedule `g_k = (k + 1) / K`. `D` predicts the edited image as a
//! sigmoid of the source logits plus a learned residual, a prompt tint and
//! the style head's color shift, so the last step lands exactly on a
//! `[0, 1]` image. Reverse-mode gradients flow through all `K` steps.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{from_json, Error, Result};
use crate::image::ViewImage;
use crate::nn::{self, AdamWConfig, Conv2d};

pub const PROMPT_DIM: usize = 64;
pub const CHECKPOINT_VERSION: u32 = 1;

const BASE_WEIGHT_SEED: u64 = 0xC3ED_0001;
const PROMPT_CHANNELS: usize = 4;
/// Size of the per-seed global style latent.
pub const STYLE_DIM: usize = 3;

const LOGIT_EPS: f64 = 1e-3;

/// Layer names in forward order.
pub const LAYER_NAMES: [&str; 7] = ["enc1", "enc2", "enc3", "dec1", "dec2", "dec3", "style"];
const ENC1: usize = 0;
const ENC2: usize = 1;
const ENC3: usize = 2;
const DEC1: usize = 3;
const DEC2: usize = 4;
const DEC3: usize = 5;
const STYLE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditorConfig {
    pub num_denoise_steps: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Weight of the seeded pixel noise in the initial state.
    pub noise_strength: f64,
    /// Standard deviation, in logits, of the per-seed color shift produced by
    /// the style head.
    pub style_strength: f64,
    /// Fixed multiplier on the style head kernel, analogous to
    /// `kernel_multiplier`.
    pub style_gain: f64,
    /// Scale on the residual added to the source logits.
    pub residual_gain: f64,
    /// Scale on the prompt-dependent color tint, in logit units.
    pub tint_strength: f64,
    /// Fixed multiplier applied to every effective kernel. Stored weights are
    /// drawn correspondingly smaller, so the base function is unchanged while
    /// adapter updates gain leverage.
    pub kernel_multiplier: f64,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            num_denoise_steps: 5,
            rank: 4,
            alpha: 4.0,
            noise_strength: 0.3,
            style_strength: 1.0,
            style_gain: 3000.0,
            residual_gain: 4.0,
            tint_strength: 1.2,
            kernel_multiplier: 30.0,
        }
    }
}

impl EditorConfig {
    pub fn adapter_scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Token-hash bag-of-words text embedding, L2-normalized.
///
/// Each lowercase alphanumeric token seeds its own Gaussian vector from a
/// SHA-256 digest of `domain || token`; the prompt embedding is the
/// normalized sum. Same text, same vector, on every platform.
pub fn hashed_text_embedding(text: &str, dim: usize, domain: &str) -> Array1<f64> {
    let mut acc = Array1::<f64>::zeros(dim);
    for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let mut hasher = Sha256::new();
        hasher.update(domain.as_bytes());
        hasher.update([0u8]);
        hasher.update(token.to_lowercase().as_bytes());
        let digest = hasher.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = nn::seeded_rng(seed);
        for v in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += z;
        }
    }
    let norm = acc.dot(&acc).sqrt();
    if norm > 0.0 {
        acc /= norm;
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoder {
    pub dim: usize,
}

impl Default for PromptEncoder {
    fn default() -> Self {
        Self { dim: PROMPT_DIM }
    }
}

impl PromptEncoder {
    pub fn encode(&self, prompt: &str) -> Array1<f64> {
        hashed_text_embedding(prompt, self.dim, "prompt")
    }
}

/// Frozen parameters of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDenoiser {
    pub layers: Vec<Conv2d>,
    /// `(PROMPT_CHANNELS, PROMPT_DIM)`: prompt embedding to broadcast input channels.
    pub prompt_proj: Array2<f64>,
    /// `(3, PROMPT_DIM)`: prompt embedding to per-channel color tint.
    pub tint_proj: Array2<f64>,
    /// `(3, STYLE_DIM + 1)`: seeded style latent, plus a constant input, to
    /// per-channel logit shift. The constant column starts at zero.
    pub style_head: Array2<f64>,
}

impl BaseDenoiser {
    pub fn seeded(seed: u64, kernel_multiplier: f64, style_gain: f64) -> Self {
        let mut rng = nn::seeded_rng(seed);
        let in_ch = 3 + 3 + PROMPT_CHANNELS + 1;
        // (in, out, stride, gain)
        let specs = [
            (in_ch, 16, 2, 1.6),
            (16, 32, 1, 1.6),
            (32, 32, 2, 1.6),
            (32, 32, 1, 1.6),
            (64, 16, 1, 1.6),
            (16 + 3 + 3, 3, 1, 0.5),
        ];
        let mut layers: Vec<Conv2d> = specs
            .iter()
            .map(|&(i, o, s, g)| Conv2d::seeded(i, o, s, g / kernel_multiplier, &mut rng))
            .collect();
        let bias = Normal::new(0.0, 0.1).unwrap();
        for layer in layers.iter_mut().take(DEC3) {
            layer.bias.mapv_inplace(|_| bias.sample(&mut rng));
        }
        let proj = Normal::new(0.0, 1.0).unwrap();
        let prompt_proj = Array2::from_shape_simple_fn((PROMPT_CHANNELS, PROMPT_DIM), || proj.sample(&mut rng));
        let tint_proj = Array2::from_shape_simple_fn((3, PROMPT_DIM), || proj.sample(&mut rng));
        let style = Normal::new(0.0, 1.0 / style_gain).unwrap();
        let style_head = Array2::from_shape_fn((3, STYLE_DIM + 1), |(_, j)| {
            if j < STYLE_DIM {
                style.sample(&mut rng)
            } else {
                0.0
            }
        });
        Self {
            layers,
            prompt_proj,
            tint_proj,
            style_head,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
            + self.prompt_proj.len()
            + self.tint_proj.len()
            + self.style_head.len()
    }

    /// `(out, in)` of every adapted kernel, in [`LAYER_NAMES`] order.
    pub fn kernel_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| l.weight.dim())
            .chain(std::iter::once(self.style_head.dim()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    /// `(rank, in)`.
    pub a: Array2<f64>,
    /// `(out, rank)`.
    pub b: Array2<f64>,
}

impl LoraLayer {
    pub fn delta(&self, scale: f64) -> Array2<f64> {
        self.b.dot(&self.a) * scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMoments {
    pub m_a: Array2<f64>,
    pub v_a: Array2<f64>,
    pub m_b: Array2<f64>,
    pub v_b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank {
    pub layers: Vec<LoraLayer>,
    pub moments: Vec<LayerMoments>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl AdapterBank {
    fn zeros(base: &BaseDenoiser, rank: usize) -> Self {
        let layers: Vec<LoraLayer> = base
            .kernel_shapes()
            .into_iter()
            .map(|(out, inp)| LoraLayer {
                a: Array2::zeros((rank, inp)),
                b: Array2::zeros((out, rank)),
            })
            .collect();
        let moments = layers
            .iter()
            .map(|l| LayerMoments {
                m_a: Array2::zeros(l.a.raw_dim()),
                v_a: Array2::zeros(l.a.raw_dim()),
                m_b: Array2::zeros(l.b.raw_dim()),
                v_b: Array2::zeros(l.b.raw_dim()),
            })
            .collect();
        Self {
            layers,
            moments,
            step: 0,
        }
    }

    /// Gaussian `A` with standard deviation `1 / rank`, zero `B`.
    fn init_gaussian(&mut self, rank: usize, seed: u64) {
        let mut rng = nn::seeded_rng(seed);
        let normal = Normal::new(0.0, 1.0 / rank as f64).unwrap();
        for layer in &mut self.layers {
            layer.a.mapv_inplace(|_| normal.sample(&mut rng));
            layer.b.fill(0.0);
        }
        for m in &mut self.moments {
            m.m_a.fill(0.0);
            m.v_a.fill(0.0);
            m.m_b.fill(0.0);
            m.v_b.fill(0.0);
        }
        self.step = 0;
    }

    pub fn is_zero_delta(&self) -> bool {
        self.layers.iter().all(|l| l.b.iter().all(|v| *v == 0.0))
    }

    /// Byte image of all factors, for bit-equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.layers
            .iter()
            .flat_map(|l| l.a.iter().chain(l.b.iter()))
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.a.len() + l.b.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainable {
    Gt,
    Mv,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub gt: AdapterBank,
    pub mv: AdapterBank,
    trainable: Trainable,
}

impl AdapterPair {
    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    pub fn bank(&self, which: Trainable) -> Option<&AdapterBank> {
        match which {
            Trainable::Gt => Some(&self.gt),
            Trainable::Mv => Some(&self.mv),
            Trainable::None => None,
        }
    }

    fn bank_mut(&mut self, which: Trainable) -> Option<&mut AdapterBank> {
        match which {
            Trainable::Gt => Some(&mut self.gt),
            Trainable::Mv => Some(&mut self.mv),
            Trainable::None => None,
        }
    }
}

/// Gradients for the bank that was trainable when they were computed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub bank: Trainable,
    /// Per layer `(dA, dB)`.
    pub layers: Vec<(Array2<f64>, Array2<f64>)>,
}

impl AdapterGrads {
    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(a, b)| a.iter().chain(b.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub view_id: u32,
    pub prompt: String,
    pub seed: u64,
    pub pass_label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub image: ViewImage,
    pub provenance: Provenance,
}

struct StepTrace {
    in0: Array3<f64>,
    z1: Array3<f64>,
    h1: Array3<f64>,
    z2: Array3<f64>,
    h2: Array3<f64>,
    z3: Array3<f64>,
    h3: Array3<f64>,
    z4: Array3<f64>,
    c5: Array3<f64>,
    z5: Array3<f64>,
    c6: Array3<f64>,
    out: Array3<f64>,
}

/// Saved activations of a traced edit, consumed by [`EditorModel::backward`].
pub struct EditTrace {
    steps: Vec<StepTrace>,
    weights: Vec<Array2<f64>>,
    style: [f64; STYLE_DIM],
    height: usize,
    width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditorModel {
    pub config: EditorConfig,
    base: BaseDenoiser,
    pub adapters: AdapterPair,
    pub prompt_encoder: PromptEncoder,
}

struct Conditioning {
    prompt_channels: Array1<f64>,
    tint: Array1<f64>,
    source: Array3<f64>,
    source_logit: Array3<f64>,
    style: [f64; STYLE_DIM],
}

fn style_input(style: &[f64; STYLE_DIM]) -> Array1<f64> {
    style.iter().copied().chain(std::iter::once(1.0)).collect()
}

impl EditorModel {
    /// Fresh model: frozen base weights, both banks initialized from `adapter_seed`.
    pub fn new(config: EditorConfig, adapter_seed: u64) -> Result<Self> {
        if config.num_denoise_steps < 1 {
            return Err(Error::Invalid("num_denoise_steps must be >= 1".into()));
        }
        if config.rank < 1 {
            return Err(Error::Invalid("adapter rank must be >= 1".into()));
        }
        for (name, v) in [
            ("kernel_multiplier", config.kernel_multiplier),
            ("style_gain", config.style_gain),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Invalid(format!("{name} must be > 0")));
            }
        }
        let base = BaseDenoiser::seeded(BASE_WEIGHT_SEED, config.kernel_multiplier, config.style_gain);
        let adapters = AdapterPair {
            gt: AdapterBank::zeros(&base, config.rank),
            mv: AdapterBank::zeros(&base, config.rank),
            trainable: Trainable::None,
        };
        let mut model = Self {
            config,
            base,
            adapters,
            prompt_encoder: PromptEncoder::default(),
        };
        model.init_adapters(adapter_seed);
        Ok(model)
    }

    pub fn base(&self) -> &BaseDenoiser {
        &self.base
    }

    pub fn adapters(&self) -> &AdapterPair {
        &self.adapters
    }

    pub fn init_adapters(&mut self, seed: u64) {
        let rank = self.config.rank;
        self.adapters
            .gt
            .init_gaussian(rank, seed.wrapping_mul(2).wrapping_add(1));
        self.adapters
            .mv
            .init_gaussian(rank, seed.wrapping_mul(2).wrapping_add(2));
    }

    pub fn set_trainable(&mut self, which: Trainable) {
        self.adapters.trainable = which;
    }

    fn stored_kernels(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.base
            .layers
            .iter()
            .map(|l| &l.weight)
            .chain(std::iter::once(&self.base.style_head))
    }

    fn multiplier(&self, layer: usize) -> f64 {
        if layer == STYLE {
            self.config.style_gain
        } else {
            self.config.kernel_multiplier
        }
    }

    fn effective_weights(&self) -> Vec<Array2<f64>> {
        let scale = self.config.adapter_scale();
        self.stored_kernels()
            .zip(self.adapters.gt.layers.iter().zip(&self.adapters.mv.layers))
            .enumerate()
            .map(|(i, (w, (gt, mv)))| (w + &gt.delta(scale) + &mv.delta(scale)) * self.multiplier(i))
            .collect()
    }

    fn base_weights(&self) -> Vec<Array2<f64>> {
        self.stored_kernels()
            .enumerate()
            .map(|(i, w)| w * self.multiplier(i))
            .collect()
    }

    fn conditioning(&self, source: &ViewImage, prompt: &str) -> Result<Conditioning> {
        if prompt.trim().is_empty() {
            return Err(Error::Invalid("edit prompt must be non-empty".into()));
        }
        let emb = self.prompt_encoder.encode(prompt);
        let src = source.to_chw();
        let source_logit = src.mapv(|v| {
            let p = v.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
            (p / (1.0 - p)).ln()
        });
        Ok(Conditioning {
            prompt_channels: self.base.prompt_proj.dot(&emb),
            tint: self.base.tint_proj.dot(&emb) * self.config.tint_strength,
            source: src,
            source_logit,
            style: [0.0; STYLE_DIM],
        })
    }

    /// Seeded starting point: a style vector of norm `style_strength`, then
    /// the noisy initial image.
    fn initial_state(&self, cond: &mut Conditioning, seed: u64) -> Array3<f64> {
        let mut rng = nn::seeded_rng(seed);
        for v in cond.style.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let norm = cond.style.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        cond.style
            .iter_mut()
            .for_each(|v| *v *= self.config.style_strength / norm);
        let s = self.config.noise_strength;
        cond.source.mapv(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (1.0 - s) * v + s * z
        })
    }

    fn step_forward(&self, weights: &[Array2<f64>], cond: &Conditioning, x: &Array3<f64>, step: usize) -> StepTrace {
        let (_, h, w) = x.dim();
        let layers = &self.base.layers;
        let t = step as f64 / self.config.num_denoise_steps as f64;
        let mut extra = Array3::zeros((PROMPT_CHANNELS + 1, h, w));
        for c in 0..PROMPT_CHANNELS {
            extra.index_axis_mut(Axis(0), c).fill(cond.prompt_channels[c]);
        }
        extra.index_axis_mut(Axis(0), PROMPT_CHANNELS).fill(t);
        let in0 = nn::concat(&[x.view(), cond.source.view(), extra.view()]);

        let conv =
            |i: usize, input: ArrayView3<f64>| nn::conv_forward(input, &weights[i], &layers[i].bias, layers[i].stride);
        let z1 = conv(ENC1, in0.view());
        let h1 = nn::silu(&z1);
        let z2 = conv(ENC2, h1.view());
        let h2 = nn::silu(&z2);
        let z3 = conv(ENC3, h2.view());
        let h3 = nn::silu(&z3);
        let z4 = conv(DEC1, h3.view());
        let h4 = nn::silu(&z4);
        let (_, h2h, h2w) = h2.dim();
        let u4 = nn::upsample2(&h4, h2h, h2w);
        let c5 = nn::concat(&[u4.view(), h2.view()]);
        let z5 = conv(DEC2, c5.view());
        let h5 = nn::silu(&z5);
        let u5 = nn::upsample2(&h5, h, w);
        let c6 = nn::concat(&[u5.view(), x.view(), cond.source.view()]);
        let r = conv(DEC3, c6.view());

        let gain = self.config.residual_gain;
        let shift = weights[STYLE].dot(&style_input(&cond.style));
        let mut out = &cond.source_logit + &(r * gain);
        for c in 0..3 {
            let offset = cond.tint[c] + shift[c];
            out.index_axis_mut(Axis(0), c).mapv_inplace(|v| nn::sigmoid(v + offset));
        }
        StepTrace {
            in0,
            z1,
            h1,
            z2,
            h2,
            z3,
            h3,
            z4,
            c5,
            z5,
            c6,
            out,
        }
    }

    fn schedule(&self, step: usize) -> f64 {
        (step + 1) as f64 / self.config.num_denoise_steps as f64
    }

    fn run(
        &self,
        weights: &[Array2<f64>],
        source: &ViewImage,
        prompt: &str,
        seed: u64,
        keep_trace: bool,
    ) -> Result<(ViewImage, Vec<StepTrace>, [f64; STYLE_DIM])> {
        let mut cond = self.conditioning(source, prompt)?;
        let mut x = self.initial_state(&mut cond, seed);
        let mut traces = Vec::new();
        for k in 0..self.config.num_denoise_steps {
            let trace = self.step_forward(weights, &cond, &x, k);
            if trace.out.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("denoise step", k, "non-finite activation"));
            }
            let g = self.schedule(k);
            x = &x * (1.0 - g) + &(&trace.out * g);
            if keep_trace {
                traces.push(trace);
            }
        }
        Ok((ViewImage::from_chw(source.view_id, &x)?, traces, cond.style))
    }

    /// One complete editing pass.
    pub fn edit(&self, source: &ViewImage, prompt: &str, seed: u64) -> Result<EditResult> {
        self.edit_labeled(source, prompt, seed, "edit")
    }

    pub fn edit_labeled(&self, source: &ViewImage, prompt: &str, seed: u64, pass_label: &str) -> Result<EditResult> {
        let (image, _, _) = self.run(&self.effective_weights(), source, prompt, seed, false)?;
        Ok(EditResult {
            image,
            provenance: Provenance {
                view_id: source.view_id,
                prompt: prompt.to_string(),
                seed,
                pass_label: pass_label.to_string(),
            },
        })
    }

    /// Edit with the frozen base weights only, ignoring both banks.
    pub fn edit_base(&self, source: &ViewImage, prompt: &str, seed: u64) -> Result<ViewImage> {
        Ok(self.run(&self.base_weights(), source, prompt, seed, false)?.0)
    }

    /// Edit while recording what [`backward`](Self::backward) needs.
    pub fn edit_traced(&self, source: &ViewImage, prompt: &str, seed: u64) -> Result<(ViewImage, EditTrace)> {
        let weights = self.effective_weights();
        let (image, steps, style) = self.run(&weights, source, prompt, seed, true)?;
        let trace = EditTrace {
            steps,
            weights,
            style,
            height: source.height(),
            width: source.width(),
        };
        Ok((image, trace))
    }

    /// Gradients of a scalar loss with respect to the trainable bank, given
    /// `dL/doutput` shaped `(H, W, 3)`. All denoising steps are unrolled.
    pub fn backward(&self, trace: &EditTrace, grad_output: &Array3<f64>) -> Result<AdapterGrads> {
        let which = self.adapters.trainable;
        let Some(bank) = self.adapters.bank(which) else {
            return Ok(AdapterGrads {
                bank: Trainable::None,
                layers: Vec::new(),
            });
        };
        let (h, w) = (trace.height, trace.width);
        if grad_output.shape() != [h, w, 3] {
            return Err(Error::Shape(format!(
                "output gradient {:?}, expected [{h}, {w}, 3]",
                grad_output.shape()
            )));
        }
        let weight_grads = self.weight_grads(trace, grad_output);
        let layers = weight_grads
            .iter()
            .zip(&bank.layers)
            .enumerate()
            .map(|(i, (dw, l))| {
                let scale = self.config.adapter_scale() * self.multiplier(i);
                (l.b.t().dot(dw) * scale, dw.dot(&l.a.t()) * scale)
            })
            .collect();
        Ok(AdapterGrads { bank: which, layers })
    }

    /// Gradient of the loss with respect to each effective kernel.
    fn weight_grads(&self, trace: &EditTrace, grad_output: &Array3<f64>) -> Vec<Array2<f64>> {
        let layers = &self.base.layers;
        let weights = &trace.weights;
        let gain = self.config.residual_gain;
        let mut dws: Vec<Array2<f64>> = weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
        let mut gx = grad_output
            .view()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned();
        let (h, w) = (trace.height, trace.width);

        for (k, st) in trace.steps.iter().enumerate().rev() {
            let g = self.schedule(k);
            let d_out = &gx * g;
            let mut gx_prev = &gx * (1.0 - g);

            let mut dlogit = d_out;
            ndarray::Zip::from(&mut dlogit)
                .and(&st.out)
                .for_each(|d, &o| *d *= o * (1.0 - o));
            let totals = Array1::from_shape_fn(3, |c| dlogit.index_axis(Axis(0), c).sum());
            let input = style_input(&trace.style);
            dws[STYLE] += &totals
                .view()
                .insert_axis(Axis(1))
                .dot(&input.view().insert_axis(Axis(0)));
            let dz = dlogit * gain;

            let back = |i: usize, input: &Array3<f64>, dy: &Array3<f64>, dws: &mut Vec<Array2<f64>>| {
                let (dx, dw) = nn::conv_backward(input.view(), &weights[i], layers[i].stride, dy, true);
                dws[i] += &dw;
                dx.unwrap()
            };

            let dc6 = back(DEC3, &st.c6, &dz, &mut dws);
            let parts = nn::split_channels(&dc6, &[16, 3, 3]);
            gx_prev += &parts[1];
            let (_, h2h, h2w) = st.h2.dim();
            let dh5 = nn::upsample2_backward(&parts[0], h2h, h2w);
            let dz5 = nn::silu_backward(&st.z5, &dh5);
            let dc5 = back(DEC2, &st.c5, &dz5, &mut dws);
            let parts5 = nn::split_channels(&dc5, &[32, 32]);
            let (_, h3h, h3w) = st.h3.dim();
            let dh4 = nn::upsample2_backward(&parts5[0], h3h, h3w);
            let dz4 = nn::silu_backward(&st.z4, &dh4);
            let dh3 = back(DEC1, &st.h3, &dz4, &mut dws);
            let dz3 = nn::silu_backward(&st.z3, &dh3);
            let mut dh2 = back(ENC3, &st.h2, &dz3, &mut dws);
            dh2 += &parts5[1];
            let dz2 = nn::silu_backward(&st.z2, &dh2);
            let dh1 = back(ENC2, &st.h1, &dz2, &mut dws);
            let dz1 = nn::silu_backward(&st.z1, &dh1);
            let din0 = back(ENC1, &st.in0, &dz1, &mut dws);
            gx_prev += &nn::split_channels(&din0, &[3])[0];
            debug_assert_eq!(gx_prev.dim(), (3, h, w));
            gx = gx_prev;
        }
        dws
    }

    /// AdamW update of the trainable bank. A no-op, with a warning, when no
    /// bank is trainable.
    pub fn optimizer_step(&mut self, grads: &AdapterGrads, cfg: &AdamWConfig) -> Result<()> {
        let which = self.adapters.trainable;
        let Some(bank) = self.adapters.bank_mut(which) else {
            log::warn!("optimizer_step called with no trainable adapter bank; skipping");
            return Ok(());
        };
        if grads.bank != which || grads.layers.len() != bank.layers.len() {
            return Err(Error::Invalid(format!(
                "gradients were computed for {:?}, trainable bank is {:?}",
                grads.bank, which
            )));
        }
        bank.step += 1;
        let step = bank.step;
        for ((layer, mom), (da, db)) in bank.layers.iter_mut().zip(&mut bank.moments).zip(&grads.layers) {
            nn::adamw_update(
                layer.a.as_slice_mut().unwrap(),
                da.as_standard_layout().as_slice().unwrap(),
                mom.m_a.as_slice_mut().unwrap(),
                mom.v_a.as_slice_mut().unwrap(),
                step,
                cfg,
            );
            nn::adamw_update(
                layer.b.as_slice_mut().unwrap(),
                db.as_standard_layout().as_slice().unwrap(),
                mom.m_b.as_slice_mut().unwrap(),
                mom.v_b.as_slice_mut().unwrap(),
                step,
                cfg,
            );
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> AdapterCheckpoint {
        AdapterCheckpoint {
            format_version: CHECKPOINT_VERSION,
            rank: self.config.rank,
            alpha: self.config.alpha,
            trainable: self.adapters.trainable,
            layers: self
                .base
                .kernel_shapes()
                .into_iter()
                .zip(LAYER_NAMES)
                .map(|((out_features, in_features), name)| LayerShape {
                    name: name.to_string(),
                    in_features,
                    out_features,
                })
                .collect(),
            gt: BankRecord::from_bank(&self.adapters.gt),
            mv: BankRecord::from_bank(&self.adapters.mv),
        }
    }

    pub fn apply_checkpoint(&mut self, ckpt: &AdapterCheckpoint) -> Result<()> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!(
                "adapter checkpoint version {} is not supported (expected {})",
                ckpt.format_version, CHECKPOINT_VERSION
            )));
        }
        if ckpt.rank != self.config.rank || ckpt.alpha != self.config.alpha {
            return Err(Error::Invalid(format!(
                "adapter checkpoint has rank {} / alpha {}, model expects rank {} / alpha {}",
                ckpt.rank, ckpt.alpha, self.config.rank, self.config.alpha
            )));
        }
        let gt = ckpt.gt.to_bank(&self.adapters.gt)?;
        let mv = ckpt.mv.to_bank(&self.adapters.mv)?;
        self.adapters.gt = gt;
        self.adapters.mv = mv;
        self.adapters.trainable = ckpt.trainable;
        Ok(())
    }

    pub fn save_adapters(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_adapters(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: AdapterCheckpoint = from_json(&text, "adapter checkpoint")?;
        self.apply_checkpoint(&ckpt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub m_a: Vec<f64>,
    pub v_a: Vec<f64>,
    pub m_b: Vec<f64>,
    pub v_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankRecord {
    pub step: u64,
    pub layers: Vec<LayerRecord>,
}

impl BankRecord {
    fn from_bank(bank: &AdapterBank) -> Self {
        let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
        Self {
            step: bank.step,
            layers: bank
                .layers
                .iter()
                .zip(&bank.moments)
                .map(|(l, m)| LayerRecord {
                    a: flat(&l.a),
                    b: flat(&l.b),
                    m_a: flat(&m.m_a),
                    v_a: flat(&m.v_a),
                    m_b: flat(&m.m_b),
                    v_b: flat(&m.v_b),
                })
                .collect(),
        }
    }

    fn to_bank(&self, like: &AdapterBank) -> Result<AdapterBank> {
        if self.layers.len() != like.layers.len() {
            return Err(Error::Invalid(format!(
                "adapter checkpoint has {} layers, model has {}",
                self.layers.len(),
                like.layers.len()
            )));
        }
        let shaped = |v: &[f64], like: &Array2<f64>, what: &str, i: usize| {
            Array2::from_shape_vec(like.raw_dim(), v.to_vec()).map_err(|_| {
                Error::Invalid(format!(
                    "adapter layer {} ({what}): expected {:?} values, found {}",
                    LAYER_NAMES[i],
                    like.dim(),
                    v.len()
                ))
            })
        };
        let mut layers = Vec::new();
        let mut moments = Vec::new();
        for (i, (rec, l)) in self.layers.iter().zip(&like.layers).enumerate() {
            layers.push(LoraLayer {
                a: shaped(&rec.a, &l.a, "A", i)?,
                b: shaped(&rec.b, &l.b, "B", i)?,
            });
            moments.push(LayerMoments {
                m_a: shaped(&rec.m_a, &l.a, "m_A", i)?,
                v_a: shaped(&rec.v_a, &l.a, "v_A", i)?,
                m_b: shaped(&rec.m_b, &l.b, "m_B", i)?,
                v_b: shaped(&rec.v_b, &l.b, "v_B", i)?,
            });
        }
        Ok(AdapterBank {
            layers,
            moments,
            step: self.step,
        })
    }
}

/// On-disk adapter state: both banks, their optimizer moments, and the
/// configuration they were trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub format_version: u32,
    pub rank: usize,
    pub alpha: f64,
    pub trainable: Trainable,
    pub layers: Vec<LayerShape>,
    pub gt: BankRecord,
    pub mv: BankRecord,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_source() -> ViewImage {
        let px = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            (0.5 + 0.4 * ((x as f64 * 0.4 + c as f64).sin() * (y as f64 * 0.3).cos())).clamp(0.0, 1.0)
        });
        ViewImage::new(2, px).unwrap()
    }

    #[test]
    fn base_is_small() {
        let m = EditorModel::new(EditorConfig::default(), 0).unwrap();
        assert!(m.base().parameter_count() <= 200_000);
        assert!(m.adapters.gt.is_zero_delta() && m.adapters.mv.is_zero_delta());
    }

    #[test]
    fn zero_delta_adapters_are_neutral() {
        let m = EditorModel::new(EditorConfig::default(), 3).unwrap();
        let src = small_source();
        let with = m.edit(&src, "make it red", 9).unwrap().image;
        let without = m.edit_base(&src, "make it red", 9).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let m = EditorModel::new(EditorConfig::default(), 3).unwrap();
        let src = small_source();
        let a = m.edit(&src, "turn it blue", 1).unwrap().image;
        let b = m.edit(&src, "turn it blue", 1).unwrap().image;
        let c = m.edit(&src, "turn it blue", 2).unwrap().image;
        assert_eq!(a, b);
        let diff: f64 = a.as_slice().iter().zip(c.as_slice()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 0.0);
        assert!(c.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn empty_prompt_rejected() {
        let m = EditorModel::new(EditorConfig::default(), 0).unwrap();
        assert!(m.edit(&small_source(), "   ", 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = EditorModel::new(EditorConfig::default(), 5).unwrap();
        let b = EditorModel::new(EditorConfig::default(), 5).unwrap();
        let c = EditorModel::new(EditorConfig::default(), 6).unwrap();
        assert_eq!(a.adapters.gt.layers[0].a, b.adapters.gt.layers[0].a);
        assert_ne!(a.adapters.gt.layers[0].a, c.adapters.gt.layers[0].a);
        for l in &a.adapters.gt.layers {
            assert!(l.delta(a.config.adapter_scale()).iter().all(|v| *v == 0.0));
        }
    }

    fn train_steps(m: &mut EditorModel, steps: usize) {
        let src = small_source();
        let target = ViewImage::filled(2, 16, 16, [0.9, 0.1, 0.1]).unwrap();
        for s in 0..steps {
            let (out, trace) = m.edit_traced(&src, "paint", s as u64).unwrap();
            let grad = out.pixels() - target.pixels();
            let g = m.backward(&trace, &grad).unwrap();
            m.optimizer_step(&g, &AdamWConfig::default()).unwrap();
        }
    }

    #[test]
    fn training_one_bank_freezes_the_other() {
        let mut m = EditorModel::new(EditorConfig::default(), 1).unwrap();
        m.set_trainable(Trainable::Gt);
        let mv = m.adapters.mv.to_bytes();
        let gt = m.adapters.gt.to_bytes();
        train_steps(&mut m, 10);
        assert_eq!(m.adapters.mv.to_bytes(), mv);
        assert_ne!(m.adapters.gt.to_bytes(), gt);

        m.set_trainable(Trainable::Mv);
        let gt = m.adapters.gt.to_bytes();
        train_steps(&mut m, 10);
        assert_eq!(m.adapters.gt.to_bytes(), gt);

        m.set_trainable(Trainable::None);
        let snapshot = m.adapters.clone();
        train_steps(&mut m, 2);
        assert_eq!(m.adapters, snapshot);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let config = EditorConfig {
            num_denoise_steps: 2,
            ..EditorConfig::default()
        };
        let mut m = EditorModel::new(config, 4).unwrap();
        let mut rng = nn::seeded_rng(77);
        let small = Normal::new(0.0, 0.002).unwrap();
        for l in &mut m.adapters.mv.layers {
            l.b.mapv_inplace(|_| small.sample(&mut rng));
        }
        m.set_trainable(Trainable::Mv);
        let src = small_source();
        let weights = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c * 5) % 11) as f64 / 11.0 - 0.5
        });
        let loss = |m: &EditorModel| -> f64 {
            let out = m.edit(&src, "paint", 3).unwrap().image;
            (out.pixels() * &weights).sum()
        };
        let (_, trace) = m.edit_traced(&src, "paint", 3).unwrap();
        let grads = m.backward(&trace, &weights).unwrap();
        let h = 1e-6;
        for (layer, name) in LAYER_NAMES.iter().enumerate() {
            for (which, idx) in [(0, [0, 1]), (1, [1, 2]), (1, [2, 0])] {
                let mut probe = m.clone();
                let nudge = |p: &mut EditorModel, d: f64| {
                    let l = &mut p.adapters.mv.layers[layer];
                    if which == 0 {
                        l.a[idx] += d
                    } else {
                        l.b[idx] += d
                    }
                };
                nudge(&mut probe, h);
                let up = loss(&probe);
                nudge(&mut probe, -2.0 * h);
                let down = loss(&probe);
                let fd = (up - down) / (2.0 * h);
                let (da, db) = &grads.layers[layer];
                let an = if which == 0 { da[idx] } else { db[idx] };
                assert!(
                    (fd - an).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "{name} {} {:?}: fd {fd} vs analytic {an}",
                    if which == 0 { "A" } else { "B" },
                    idx
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_rank_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapters.json");
        let mut m = EditorModel::new(EditorConfig::default(), 1).unwrap();
        m.set_trainable(Trainable::Gt);
        train_steps(&mut m, 3);
        m.save_adapters(&path).unwrap();

        let mut n = EditorModel::new(EditorConfig::default(), 99).unwrap();
        n.load_adapters(&path).unwrap();
        assert_eq!(n.adapters, m.adapters);
        let src = small_source();
        assert_eq!(n.edit(&src, "paint", 4).unwrap(), m.edit(&src, "paint", 4).unwrap());

        let mut other = EditorModel::new(
            EditorConfig {
                rank: 2,
                alpha: 2.0,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let err = other.load_adapters(&path).unwrap_err().to_string();
        assert!(err.contains("rank"), "{err}");

        fs::write(&path, "{\"format_version\": 1, \"rank\": 4, \"alp").unwrap();
        assert!(matches!(n.load_adapters(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn prompt_embedding_properties() {
        let enc = PromptEncoder::default();
        let a = enc.encode("Turn him into Batman");
        let b = enc.encode("turn HIM into batman!");
        let c = enc.encode("make the bike red");
        assert_eq!(a, b);
        assert!((a.dot(&a) - 1.0).abs() < 1e-12);
        assert!(a.dot(&c) < 0.99);
    }
}
