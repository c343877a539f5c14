//! Minimal dense tensor kernels for the editor and the feature pyramid.
//!
//! Feature maps are `(channels, height, width)` arrays. Convolutions are 3x3
//! with zero padding 1, lowered to a matrix product via im2col.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out, in * 9)`, row-major over `(in, ky, kx)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

impl Conv2d {
    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)` and zero bias.
    pub fn seeded(in_ch: usize, out_ch: usize, stride: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * TAPS;
        let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).unwrap();
        let weight = Array2::from_shape_simple_fn((out_ch, fan_in), || normal.sample(rng));
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / TAPS
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Array3<f64> {
        conv_forward(x, &self.weight, &self.bias, self.stride)
    }
}

pub fn out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Lowers `x` to `(C * 9, Ho * Wo)` patch columns.
pub fn im2col(x: ArrayView3<f64>, stride: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let mut cols = Array2::zeros((c * TAPS, ho * wo));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * TAPS + ky * KERNEL + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto a `(C, H, W)` map.
pub fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, stride: usize) -> Array3<f64> {
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let mut x = Array3::zeros((c, h, w));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().unwrap();
    let xs = x.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * TAPS + ky * KERNEL + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let g = &src[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, gv) in g.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += gv;
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn conv_forward(x: ArrayView3<f64>, weight: &Array2<f64>, bias: &Array1<f64>, stride: usize) -> Array3<f64> {
    let (_, h, w) = x.dim();
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let cols = im2col(x, stride);
    let mut y = weight.dot(&cols);
    y += &bias.view().insert_axis(Axis(1));
    y.into_shape_with_order((weight.nrows(), ho, wo)).unwrap()
}

/// Gradients of a convolution given the upstream gradient `dy`.
/// Returns `(d_input, d_weight)`; `d_input` is skipped when not needed.
pub fn conv_backward(
    x: ArrayView3<f64>,
    weight: &Array2<f64>,
    stride: usize,
    dy: &Array3<f64>,
    need_input_grad: bool,
) -> (Option<Array3<f64>>, Array2<f64>) {
    let (c, h, w) = x.dim();
    let out = weight.nrows();
    let dy2 = dy
        .view()
        .into_shape_with_order((out, dy.len() / out))
        .map(|v| v.to_owned())
        .unwrap_or_else(|_| {
            dy.as_standard_layout()
                .into_owned()
                .into_shape_with_order((out, dy.len() / out))
                .unwrap()
        });
    let cols = im2col(x, stride);
    let d_weight = dy2.dot(&cols.t());
    let d_input = need_input_grad.then(|| {
        let dcols = weight.t().dot(&dy2);
        col2im(&dcols, c, h, w, stride)
    });
    (d_input, d_weight)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn silu(z: &Array3<f64>) -> Array3<f64> {
    z.mapv(|v| v * sigmoid(v))
}

/// `dL/dz` for `y = silu(z)`.
pub fn silu_backward(z: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(z).for_each(|g, &v| {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    });
    out
}

/// Nearest-neighbour 2x upsampling, cropped to `(h, w)`.
pub fn upsample2(x: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = x.shape()[0];
    Array3::from_shape_fn((c, h, w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2_backward(dy: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, ho, wo) = dy.dim();
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                dx[[ci, y / 2, xx / 2]] += dy[[ci, y, xx]];
            }
        }
    }
    dx
}

/// Channel concatenation.
pub fn concat(parts: &[ArrayView3<f64>]) -> Array3<f64> {
    ndarray::concatenate(Axis(0), parts).unwrap()
}

/// Splits a concatenated gradient back into per-part channel ranges.
pub fn split_channels(g: &Array3<f64>, sizes: &[usize]) -> Vec<Array3<f64>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let part = g.slice(s![start..start + n, .., ..]).to_owned();
            start += n;
            part
        })
        .collect()
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            eps: 1e-8,
        }
    }
}

/// One AdamW update in place. `step` is the 1-based step count used for
/// bias correction.
pub fn adamw_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamWConfig) {
    debug_assert!(step >= 1);
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] *= 1.0 - cfg.lr * cfg.weight_decay;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
