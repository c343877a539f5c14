//! Image losses: L1, a frozen-feature perceptual distance, and the weighted
//! intra-GT and inter-view objectives built from them.

use std::sync::OnceLock;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ViewImage;
use crate::nn::{self, Conv2d};

const PYRAMID_SEED: u64 = 0xC3ED_0002;
pub const PYRAMID_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(v: f64) -> Self {
        Self {
            lambda1: v,
            lambda2: v,
            lambda3: v,
            lambda4: v,
            lambda5: v,
            lambda6: v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
        ];
        if let Some((i, v)) = all.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Invalid(format!("lambda{} = {v} must be >= 0", i + 1)));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambda1: self.lambda1 * c,
            lambda2: self.lambda2 * c,
            lambda3: self.lambda3 * c,
            lambda4: self.lambda4 * c,
            lambda5: self.lambda5 * c,
            lambda6: self.lambda6 * c,
        }
    }
}

/// Frozen three-level convolutional feature extractor (stride-2 levels with
/// 16, 32 and 64 channels), seeded once.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Conv2d>,
}

struct PyramidTrace {
    inputs: Vec<Array3<f64>>,
    pre: Vec<Array3<f64>>,
    features: Vec<Array3<f64>>,
}

impl FeaturePyramid {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = nn::seeded_rng(seed);
        let mut in_ch = 3;
        let levels = PYRAMID_CHANNELS
            .iter()
            .map(|&out| {
                let conv = Conv2d::seeded(in_ch, out, 2, 1.6, &mut rng);
                in_ch = out;
                conv
            })
            .collect();
        Self { levels }
    }

    pub fn shared() -> &'static FeaturePyramid {
        static PYRAMID: OnceLock<FeaturePyramid> = OnceLock::new();
        PYRAMID.get_or_init(|| FeaturePyramid::seeded(PYRAMID_SEED))
    }

    fn normalize(img: &ViewImage) -> Array3<f64> {
        img.to_chw().mapv(|v| 2.0 * v - 1.0)
    }

    fn trace(&self, img: &ViewImage) -> PyramidTrace {
        let mut x = Self::normalize(img);
        let mut t = PyramidTrace {
            inputs: Vec::new(),
            pre: Vec::new(),
            features: Vec::new(),
        };
        for conv in &self.levels {
            let z = conv.forward(x.view());
            let f = nn::silu(&z);
            t.inputs.push(x);
            t.pre.push(z);
            t.features.push(f.clone());
            x = f;
        }
        t
    }

    /// Feature maps of each level.
    pub fn features(&self, img: &ViewImage) -> Vec<Array3<f64>> {
        self.trace(img).features
    }

    fn input_grad(&self, t: &PyramidTrace, mut feature_grads: Vec<Array3<f64>>) -> Array3<f64> {
        let mut carry: Option<Array3<f64>> = None;
        for l in (0..self.levels.len()).rev() {
            let mut g = std::mem::take(&mut feature_grads[l]);
            if let Some(c) = carry.take() {
                g += &c;
            }
            let dz = nn::silu_backward(&t.pre[l], &g);
            let (dx, _) = nn::conv_backward(
                t.inputs[l].view(),
                &self.levels[l].weight,
                self.levels[l].stride,
                &dz,
                true,
            );
            carry = dx;
        }
        // Undo the [-1, 1] normalization and return to (H, W, 3).
        let chw = carry.unwrap() * 2.0;
        chw.view().permuted_axes([1, 2, 0]).as_standard_layout().into_owned()
    }
}

fn mse(a: ArrayView3<f64>, b: ArrayView3<f64>) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Mean absolute per-channel difference.
pub fn l1(a: &ViewImage, b: &ViewImage) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let n = a.as_slice().len() as f64;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

fn l1_grad(a: &ViewImage, b: &ViewImage) -> Array3<f64> {
    let n = a.as_slice().len() as f64;
    let mut g = a.pixels() - b.pixels();
    g.mapv_inplace(|d| {
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    });
    g
}

/// Mean over pyramid levels of the per-level feature MSE.
pub fn perceptual(a: &ViewImage, b: &ViewImage) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let p = FeaturePyramid::shared();
    let fa = p.features(a);
    let fb = p.features(b);
    let levels = fa.len() as f64;
    Ok(fa.iter().zip(&fb).map(|(x, y)| mse(x.view(), y.view())).sum::<f64>() / levels)
}

/// Perceptual distance and its gradient with respect to `a`.
pub fn perceptual_with_grad(a: &ViewImage, b: &ViewImage) -> Result<(f64, Array3<f64>)> {
    a.ensure_same_dims(b)?;
    let p = FeaturePyramid::shared();
    let ta = p.trace(a);
    let fb = p.features(b);
    let levels = ta.features.len() as f64;
    let mut value = 0.0;
    let grads = ta
        .features
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            value += mse(x.view(), y.view()) / levels;
            (x - y) * (2.0 / (x.len() as f64 * levels))
        })
        .collect();
    Ok((value, p.input_grad(&ta, grads)))
}

/// Term values of one loss evaluation. Intra-GT losses leave `loss2` and
/// `loss3` at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l1: f64,
    pub perceptual: f64,
    pub loss2: f64,
    pub loss3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: LossComponents,
}

/// `lambda1 * L1(edited, gt) + lambda2 * perceptual(edited, gt)`.
pub fn intra_loss(edited: &ViewImage, gt: &ViewImage, w: &LossWeights) -> Result<f64> {
    Ok(w.lambda1 * l1(edited, gt)? + w.lambda2 * perceptual(edited, gt)?)
}

/// Inter-view loss: L1 plus perceptual to the view's own target, and
/// perceptual-only terms to the closest processed view's edit and to the
/// GT edit.
pub fn inter_loss(
    edited: &ViewImage,
    own_gt: &ViewImage,
    closest_edit: &ViewImage,
    gt_view_edit: &ViewImage,
    w: &LossWeights,
) -> Result<f64> {
    let loss1 = w.lambda3 * l1(edited, own_gt)? + w.lambda4 * perceptual(edited, own_gt)?;
    let loss2 = w.lambda5 * perceptual(edited, closest_edit)?;
    let loss3 = w.lambda6 * perceptual(edited, gt_view_edit)?;
    Ok(loss1 + loss2 + loss3)
}

/// [`intra_loss`] with its term breakdown and `dL/d(edited)` shaped `(H, W, 3)`.
pub fn intra_loss_with_grad(edited: &ViewImage, gt: &ViewImage, w: &LossWeights) -> Result<(LossValue, Array3<f64>)> {
    let l = l1(edited, gt)?;
    let (p, gp) = perceptual_with_grad(edited, gt)?;
    let grad = l1_grad(edited, gt) * w.lambda1 + gp * w.lambda2;
    let value = LossValue {
        total: w.lambda1 * l + w.lambda2 * p,
        components: LossComponents {
            l1: l,
            perceptual: p,
            ..Default::default()
        },
    };
    Ok((value, grad))
}

/// [`inter_loss`] with its term breakdown and `dL/d(edited)`.
pub fn inter_loss_with_grad(
    edited: &ViewImage,
    own_gt: &ViewImage,
    closest_edit: &ViewImage,
    gt_view_edit: &ViewImage,
    w: &LossWeights,
) -> Result<(LossValue, Array3<f64>)> {
    let l = l1(edited, own_gt)?;
    let (p1, g1) = perceptual_with_grad(edited, own_gt)?;
    let (p2, g2) = perceptual_with_grad(edited, closest_edit)?;
    let (p3, g3) = perceptual_with_grad(edited, gt_view_edit)?;
    let grad = l1_grad(edited, own_gt) * w.lambda3 + g1 * w.lambda4 + g2 * w.lambda5 + g3 * w.lambda6;
    let value = LossValue {
        total: w.lambda3 * l + w.lambda4 * p1 + w.lambda5 * p2 + w.lambda6 * p3,
        components: LossComponents {
            l1: l,
            perceptual: p1,
            loss2: p2,
            loss3: p3,
        },
    };
    Ok((value, grad))
}
