//! Consistency and quality metrics over sets of view images: adjacent-pair
//! image-image score, image-text score, Fréchet embedding distance, and a
//! two-component PCA scatter of embeddings.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::editmodel::hashed_text_embedding;
use crate::error::{Error, Result};
use crate::image::ViewImage;
use crate::losses::{FeaturePyramid, PYRAMID_CHANNELS};

/// Regularization added to both covariances before the matrix square root.
pub const COVARIANCE_EPS: f64 = 1e-6;

/// Deterministic image and text embedder into a shared space.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &ViewImage) -> Array1<f64>;
    fn embed_text(&self, text: &str) -> Array1<f64>;
}

/// Default embedder: the frozen perceptual pyramid, each level average-pooled
/// over a 2x2 grid, and a hashed bag of tokens for text.
#[derive(Debug, Clone, Copy, Default)]
pub struct PyramidEmbedder;

const POOL_GRID: usize = 2;

impl Embedder for PyramidEmbedder {
    fn dim(&self) -> usize {
        PYRAMID_CHANNELS.iter().sum::<usize>() * POOL_GRID * POOL_GRID
    }

    fn embed_image(&self, image: &ViewImage) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for f in FeaturePyramid::shared().features(image) {
            let (c, h, w) = f.dim();
            for gy in 0..POOL_GRID {
                let (y0, y1) = (gy * h / POOL_GRID, ((gy + 1) * h).div_ceil(POOL_GRID));
                for gx in 0..POOL_GRID {
                    let (x0, x1) = (gx * w / POOL_GRID, ((gx + 1) * w).div_ceil(POOL_GRID));
                    let cell = f.slice(ndarray::s![.., y0..y1, x0..x1]);
                    let n = ((y1 - y0) * (x1 - x0)) as f64;
                    for ch in 0..c {
                        out.push(cell.index_axis(ndarray::Axis(0), ch).sum() / n);
                    }
                }
            }
        }
        Array1::from(out)
    }

    fn embed_text(&self, text: &str) -> Array1<f64> {
        hashed_text_embedding(text, self.dim(), "embed-text")
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let denom = (a.dot(a) * b.dot(b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(b) / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub a: u32,
    pub b: u32,
    pub score: f64,
}

/// Cosine similarity of each adjacent pair, the last image paired with the
/// first.
pub fn adjacent_pair_scores(images: &[ViewImage], e: &dyn Embedder) -> Result<Vec<PairScore>> {
    if images.len() < 2 {
        return Err(Error::Invalid(format!(
            "image-image score needs at least 2 images, got {}",
            images.len()
        )));
    }
    let emb: Vec<_> = images.iter().map(|i| e.embed_image(i)).collect();
    Ok((0..images.len())
        .map(|i| {
            let j = (i + 1) % images.len();
            PairScore {
                a: images[i].view_id,
                b: images[j].view_id,
                score: cosine(&emb[i], &emb[j]),
            }
        })
        .collect())
}

pub fn image_image_score(images: &[ViewImage], e: &dyn Embedder) -> Result<f64> {
    let pairs = adjacent_pair_scores(images, e)?;
    Ok(pairs.iter().map(|p| p.score).sum::<f64>() / pairs.len() as f64)
}

pub fn image_text_scores(images: &[ViewImage], prompt: &str, e: &dyn Embedder) -> Result<Vec<f64>> {
    if prompt.trim().is_empty() {
        return Err(Error::Invalid("image-text score needs a non-empty prompt".into()));
    }
    if images.is_empty() {
        return Err(Error::Invalid("image-text score needs at least 1 image".into()));
    }
    let text = e.embed_text(prompt);
    Ok(images.iter().map(|i| cosine(&e.embed_image(i), &text)).collect())
}

pub fn image_text_score(images: &[ViewImage], prompt: &str, e: &dyn Embedder) -> Result<f64> {
    let scores = image_text_scores(images, prompt, e)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn moments(set: &[Array1<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len();
    let mut mean = DVector::zeros(d);
    for v in set {
        mean += DVector::from_column_slice(v.as_slice().expect("contiguous embedding"));
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for v in set {
            let c = DVector::from_column_slice(v.as_slice().unwrap()) - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

/// Symmetric PSD square root, negative eigenvalues clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two embedding sets.
///
/// `Tr(sqrt(S1 S2))` is evaluated as `Tr(sqrt(sqrt(S1) S2 sqrt(S1)))`, which
/// has the same eigenvalues and stays symmetric.
pub fn frechet_distance_embeddings(a: &[Array1<f64>], b: &[Array1<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("Fréchet distance needs two non-empty sets".into()));
    }
    if a[0].len() != b[0].len() {
        return Err(Error::Shape(format!("embedding dims {} vs {}", a[0].len(), b[0].len())));
    }
    let (mu1, s1) = moments(a);
    let (mu2, s2) = moments(b);
    let eye = DMatrix::<f64>::identity(mu1.len(), mu1.len()) * COVARIANCE_EPS;
    let (s1, s2) = (s1 + &eye, s2 + &eye);
    let r1 = sqrtm_psd(&s1);
    let cross = sqrtm_psd(&(&r1 * &s2 * &r1)).trace();
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub fn frechet_distance(a: &[ViewImage], b: &[ViewImage], e: &dyn Embedder) -> Result<f64> {
    let ea: Vec<_> = a.iter().map(|i| e.embed_image(i)).collect();
    let eb: Vec<_> = b.iter().map(|i| e.embed_image(i)).collect();
    frechet_distance_embeddings(&ea, &eb)
}

/// Projection of each vector onto the top two principal components of the
/// set. Each component is signed so its largest-magnitude loading is
/// positive.
pub fn pca_2d(points: &[Array1<f64>]) -> Result<Vec<[f64; 2]>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let (n, d) = (points.len(), points[0].len());
    let mut x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut comps = Vec::new();
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        if eig.eigenvalues[k] <= 1e-12 * eig.eigenvalues[order[0]].max(1e-300) {
            v.fill(0.0);
        }
        let lead = v.iamax();
        if v[lead] < 0.0 {
            v = -v;
        }
        comps.push(v);
    }
    while comps.len() < 2 {
        comps.push(DVector::zeros(d));
    }
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            [row.dot(&comps[0].transpose()), row.dot(&comps[1].transpose())]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub group: String,
    pub view_id: u32,
    pub x: f64,
    pub y: f64,
}

pub fn feature_scatter(groups: &[(String, Vec<ViewImage>)], e: &dyn Embedder) -> Result<Vec<ScatterPoint>> {
    let total: usize = groups.iter().map(|(_, g)| g.len()).sum();
    if total < 3 {
        return Err(Error::Invalid(format!(
            "feature scatter needs at least 3 images, got {total}"
        )));
    }
    let labelled: Vec<(&str, &ViewImage)> = groups
        .iter()
        .flat_map(|(name, imgs)| imgs.iter().map(move |i| (name.as_str(), i)))
        .collect();
    let emb: Vec<_> = labelled.iter().map(|(_, i)| e.embed_image(i)).collect();
    let xy = pca_2d(&emb)?;
    Ok(labelled
        .iter()
        .zip(xy)
        .map(|((g, img), [x, y])| ScatterPoint {
            group: g.to_string(),
            view_id: img.view_id,
            x,
            y,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view_id: u32,
    pub score: f64,
}

/// Everything `eval` writes. Scores are stored raw, in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompt: String,
    pub image_text_score: f64,
    pub image_image_score: f64,
    pub frechet_distance: f64,
    pub pair_scores: Vec<PairScore>,
    pub text_scores: Vec<ViewScore>,
    pub scatter: Vec<ScatterPoint>,
}

/// Scores `edited` views (in ring order) against the prompt and against the
/// `original` renders. `scatter_groups` feed the PCA table.
pub fn evaluate(
    original: &[ViewImage],
    edited: &[ViewImage],
    prompt: &str,
    scatter_groups: &[(String, Vec<ViewImage>)],
    e: &dyn Embedder,
) -> Result<EvalReport> {
    let pair_scores = adjacent_pair_scores(edited, e)?;
    let text = image_text_scores(edited, prompt, e)?;
    Ok(EvalReport {
        prompt: prompt.to_string(),
        image_text_score: text.iter().sum::<f64>() / text.len() as f64,
        image_image_score: pair_scores.iter().map(|p| p.score).sum::<f64>() / pair_scores.len() as f64,
        frechet_distance: frechet_distance(original, edited, e)?,
        pair_scores,
        text_scores: edited
            .iter()
            .zip(text)
            .map(|(i, score)| ViewScore {
                view_id: i.view_id,
                score,
            })
            .collect(),
        scatter: feature_scatter(scatter_groups, e)?,
    })
}

impl EvalReport {
    /// Summary table with scores scaled by 100.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22}{:>12}", "metric", "value");
        let _ = writeln!(s, "{:<22}{:>12.2}", "image-text score", self.image_text_score * 100.0);
        let _ = writeln!(s, "{:<22}{:>12.2}", "image-image score", self.image_image_score * 100.0);
        let _ = writeln!(s, "{:<22}{:>12.4}", "frechet distance", self.frechet_distance);
        s
    }
}
