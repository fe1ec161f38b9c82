//! Evaluation metrics: 8-way and polarity accuracy, grayscale SSIM, reconstruction error, FID.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::classifier::EmotionClassifier;
use crate::dataset::EmotionLabel;
use crate::encoders::ImageEncoder;
use crate::error::{Error, Result};
use crate::pixels::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Ridge added to both covariance estimates before the matrix square root.
pub const FID_RIDGE: f64 = 1e-6;

fn check_pairs(predictions: &[EmotionLabel], targets: &[EmotionLabel]) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::arg("accuracy needs at least one prediction"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::arg(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    Ok(())
}

pub fn accuracy8_of(predictions: &[EmotionLabel], targets: &[EmotionLabel]) -> Result<f64> {
    check_pairs(predictions, targets)?;
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

pub fn accuracy2_of(predictions: &[EmotionLabel], targets: &[EmotionLabel]) -> Result<f64> {
    check_pairs(predictions, targets)?;
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p.polarity() == t.polarity())
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

pub fn accuracy8(
    classifier: &EmotionClassifier,
    encoder: &ImageEncoder,
    images: &[&Image],
    targets: &[EmotionLabel],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::arg("accuracy needs at least one image"));
    }
    accuracy8_of(&classifier.predict(encoder, images)?, targets)
}

pub fn accuracy2(
    classifier: &EmotionClassifier,
    encoder: &ImageEncoder,
    images: &[&Image],
    targets: &[EmotionLabel],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::arg("accuracy needs at least one image"));
    }
    accuracy2_of(&classifier.predict(encoder, images)?, targets)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of the grayscale images with an 11×11 Gaussian window (σ = 1.5), dynamic range 1.
/// Images smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::arg(format!(
            "ssim: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (h, w) = (a.height(), a.width());
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, SSIM_SIGMA);
    let (ga, gb) = (a.grayscale(), b.grayscale());
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (mu_a, oh, ow) = filter_valid(&ga, h, w, &k);
    let (mu_b, ..) = filter_valid(&gb, h, w, &k);
    let (e_aa, ..) = filter_valid(&prod(&ga, &ga), h, w, &k);
    let (e_bb, ..) = filter_valid(&prod(&gb, &gb), h, w, &k);
    let (e_ab, ..) = filter_valid(&prod(&ga, &gb), h, w, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (oh * ow) as f64)
}

/// Mean absolute difference of the 8-bit pixel values, on the 0–255 scale.
pub fn recon_error(generated: &Image, content: &Image) -> Result<f64> {
    if !generated.same_shape(content) {
        return Err(Error::arg("recon_error: image shapes differ"));
    }
    let (a, b) = (generated.to_rgb8(), content.to_rgb8());
    let sum: u64 = a.iter().zip(&b).map(|(x, y)| x.abs_diff(*y) as u64).sum();
    Ok(sum as f64 / a.len() as f64)
}

fn mean_and_cov(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let mut mu = DVector::zeros(dim);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let c = DVector::from_column_slice(v) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    for i in 0..dim {
        cov[(i, i)] += FID_RIDGE;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// `Tr((Σ_a Σ_b)^{1/2})` is evaluated as `Tr((Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`, whose argument is
/// symmetric, so both roots come from symmetric eigendecompositions.
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let dim = features_a.first().map(Vec::len).unwrap_or(0);
    if dim == 0 {
        return Err(Error::arg("fid: empty feature set"));
    }
    if features_a.iter().chain(features_b).any(|v| v.len() != dim) {
        return Err(Error::arg("fid: feature dimensions differ"));
    }
    for (name, set) in [("first", features_a), ("second", features_b)] {
        if set.len() < dim + 1 {
            return Err(Error::arg(format!(
                "fid: {name} set has {} samples, needs at least {}",
                set.len(),
                dim + 1
            )));
        }
    }
    let (mu_a, cov_a) = mean_and_cov(features_a, dim);
    let (mu_b, cov_b) = mean_and_cov(features_b, dim);
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    Ok(diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_root)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc8: f64,
    pub acc2: f64,
    pub ssim: f64,
    pub recon_error: f64,
    /// Absent when either set is too small for a covariance estimate.
    pub fid: Option<f64>,
    pub n_images: usize,
}
