//! Image-quality metrics: windowed SSIM, PSNR and a Fréchet distance over
//! small handcrafted features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// SSIM of one pair of equally sized sample sets.
pub fn ssim_formula(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let (ma, mb) = (sa / n, sb / n);
    let va = saa / n - ma * ma;
    let vb = sbb / n - mb * mb;
    let cov = sab / n - ma * mb;
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

fn same_dims(op: &'static str, a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::contract(
            op,
            format!("{:?} vs {:?}", (a.channels(), a.dims()), (b.channels(), b.dims())),
        ));
    }
    Ok(())
}

/// Mean SSIM over the 8×8 windows (stride 1) whose top-left corner passes
/// `keep`, and over channels. `None` when no window qualifies.
pub fn ssim_where(a: &ImageTensor, b: &ImageTensor, keep: impl Fn(usize, usize) -> bool) -> Result<Option<f64>> {
    same_dims("ssim", a, b)?;
    let (h, w) = a.dims();
    let k = SSIM_WINDOW.min(h).min(w);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut wa = Vec::with_capacity(k * k);
    let mut wb = Vec::with_capacity(k * k);
    for c in 0..a.channels() {
        for y in 0..=h - k {
            for x in 0..=w - k {
                if !keep(y, x) {
                    continue;
                }
                wa.clear();
                wb.clear();
                for dy in 0..k {
                    for dx in 0..k {
                        wa.push(a.get(c, y + dy, x + dx));
                        wb.push(b.get(c, y + dy, x + dx));
                    }
                }
                total += ssim_formula(&wa, &wb);
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Windowed SSIM with dynamic range 1. Images smaller than a window use one
/// window covering the whole shorter side.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(ssim_where(a, b, |_, _| true)?.expect("at least one window"))
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims("mse", a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log10(1/mse)`; identical images give `+inf`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Mean and covariance (`1/(n−1)`) of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    pub fn from_features(rows: &[Vec<f64>]) -> Result<FeatureStats> {
        if rows.len() < 2 {
            return Err(Error::contract("feature_stats", format!("need at least 2 samples, got {}", rows.len())));
        }
        let k = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = DVector::zeros(k);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(k, k);
        for r in rows {
            let d = DVector::from_column_slice(r) - &mean;
            cov += &d * d.transpose();
        }
        cov /= n - 1.0;
        // exact symmetry regardless of summation order
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(FeatureStats { mean, cov })
    }

    pub fn from_images(images: &[ImageTensor]) -> Result<FeatureStats> {
        let proj = projection();
        let rows: Vec<Vec<f64>> = images.iter().map(|im| project(&proj, &raw_features(im))).collect();
        FeatureStats::from_features(&rows)
    }
}

pub const FEATURE_GRID: usize = 4;
pub const FEATURE_DIM: usize = 8;
const PROJECTION_SEED: u64 = 0x5EED_F1D0;

/// Per cell of a 4×4 grid: mean, variance and gradient energy, averaged
/// over channels. 48 values.
pub fn raw_features(img: &ImageTensor) -> Vec<f64> {
    let (h, w) = img.dims();
    let c = img.channels();
    let mut out = Vec::with_capacity(FEATURE_GRID * FEATURE_GRID * 3);
    for gy in 0..FEATURE_GRID {
        for gx in 0..FEATURE_GRID {
            let (y0, y1) = (gy * h / FEATURE_GRID, ((gy + 1) * h / FEATURE_GRID).max(gy * h / FEATURE_GRID + 1));
            let (x0, x1) = (gx * w / FEATURE_GRID, ((gx + 1) * w / FEATURE_GRID).max(gx * w / FEATURE_GRID + 1));
            let (mut s, mut ss, mut g, mut n) = (0.0, 0.0, 0.0, 0.0);
            for ch in 0..c {
                for y in y0..y1.min(h) {
                    for x in x0..x1.min(w) {
                        let v = img.get(ch, y, x);
                        s += v;
                        ss += v * v;
                        n += 1.0;
                        if x + 1 < w {
                            g += (img.get(ch, y, x + 1) - v).powi(2);
                        }
                        if y + 1 < h {
                            g += (img.get(ch, y + 1, x) - v).powi(2);
                        }
                    }
                }
            }
            let m = s / n;
            out.extend([m, ss / n - m * m, g / n]);
        }
    }
    out
}

fn projection() -> DMatrix<f64> {
    let k = FEATURE_GRID * FEATURE_GRID * 3;
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let scale = 1.0 / (k as f64).sqrt();
    DMatrix::from_fn(FEATURE_DIM, k, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

fn project(p: &DMatrix<f64>, raw: &[f64]) -> Vec<f64> {
    (p * DVector::from_column_slice(raw)).iter().copied().collect()
}

/// Principal square root of a symmetric PSD matrix, clamping negative
/// eigenvalues to 0.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `|μA − μB|² + Tr(ΣA + ΣB − 2(ΣA ΣB)^{1/2})`, with the cross term
/// evaluated as `Tr((√ΣA ΣB √ΣA)^{1/2})`, which has the same eigenvalues.
pub fn frechet_from_stats(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::contract("toy_frechet", "feature dimensions differ"));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = sqrtm_psd(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

pub fn toy_frechet(set_a: &[ImageTensor], set_b: &[ImageTensor]) -> Result<f64> {
    frechet_from_stats(&FeatureStats::from_images(set_a)?, &FeatureStats::from_images(set_b)?)
}

/// `{metric, value, config_hash}`. Infinite values serialise as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: Option<f64>,
    pub config_hash: String,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64, config_hash: &str) -> Self {
        MetricReport {
            metric: metric.into(),
            value: value.is_finite().then_some(value),
            config_hash: config_hash.into(),
        }
    }
}
