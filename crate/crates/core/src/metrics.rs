//! Full-reference image quality metrics: MSE and SSIM over normalized
//! intensities.

use crate::image::ImageF64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("image too small for SSIM: {0}x{1}, need at least {SSIM_WINDOW}x{SSIM_WINDOW}")]
    TooSmall(usize, usize),
}

/// SSIM window side (Gaussian, sigma 1.5).
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of the normalized intensity domain.
const SSIM_L: f64 = 1.0;

fn check_dims(a: &ImageF64, b: &ImageF64) -> Result<(), MetricError> {
    if !a.same_dims(b) {
        return Err(MetricError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    Ok(())
}

/// Mean squared error over all pixels.
pub fn mse(a: &ImageF64, b: &ImageF64) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let n = a.len() as f64;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / n)
}

/// Mean structural similarity with the standard parameters: 11x11 Gaussian
/// window (sigma 1.5), K1 = 0.01, K2 = 0.03, unit dynamic range, and
/// valid-region convolution (no padding).
pub fn ssim(a: &ImageF64, b: &ImageF64) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(MetricError::TooSmall(a.width(), a.height()));
    }
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);

    let kernel = gaussian_kernel();
    let mu_a = filter_valid(a, &kernel);
    let mu_b = filter_valid(b, &kernel);
    let aa = ImageF64::from_vec(
        a.width(),
        a.height(),
        a.data().iter().map(|&v| v * v).collect(),
    );
    let bb = ImageF64::from_vec(
        b.width(),
        b.height(),
        b.data().iter().map(|&v| v * v).collect(),
    );
    let ab = ImageF64::from_vec(
        a.width(),
        a.height(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    );
    let e_aa = filter_valid(&aa, &kernel);
    let e_bb = filter_valid(&bb, &kernel);
    let e_ab = filter_valid(&ab, &kernel);

    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.data()[i], mu_b.data()[i]);
        let var_a = e_aa.data()[i] - ma * ma;
        let var_b = e_bb.data()[i] - mb * mb;
        let cov = e_ab.data()[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        sum += num / den;
    }
    Ok(sum / mu_a.len() as f64)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        total += *v;
    }
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Separable valid-region convolution: output is (w-10) x (h-10).
fn filter_valid(img: &ImageF64, kernel: &[f64; SSIM_WINDOW]) -> ImageF64 {
    let (w, h) = (img.width(), img.height());
    let wv = w - SSIM_WINDOW + 1;
    let hv = h - SSIM_WINDOW + 1;
    let mut horiz = ImageF64::new(wv, h);
    for y in 0..h {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                acc += k * img.get(x + i, y);
            }
            horiz.set(x, y, acc);
        }
    }
    let mut out = ImageF64::new(wv, hv);
    for y in 0..hv {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                acc += k * horiz.get(x, y + i);
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Per-frame metric record.
#[derive(Debug, Clone)]
pub struct FrameMetrics {
    pub index: usize,
    pub timestamp: f64,
    pub mse: f64,
    pub ssim: f64,
}

/// Metrics for a frame sequence.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    pub mean_mse: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_frames(per_frame: Vec<FrameMetrics>) -> Self {
        let n = per_frame.len().max(1) as f64;
        let mean_mse = per_frame.iter().map(|f| f.mse).sum::<f64>() / n;
        let mean_ssim = per_frame.iter().map(|f| f.ssim).sum::<f64>() / n;
        Self { per_frame, mean_mse, mean_ssim }
    }

    pub fn frames_evaluated(&self) -> usize {
        self.per_frame.len()
    }
}

/// Least-squares affine fit `a * log(rec + eps) + b ~ log(ref + eps)` pooled
/// over all frame pairs, for resolving the global gain/offset ambiguity of
/// log-domain reconstructions before comparison.
pub fn fit_log_affine(pairs: &[(&ImageF64, &ImageF64)], eps: f64) -> (f64, f64) {
    let mut n = 0.0f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (rec, reference) in pairs {
        for (&r, &g) in rec.data().iter().zip(reference.data()) {
            let x = (r.max(0.0) + eps).ln();
            let y = (g.max(0.0) + eps).ln();
            n += 1.0;
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
    }
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-12 {
        return (1.0, 0.0);
    }
    let a = (n * sxy - sx * sy) / det;
    let b = (sy - a * sx) / n;
    (a, b)
}

/// Apply a fitted log-affine correction to a linear-intensity image.
pub fn apply_log_affine(img: &ImageF64, gain: f64, offset: f64, eps: f64) -> ImageF64 {
    img.map(|v| ((gain * (v.max(0.0) + eps).ln() + offset).exp() - eps).max(0.0))
}
