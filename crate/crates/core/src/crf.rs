//! Camera response function tables and radiometric calibration.
//!
//! The CRF maps scaled sensor irradiance (irradiance times exposure,
//! normalized to [0, 1]) to the recorded camera response. Its inverse
//! recovers irradiance from raw pixel values, and its derivative grades how
//! much information a response value carries: near saturation the response
//! compresses huge irradiance ranges into a few levels, so those readings are
//! nearly worthless and the weighting function drops toward zero there.

use crate::image::ImageU8;
use thiserror::Error;

/// Number of table samples; one per 8-bit response level.
pub const CRF_SAMPLES: usize = 256;

/// Floor applied to the weighting function so its reciprocal stays finite.
pub const WEIGHT_FLOOR: f64 = 1e-3;

/// Largest run of unobserved interior response levels tolerated by the fit.
const MAX_RESPONSE_GAP: usize = 32;

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("need at least 3 exposures, got {0}")]
    TooFewExposures(usize),
    #[error("exposure stack frames differ in size")]
    DimensionMismatch,
    #[error("exposure times must be positive and distinct")]
    BadExposures,
    #[error("exposure coverage gap: response levels {gap_lo}..={gap_hi} unobserved")]
    NonOverlappingCoverage { gap_lo: usize, gap_hi: usize },
    #[error("CRF table must have {CRF_SAMPLES} samples, got {0}")]
    BadTableSize(usize),
    #[error("CRF irradiance column is not non-decreasing at index {0}")]
    NotMonotone(usize),
}

/// Sampled camera response function: inverse response (irradiance at each
/// 8-bit level) plus the weighting function over the response domain.
#[derive(Debug, Clone)]
pub struct CrfTable {
    /// Irradiance recovered at response level m/255; non-decreasing.
    irradiance: Vec<f64>,
    /// Weighting function at response level m/255, in [WEIGHT_FLOOR, 1].
    weight: Vec<f64>,
    /// Cap on the irradiance-domain covariance. The weight floor already
    /// bounds `sigma2_im / weight`; a finite cap here binds tighter.
    pub r_max: f64,
}

impl CrfTable {
    /// Identity response: irradiance maps straight to response, all weights 1.
    pub fn linear() -> Self {
        let irradiance = (0..CRF_SAMPLES).map(|m| m as f64 / 255.0).collect();
        Self { irradiance, weight: vec![1.0; CRF_SAMPLES], r_max: f64::INFINITY }
    }

    /// Build from sampled inverse-response values (irradiance at each level).
    /// Weights are recomputed from the curve when not supplied.
    pub fn from_samples(
        irradiance: Vec<f64>,
        weight: Option<Vec<f64>>,
        r_max: f64,
    ) -> Result<Self, CrfError> {
        if irradiance.len() != CRF_SAMPLES {
            return Err(CrfError::BadTableSize(irradiance.len()));
        }
        for i in 1..CRF_SAMPLES {
            if irradiance[i] < irradiance[i - 1] {
                return Err(CrfError::NotMonotone(i));
            }
        }
        let weight = match weight {
            Some(w) => {
                if w.len() != CRF_SAMPLES {
                    return Err(CrfError::BadTableSize(w.len()));
                }
                w.iter().map(|&v| v.clamp(WEIGHT_FLOOR, 1.0)).collect()
            }
            None => weights_from_inverse(&irradiance),
        };
        Ok(Self { irradiance, weight, r_max })
    }

    /// Sample a forward response function `crf: [0,1] -> [0,1]` (monotone
    /// non-decreasing) into a table by bisecting for each level's preimage.
    pub fn from_response_fn(crf: impl Fn(f64) -> f64, r_max: f64) -> Self {
        let mut irradiance = Vec::with_capacity(CRF_SAMPLES);
        for m in 0..CRF_SAMPLES {
            let target = m as f64 / 255.0;
            irradiance.push(invert_monotone(&crf, target));
        }
        // guard against roundoff wiggles from the bisection
        for i in 1..CRF_SAMPLES {
            if irradiance[i] < irradiance[i - 1] {
                irradiance[i] = irradiance[i - 1];
            }
        }
        let weight = weights_from_inverse(&irradiance);
        Self { irradiance, weight, r_max }
    }

    pub fn irradiance_samples(&self) -> &[f64] {
        &self.irradiance
    }

    pub fn weight_samples(&self) -> &[f64] {
        &self.weight
    }

    /// Inverse response: irradiance for a normalized response in [0, 1].
    /// Out-of-domain responses clamp to the nearest endpoint.
    pub fn inverse_response(&self, response: f64) -> f64 {
        interp_at(&self.irradiance, response)
    }

    /// Forward response for a normalized irradiance in [0, 1].
    pub fn response_of_irradiance(&self, irradiance: f64) -> f64 {
        let g = &self.irradiance;
        if irradiance <= g[0] {
            return 0.0;
        }
        if irradiance >= g[CRF_SAMPLES - 1] {
            return 1.0;
        }
        // first level whose irradiance exceeds the query
        let hi = g.partition_point(|&v| v <= irradiance);
        let lo = hi - 1;
        let span = g[hi] - g[lo];
        let frac = if span > 0.0 { (irradiance - g[lo]) / span } else { 1.0 };
        (lo as f64 + frac) / 255.0
    }

    /// Weighting function at a normalized response, floored so that
    /// reciprocals stay finite. Out-of-domain responses clamp to the nearest
    /// endpoint.
    pub fn weighting_at(&self, response: f64) -> f64 {
        interp_at(&self.weight, response).max(WEIGHT_FLOOR)
    }
}

/// Piecewise-linear interpolation of a 256-sample table over response [0, 1].
fn interp_at(samples: &[f64], response: f64) -> f64 {
    let pos = (response * 255.0).clamp(0.0, 255.0);
    let lo = pos.floor() as usize;
    if lo >= CRF_SAMPLES - 1 {
        return samples[CRF_SAMPLES - 1];
    }
    let frac = pos - lo as f64;
    samples[lo] * (1.0 - frac) + samples[lo + 1] * frac
}

fn invert_monotone(f: &impl Fn(f64) -> f64, target: f64) -> f64 {
    if f(0.0) >= target {
        return 0.0;
    }
    if f(1.0) <= target {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Weighting function from the inverse-response curve: smooth, differentiate,
/// take the reciprocal slope and renormalize so the maximum is unity.
///
/// The slope comes from a symmetric least-squares fit over up to 7 samples;
/// a bare central difference lets quantization jitter in fitted curves
/// produce near-zero slopes whose reciprocals dominate the normalization.
fn weights_from_inverse(irradiance: &[f64]) -> Vec<f64> {
    let smoothed = moving_average_5(irradiance);
    let n = smoothed.len();
    let mut raw = vec![0.0; n];
    for m in 0..n {
        // d(irradiance)/d(response) with response normalized to [0,1]
        let r = 3.min(m).min(n - 1 - m);
        let slope = if r == 0 {
            if m == 0 {
                (smoothed[1] - smoothed[0]) * 255.0
            } else {
                (smoothed[n - 1] - smoothed[n - 2]) * 255.0
            }
        } else {
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 1..=r {
                num += k as f64 * (smoothed[m + k] - smoothed[m - k]);
                den += 2.0 * (k * k) as f64;
            }
            num / den * 255.0
        };
        raw[m] = 1.0 / slope.max(1e-9);
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.iter().map(|&v| (v / max).clamp(WEIGHT_FLOOR, 1.0)).collect()
}

/// Moving average with a window that shrinks symmetrically at the ends, so
/// linear data passes through unchanged.
fn moving_average_5(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let r = 2.min(i).min(n - 1 - i);
            let slice = &values[i - r..=i + r];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// Recover a CRF from an exposure stack of a static scene by alternating
/// estimation: fix the curve and estimate per-pixel irradiance by weighted
/// least squares, then fix irradiances and re-estimate the curve per response
/// level. Exposure times linearly scale irradiance into the response range.
pub fn fit_crf(stack: &[(f64, ImageU8)]) -> Result<CrfTable, CrfError> {
    if stack.len() < 3 {
        return Err(CrfError::TooFewExposures(stack.len()));
    }
    let (w, h) = (stack[0].1.width(), stack[0].1.height());
    for (t, img) in stack {
        if img.width() != w || img.height() != h {
            return Err(CrfError::DimensionMismatch);
        }
        if *t <= 0.0 {
            return Err(CrfError::BadExposures);
        }
    }

    // coverage: every interior response range must be observed somewhere
    let mut seen = [false; CRF_SAMPLES];
    for (_, img) in stack {
        for &v in img.data() {
            seen[v as usize] = true;
        }
    }
    let lo = seen.iter().position(|&s| s).unwrap();
    let hi = seen.iter().rposition(|&s| s).unwrap();
    let mut gap_start = None;
    for m in lo..=hi {
        match (seen[m], gap_start) {
            (false, None) => gap_start = Some(m),
            (true, Some(g)) => {
                if m - g > MAX_RESPONSE_GAP {
                    return Err(CrfError::NonOverlappingCoverage { gap_lo: g, gap_hi: m - 1 });
                }
                gap_start = None;
            }
            _ => {}
        }
    }

    // fixed fit weights over response levels; saturated extremes excluded
    let mut w_fit = [0.0f64; CRF_SAMPLES];
    for (m, wm) in w_fit.iter_mut().enumerate() {
        let z = (m as f64 - 127.5) / 127.5;
        *wm = (-4.0 * z * z).exp();
    }
    w_fit[0] = 0.0;
    w_fit[CRF_SAMPLES - 1] = 0.0;

    let n_px = w * h;
    let mut g: Vec<f64> = (0..CRF_SAMPLES).map(|m| m as f64 / 255.0).collect();
    let mut irr = vec![0.0f64; n_px];

    for _iter in 0..50 {
        // irradiance step: weighted least squares per pixel
        for (p, irr_p) in irr.iter_mut().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for (t, img) in stack {
                let m = img.data()[p] as usize;
                num += w_fit[m] * g[m] * t;
                den += w_fit[m] * t * t;
            }
            *irr_p = if den > 0.0 { num / den } else { 0.0 };
        }

        // curve step: average scaled irradiance per observed response level
        let mut sum = [0.0f64; CRF_SAMPLES];
        let mut count = [0u32; CRF_SAMPLES];
        for (t, img) in stack {
            for (p, &m) in img.data().iter().enumerate() {
                let m = m as usize;
                if w_fit[m] > 0.0 {
                    sum[m] += irr[p] * t;
                    count[m] += 1;
                }
            }
        }
        let mut g_new = vec![f64::NAN; CRF_SAMPLES];
        for m in 0..CRF_SAMPLES {
            if count[m] > 0 {
                g_new[m] = sum[m] / count[m] as f64;
            }
        }
        fill_unobserved(&mut g_new);
        // monotone projection and scale normalization
        for m in 1..CRF_SAMPLES {
            if g_new[m] < g_new[m - 1] {
                g_new[m] = g_new[m - 1];
            }
        }
        let max = g_new[CRF_SAMPLES - 1];
        if max <= 0.0 {
            return Err(CrfError::BadExposures);
        }
        for v in &mut g_new {
            *v /= max;
        }

        let delta =
            g.iter().zip(&g_new).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        g = g_new;
        if delta < 1e-10 {
            break;
        }
    }

    let g = moving_average_5(&g);
    let weight = weights_from_inverse(&g);
    Ok(CrfTable { irradiance: g, weight, r_max: f64::INFINITY })
}

/// Linear interpolation across unobserved levels; linear extrapolation at the
/// ends from the nearest observed pair.
fn fill_unobserved(g: &mut [f64]) {
    let n = g.len();
    let filled: Vec<usize> = (0..n).filter(|&m| !g[m].is_nan()).collect();
    assert!(filled.len() >= 2, "coverage check admits at least two levels");
    for m in 0..n {
        if !g[m].is_nan() {
            continue;
        }
        let next = filled.partition_point(|&f| f < m);
        let (a, b) = if next == 0 {
            (filled[0], filled[1])
        } else if next == filled.len() {
            (filled[filled.len() - 2], filled[filled.len() - 1])
        } else {
            (filled[next - 1], filled[next])
        };
        let frac = (m as f64 - a as f64) / (b as f64 - a as f64);
        g[m] = g[a] + (g[b] - g[a]) * frac;
    }
}
