//! Raw frames to biased log intensity with per-pixel uncertainty.
//!
//! Frame noise lives in irradiance coordinates; mapping it through the log
//! introduces a bias that is corrected to second order here, and the
//! covariance is rescaled into log-intensity units so the filter can compare
//! frame information directly against event information.

use crate::crf::CrfTable;
use crate::image::{ImageF64, ImageU8};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("interpolation time {t} outside [{tau_k}, {tau_k1}]")]
    TimeOutsideInterval { t: f64, tau_k: f64, tau_k1: f64 },
    #[error("frame interval is empty: tau_k={tau_k} >= tau_k1={tau_k1}")]
    EmptyInterval { tau_k: f64, tau_k1: f64 },
    #[error("exposure must be positive, got {0}")]
    BadExposure(f64),
    #[error("exposure window starts before time zero: tau={tau}, exposure={exposure}")]
    WindowBeforeZero { tau: f64, exposure: f64 },
}

/// Raw frame with mid-exposure timestamp and exposure window.
#[derive(Debug, Clone)]
pub struct FrameObservation {
    /// Mid-exposure timestamp (s).
    pub tau: f64,
    /// Exposure duration (s), > 0.
    pub exposure: f64,
    /// Raw camera response per pixel.
    pub raw: ImageU8,
}

impl FrameObservation {
    pub fn new(tau: f64, exposure: f64, raw: ImageU8) -> Result<Self, FrameError> {
        if exposure <= 0.0 {
            return Err(FrameError::BadExposure(exposure));
        }
        if tau - exposure / 2.0 < 0.0 {
            return Err(FrameError::WindowBeforeZero { tau, exposure });
        }
        Ok(Self { tau, exposure, raw })
    }

    pub fn exposure_start(&self) -> f64 {
        self.tau - self.exposure / 2.0
    }

    pub fn exposure_end(&self) -> f64 {
        self.tau + self.exposure / 2.0
    }
}

/// Per-pixel log intensity and its covariance at one instant.
#[derive(Debug, Clone)]
pub struct LogFrame {
    pub t: f64,
    pub log_intensity: ImageF64,
    /// Log-intensity covariance, > 0 at every pixel.
    pub covariance: ImageF64,
}

/// Frame noise tuning.
#[derive(Debug, Clone)]
pub struct FrameNoiseParams {
    /// Base image noise variance in normalized irradiance units.
    pub sigma2_im: f64,
    /// Offset added before taking logs so intensity stays positive.
    /// One 8-bit level on the normalized scale by default.
    pub i_offset: f64,
}

impl Default for FrameNoiseParams {
    fn default() -> Self {
        Self { sigma2_im: 1.0 / (255.0 * 255.0), i_offset: 1.0 / 255.0 }
    }
}

/// Irradiance-domain covariance of a raw response: base noise divided by the
/// weighting function, saturated at the table's cap.
pub fn frame_covariance(crf: &CrfTable, response: f64, params: &FrameNoiseParams) -> f64 {
    (params.sigma2_im / crf.weighting_at(response)).min(crf.r_max)
}

/// Linear interpolation of per-pixel covariance between two frame times.
pub fn interpolate_covariance(
    r_k: f64,
    r_k1: f64,
    tau_k: f64,
    tau_k1: f64,
    t: f64,
) -> Result<f64, FrameError> {
    if tau_k >= tau_k1 {
        return Err(FrameError::EmptyInterval { tau_k, tau_k1 });
    }
    if t < tau_k || t > tau_k1 {
        return Err(FrameError::TimeOutsideInterval { t, tau_k, tau_k1 });
    }
    let span = tau_k1 - tau_k;
    Ok(((t - tau_k) / span) * r_k1 + ((tau_k1 - t) / span) * r_k)
}

/// Convert a raw frame to biased log intensity with log-domain covariance.
///
/// Per pixel, with `I` the recovered irradiance and `R̄` the irradiance-domain
/// covariance: the log intensity is `log(I + I0) - R̄ / (2 (I + I0)^2)` and
/// its covariance is `R̄ / (I + I0)^2`.
pub fn to_log_frame(frame: &FrameObservation, crf: &CrfTable, params: &FrameNoiseParams) -> LogFrame {
    let (w, h) = (frame.raw.width(), frame.raw.height());
    let mut log_intensity = ImageF64::new(w, h);
    let mut covariance = ImageF64::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let response = frame.raw.get(x, y) as f64 / 255.0;
            let (l, r) = log_intensity_at(crf, response, params);
            log_intensity.set(x, y, l);
            covariance.set(x, y, r);
        }
    }
    LogFrame { t: frame.tau, log_intensity, covariance }
}

/// Single-pixel version of [`to_log_frame`]: (biased log intensity, log covariance).
pub fn log_intensity_at(crf: &CrfTable, response: f64, params: &FrameNoiseParams) -> (f64, f64) {
    let irradiance = crf.inverse_response(response);
    let r_bar = frame_covariance(crf, response, params);
    let shifted = irradiance + params.i_offset;
    let shifted2 = shifted * shifted;
    let l = shifted.ln() - r_bar / (2.0 * shifted2);
    let r = r_bar / shifted2;
    (l, r)
}
