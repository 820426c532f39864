//! Frame augmentation: event-based deblurring of exposures and temporal
//! interpolation between frames.
//!
//! A blurry frame is the exposure-average of a latent sharp signal. Writing
//! the latent log intensity as the start-of-exposure value plus the integral
//! of events, the average becomes the start irradiance times an integral of
//! exponentiated event sums, which is piecewise constant between events and
//! so integrates exactly. Solving for the start value deblurs the frame to
//! both exposure boundaries.
//!
//! Between two deblurred frames, event integration interpolates forward from
//! the earlier frame's start and backward from the later frame's end. The
//! per-pixel contrast threshold is calibrated so the event integral spans the
//! gap between the two deblurred anchors exactly; where calibration is
//! degenerate (no net events, or frame data contradicting event data) the
//! nominal threshold is used instead.

use crate::crf::CrfTable;
use crate::event::Event;
use crate::frame::FrameObservation;
use crate::image::ImageF64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("exposure must be positive, got {0}")]
    BadExposure(f64),
    #[error("evaluation time {t} outside augmented interval [{lo}, {hi}]")]
    TimeOutsideInterval { t: f64, lo: f64, hi: f64 },
    #[error("frames out of order: exposure of frame k+1 starts at {start_k1} before frame k ends at {end_k}")]
    FramesOutOfOrder { end_k: f64, start_k1: f64 },
    #[error("frame sizes differ")]
    FrameSizeMismatch,
}

/// Augmentation tuning.
#[derive(Debug, Clone)]
pub struct AugmentParams {
    /// Nominal contrast threshold used for deblurring and as the calibration
    /// fallback.
    pub c_nominal: f64,
    /// Log-domain offset keeping intensities positive.
    pub i_offset: f64,
    /// Minimum |net signed event count| for calibration.
    pub n_min: f64,
    /// Minimum |deblurred log change| for trusting calibration against a
    /// non-trivial event sum; below this the frames claim "no change" and are
    /// likely saturated, so the nominal threshold wins.
    pub eps_l: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { c_nominal: 0.1, i_offset: 1.0 / 255.0, n_min: 1.0, eps_l: 1e-4 }
    }
}

/// Deblurred log-intensity images at the two boundaries of one exposure.
#[derive(Debug, Clone)]
pub struct DeblurredExposure {
    /// Log image at tau - T/2.
    pub start: ImageF64,
    /// Log image at tau + T/2.
    pub end: ImageF64,
}

/// Sharpen a blurry frame to its exposure boundaries using the events that
/// fired during the exposure. Events outside the exposure window are ignored.
pub fn edi_deblur(
    frame: &FrameObservation,
    crf: &CrfTable,
    events: &[Event],
    c_nominal: f64,
    i_offset: f64,
) -> Result<DeblurredExposure, AugmentError> {
    if frame.exposure <= 0.0 {
        return Err(AugmentError::BadExposure(frame.exposure));
    }
    let (w, h) = (frame.raw.width(), frame.raw.height());
    let t_lo = frame.exposure_start();
    let t_hi = frame.exposure_end();

    // bucket exposure events per pixel, preserving time order
    let mut per_pixel: Vec<Vec<(f64, f64)>> = vec![Vec::new(); w * h];
    for e in events {
        if e.t >= t_lo && e.t <= t_hi {
            per_pixel[e.y as usize * w + e.x as usize].push((e.t, e.sigma()));
        }
    }

    let mut start = ImageF64::new(w, h);
    let mut end = ImageF64::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let b = crf.inverse_response(frame.raw.get(x, y) as f64 / 255.0);
            let evs = &per_pixel[y * w + x];
            // integral of exp(E(t)) over the exposure, E piecewise constant
            let mut integral = 0.0f64;
            let mut e_acc = 0.0f64;
            let mut cursor = t_lo;
            for &(t, sigma) in evs {
                if t > cursor {
                    integral += e_acc.exp() * (t - cursor);
                    cursor = t;
                }
                e_acc += c_nominal * sigma;
            }
            integral += e_acc.exp() * (t_hi - cursor);

            let l_start = (b + i_offset).ln() - (integral / frame.exposure).ln();
            start.set(x, y, l_start);
            end.set(x, y, l_start + e_acc);
        }
    }
    Ok(DeblurredExposure { start, end })
}

/// Per-pixel contrast threshold from the deblurred log change across an
/// interval and the net signed event count, with fallback to the nominal
/// threshold when the ratio is degenerate.
pub fn calibrate_contrast(delta_log: f64, net_sigma: f64, params: &AugmentParams) -> f64 {
    if net_sigma.abs() < params.n_min {
        return params.c_nominal;
    }
    let c = delta_log / net_sigma;
    if c <= 0.0 || delta_log.abs() < params.eps_l {
        params.c_nominal
    } else {
        c
    }
}

/// Temporally dense log-intensity signal over one inter-frame interval
/// [tau_k - T_k/2, tau_{k+1} + T_{k+1}/2], anchored at the deblurred start of
/// frame k and the deblurred end of frame k+1.
#[derive(Debug, Clone)]
pub struct AugmentedFrame {
    width: usize,
    height: usize,
    t_start: f64,
    t_end: f64,
    tau_k: f64,
    exposure_k: f64,
    deblurred_start: ImageF64,
    deblurred_end: ImageF64,
    contrast_scale: ImageF64,
    /// Per-pixel event storage: CSR offsets into `times` / `cum_sigma`.
    offsets: Vec<u32>,
    times: Vec<f64>,
    /// Cumulative signed event sum, inclusive of the event at `times[i]`.
    cum_sigma: Vec<f64>,
}

impl AugmentedFrame {
    /// Build from two frames and the events of the interval, deblurring both
    /// exposures with the nominal threshold.
    pub fn from_frames(
        frame_k: &FrameObservation,
        frame_k1: &FrameObservation,
        crf: &CrfTable,
        events: &[Event],
        params: &AugmentParams,
    ) -> Result<Self, AugmentError> {
        let deblur_k = edi_deblur(frame_k, crf, events, params.c_nominal, params.i_offset)?;
        let deblur_k1 = edi_deblur(frame_k1, crf, events, params.c_nominal, params.i_offset)?;
        Self::build(frame_k, frame_k1, &deblur_k, &deblur_k1, events, params)
    }

    /// Build from precomputed deblurred exposures (each frame's deblur is
    /// shared by the two intervals it borders).
    pub fn build(
        frame_k: &FrameObservation,
        frame_k1: &FrameObservation,
        deblur_k: &DeblurredExposure,
        deblur_k1: &DeblurredExposure,
        events: &[Event],
        params: &AugmentParams,
    ) -> Result<Self, AugmentError> {
        if frame_k.exposure_end() > frame_k1.exposure_start() {
            return Err(AugmentError::FramesOutOfOrder {
                end_k: frame_k.exposure_end(),
                start_k1: frame_k1.exposure_start(),
            });
        }
        if frame_k.raw.width() != frame_k1.raw.width()
            || frame_k.raw.height() != frame_k1.raw.height()
        {
            return Err(AugmentError::FrameSizeMismatch);
        }
        let t_start = frame_k.exposure_start();
        let t_end = frame_k1.exposure_end();
        let (w, h) = (frame_k.raw.width(), frame_k.raw.height());

        // CSR over the interval's events, (t_start, t_end], by counting sort
        let in_interval = |e: &&Event| e.t > t_start && e.t <= t_end;
        let mut counts = vec![0u32; w * h];
        for e in events.iter().filter(in_interval) {
            counts[e.y as usize * w + e.x as usize] += 1;
        }
        let mut offsets = vec![0u32; w * h + 1];
        for i in 0..w * h {
            offsets[i + 1] = offsets[i] + counts[i];
        }
        let total = offsets[w * h] as usize;
        let mut times = vec![0.0; total];
        let mut cum_sigma = vec![0.0; total];
        let mut write = offsets.clone();
        for e in events.iter().filter(in_interval) {
            let p = e.y as usize * w + e.x as usize;
            let i = write[p] as usize;
            times[i] = e.t;
            cum_sigma[i] = e.sigma(); // raw sigma; prefix-summed below
            write[p] += 1;
        }
        for p in 0..w * h {
            let (lo, hi) = (offsets[p] as usize, offsets[p + 1] as usize);
            for i in lo + 1..hi {
                cum_sigma[i] += cum_sigma[i - 1];
            }
        }

        let contrast_scale = ImageF64::from_fn(w, h, |x, y| {
            let p = y * w + x;
            let net = if offsets[p] == offsets[p + 1] {
                0.0
            } else {
                cum_sigma[offsets[p + 1] as usize - 1]
            };
            let delta = deblur_k1.end.get(x, y) - deblur_k.start.get(x, y);
            calibrate_contrast(delta, net, params)
        });

        Ok(Self {
            width: w,
            height: h,
            t_start,
            t_end,
            tau_k: frame_k.tau,
            exposure_k: frame_k.exposure,
            deblurred_start: deblur_k.start.clone(),
            deblurred_end: deblur_k1.end.clone(),
            contrast_scale,
            offsets,
            times,
            cum_sigma,
        })
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn deblurred_start(&self) -> &ImageF64 {
        &self.deblurred_start
    }

    pub fn deblurred_end(&self) -> &ImageF64 {
        &self.deblurred_end
    }

    /// Calibrated per-pixel contrast threshold for this interval.
    pub fn contrast_scale(&self, x: usize, y: usize) -> f64 {
        self.contrast_scale.get(x, y)
    }

    /// Number of events stored for a pixel in this interval.
    pub fn event_count(&self, x: usize, y: usize) -> usize {
        let p = y * self.width + x;
        (self.offsets[p + 1] - self.offsets[p]) as usize
    }

    /// Net signed event sum over (t_start, t] for a pixel.
    fn prefix_sigma(&self, x: usize, y: usize, t: f64) -> f64 {
        let p = y * self.width + x;
        let (lo, hi) = (self.offsets[p] as usize, self.offsets[p + 1] as usize);
        let slice = &self.times[lo..hi];
        let n = slice.partition_point(|&et| et <= t);
        if n == 0 {
            0.0
        } else {
            self.cum_sigma[lo + n - 1]
        }
    }

    fn net_sigma(&self, x: usize, y: usize) -> f64 {
        let p = y * self.width + x;
        if self.offsets[p] == self.offsets[p + 1] {
            0.0
        } else {
            self.cum_sigma[self.offsets[p + 1] as usize - 1]
        }
    }

    fn check_time(&self, t: f64) -> Result<(), AugmentError> {
        if t < self.t_start || t > self.t_end {
            return Err(AugmentError::TimeOutsideInterval {
                t,
                lo: self.t_start,
                hi: self.t_end,
            });
        }
        Ok(())
    }

    /// Forward interpolation: deblurred start plus scaled events in (t_start, t].
    pub fn integrate_forward(&self, x: usize, y: usize, t: f64) -> Result<f64, AugmentError> {
        self.check_time(t)?;
        Ok(self.forward_unchecked(x, y, t))
    }

    #[inline]
    fn forward_unchecked(&self, x: usize, y: usize, t: f64) -> f64 {
        self.deblurred_start.get(x, y) + self.contrast_scale.get(x, y) * self.prefix_sigma(x, y, t)
    }

    /// Backward interpolation: deblurred end minus scaled events in (t, t_end].
    pub fn integrate_backward(&self, x: usize, y: usize, t: f64) -> Result<f64, AugmentError> {
        self.check_time(t)?;
        Ok(self.backward_unchecked(x, y, t))
    }

    #[inline]
    fn backward_unchecked(&self, x: usize, y: usize, t: f64) -> f64 {
        let remaining = self.net_sigma(x, y) - self.prefix_sigma(x, y, t);
        self.deblurred_end.get(x, y) - self.contrast_scale.get(x, y) * remaining
    }

    /// The augmented signal: inside exposure k the forward and backward
    /// estimates blend linearly across the exposure; from the end of exposure
    /// k onward the backward estimate holds, which makes the signal exactly
    /// continuous at the exposure seam.
    pub fn evaluate(&self, x: usize, y: usize, t: f64) -> Result<f64, AugmentError> {
        self.check_time(t)?;
        Ok(self.evaluate_unchecked(x, y, t))
    }

    #[inline]
    pub(crate) fn evaluate_unchecked(&self, x: usize, y: usize, t: f64) -> f64 {
        let exp_k_end = self.tau_k + self.exposure_k / 2.0;
        if t < exp_k_end {
            let w_fwd = (exp_k_end - t) / self.exposure_k;
            let fwd = self.forward_unchecked(x, y, t);
            let bwd = self.backward_unchecked(x, y, t);
            w_fwd * fwd + (1.0 - w_fwd) * bwd
        } else {
            self.backward_unchecked(x, y, t)
        }
    }
}
