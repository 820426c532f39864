//! Per-pixel continuous-time Kalman filter with closed-form inter-event
//! updates, plus the end-to-end reconstruction driver.
//!
//! Between events the filter state obeys a first-order tracking ODE toward
//! the augmented frame signal with gain P/R, and the covariance obeys the
//! Riccati equation with no process term (event noise is realized discretely
//! at event times). Both solve in closed form: the inverse covariance grows
//! linearly, `P⁻¹(t) = P⁻¹(t₀) + R⁻¹·Δ`, and the deviation from the
//! measurement shrinks by the same harmonic factor. Each event then adds its
//! impulse to the state and its noise covariance to P.
//!
//! The constant-gain mode replaces the Riccati machinery with a fixed rate,
//! reproducing a complementary filter: the deviation decays exponentially.

use crate::augment::{edi_deblur, AugmentParams, AugmentedFrame, DeblurredExposure};
use crate::crf::CrfTable;
use crate::event::{self, Event, EventNoiseParams, PixelTimestampMap};
use crate::frame::{to_log_frame, FrameNoiseParams, FrameObservation, LogFrame};
use crate::image::ImageF64;
use rayon::prelude::*;
use thiserror::Error;

/// Floor applied to P before inversion.
const P_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("decay target {t} precedes filter time {t_last}")]
    TimeReversed { t: f64, t_last: f64 },
    #[error("measurement covariance must be positive, got {0}")]
    NonPositiveCovariance(f64),
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame {0} does not follow the previous frame's exposure window")]
    FramesOutOfOrder(usize),
    #[error("frame {0} differs in size from frame 0")]
    FrameSizeMismatch(usize),
    #[error("event stream invalid at index {index}: {source}")]
    InvalidStream {
        index: usize,
        #[source]
        source: event::EventError,
    },
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
}

/// Per-pixel filter state: estimate, covariance, time of last update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelFilterState {
    /// Log-intensity estimate.
    pub l_hat: f64,
    /// State covariance, > 0.
    pub p_cov: f64,
    /// Time of last update (s).
    pub t_last: f64,
}

impl PixelFilterState {
    pub fn new(l_hat: f64, p_cov: f64, t_last: f64) -> Self {
        Self { l_hat, p_cov, t_last }
    }
}

/// Advance the state to time `t` with no events: the deviation from the
/// measurement signal shrinks harmonically and the covariance follows the
/// closed-form Riccati solution.
///
/// `l_a_prev` is the measurement signal at the state's current time,
/// `l_a_now` at the target time; `r` is the measurement covariance at the
/// target time, held constant across the step.
pub fn decay_state(
    state: &PixelFilterState,
    l_a_prev: f64,
    l_a_now: f64,
    r: f64,
    t: f64,
) -> Result<PixelFilterState, FilterError> {
    if t < state.t_last {
        return Err(FilterError::TimeReversed { t, t_last: state.t_last });
    }
    if r <= 0.0 {
        return Err(FilterError::NonPositiveCovariance(r));
    }
    let dt = t - state.t_last;
    if dt == 0.0 {
        return Ok(*state);
    }
    let p_inv = 1.0 / state.p_cov.max(P_FLOOR);
    let denom = p_inv + dt / r;
    Ok(PixelFilterState {
        l_hat: (state.l_hat - l_a_prev) * p_inv / denom + l_a_now,
        p_cov: 1.0 / denom,
        t_last: t,
    })
}

/// Constant-gain (complementary filter) counterpart of [`decay_state`]: the
/// deviation decays exponentially at rate `k` and the covariance is left
/// untouched.
pub fn decay_constant_gain(
    state: &PixelFilterState,
    l_a_prev: f64,
    l_a_now: f64,
    k: f64,
    t: f64,
) -> Result<PixelFilterState, FilterError> {
    if t < state.t_last {
        return Err(FilterError::TimeReversed { t, t_last: state.t_last });
    }
    let dt = t - state.t_last;
    if dt == 0.0 {
        return Ok(*state);
    }
    Ok(PixelFilterState {
        l_hat: (state.l_hat - l_a_prev) * (-k * dt).exp() + l_a_now,
        p_cov: state.p_cov,
        t_last: t,
    })
}

/// Apply an event: add the signed log step to the estimate and the event
/// noise covariance to P. Assumes the state has been decayed to the event
/// time already.
pub fn event_update(state: &PixelFilterState, increment: f64, q: f64) -> PixelFilterState {
    PixelFilterState {
        l_hat: state.l_hat + increment,
        p_cov: state.p_cov + q,
        t_last: state.t_last,
    }
}

/// Kalman gain P / R.
pub fn kalman_gain(state: &PixelFilterState, r: f64) -> Result<f64, FilterError> {
    if r <= 0.0 {
        return Err(FilterError::NonPositiveCovariance(r));
    }
    Ok(state.p_cov / r)
}

/// Filter gain mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainMode {
    /// Adaptive per-pixel gain from the noise models.
    Akf,
    /// Fixed gain (1/s): the complementary-filter baseline.
    ConstantGain(f64),
}

/// When to sample output frames.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputTiming {
    /// One output at each input frame timestamp.
    FrameTimes,
    /// Fixed rate (Hz) from the first frame timestamp to the last.
    FixedRate(f64),
    /// Explicit timestamps (s), sorted ascending.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    /// Initial state covariance.
    pub p0: f64,
    pub mode: GainMode,
    pub output: OutputTiming,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { p0: 1.0, mode: GainMode::Akf, output: OutputTiming::FrameTimes }
    }
}

/// All tuning for the reconstruction pipeline.
#[derive(Debug, Clone, Default)]
pub struct ReconstructParams {
    pub event_noise: EventNoiseParams,
    pub frame_noise: FrameNoiseParams,
    pub augment: AugmentParams,
}

#[derive(Debug)]
pub struct ReconstructOutput {
    /// Sampled log-intensity frames with the filter covariance alongside.
    pub frames: Vec<LogFrame>,
    /// Requested output timestamps outside the data span, skipped.
    pub skipped_outputs: Vec<f64>,
    /// Number of events applied to the filter.
    pub events_processed: usize,
}

/// Run the full pipeline: augment each inter-frame interval, drive every
/// pixel's filter through its events in time order, and sample the state at
/// the requested output times (sampling decays a copy of the state and never
/// perturbs the trajectory).
///
/// Pixels are processed row-parallel; results are bit-identical for any
/// thread count because each pixel's arithmetic sequence is fixed.
pub fn reconstruct(
    events: &[Event],
    frames: &[FrameObservation],
    crf: &CrfTable,
    config: &FilterConfig,
    params: &ReconstructParams,
) -> Result<ReconstructOutput, FilterError> {
    if frames.len() < 2 {
        return Err(FilterError::TooFewFrames(frames.len()));
    }
    let (w, h) = (frames[0].raw.width(), frames[0].raw.height());
    for (i, f) in frames.iter().enumerate() {
        if f.raw.width() != w || f.raw.height() != h {
            return Err(FilterError::FrameSizeMismatch(i));
        }
        if i > 0 && frames[i - 1].exposure_end() > f.exposure_start() {
            return Err(FilterError::FramesOutOfOrder(i));
        }
    }
    event::validate_stream(events, w, h)
        .map_err(|(index, source)| FilterError::InvalidStream { index, source })?;

    let span_start = frames[0].exposure_start();
    let span_end = frames[frames.len() - 1].exposure_end();

    // resolve output times and drop those outside the covered span
    let requested: Vec<f64> = match &config.output {
        OutputTiming::FrameTimes => frames.iter().map(|f| f.tau).collect(),
        OutputTiming::FixedRate(hz) => {
            let (t0, t1) = (frames[0].tau, frames[frames.len() - 1].tau);
            let step = 1.0 / hz;
            let n = ((t1 - t0) / step).floor() as usize;
            (0..=n).map(|i| t0 + i as f64 * step).collect()
        }
        OutputTiming::Explicit(ts) => ts.clone(),
    };
    let (out_times, skipped_outputs): (Vec<f64>, Vec<f64>) =
        requested.into_iter().partition(|&t| t >= span_start && t <= span_end);

    // per-frame log conversion and deblurring (each exposure's deblur is
    // shared by the two intervals it borders)
    let log_frames: Vec<LogFrame> =
        frames.iter().map(|f| to_log_frame(f, crf, &params.frame_noise)).collect();
    let deblurred: Vec<DeblurredExposure> = frames
        .iter()
        .map(|f| {
            let slice = slice_by_time(events, f.exposure_start(), f.exposure_end());
            edi_deblur(f, crf, slice, params.augment.c_nominal, params.augment.i_offset)
        })
        .collect::<Result<_, _>>()?;

    // filter state, struct-of-arrays
    let n_px = w * h;
    let mut l_hat: Vec<f64> = log_frames[0].log_intensity.data().to_vec();
    let mut p_cov = vec![config.p0; n_px];
    let mut t_last = vec![span_start; n_px];
    let mut l_a_last = vec![0.0; n_px]; // re-anchored at each interval start

    let stream_start = events.first().map_or(span_start, |e| e.t.min(span_start));
    let mut noise_map = PixelTimestampMap::new(w, h, stream_start);

    // events before the first interval only feed the noise model
    let mut cursor = events.partition_point(|e| e.t <= span_start);
    for e in &events[..cursor] {
        event::q_total(e, &mut noise_map, &params.event_noise)
            .map_err(|source| FilterError::InvalidStream { index: 0, source })?;
    }

    let mut out_frames: Vec<LogFrame> = Vec::with_capacity(out_times.len());
    let mut out_cursor = 0usize;
    let mut events_processed = 0usize;

    for k in 0..frames.len() - 1 {
        let aug = AugmentedFrame::build(
            &frames[k],
            &frames[k + 1],
            &deblurred[k],
            &deblurred[k + 1],
            slice_by_time(events, frames[k].exposure_start(), frames[k + 1].exposure_end()),
            &params.augment,
        )?;
        // this interval owns (handoff_k, handoff_next]
        let handoff_next = if k + 1 < frames.len() - 1 {
            frames[k + 1].exposure_start()
        } else {
            span_end
        };

        // per-event covariance in stream order (neighbourhood coupling makes
        // this pass sequential), bucketed per pixel for the parallel phase
        let owned_end = events.partition_point(|e| e.t <= handoff_next);
        let owned = &events[cursor..owned_end];
        cursor = owned_end;
        events_processed += owned.len();
        let mut counts = vec![0u32; n_px];
        for e in owned {
            counts[e.y as usize * w + e.x as usize] += 1;
        }
        let mut offsets = vec![0u32; n_px + 1];
        for i in 0..n_px {
            offsets[i + 1] = offsets[i] + counts[i];
        }
        let mut entries: Vec<(f64, f64, f64)> = vec![(0.0, 0.0, 0.0); owned.len()];
        let mut write = offsets.clone();
        for e in owned {
            let q = event::q_total(e, &mut noise_map, &params.event_noise)
                .map_err(|source| FilterError::InvalidStream { index: 0, source })?;
            let p = e.y as usize * w + e.x as usize;
            entries[write[p] as usize] = (e.t, e.sigma(), q);
            write[p] += 1;
        }

        // output times owned by this interval (first interval includes the
        // span start itself)
        let outs_lo = out_cursor;
        while out_cursor < out_times.len() && out_times[out_cursor] <= handoff_next {
            out_cursor += 1;
        }
        let outs = &out_times[outs_lo..out_cursor];

        // interval frame covariance interpolation, clamped to [tau_k, tau_k1]
        let r_k = log_frames[k].covariance.data();
        let r_k1 = log_frames[k + 1].covariance.data();
        let (tau_k, tau_k1) = (frames[k].tau, frames[k + 1].tau);
        let r_at = move |p: usize, t: f64, r_k: &[f64], r_k1: &[f64]| -> f64 {
            let tc = t.clamp(tau_k, tau_k1);
            let frac = (tc - tau_k) / (tau_k1 - tau_k);
            frac * r_k1[p] + (1.0 - frac) * r_k[p]
        };

        // row-parallel filtering; per-row sample buffers are gathered in row
        // order afterwards so the schedule cannot affect the output
        let mode = config.mode;
        let row_samples: Vec<(Vec<f64>, Vec<f64>)> = l_hat
            .par_chunks_mut(w)
            .zip(p_cov.par_chunks_mut(w))
            .zip(t_last.par_chunks_mut(w))
            .zip(l_a_last.par_chunks_mut(w))
            .enumerate()
            .map(|(y, (((lh_row, pc_row), tl_row), la_row))| {
                let mut samples_l = vec![0.0; outs.len() * w];
                let mut samples_p = vec![0.0; outs.len() * w];
                for x in 0..w {
                    let p = y * w + x;
                    // re-anchor the measurement to this interval's signal
                    la_row[x] = aug.deblurred_start().get(x, y);
                    let mut st =
                        PixelFilterState::new(lh_row[x], pc_row[x], tl_row[x]);
                    let mut oi = 0usize;
                    let (lo, hi) = (offsets[p] as usize, offsets[p + 1] as usize);
                    for &(t, sigma, q) in &entries[lo..hi] {
                        while oi < outs.len() && outs[oi] < t {
                            let (sl, sp) = sample(&st, la_row[x], &aug, x, y, outs[oi], mode, |tt| {
                                r_at(p, tt, r_k, r_k1)
                            });
                            samples_l[oi * w + x] = sl;
                            samples_p[oi * w + x] = sp;
                            oi += 1;
                        }
                        let l_a_now = aug.evaluate_unchecked(x, y, t);
                        st = advance(&st, la_row[x], l_a_now, r_at(p, t, r_k, r_k1), t, mode);
                        la_row[x] = l_a_now;
                        st = event_update(&st, aug.contrast_scale(x, y) * sigma, q);
                    }
                    while oi < outs.len() {
                        let (sl, sp) = sample(&st, la_row[x], &aug, x, y, outs[oi], mode, |tt| {
                            r_at(p, tt, r_k, r_k1)
                        });
                        samples_l[oi * w + x] = sl;
                        samples_p[oi * w + x] = sp;
                        oi += 1;
                    }
                    // commit the handoff so every pixel enters the next
                    // interval at its left edge
                    let l_a_now = aug.evaluate_unchecked(x, y, handoff_next);
                    st = advance(
                        &st,
                        la_row[x],
                        l_a_now,
                        r_at(p, handoff_next, r_k, r_k1),
                        handoff_next,
                        mode,
                    );
                    la_row[x] = l_a_now;
                    lh_row[x] = st.l_hat;
                    pc_row[x] = st.p_cov;
                    tl_row[x] = st.t_last;
                }
                (samples_l, samples_p)
            })
            .collect();

        for (oi, &t_out) in outs.iter().enumerate() {
            let mut li = ImageF64::new(w, h);
            let mut pi = ImageF64::new(w, h);
            for (y, (sl, sp)) in row_samples.iter().enumerate() {
                for x in 0..w {
                    li.set(x, y, sl[oi * w + x]);
                    pi.set(x, y, sp[oi * w + x]);
                }
            }
            out_frames.push(LogFrame { t: t_out, log_intensity: li, covariance: pi });
        }
    }

    Ok(ReconstructOutput { frames: out_frames, skipped_outputs, events_processed })
}

#[inline]
fn advance(
    st: &PixelFilterState,
    l_a_prev: f64,
    l_a_now: f64,
    r: f64,
    t: f64,
    mode: GainMode,
) -> PixelFilterState {
    match mode {
        GainMode::Akf => decay_state(st, l_a_prev, l_a_now, r, t)
            .expect("interval processing keeps time monotone and r positive"),
        GainMode::ConstantGain(k) => decay_constant_gain(st, l_a_prev, l_a_now, k, t)
            .expect("interval processing keeps time monotone"),
    }
}

/// Read-only sample: decay a copy of the state to the output time.
#[inline]
#[allow(clippy::too_many_arguments)]
fn sample(
    st: &PixelFilterState,
    l_a_prev: f64,
    aug: &AugmentedFrame,
    x: usize,
    y: usize,
    t_out: f64,
    mode: GainMode,
    r_at: impl Fn(f64) -> f64,
) -> (f64, f64) {
    let l_a_now = aug.evaluate_unchecked(x, y, t_out);
    let s = advance(st, l_a_prev, l_a_now, r_at(t_out), t_out, mode);
    (s.l_hat, s.p_cov)
}

/// Events with `t_lo <= t <= t_hi` (stream is sorted by time).
fn slice_by_time(events: &[Event], t_lo: f64, t_hi: f64) -> &[Event] {
    let lo = events.partition_point(|e| e.t < t_lo);
    let hi = events.partition_point(|e| e.t <= t_hi);
    &events[lo..hi]
}
