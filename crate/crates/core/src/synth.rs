//! Ground-truth-paired synthetic data: ideal or noisy event streams from a
//! reference intensity video, and blurry LDR frames rendered through an
//! artificial camera response with optional saturation clipping.
//!
//! The continuous signal behind a video is piecewise linear in log intensity
//! between samples. Event generation solves threshold crossings exactly on
//! each linear span, and exposure blur integrates the corresponding
//! exponential segments in closed form, so generated data is exact for the
//! declared signal model rather than approximated by stepping.

use crate::crf::CrfTable;
use crate::event::Event;
use crate::frame::FrameObservation;
use crate::image::ImageF64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("video needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("video timestamps must be strictly increasing at index {0}")]
    TimestampsNotIncreasing(usize),
    #[error("video frame {0} differs in size from frame 0")]
    DimensionMismatch(usize),
    #[error("irradiance must be non-negative (frame {frame}, value {value})")]
    NegativeIrradiance { frame: usize, value: f64 },
    #[error("contrast threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("threshold scale map must be positive and match the video size")]
    BadThresholdScale,
    #[error("refractory period must be non-negative, got {0}")]
    BadRefractory(f64),
    #[error("saturation bounds must satisfy low < high, got ({0}, {1})")]
    BadSaturationBounds(u8, u8),
    #[error("exposure {exposure} exceeds frame period {period}")]
    ExposureExceedsPeriod { exposure: f64, period: f64 },
    #[error("exposure must be positive, got {0}")]
    BadExposure(f64),
}

/// Reference video: linear-irradiance frames in [0, 1] at strictly increasing
/// timestamps, with the temporal supersampling factor used when scanning for
/// threshold crossings.
#[derive(Debug, Clone)]
pub struct GroundTruthVideo {
    pub frames: Vec<ImageF64>,
    pub timestamps: Vec<f64>,
    pub upsample_rate: u32,
}

impl GroundTruthVideo {
    pub fn new(
        frames: Vec<ImageF64>,
        timestamps: Vec<f64>,
        upsample_rate: u32,
    ) -> Result<Self, SynthError> {
        if frames.len() < 2 {
            return Err(SynthError::TooFewFrames(frames.len()));
        }
        assert_eq!(frames.len(), timestamps.len(), "one timestamp per frame");
        for i in 1..timestamps.len() {
            if timestamps[i] <= timestamps[i - 1] {
                return Err(SynthError::TimestampsNotIncreasing(i));
            }
        }
        for (i, f) in frames.iter().enumerate() {
            if !f.same_dims(&frames[0]) {
                return Err(SynthError::DimensionMismatch(i));
            }
            if let Some(&v) = f.data().iter().find(|&&v| v < 0.0) {
                return Err(SynthError::NegativeIrradiance { frame: i, value: v });
            }
        }
        Ok(Self { frames, timestamps, upsample_rate })
    }

    /// Build from a spatio-temporal irradiance function.
    pub fn from_fn(
        width: usize,
        height: usize,
        timestamps: Vec<f64>,
        mut irradiance: impl FnMut(usize, usize, f64) -> f64,
    ) -> Result<Self, SynthError> {
        let frames = timestamps
            .iter()
            .map(|&t| ImageF64::from_fn(width, height, |x, y| irradiance(x, y, t)))
            .collect();
        Self::new(frames, timestamps, 100)
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn start(&self) -> f64 {
        self.timestamps[0]
    }

    pub fn end(&self) -> f64 {
        *self.timestamps.last().unwrap()
    }

    /// Index of the segment [t_j, t_{j+1}] containing t.
    fn segment(&self, t: f64) -> usize {
        debug_assert!(t >= self.start() && t <= self.end());
        let j = self.timestamps.partition_point(|&ts| ts <= t);
        j.clamp(1, self.timestamps.len() - 1) - 1
    }

    /// Log intensity at a pixel, piecewise linear between samples.
    pub fn log_at(&self, x: usize, y: usize, t: f64, i_offset: f64) -> f64 {
        let j = self.segment(t);
        let (t0, t1) = (self.timestamps[j], self.timestamps[j + 1]);
        let l0 = (self.frames[j].get(x, y) + i_offset).ln();
        let l1 = (self.frames[j + 1].get(x, y) + i_offset).ln();
        let frac = (t - t0) / (t1 - t0);
        l0 + (l1 - l0) * frac
    }

    /// Linear irradiance at a pixel, consistent with [`Self::log_at`].
    pub fn irradiance_at(&self, x: usize, y: usize, t: f64, i_offset: f64) -> f64 {
        (self.log_at(x, y, t, i_offset).exp() - i_offset).max(0.0)
    }

    /// Full irradiance frame at time t (exact sample at node times).
    pub fn frame_at(&self, t: f64, i_offset: f64) -> ImageF64 {
        ImageF64::from_fn(self.width(), self.height(), |x, y| {
            self.irradiance_at(x, y, t, i_offset)
        })
    }
}

/// Simulation parameters. Saturation bounds default to the artificial-HDR
/// protocol: rendered responses are clamped into [100, 160] of the 8-bit
/// range; use (0, 255) to disable clipping.
#[derive(Debug, Clone)]
pub struct SimParams {
    /// Nominal contrast threshold (log-intensity step per event).
    pub c_true: f64,
    /// Optional per-pixel multiplier on the threshold.
    pub threshold_scale: Option<ImageF64>,
    /// Refractory period (s): crossings closer than this to the previous
    /// emitted event are dropped.
    pub refractory: f64,
    /// Spurious events per pixel per second, random polarity.
    pub event_noise_rate: f64,
    /// Response model of the simulated LDR camera.
    pub crf: CrfTable,
    /// Exposure duration of rendered frames (s).
    pub exposure: f64,
    /// Spacing of rendered frames (s); ticks start at the video start.
    pub frame_period: f64,
    /// (low, high) 8-bit response clamp.
    pub saturation_bounds: (u8, u8),
    /// Log-domain offset, shared with the reconstruction side.
    pub i_offset: f64,
    /// Master seed for all randomness.
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            c_true: 0.1,
            threshold_scale: None,
            refractory: 0.0,
            event_noise_rate: 0.0,
            crf: CrfTable::linear(),
            exposure: 0.005,
            frame_period: 0.1,
            saturation_bounds: (100, 160),
            i_offset: 1.0 / 255.0,
            seed: 0,
        }
    }
}

impl SimParams {
    fn validate(&self, width: usize, height: usize) -> Result<(), SynthError> {
        if self.c_true <= 0.0 {
            return Err(SynthError::BadThreshold(self.c_true));
        }
        if self.refractory < 0.0 {
            return Err(SynthError::BadRefractory(self.refractory));
        }
        if let Some(map) = &self.threshold_scale {
            if map.width() != width || map.height() != height {
                return Err(SynthError::BadThresholdScale);
            }
            if map.data().iter().any(|&s| s <= 0.0) {
                return Err(SynthError::BadThresholdScale);
            }
        }
        if self.saturation_bounds.0 >= self.saturation_bounds.1 {
            return Err(SynthError::BadSaturationBounds(
                self.saturation_bounds.0,
                self.saturation_bounds.1,
            ));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Generate a globally sorted event stream from the video.
///
/// Per pixel, an event fires whenever log intensity crosses the last-event
/// reference level by the pixel's threshold. Crossings within the refractory
/// period of the previous emitted event are dropped (the reference level
/// still advances, as the comparator has reset). Noise events arrive as a
/// Poisson process per pixel. Each pixel draws from its own seeded generator,
/// so output is independent of any processing schedule.
pub fn generate_events(
    video: &GroundTruthVideo,
    params: &SimParams,
) -> Result<Vec<Event>, SynthError> {
    let (w, h) = (video.width(), video.height());
    params.validate(w, h)?;

    let mut all: Vec<Event> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let scale = params.threshold_scale.as_ref().map_or(1.0, |m| m.get(x, y));
            let c = params.c_true * scale;
            let crossings = pixel_crossings(video, params, x, y, c);
            let noise = pixel_noise(video, params, x, y);
            merge_pixel_events(&mut all, x as u16, y as u16, crossings, noise);
        }
    }
    all.sort_by(|a, b| {
        a.t.partial_cmp(&b.t).unwrap().then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x))
    });
    Ok(all)
}

/// Exact threshold crossings of the piecewise-linear log signal at one pixel.
fn pixel_crossings(
    video: &GroundTruthVideo,
    params: &SimParams,
    x: usize,
    y: usize,
    c: f64,
) -> Vec<(f64, i8)> {
    let ts = &video.timestamps;
    let sub = video.upsample_rate.max(1) as usize;
    let mut out = Vec::new();
    let log_of = |j: usize| (video.frames[j].get(x, y) + params.i_offset).ln();

    let mut ref_level = log_of(0);
    let mut last_emit = f64::NEG_INFINITY;
    for j in 0..ts.len() - 1 {
        let (t0, t1) = (ts[j], ts[j + 1]);
        let (l0, l1) = (log_of(j), log_of(j + 1));
        for s in 0..sub {
            let fa = s as f64 / sub as f64;
            let fb = (s + 1) as f64 / sub as f64;
            let a = t0 + (t1 - t0) * fa;
            let b = t0 + (t1 - t0) * fb;
            let la = l0 + (l1 - l0) * fa;
            let lb = l0 + (l1 - l0) * fb;
            if lb == la {
                continue;
            }
            let slope = (lb - la) / (b - a);
            loop {
                let (target, polarity) = if slope > 0.0 {
                    (ref_level + c, 1i8)
                } else {
                    (ref_level - c, -1i8)
                };
                let reached = if slope > 0.0 { lb >= target } else { lb <= target };
                if !reached {
                    break;
                }
                let t_cross = (a + (target - la) / slope).clamp(a, b);
                if t_cross - last_emit >= params.refractory {
                    out.push((t_cross, polarity));
                    last_emit = t_cross;
                }
                ref_level = target;
            }
        }
    }
    out
}

/// Poisson noise arrivals over the video span for one pixel.
fn pixel_noise(
    video: &GroundTruthVideo,
    params: &SimParams,
    x: usize,
    y: usize,
) -> Vec<(f64, i8)> {
    if params.event_noise_rate <= 0.0 {
        return Vec::new();
    }
    let idx = (y * video.width() + x) as u64;
    let mut rng =
        ChaCha12Rng::seed_from_u64(splitmix64(params.seed ^ idx.wrapping_mul(0x9E3779B97F4A7C15)));
    let mut out = Vec::new();
    let mut t = video.start();
    loop {
        let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        t += -u.ln() / params.event_noise_rate;
        if t >= video.end() {
            break;
        }
        let polarity = if rng.gen_bool(0.5) { 1 } else { -1 };
        out.push((t, polarity));
    }
    out
}

/// Merge crossing and noise events of one pixel in time order, dropping
/// exact-duplicate timestamps so the per-pixel strict ordering holds.
fn merge_pixel_events(
    all: &mut Vec<Event>,
    x: u16,
    y: u16,
    crossings: Vec<(f64, i8)>,
    noise: Vec<(f64, i8)>,
) {
    let mut merged = crossings;
    merged.extend(noise);
    merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut last_t = f64::NEG_INFINITY;
    for (t, polarity) in merged {
        if t == last_t {
            continue;
        }
        last_t = t;
        all.push(Event::new(t, x, y, polarity));
    }
}

/// Render motion-blurred LDR frames: average linear irradiance over each
/// exposure window (closed form per log-linear span), apply the response
/// model, quantize to 8 bits and clamp into the saturation bounds.
///
/// Frames are emitted on a `frame_period` grid anchored at the video start,
/// keeping only ticks whose full exposure window fits inside the video span.
pub fn render_ldr_frames(
    video: &GroundTruthVideo,
    params: &SimParams,
) -> Result<Vec<FrameObservation>, SynthError> {
    let (w, h) = (video.width(), video.height());
    params.validate(w, h)?;
    if params.exposure <= 0.0 {
        return Err(SynthError::BadExposure(params.exposure));
    }
    if params.exposure > params.frame_period {
        return Err(SynthError::ExposureExceedsPeriod {
            exposure: params.exposure,
            period: params.frame_period,
        });
    }

    let (low, high) = params.saturation_bounds;
    let half = params.exposure / 2.0;
    let mut frames = Vec::new();
    let mut tick = 0u64;
    loop {
        let tau = video.start() + tick as f64 * params.frame_period;
        tick += 1;
        if tau + half > video.end() {
            break;
        }
        if tau - half < video.start() || tau - half < 0.0 {
            continue;
        }
        let mut raw = crate::image::ImageU8::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mean_irr =
                    mean_irradiance(video, params.i_offset, x, y, tau - half, tau + half);
                let response = params.crf.response_of_irradiance(mean_irr.clamp(0.0, 1.0));
                let r8 = (response * 255.0).round() as u8;
                raw.set(x, y, r8.clamp(low, high));
            }
        }
        frames.push(FrameObservation { tau, exposure: params.exposure, raw });
    }
    Ok(frames)
}

/// Mean linear irradiance over [t_a, t_b] at one pixel: the log signal is
/// piecewise linear, so each span integrates to a closed-form exponential.
fn mean_irradiance(
    video: &GroundTruthVideo,
    i_offset: f64,
    x: usize,
    y: usize,
    t_a: f64,
    t_b: f64,
) -> f64 {
    let mut integral = 0.0; // of (irradiance + offset)
    let mut t = t_a;
    while t < t_b {
        let j = video.segment(t);
        let seg_end = video.timestamps[j + 1].min(t_b);
        let la = video.log_at(x, y, t, i_offset);
        let lb = video.log_at(x, y, seg_end, i_offset);
        let dt = seg_end - t;
        if dt > 0.0 {
            let m = (lb - la) / dt;
            integral += if m.abs() < 1e-14 {
                la.exp() * dt
            } else {
                (lb.exp() - la.exp()) / m
            };
        }
        if seg_end >= t_b {
            break;
        }
        t = seg_end;
    }
    (integral / (t_b - t_a) - i_offset).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::validate_stream;

    const I0: f64 = 1.0 / 255.0;

    /// Video whose log intensity is a spatially uniform ramp: L(t) = L0 + rate*t.
    fn ramp_video(w: usize, h: usize, rate: f64, span: f64, n_samples: usize) -> GroundTruthVideo {
        let l0 = 0.3f64.ln();
        let timestamps: Vec<f64> =
            (0..n_samples).map(|i| span * i as f64 / (n_samples - 1) as f64).collect();
        GroundTruthVideo::from_fn(w, h, timestamps, |_, _, t| (l0 + rate * t).exp() - I0).unwrap()
    }

    fn unsaturated(params: SimParams) -> SimParams {
        SimParams { saturation_bounds: (0, 255), ..params }
    }

    #[test]
    fn ramp_fires_one_event_per_second_per_pixel() {
        let video = ramp_video(3, 2, 0.1, 10.5, 22);
        let params = unsaturated(SimParams { c_true: 0.1, ..SimParams::default() });
        let events = generate_events(&video, &params).unwrap();
        assert_eq!(events.len(), 10 * 6);
        for e in &events {
            assert_eq!(e.polarity, 1);
            let nearest = e.t.round();
            assert!((e.t - nearest).abs() < 1e-9, "event at {}", e.t);
        }
        let per_pixel = events.iter().filter(|e| (e.x, e.y) == (0, 0)).count();
        assert_eq!(per_pixel, 10);
    }

    #[test]
    fn static_video_generates_no_events() {
        let video = GroundTruthVideo::from_fn(4, 4, vec![0.0, 0.5, 1.0], |_, _, _| 0.4).unwrap();
        let events = generate_events(&video, &unsaturated(SimParams::default())).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn refractory_suppresses_every_second_crossing() {
        let video = ramp_video(2, 1, 0.1, 10.5, 22);
        let base = unsaturated(SimParams { c_true: 0.1, ..SimParams::default() });
        let free = generate_events(&video, &base).unwrap();
        let gated =
            generate_events(&video, &SimParams { refractory: 2.0, ..base.clone() }).unwrap();
        assert_eq!(gated.len(), free.len() / 2);

        // brute-force oracle: enumerate crossings, drop those within rho of
        // the last emitted one
        let crossing_times: Vec<f64> =
            free.iter().filter(|e| (e.x, e.y) == (0, 0)).map(|e| e.t).collect();
        let mut kept = Vec::new();
        let mut last = f64::NEG_INFINITY;
        for &t in &crossing_times {
            if t - last >= 2.0 {
                kept.push(t);
                last = t;
            }
        }
        let gated_times: Vec<f64> =
            gated.iter().filter(|e| (e.x, e.y) == (0, 0)).map(|e| e.t).collect();
        assert_eq!(gated_times.len(), kept.len());
        for (a, b) in gated_times.iter().zip(&kept) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn event_count_monotone_in_threshold() {
        let video = GroundTruthVideo::from_fn(
            6,
            6,
            (0..40).map(|i| i as f64 * 0.05).collect(),
            |x, y, t| 0.3 + 0.25 * (2.0 * t + x as f64 * 0.7 + y as f64 * 0.3).sin(),
        )
        .unwrap();
        let mut counts = Vec::new();
        for c in [0.02, 0.05, 0.1, 0.2] {
            let params = unsaturated(SimParams { c_true: c, ..SimParams::default() });
            counts.push(generate_events(&video, &params).unwrap().len());
        }
        for pair in counts.windows(2) {
            assert!(pair[0] >= pair[1], "counts not monotone: {counts:?}");
        }
        assert!(counts[0] > counts[3], "threshold sweep should change counts");
    }

    #[test]
    fn replay_reproduces_log_video_within_threshold() {
        let video = GroundTruthVideo::from_fn(
            5,
            4,
            (0..30).map(|i| i as f64 * 0.1).collect(),
            |x, _, t| 0.3 + 0.2 * (1.5 * t + x as f64).sin(),
        )
        .unwrap();
        let c = 0.05;
        let params = unsaturated(SimParams { c_true: c, ..SimParams::default() });
        let events = generate_events(&video, &params).unwrap();
        let mut level = ImageF64::from_fn(5, 4, |x, y| video.log_at(x, y, 0.0, I0));
        for e in &events {
            let (x, y) = (e.x as usize, e.y as usize);
            level.set(x, y, level.get(x, y) + c * e.sigma());
            let truth = video.log_at(x, y, e.t, I0);
            assert!(
                (level.get(x, y) - truth).abs() <= c + 1e-9,
                "replay drift {} at t={}",
                (level.get(x, y) - truth).abs(),
                e.t
            );
        }
        assert!(!events.is_empty());
    }

    #[test]
    fn generated_stream_is_strictly_ordered_per_pixel() {
        let video = GroundTruthVideo::from_fn(
            8,
            8,
            (0..25).map(|i| i as f64 * 0.08).collect(),
            |x, y, t| 0.4 + 0.3 * (3.0 * t + (x + 2 * y) as f64 * 0.4).sin(),
        )
        .unwrap();
        let params = unsaturated(SimParams {
            c_true: 0.04,
            event_noise_rate: 20.0,
            seed: 9,
            ..SimParams::default()
        });
        let events = generate_events(&video, &params).unwrap();
        assert!(!events.is_empty());
        validate_stream(&events, 8, 8).unwrap();
    }

    #[test]
    fn same_seed_reproduces_stream_exactly() {
        let video = ramp_video(4, 4, 0.3, 3.0, 10);
        let params = unsaturated(SimParams {
            event_noise_rate: 50.0,
            seed: 1234,
            ..SimParams::default()
        });
        let a = generate_events(&video, &params).unwrap();
        let b = generate_events(&video, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn render_static_video_is_quantized_crf_of_irradiance() {
        let irr = 0.3;
        let video = GroundTruthVideo::from_fn(3, 3, vec![0.0, 1.0, 2.0], |_, _, _| irr).unwrap();
        let crf = CrfTable::from_response_fn(|i| i.sqrt(), f64::INFINITY);
        let params = unsaturated(SimParams {
            exposure: 0.5,
            frame_period: 1.0,
            crf: crf.clone(),
            ..SimParams::default()
        });
        let frames = render_ldr_frames(&video, &params).unwrap();
        assert_eq!(frames.len(), 1); // only tau = 1.0 fits its window
        let want = (crf.response_of_irradiance(irr) * 255.0).round() as u8;
        assert!(frames[0].raw.data().iter().all(|&v| v == want));
    }

    #[test]
    fn render_midgray_is_not_clipped_by_ahdr_bounds() {
        let video =
            GroundTruthVideo::from_fn(2, 2, vec![0.0, 1.0, 2.0], |_, _, _| 128.0 / 255.0).unwrap();
        let params = SimParams { exposure: 0.1, ..SimParams::default() };
        assert_eq!(params.saturation_bounds, (100, 160));
        let frames = render_ldr_frames(&video, &params).unwrap();
        assert!(frames[0].raw.data().iter().all(|&v| v == 128));
    }

    #[test]
    fn render_clips_extremes_to_ahdr_bounds() {
        let video = GroundTruthVideo::from_fn(2, 1, vec![0.0, 1.0, 2.0], |x, _, _| {
            if x == 0 {
                0.05
            } else {
                0.95
            }
        })
        .unwrap();
        let params = SimParams { exposure: 0.1, ..SimParams::default() };
        let frames = render_ldr_frames(&video, &params).unwrap();
        assert_eq!(frames[0].raw.get(0, 0), 100);
        assert_eq!(frames[0].raw.get(1, 0), 160);
    }

    #[test]
    fn render_blur_matches_dense_quadrature_oracle() {
        // edge translating across the frame, exposure = frame period
        let video = GroundTruthVideo::from_fn(
            16,
            1,
            (0..41).map(|i| i as f64 * 0.05).collect(),
            |x, _, t| {
                let edge = 2.0 + 6.0 * t;
                if (x as f64) < edge {
                    0.8
                } else {
                    0.1
                }
            },
        )
        .unwrap();
        let params = unsaturated(SimParams {
            exposure: 0.05,
            frame_period: 0.05,
            ..SimParams::default()
        });
        let frames = render_ldr_frames(&video, &params).unwrap();
        assert!(!frames.is_empty());
        for f in &frames {
            for x in 0..16 {
                // supersampled trapezoid average of the same signal model
                let n = 4000;
                let (a, b) = (f.exposure_start(), f.exposure_end());
                let mut acc = 0.0;
                for k in 0..=n {
                    let t = a + (b - a) * k as f64 / n as f64;
                    let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                    acc += w * video.irradiance_at(x, 0, t, I0);
                }
                let mean = acc / n as f64;
                let want =
                    (params.crf.response_of_irradiance(mean.clamp(0.0, 1.0)) * 255.0).round() as u8;
                let got = f.raw.get(x, 0);
                assert!(
                    (got as i16 - want as i16).abs() <= 1,
                    "tau={}, x={x}: got {got}, oracle {want}",
                    f.tau
                );
            }
        }
    }

    #[test]
    fn exposure_longer_than_period_is_rejected() {
        let video = GroundTruthVideo::from_fn(2, 2, vec![0.0, 0.1, 0.2], |_, _, _| 0.5).unwrap();
        let params = SimParams { exposure: 0.2, ..SimParams::default() };
        assert!(matches!(
            render_ldr_frames(&video, &params),
            Err(SynthError::ExposureExceedsPeriod { .. })
        ));
    }
}
