//! Event types, stream ordering rules and the per-event noise covariance.
//!
//! An event is a signed log-intensity impulse at one pixel. Its measurement
//! uncertainty is modelled as the sum of three additive Gaussian components,
//! each realized at the instant the event fires:
//!
//! - process noise, growing linearly with time since the pixel last fired
//!   (Brownian-motion covariance for the latent intensity drift);
//! - isolated-pixel noise, growing linearly with time since *any* neighbour
//!   fired (spatio-temporally isolated events are usually spurious);
//! - refractory noise, a fixed penalty on events that arrive faster than the
//!   pixel circuit can re-arm, where preceding events were likely dropped.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EventError {
    #[error("out-of-order event at pixel ({x},{y}): t={t} after t={t_prev}")]
    OutOfOrder { x: u16, y: u16, t: f64, t_prev: f64 },
    #[error("duplicate timestamp at pixel ({x},{y}): t={t}")]
    DuplicateTimestamp { x: u16, y: u16, t: f64 },
    #[error("invalid polarity {polarity} (must be -1 or +1)")]
    InvalidPolarity { polarity: i8 },
    #[error("pixel ({x},{y}) outside {width}x{height} sensor")]
    OutOfBounds { x: u16, y: u16, width: usize, height: usize },
}

/// Timestamped signed impulse at a pixel; the unit of asynchronous input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Seconds, non-negative.
    pub t: f64,
    pub x: u16,
    pub y: u16,
    /// Direction of the log-intensity change, exactly -1 or +1.
    pub polarity: i8,
}

impl Event {
    pub fn new(t: f64, x: u16, y: u16, polarity: i8) -> Self {
        debug_assert!(polarity == 1 || polarity == -1);
        Self { t, x, y, polarity }
    }

    /// Polarity as a signed unit step.
    #[inline]
    pub fn sigma(&self) -> f64 {
        self.polarity as f64
    }
}

/// Tuning parameters of the three-component event noise model.
#[derive(Debug, Clone)]
pub struct EventNoiseParams {
    /// Process noise variance rate (1/s).
    pub sigma2_proc: f64,
    /// Isolated-pixel noise variance rate (1/s).
    pub sigma2_iso: f64,
    /// Refractory noise variance (log-intensity squared).
    pub sigma2_ref: f64,
    /// Upper bound on the refractory period (s).
    pub rho_bar: f64,
    /// Chebyshev radius of the neighbourhood, excluding the pixel itself.
    pub neighborhood_radius: usize,
    /// Ceiling on the total per-event covariance (log-intensity squared).
    pub q_cap: f64,
}

impl Default for EventNoiseParams {
    fn default() -> Self {
        Self {
            sigma2_proc: 0.01,
            sigma2_iso: 0.01,
            sigma2_ref: 0.01,
            rho_bar: 0.01,
            neighborhood_radius: 1,
            q_cap: 1.0,
        }
    }
}

impl EventNoiseParams {
    /// Noise-free model: every component zero, for ideal-data experiments.
    pub fn noiseless() -> Self {
        Self { sigma2_proc: 0.0, sigma2_iso: 0.0, sigma2_ref: 0.0, ..Self::default() }
    }
}

/// Per-pixel event history needed by the noise model: the last event time at
/// each pixel and the latest event time seen in each pixel's neighbourhood.
///
/// The neighbourhood cache is maintained push-style: each incoming event
/// stamps its own timestamp onto all pixels it neighbours, so lookups at
/// event time are O(1).
#[derive(Debug, Clone)]
pub struct PixelTimestampMap {
    width: usize,
    height: usize,
    stream_start: f64,
    last_event: Vec<f64>,
    /// Latest neighbour timestamp; NEG_INFINITY until a neighbour fires.
    neighbor_latest: Vec<f64>,
}

impl PixelTimestampMap {
    pub fn new(width: usize, height: usize, stream_start: f64) -> Self {
        Self {
            width,
            height,
            stream_start,
            last_event: vec![stream_start; width * height],
            neighbor_latest: vec![f64::NEG_INFINITY; width * height],
        }
    }

    pub fn stream_start(&self) -> f64 {
        self.stream_start
    }

    /// Time of the most recent event at the pixel (stream start if none yet).
    pub fn last_event_time(&self, x: u16, y: u16) -> f64 {
        self.last_event[y as usize * self.width + x as usize]
    }

    /// Latest timestamp of any event in the pixel's neighbourhood, or None if
    /// no neighbour has ever fired.
    pub fn neighborhood_latest(&self, x: u16, y: u16) -> Option<f64> {
        let t = self.neighbor_latest[y as usize * self.width + x as usize];
        if t == f64::NEG_INFINITY {
            None
        } else {
            Some(t)
        }
    }

    fn check_bounds(&self, x: u16, y: u16) -> Result<(), EventError> {
        if (x as usize) < self.width && (y as usize) < self.height {
            Ok(())
        } else {
            Err(EventError::OutOfBounds { x, y, width: self.width, height: self.height })
        }
    }

    /// Record an event: updates the pixel's own timestamp and stamps the
    /// event time onto every neighbour's cache.
    fn record(&mut self, event: &Event, radius: usize) {
        let (x, y) = (event.x as usize, event.y as usize);
        self.last_event[y * self.width + x] = event.t;
        let x_lo = x.saturating_sub(radius);
        let y_lo = y.saturating_sub(radius);
        let x_hi = (x + radius).min(self.width - 1);
        let y_hi = (y + radius).min(self.height - 1);
        for ny in y_lo..=y_hi {
            for nx in x_lo..=x_hi {
                if nx == x && ny == y {
                    continue;
                }
                let cell = &mut self.neighbor_latest[ny * self.width + nx];
                if event.t > *cell {
                    *cell = event.t;
                }
            }
        }
    }
}

/// Process noise: variance grows linearly with time since the pixel's last
/// event.
pub fn q_process(t_i: f64, t_prev: f64, params: &EventNoiseParams) -> Result<f64, EventError> {
    if t_i < t_prev {
        return Err(EventError::OutOfOrder { x: 0, y: 0, t: t_i, t_prev });
    }
    Ok(params.sigma2_proc * (t_i - t_prev))
}

/// Isolated-pixel noise: variance grows linearly with the age of the most
/// recent neighbourhood event.
pub fn q_iso(t_i: f64, t_star_neighborhood: f64, params: &EventNoiseParams) -> Result<f64, EventError> {
    if t_i < t_star_neighborhood {
        return Err(EventError::OutOfOrder { x: 0, y: 0, t: t_i, t_prev: t_star_neighborhood });
    }
    Ok(params.sigma2_iso * (t_i - t_star_neighborhood))
}

/// Refractory noise: fixed penalty when the inter-event gap is within the
/// refractory bound, zero otherwise.
pub fn q_ref(t_i: f64, t_prev: f64, params: &EventNoiseParams) -> Result<f64, EventError> {
    if t_i < t_prev {
        return Err(EventError::OutOfOrder { x: 0, y: 0, t: t_i, t_prev });
    }
    if t_i - t_prev > params.rho_bar {
        Ok(0.0)
    } else {
        Ok(params.sigma2_ref)
    }
}

/// Total event covariance: sum of the three components, capped at `q_cap`.
/// Updates the timestamp map for the event's pixel and its neighbourhood.
///
/// Events at a fixed pixel must be strictly increasing in time; ties across
/// distinct pixels are fine and are resolved in processing order.
pub fn q_total(
    event: &Event,
    state: &mut PixelTimestampMap,
    params: &EventNoiseParams,
) -> Result<f64, EventError> {
    state.check_bounds(event.x, event.y)?;
    if event.polarity != 1 && event.polarity != -1 {
        return Err(EventError::InvalidPolarity { polarity: event.polarity });
    }
    let t_prev = state.last_event_time(event.x, event.y);
    if event.t < t_prev {
        return Err(EventError::OutOfOrder { x: event.x, y: event.y, t: event.t, t_prev });
    }
    // A second event at the very same pixel and instant is physically
    // impossible; reject it rather than silently accepting dt = 0. The first
    // event of a pixel may coincide with the stream start.
    if event.t == t_prev && t_prev != state.stream_start {
        return Err(EventError::DuplicateTimestamp { x: event.x, y: event.y, t: event.t });
    }

    let proc = q_process(event.t, t_prev, params)?;
    let iso = match state.neighborhood_latest(event.x, event.y) {
        Some(t_star) => q_iso(event.t, t_star, params)?,
        None => (params.sigma2_iso * (event.t - state.stream_start)).min(params.q_cap),
    };
    let refr = q_ref(event.t, t_prev, params)?;
    let q = (proc + iso + refr).min(params.q_cap);

    state.record(event, params.neighborhood_radius);
    Ok(q)
}

/// Validate global and per-pixel ordering of a stream without computing
/// covariances. Returns the index of the first offending event on failure.
pub fn validate_stream(events: &[Event], width: usize, height: usize) -> Result<(), (usize, EventError)> {
    let mut last = vec![f64::NEG_INFINITY; width * height];
    let mut t_global = f64::NEG_INFINITY;
    for (i, e) in events.iter().enumerate() {
        if e.polarity != 1 && e.polarity != -1 {
            return Err((i, EventError::InvalidPolarity { polarity: e.polarity }));
        }
        if (e.x as usize) >= width || (e.y as usize) >= height {
            return Err((i, EventError::OutOfBounds { x: e.x, y: e.y, width, height }));
        }
        if e.t < t_global {
            return Err((i, EventError::OutOfOrder { x: e.x, y: e.y, t: e.t, t_prev: t_global }));
        }
        t_global = e.t;
        let cell = &mut last[e.y as usize * width + e.x as usize];
        if e.t <= *cell {
            return Err((i, EventError::DuplicateTimestamp { x: e.x, y: e.y, t: e.t }));
        }
        *cell = e.t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(proc: f64, iso: f64, refr: f64, rho: f64) -> EventNoiseParams {
        EventNoiseParams {
            sigma2_proc: proc,
            sigma2_iso: iso,
            sigma2_ref: refr,
            rho_bar: rho,
            ..EventNoiseParams::default()
        }
    }

    #[test]
    fn q_process_direct_substitution() {
        let p = params(0.1, 0.0, 0.0, 0.01);
        let q = q_process(0.7, 0.5, &p).unwrap();
        assert!((q - 0.02).abs() < 1e-15);
    }

    #[test]
    fn q_process_zero_elapsed() {
        let p = params(5.0, 0.0, 0.0, 0.01);
        assert_eq!(q_process(1.0, 1.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn q_process_ordering_violation() {
        let p = params(1.0, 0.0, 0.0, 0.01);
        assert!(q_process(0.4, 0.5, &p).is_err());
    }

    #[test]
    fn q_iso_direct_substitution() {
        let p = params(0.0, 0.5, 0.0, 0.01);
        let q = q_iso(2.0, 1.9, &p).unwrap();
        assert!((q - 0.05).abs() < 1e-15);
    }

    #[test]
    fn q_iso_simultaneous_neighbor() {
        let p = params(0.0, 0.5, 0.0, 0.01);
        assert_eq!(q_iso(2.0, 2.0, &p).unwrap(), 0.0);
    }

    // Dense burst: every pixel fires each millisecond, so no event is ever
    // more than 1 ms from a neighbour event.
    #[test]
    fn q_iso_dense_burst_stays_small() {
        let p = EventNoiseParams { sigma2_iso: 1.0, rho_bar: 0.0, ..EventNoiseParams::noiseless() };
        let (w, h) = (8usize, 8usize);
        let mut map = PixelTimestampMap::new(w, h, 0.0);
        for step in 1..=20u32 {
            let t = step as f64 * 1e-3;
            for y in 0..h as u16 {
                for x in 0..w as u16 {
                    let q = q_total(&Event::new(t, x, y, 1), &mut map, &p).unwrap();
                    // first wave has no neighbour history but t - start = 1 ms
                    assert!(
                        q <= 0.001 * p.sigma2_iso + 1e-15,
                        "q_iso too large at t={t}: {q}"
                    );
                }
            }
        }
    }

    #[test]
    fn q_ref_branches() {
        let p = params(0.0, 0.0, 0.3, 0.01);
        assert_eq!(q_ref(0.02, 0.0, &p).unwrap(), 0.0); // dt = 0.02 > rho
        assert_eq!(q_ref(0.005, 0.0, &p).unwrap(), 0.3); // dt = 0.005 <= rho
        assert_eq!(q_ref(0.01, 0.0, &p).unwrap(), 0.3); // boundary: dt not > rho
    }

    #[test]
    fn q_total_component_sum() {
        // Arrange a pixel so that q_proc = 0.02, q_iso = 0.05, q_ref = 0.
        let p = EventNoiseParams {
            sigma2_proc: 0.1,
            sigma2_iso: 0.5,
            sigma2_ref: 0.3,
            rho_bar: 0.01,
            neighborhood_radius: 1,
            q_cap: 10.0,
        };
        let mut map = PixelTimestampMap::new(4, 4, 0.0);
        // prior event at the pixel itself at t = 1.8, neighbour at t = 1.9
        q_total(&Event::new(1.8, 1, 1, 1), &mut map, &p).unwrap();
        q_total(&Event::new(1.9, 2, 1, 1), &mut map, &p).unwrap();
        let q = q_total(&Event::new(2.0, 1, 1, 1), &mut map, &p).unwrap();
        // 0.1 * 0.2 + 0.5 * 0.1 + 0 = 0.02 + 0.05
        assert!((q - 0.07).abs() < 1e-15, "q = {q}");
    }

    #[test]
    fn q_total_zero_dt_fires_refractory() {
        // First event at the stream start: dt = 0, so q_proc = 0 and the
        // refractory branch fires (0 is not > rho_bar).
        let p = EventNoiseParams {
            sigma2_proc: 1.0,
            sigma2_iso: 0.0,
            sigma2_ref: 0.3,
            rho_bar: 0.01,
            ..EventNoiseParams::default()
        };
        let mut map = PixelTimestampMap::new(4, 4, 0.0);
        let q = q_total(&Event::new(0.0, 1, 1, 1), &mut map, &p).unwrap();
        assert!((q - 0.3).abs() < 1e-15);
    }

    #[test]
    fn q_total_rejects_out_of_order_and_duplicates() {
        let p = EventNoiseParams::default();
        let mut map = PixelTimestampMap::new(4, 4, 0.0);
        q_total(&Event::new(1.0, 1, 1, 1), &mut map, &p).unwrap();
        assert!(matches!(
            q_total(&Event::new(0.5, 1, 1, 1), &mut map, &p),
            Err(EventError::OutOfOrder { .. })
        ));
        assert!(matches!(
            q_total(&Event::new(1.0, 1, 1, -1), &mut map, &p),
            Err(EventError::DuplicateTimestamp { .. })
        ));
        // same timestamp at a different pixel is fine
        assert!(q_total(&Event::new(1.0, 2, 2, 1), &mut map, &p).is_ok());
    }

    /// Brute-force oracle: recompute each event's covariance from the raw
    /// history by scanning all earlier events.
    fn q_total_oracle(events: &[Event], idx: usize, params: &EventNoiseParams, t_start: f64) -> f64 {
        let e = &events[idx];
        let mut t_prev = t_start;
        let mut t_star: Option<f64> = None;
        let r = params.neighborhood_radius as i32;
        for other in &events[..idx] {
            if other.x == e.x && other.y == e.y {
                t_prev = t_prev.max(other.t);
            } else {
                let dx = (other.x as i32 - e.x as i32).abs();
                let dy = (other.y as i32 - e.y as i32).abs();
                if dx <= r && dy <= r {
                    t_star = Some(t_star.map_or(other.t, |t: f64| t.max(other.t)));
                }
            }
        }
        let proc = params.sigma2_proc * (e.t - t_prev);
        let iso = match t_star {
            Some(ts) => params.sigma2_iso * (e.t - ts),
            None => (params.sigma2_iso * (e.t - t_start)).min(params.q_cap),
        };
        let refr = if e.t - t_prev > params.rho_bar { 0.0 } else { params.sigma2_ref };
        (proc + iso + refr).min(params.q_cap)
    }

    fn random_stream(n: usize, w: u16, h: u16, seed: u64) -> Vec<Event> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut events = Vec::with_capacity(n);
        let mut last = std::collections::HashMap::new();
        let mut t = 0.0f64;
        while events.len() < n {
            // occasional exact ties in global time across pixels
            if !rng.gen_bool(0.1) {
                t += rng.gen_range(0.0..2e-3);
            }
            let x = rng.gen_range(0..w);
            let y = rng.gen_range(0..h);
            let prev = last.get(&(x, y)).copied().unwrap_or(f64::NEG_INFINITY);
            if t <= prev {
                continue;
            }
            last.insert((x, y), t);
            let polarity = if rng.gen_bool(0.5) { 1 } else { -1 };
            events.push(Event::new(t, x, y, polarity));
        }
        events
    }

    #[test]
    fn q_total_matches_brute_force_oracle() {
        let p = EventNoiseParams {
            sigma2_proc: 0.07,
            sigma2_iso: 0.4,
            sigma2_ref: 0.25,
            rho_bar: 0.8e-3,
            neighborhood_radius: 1,
            q_cap: 0.5,
        };
        let events = random_stream(2000, 16, 12, 42);
        let mut map = PixelTimestampMap::new(16, 12, 0.0);
        for i in 0..events.len() {
            let got = q_total(&events[i], &mut map, &p).unwrap();
            let want = q_total_oracle(&events, i, &p, 0.0);
            assert_eq!(got, want, "event {i} at t={}", events[i].t);
        }
    }

    #[test]
    fn q_total_periodic_pixel_with_cofiring_neighbor() {
        // Period larger than rho_bar and a neighbour firing at the same
        // instants: q = sigma2_proc * period after the first event.
        let p = EventNoiseParams {
            sigma2_proc: 0.2,
            sigma2_iso: 0.3,
            sigma2_ref: 0.5,
            rho_bar: 0.05,
            neighborhood_radius: 1,
            q_cap: 10.0,
        };
        let period = 0.1;
        let mut map = PixelTimestampMap::new(4, 4, 0.0);
        for k in 1..=10 {
            let t = k as f64 * period;
            // neighbour fires first in stream order at the same instant
            q_total(&Event::new(t, 2, 1, 1), &mut map, &p).unwrap();
            let q = q_total(&Event::new(t, 1, 1, 1), &mut map, &p).unwrap();
            if k > 1 {
                assert!((q - p.sigma2_proc * period).abs() < 1e-12, "k={k}, q={q}");
            }
        }
    }

    #[test]
    fn q_iso_monotone_in_isolation() {
        // Removing all neighbourhood events strictly increases q_iso at the
        // pixel's events.
        let p = EventNoiseParams {
            sigma2_iso: 0.5,
            ..EventNoiseParams::noiseless()
        };
        let with_neighbors = vec![
            Event::new(0.1, 2, 2, 1),
            Event::new(0.2, 1, 1, 1),
            Event::new(0.3, 2, 2, 1),
            Event::new(0.5, 1, 1, 1),
        ];
        let isolated: Vec<Event> =
            with_neighbors.iter().copied().filter(|e| (e.x, e.y) == (1, 1)).collect();

        let run = |events: &[Event]| -> Vec<f64> {
            let mut map = PixelTimestampMap::new(4, 4, 0.0);
            events
                .iter()
                .filter_map(|e| {
                    let q = q_total(e, &mut map, &p).unwrap();
                    ((e.x, e.y) == (1, 1)).then_some(q)
                })
                .collect()
        };
        let dense = run(&with_neighbors);
        let sparse = run(&isolated);
        assert_eq!(dense.len(), sparse.len());
        for (d, s) in dense.iter().zip(&sparse) {
            assert!(s > d, "isolation should increase q_iso: {s} vs {d}");
        }
    }

    #[test]
    fn q_total_capped_and_nonnegative() {
        let p = EventNoiseParams {
            sigma2_proc: 100.0,
            sigma2_iso: 100.0,
            sigma2_ref: 100.0,
            rho_bar: 10.0,
            neighborhood_radius: 1,
            q_cap: 1.0,
        };
        let events = random_stream(500, 8, 8, 7);
        let mut map = PixelTimestampMap::new(8, 8, 0.0);
        for e in &events {
            let q = q_total(e, &mut map, &p).unwrap();
            assert!((0.0..=1.0).contains(&q));
        }
    }

    #[test]
    fn q_total_deterministic_across_runs() {
        let p = EventNoiseParams::default();
        let events = random_stream(1000, 10, 10, 3);
        let run = || -> Vec<f64> {
            let mut map = PixelTimestampMap::new(10, 10, 0.0);
            events.iter().map(|e| q_total(e, &mut map, &p).unwrap()).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn validate_stream_catches_global_disorder() {
        let events = vec![Event::new(1.0, 0, 0, 1), Event::new(0.5, 1, 1, 1)];
        let err = validate_stream(&events, 4, 4).unwrap_err();
        assert_eq!(err.0, 1);
    }
}
