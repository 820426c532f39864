//! HDR video reconstruction from hybrid event/frame cameras.
//!
//! Event cameras report asynchronous per-pixel log-intensity changes at
//! microsecond resolution; conventional sensors report absolute intensity at
//! frame rate with motion blur and limited dynamic range. This crate fuses the
//! two streams with a per-pixel continuous-time Kalman filter whose
//! inter-event updates are closed form, so the filter runs event-by-event
//! without numerical integration.
//!
//! The pieces, roughly in pipeline order:
//!
//! - [`event`]: event types, stream ordering rules and the per-event noise
//!   covariance model (process / isolated-pixel / refractory components).
//! - [`crf`]: camera response function tables, radiometric calibration from
//!   exposure stacks, and the weighting function that grades how trustworthy
//!   each raw response value is.
//! - [`frame`]: conversion of raw frames to biased log intensity with
//!   per-pixel covariance.
//! - [`augment`]: event-based deblurring of exposures and temporal
//!   interpolation, producing a log-intensity measurement signal evaluable at
//!   any time between frames, with per-pixel contrast-threshold calibration.
//! - [`filter`]: the asynchronous Kalman filter itself plus a constant-gain
//!   (complementary filter) baseline mode, and the end-to-end `reconstruct`
//!   driver.
//! - [`synth`]: ground-truth-paired synthetic event streams and blurry LDR
//!   frames for validation.
//! - [`metrics`]: full-reference MSE and SSIM.
//! - [`io`]: the CSV / PGM / raw-float file formats shared with the CLI.

pub mod augment;
pub mod crf;
pub mod event;
pub mod filter;
pub mod frame;
pub mod image;
pub mod io;
pub mod metrics;
pub mod synth;

pub use crate::image::{ImageF64, ImageU8};
pub use augment::{AugmentParams, AugmentedFrame};
pub use crf::CrfTable;
pub use event::{Event, EventNoiseParams, PixelTimestampMap};
pub use filter::{
    FilterConfig, GainMode, OutputTiming, PixelFilterState, ReconstructOutput, ReconstructParams,
};
pub use frame::{FrameNoiseParams, FrameObservation, LogFrame};
pub use metrics::MetricReport;
pub use synth::{GroundTruthVideo, SimParams};

/// Microseconds (file formats) to seconds (internal computation).
pub fn us_to_s(t_us: u64) -> f64 {
    t_us as f64 * 1e-6
}

/// Seconds to the nearest integer microsecond.
pub fn s_to_us(t: f64) -> u64 {
    (t * 1e6).round() as u64
}
