//! File formats shared by the library and the CLI.
//!
//! All timestamps on disk are integer microseconds; computation uses
//! double-precision seconds. Event streams are UTF-8 CSV `t_us,x,y,p` with
//! `p` in {0,1}; frames travel as 8-bit PGM (P5) or PNG; float frames are
//! headerless little-endian f32, row-major, with dimensions taken from the
//! tone-mapped PGM written alongside.

use crate::crf::{CrfTable, CRF_SAMPLES};
use crate::event::Event;
use crate::frame::FrameObservation;
use crate::image::{ImageF64, ImageU8};
use crate::metrics::MetricReport;
use crate::{s_to_us, us_to_s};
use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        Self::Parse { path: path.to_path_buf(), line, message: message.into() }
    }

    fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format { path: path.to_path_buf(), message: message.into() }
    }
}

// --- event streams ---

/// Read an event CSV: `t_us,x,y,p`, `#` comments, globally sorted by time,
/// strictly increasing per pixel.
pub fn read_event_csv(path: &Path) -> Result<Vec<Event>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let mut events = Vec::new();
    let mut last_global = 0u64;
    let mut last_per_pixel: HashMap<(u16, u16), u64> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split(',');
        let mut next = |name: &str| {
            fields
                .next()
                .map(str::trim)
                .ok_or_else(|| IoError::parse(path, line_no, format!("missing field {name}")))
        };
        let t_us: u64 = next("t_us")?
            .parse()
            .map_err(|e| IoError::parse(path, line_no, format!("bad t_us: {e}")))?;
        let x: u16 = next("x")?
            .parse()
            .map_err(|e| IoError::parse(path, line_no, format!("bad x: {e}")))?;
        let y: u16 = next("y")?
            .parse()
            .map_err(|e| IoError::parse(path, line_no, format!("bad y: {e}")))?;
        let p: u8 = next("p")?
            .parse()
            .map_err(|e| IoError::parse(path, line_no, format!("bad p: {e}")))?;
        if p > 1 {
            return Err(IoError::parse(path, line_no, format!("polarity must be 0 or 1, got {p}")));
        }
        if t_us < last_global {
            return Err(IoError::parse(path, line_no, "events not globally sorted by t_us"));
        }
        last_global = t_us;
        if let Some(&prev) = last_per_pixel.get(&(x, y)) {
            if t_us <= prev {
                return Err(IoError::parse(
                    path,
                    line_no,
                    format!("duplicate timestamp {t_us} at pixel ({x},{y})"),
                ));
            }
        }
        last_per_pixel.insert((x, y), t_us);
        events.push(Event::new(us_to_s(t_us), x, y, if p == 1 { 1 } else { -1 }));
    }
    Ok(events)
}

/// Write an event CSV. Timestamps quantize to microseconds; quantization can
/// collide same-pixel events, so colliding ones are nudged forward one
/// microsecond at a time and the stream re-sorted.
pub fn write_event_csv(path: &Path, events: &[Event]) -> Result<(), IoError> {
    let mut rows: Vec<(u64, u16, u16, u8)> = Vec::with_capacity(events.len());
    let mut last: HashMap<(u16, u16), u64> = HashMap::new();
    for e in events {
        let mut t_us = s_to_us(e.t);
        if let Some(&prev) = last.get(&(e.x, e.y)) {
            if t_us <= prev {
                t_us = prev + 1;
            }
        }
        last.insert((e.x, e.y), t_us);
        rows.push((t_us, e.x, e.y, if e.polarity > 0 { 1 } else { 0 }));
    }
    rows.sort_by_key(|r| r.0);
    let file = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut out = BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(out, "# t_us,x,y,p")?;
        for (t, x, y, p) in rows {
            writeln!(out, "{t},{x},{y},{p}")?;
        }
        out.flush()
    })()
    .map_err(|e| IoError::io(path, e))
}

// --- PGM / PNG frames ---

/// Write an 8-bit grayscale binary PGM (P5).
pub fn write_pgm(path: &Path, img: &ImageU8) -> Result<(), IoError> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend_from_slice(img.data());
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

/// Read an 8-bit grayscale image: PGM (P5) or PNG by extension.
pub fn read_gray_image(path: &Path) -> Result<ImageU8, IoError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path),
        Some("png") => {
            let img = image::open(path)
                .map_err(|e| IoError::format(path, format!("png decode: {e}")))?
                .to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok(ImageU8::from_vec(w, h, img.into_raw()))
        }
        other => Err(IoError::format(
            path,
            format!("unsupported frame extension {other:?} (expected pgm or png)"),
        )),
    }
}

pub fn read_pgm(path: &Path) -> Result<ImageU8, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, IoError> {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::format(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(IoError::format(path, "not a binary PGM (P5)"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| IoError::format(path, "bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| IoError::format(path, "bad height"))?;
    let maxval: usize =
        token(&bytes)?.parse().map_err(|_| IoError::format(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(IoError::format(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(IoError::format(path, "truncated PGM payload"));
    }
    Ok(ImageU8::from_vec(w, h, bytes[pos..pos + w * h].to_vec()))
}

// --- raw float frames ---

pub fn write_f32_raw(path: &Path, img: &ImageF64) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(img.len() * 4);
    for &v in img.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn read_f32_raw(path: &Path, width: usize, height: usize) -> Result<ImageF64, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    if bytes.len() != width * height * 4 {
        return Err(IoError::format(
            path,
            format!("expected {} bytes for {width}x{height}, got {}", width * height * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(ImageF64::from_vec(width, height, data))
}

// --- tone mapping ---

/// Linear map from log intensity to 8-bit for PGM previews.
#[derive(Debug, Clone, Copy)]
pub struct ToneMap {
    pub scale: f64,
    pub offset: f64,
}

impl ToneMap {
    /// Spread log([i_offset, 1 + i_offset]) across the 8-bit range.
    pub fn for_offset(i_offset: f64) -> Self {
        let lo = i_offset.ln();
        let hi = (1.0 + i_offset).ln();
        let scale = 255.0 / (hi - lo);
        Self { scale, offset: -scale * lo }
    }

    pub fn map_log(&self, log_intensity: f64) -> u8 {
        (self.scale * log_intensity + self.offset).round().clamp(0.0, 255.0) as u8
    }
}

// --- frame manifests ---

/// Read a frame manifest `timestamp_us,exposure_us,filename`; image paths are
/// relative to the manifest location.
pub fn read_frame_manifest(path: &Path) -> Result<Vec<FrameObservation>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if i == 0 && trimmed.starts_with("timestamp_us") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(IoError::parse(path, line_no, "expected timestamp_us,exposure_us,filename"));
        }
        let t_us: u64 = fields[0]
            .parse()
            .map_err(|e| IoError::parse(path, line_no, format!("bad timestamp_us: {e}")))?;
        let exp_us: u64 = fields[1]
            .parse()
            .map_err(|e| IoError::parse(path, line_no, format!("bad exposure_us: {e}")))?;
        let raw = read_gray_image(&dir.join(fields[2]))?;
        let frame = FrameObservation::new(us_to_s(t_us), us_to_s(exp_us), raw)
            .map_err(|e| IoError::parse(path, line_no, e.to_string()))?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn write_frame_manifest(
    path: &Path,
    rows: &[(u64, u64, String)],
) -> Result<(), IoError> {
    let mut text = String::from("timestamp_us,exposure_us,filename\n");
    for (t, e, f) in rows {
        text.push_str(&format!("{t},{e},{f}\n"));
    }
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

/// One entry of a float-frame sequence (reconstruction output or reference):
/// a tone-mapped PGM for inspection plus the authoritative f32 payload.
#[derive(Debug, Clone)]
pub struct FloatFrameEntry {
    pub timestamp_us: u64,
    pub pgm: String,
    pub f32_file: String,
}

pub fn write_float_manifest(path: &Path, rows: &[FloatFrameEntry]) -> Result<(), IoError> {
    let mut text = String::from("timestamp_us,filename_pgm,filename_f32\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.timestamp_us, r.pgm, r.f32_file));
    }
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

pub fn read_float_manifest(path: &Path) -> Result<Vec<FloatFrameEntry>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if trimmed.starts_with("timestamp_us") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(IoError::parse(
                path,
                line_no,
                "expected timestamp_us,filename_pgm,filename_f32",
            ));
        }
        let timestamp_us: u64 = fields[0]
            .parse()
            .map_err(|e| IoError::parse(path, line_no, format!("bad timestamp_us: {e}")))?;
        rows.push(FloatFrameEntry {
            timestamp_us,
            pgm: fields[1].to_string(),
            f32_file: fields[2].to_string(),
        });
    }
    Ok(rows)
}

/// Load a float-frame sequence: values from the f32 files, dimensions from
/// the PGMs alongside.
pub fn read_float_sequence(manifest: &Path) -> Result<Vec<(u64, ImageF64)>, IoError> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_float_manifest(manifest)?;
    let mut frames = Vec::with_capacity(rows.len());
    for r in &rows {
        let pgm = read_pgm(&dir.join(&r.pgm))?;
        let img = read_f32_raw(&dir.join(&r.f32_file), pgm.width(), pgm.height())?;
        frames.push((r.timestamp_us, img));
    }
    Ok(frames)
}

/// Write one float frame pair (PGM preview + f32 payload) of linear
/// irradiance, tone-mapping the log for the preview.
pub fn write_float_frame(
    dir: &Path,
    stem: &str,
    linear: &ImageF64,
    i_offset: f64,
    tone: ToneMap,
) -> Result<FloatFrameEntry, IoError> {
    let pgm_name = format!("{stem}.pgm");
    let f32_name = format!("{stem}.f32");
    let preview = ImageU8::from_fn(linear.width(), linear.height(), |x, y| {
        tone.map_log((linear.get(x, y).max(0.0) + i_offset).ln())
    });
    write_pgm(&dir.join(&pgm_name), &preview)?;
    write_f32_raw(&dir.join(&f32_name), linear)?;
    Ok(FloatFrameEntry { timestamp_us: 0, pgm: pgm_name, f32_file: f32_name })
}

// --- CRF tables ---

/// Write a CRF table: `response,irradiance,weight`, 256 rows.
pub fn write_crf_csv(path: &Path, crf: &CrfTable) -> Result<(), IoError> {
    let mut text = String::from("response,irradiance,weight\n");
    for m in 0..CRF_SAMPLES {
        text.push_str(&format!(
            "{m},{:.10},{:.10}\n",
            crf.irradiance_samples()[m],
            crf.weight_samples()[m]
        ));
    }
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

/// Read a CRF table; the weight column is optional and recomputed from the
/// irradiance curve when absent.
pub fn read_crf_csv(path: &Path) -> Result<CrfTable, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let mut irradiance = vec![0.0; CRF_SAMPLES];
    let mut weight = vec![0.0; CRF_SAMPLES];
    let mut have_weight = true;
    let mut seen = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with("response") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(IoError::parse(path, line_no, "expected response,irradiance[,weight]"));
        }
        let m: usize = fields[0]
            .parse()
            .map_err(|e| IoError::parse(path, line_no, format!("bad response: {e}")))?;
        if m != seen {
            return Err(IoError::parse(
                path,
                line_no,
                format!("response levels must be 0..=255 in order, got {m}"),
            ));
        }
        irradiance[m] = fields[1]
            .parse()
            .map_err(|e| IoError::parse(path, line_no, format!("bad irradiance: {e}")))?;
        if fields.len() >= 3 && !fields[2].is_empty() {
            weight[m] = fields[2]
                .parse()
                .map_err(|e| IoError::parse(path, line_no, format!("bad weight: {e}")))?;
        } else {
            have_weight = false;
        }
        seen += 1;
    }
    if seen != CRF_SAMPLES {
        return Err(IoError::format(path, format!("expected {CRF_SAMPLES} rows, got {seen}")));
    }
    CrfTable::from_samples(irradiance, have_weight.then_some(weight), f64::INFINITY)
        .map_err(|e| IoError::format(path, e.to_string()))
}

// --- metric reports ---

/// `frame,timestamp_us,mse,ssim` rows plus a trailing mean summary row.
pub fn write_metric_report(path: &Path, report: &MetricReport) -> Result<(), IoError> {
    let mut text = String::from("frame,timestamp_us,mse,ssim\n");
    for f in &report.per_frame {
        text.push_str(&format!(
            "{},{},{:.8e},{:.8}\n",
            f.index,
            s_to_us(f.timestamp),
            f.mse,
            f.ssim
        ));
    }
    text.push_str(&format!("mean,,{:.8e},{:.8}\n", report.mean_mse, report.mean_ssim));
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn event_csv_roundtrip_with_comments_and_ties() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let events = vec![
            Event::new(0.0000010, 3, 4, 1),
            Event::new(0.0000020, 1, 1, -1),
            Event::new(0.0000020, 2, 1, 1), // cross-pixel tie
            Event::new(0.0000035, 1, 1, 1),
        ];
        write_event_csv(&path, &events).unwrap();
        let back = read_event_csv(&path).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[0].x, 3);
        assert_eq!(back[1].t, 0.000002);
        assert_eq!(back[1].polarity, -1);
        assert_eq!(back[2].t, 0.000002);
    }

    #[test]
    fn event_csv_quantization_collisions_are_nudged() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("events.csv");
        // three events at the same pixel within one microsecond
        let events = vec![
            Event::new(1.0000001, 0, 0, 1),
            Event::new(1.0000002, 0, 0, -1),
            Event::new(1.0000003, 0, 0, 1),
        ];
        write_event_csv(&path, &events).unwrap();
        let back = read_event_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        // strictly increasing after the nudge
        assert!(back[0].t < back[1].t && back[1].t < back[2].t);
    }

    #[test]
    fn event_csv_rejects_disorder() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "2000,0,0,1\n1000,1,1,0\n").unwrap();
        let err = read_event_csv(&path).unwrap_err();
        assert!(err.to_string().contains("not globally sorted"));

        fs::write(&path, "1000,2,2,1\n1000,2,2,0\n").unwrap();
        let err = read_event_csv(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate timestamp"));
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = ImageU8::from_fn(7, 5, |x, y| (x * 13 + y * 31) as u8);
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
        assert_eq!(read_gray_image(&path).unwrap(), img);
    }

    #[test]
    fn f32_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.f32");
        let img = ImageF64::from_fn(6, 4, |x, y| x as f64 * 0.25 - y as f64);
        write_f32_raw(&path, &img).unwrap();
        let back = read_f32_raw(&path, 6, 4).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(read_f32_raw(&path, 5, 4).is_err());
    }

    #[test]
    fn crf_csv_roundtrip_and_weight_recompute() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("crf.csv");
        let crf = CrfTable::from_response_fn(|i| i * i, f64::INFINITY);
        write_crf_csv(&path, &crf).unwrap();
        let back = read_crf_csv(&path).unwrap();
        for m in 0..CRF_SAMPLES {
            assert!((back.irradiance_samples()[m] - crf.irradiance_samples()[m]).abs() < 1e-9);
            assert!((back.weight_samples()[m] - crf.weight_samples()[m]).abs() < 1e-9);
        }

        // strip the weight column; it should be recomputed from the curve
        let text = fs::read_to_string(&path).unwrap();
        let two_col: String = text
            .lines()
            .map(|l| {
                let mut parts = l.splitn(3, ',');
                let a = parts.next().unwrap();
                let b = parts.next().unwrap_or("");
                format!("{a},{b}\n")
            })
            .collect();
        fs::write(&path, two_col).unwrap();
        let recomputed = read_crf_csv(&path).unwrap();
        for m in 0..CRF_SAMPLES {
            assert!(
                (recomputed.weight_samples()[m] - crf.weight_samples()[m]).abs() < 1e-6,
                "weight {m}"
            );
        }
    }

    #[test]
    fn frame_manifest_roundtrip() {
        let dir = tempdir().unwrap();
        let img = ImageU8::from_fn(4, 3, |x, _| (40 * x) as u8);
        write_pgm(&dir.path().join("f0.pgm"), &img).unwrap();
        write_pgm(&dir.path().join("f1.pgm"), &img).unwrap();
        let manifest = dir.path().join("frames.csv");
        write_frame_manifest(
            &manifest,
            &[
                (100_000, 10_000, "f0.pgm".into()),
                (200_000, 10_000, "f1.pgm".into()),
            ],
        )
        .unwrap();
        let frames = read_frame_manifest(&manifest).unwrap();
        assert_eq!(frames.len(), 2);
        assert!((frames[0].tau - 0.1).abs() < 1e-12);
        assert!((frames[0].exposure - 0.01).abs() < 1e-12);
        assert_eq!(frames[1].raw, img);
    }

    #[test]
    fn float_sequence_roundtrip() {
        let dir = tempdir().unwrap();
        let img = ImageF64::from_fn(8, 6, |x, y| 0.1 + 0.05 * (x + y) as f64);
        let tone = ToneMap::for_offset(1.0 / 255.0);
        let mut entry = write_float_frame(dir.path(), "gt_000", &img, 1.0 / 255.0, tone).unwrap();
        entry.timestamp_us = 123;
        let manifest = dir.path().join("gt.csv");
        write_float_manifest(&manifest, &[entry]).unwrap();
        let seq = read_float_sequence(&manifest).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq[0].0, 123);
        for (a, b) in img.data().iter().zip(seq[0].1.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
