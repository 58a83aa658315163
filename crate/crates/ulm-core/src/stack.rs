//! Frame stack container and its on-disk format.
//!
//! A stack file starts with the magic bytes `ULMF`, then little-endian
//! `u32 version` (currently 1), `u32 n_frames`, `u32 height`, `u32 width`,
//! `f32 pixel_size_mm`, `f32 frame_rate_hz`, followed by the intensity
//! payload as little-endian `f32`, frame-major then row-major. Element
//! `(f, r, c)` therefore sits at byte `28 + 4 * (f*h*w + r*w + c)`.

use std::fs;
use std::path::Path;

use crate::error::{Result, UlmError};

pub const ULMF_MAGIC: [u8; 4] = *b"ULMF";
pub const ULMF_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

/// An acquisition of `n_frames` frames of `height x width` non-negative
/// intensities, with the physical metadata needed to convert pixel
/// displacements into velocities.
#[derive(Clone, Debug)]
pub struct FrameStack {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixel_size_mm: f32,
    pub frame_rate_hz: f32,
    data: Vec<f32>,
}

/// Borrowed view of a single frame.
#[derive(Clone, Copy, Debug)]
pub struct Frame<'a> {
    pub data: &'a [f32],
    pub height: usize,
    pub width: usize,
}

impl<'a> Frame<'a> {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    /// True when a k x k window centered on (r, c) lies fully inside the frame.
    pub fn fits_window(&self, r: usize, c: usize, k: usize) -> bool {
        let half = k / 2;
        r >= half && c >= half && r + half < self.height && c + half < self.width
    }

    /// Raw k x k window centered on (r, c), row-major. None if out of bounds.
    pub fn patch(&self, r: usize, c: usize, k: usize) -> Option<Vec<f32>> {
        if !self.fits_window(r, c, k) {
            return None;
        }
        let half = k / 2;
        let mut out = Vec::with_capacity(k * k);
        for dr in 0..k {
            let row = r + dr - half;
            let base = row * self.width + c - half;
            out.extend_from_slice(&self.data[base..base + k]);
        }
        Some(out)
    }
}

impl FrameStack {
    /// Builds a stack, validating shape, metadata positivity, and that every
    /// intensity is finite and non-negative.
    pub fn new(
        n_frames: usize,
        height: usize,
        width: usize,
        pixel_size_mm: f32,
        frame_rate_hz: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(UlmError::Contract(format!(
                "frame dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != n_frames * height * width {
            return Err(UlmError::Contract(format!(
                "stack data length {} does not match {} frames of {}x{}",
                data.len(),
                n_frames,
                height,
                width
            )));
        }
        if !(pixel_size_mm.is_finite() && pixel_size_mm > 0.0) {
            return Err(UlmError::Contract(format!(
                "pixel size must be finite and positive, got {pixel_size_mm}"
            )));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(UlmError::Contract(format!(
                "frame rate must be finite and positive, got {frame_rate_hz}"
            )));
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(UlmError::Contract(format!(
                "intensity at flat index {i} is {}; intensities must be finite and non-negative",
                data[i]
            )));
        }
        Ok(FrameStack {
            n_frames,
            height,
            width,
            pixel_size_mm,
            frame_rate_hz,
            data,
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[f * n..(f + 1) * n]
    }

    pub fn view(&self, f: usize) -> Frame<'_> {
        Frame {
            data: self.frame(f),
            height: self.height,
            width: self.width,
        }
    }

    pub fn get(&self, f: usize, r: usize, c: usize) -> f32 {
        self.data[(f * self.height + r) * self.width + c]
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn read_f32(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Reads and validates a `ULMF` stack file.
pub fn read_stack(path: &Path) -> Result<FrameStack> {
    let bytes = fs::read(path).map_err(|source| UlmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fmt = |offset: u64, reason: String| UlmError::Format {
        path: path.to_path_buf(),
        offset,
        reason,
    };

    if bytes.len() < HEADER_LEN {
        return Err(fmt(
            bytes.len() as u64,
            format!("file ends inside the {HEADER_LEN}-byte header"),
        ));
    }
    if bytes[0..4] != ULMF_MAGIC {
        return Err(fmt(
            0,
            format!("bad magic {:?}, expected \"ULMF\"", &bytes[0..4]),
        ));
    }
    let version = read_u32(&bytes, 4);
    if version != ULMF_VERSION {
        return Err(fmt(
            4,
            format!("unsupported version {version}, expected {ULMF_VERSION}"),
        ));
    }
    let n_frames = read_u32(&bytes, 8) as usize;
    let height = read_u32(&bytes, 12) as usize;
    let width = read_u32(&bytes, 16) as usize;
    if height == 0 || width == 0 {
        return Err(fmt(12, format!("zero frame dimension {height}x{width}")));
    }
    let pixel_size_mm = read_f32(&bytes, 20);
    if !(pixel_size_mm.is_finite() && pixel_size_mm > 0.0) {
        return Err(fmt(
            20,
            format!("pixel size {pixel_size_mm} must be finite and positive"),
        ));
    }
    let frame_rate_hz = read_f32(&bytes, 24);
    if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
        return Err(fmt(
            24,
            format!("frame rate {frame_rate_hz} must be finite and positive"),
        ));
    }

    let n_values = n_frames
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| fmt(8, "frame count times frame size overflows".to_string()))?;
    let expected = HEADER_LEN + 4 * n_values;
    if bytes.len() != expected {
        return Err(fmt(
            bytes.len().min(expected) as u64,
            format!(
                "payload length mismatch: header promises {expected} bytes total, file has {}",
                bytes.len()
            ),
        ));
    }

    let mut data = Vec::with_capacity(n_values);
    for i in 0..n_values {
        let offset = HEADER_LEN + 4 * i;
        let v = read_f32(&bytes, offset);
        if !v.is_finite() {
            return Err(fmt(offset as u64, format!("non-finite intensity {v}")));
        }
        if v < 0.0 {
            return Err(fmt(offset as u64, format!("negative intensity {v}")));
        }
        data.push(v);
    }

    FrameStack::new(n_frames, height, width, pixel_size_mm, frame_rate_hz, data)
}

/// Writes a stack as a `ULMF` file. Round-trips bit-exactly through
/// `read_stack`.
pub fn write_stack(stack: &FrameStack, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * stack.data.len());
    bytes.extend_from_slice(&ULMF_MAGIC);
    bytes.extend_from_slice(&ULMF_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(stack.n_frames as u32).to_le_bytes());
    bytes.extend_from_slice(&(stack.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(stack.width as u32).to_le_bytes());
    bytes.extend_from_slice(&stack.pixel_size_mm.to_le_bytes());
    bytes.extend_from_slice(&stack.frame_rate_hz.to_le_bytes());
    for v in &stack.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|source| UlmError::Io {
        path: path.to_path_buf(),
        source,
    })
}
