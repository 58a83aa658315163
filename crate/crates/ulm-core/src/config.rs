//! Pipeline tuning parameters and the flat `key = value` config file format.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, UlmError};
use crate::register::TransformMode;

/// Every tunable of the pipeline, from detection to map rendering.
///
/// Distances are in original pixels unless a field says otherwise; `w1` is in
/// squared pixels, and the map fields (`density_sigma`, `gather_radius`,
/// `avg_sigma`) are in super-resolved pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Side length k of the PSF patch, odd.
    pub psf_patch_size: usize,
    /// Minimum normalized correlation for a detection, in (0, 1).
    pub corr_threshold: f32,
    /// Minimum Chebyshev distance between accepted peaks, in pixels.
    pub min_peak_separation: usize,
    /// Side length of the weighted-average refinement window, odd.
    pub com_window: usize,
    /// Weight of the position term in the registration cost.
    pub alpha: f64,
    /// Weight of the patch-disparity term in the registration cost.
    pub beta: f64,
    /// Weight of the displacement penalty in the registration cost.
    pub gamma: f64,
    /// Width of the location likelihood, in squared pixels.
    pub w1: f64,
    /// Width of the patch-disparity likelihood.
    pub w2: f64,
    /// Alternations of probability update and transform fit.
    pub max_outer_iters: usize,
    /// Row/column normalization sweeps per probability update.
    pub sinkhorn_iters: usize,
    /// Transform fitted between consecutive frames.
    pub transform_mode: TransformMode,
    /// Maximum post-transform distance for an accepted pair, in pixels.
    pub pair_gate_distance: f64,
    /// Minimum normalized probability for an accepted pair.
    pub pair_min_prob: f64,
    /// Minimum number of points for a kept track.
    pub min_track_length: usize,
    /// Super-resolution upsampling factor.
    pub sr_factor: usize,
    /// Width of the density splat, in super-resolved pixels.
    pub density_sigma: f64,
    /// Radius of the velocity gathering disc, in super-resolved pixels.
    pub gather_radius: f64,
    /// Width of the distance weighting in velocity averaging, in
    /// super-resolved pixels.
    pub avg_sigma: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            psf_patch_size: 7,
            corr_threshold: 0.6,
            min_peak_separation: 3,
            com_window: 5,
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.01,
            w1: 4.0,
            w2: 0.5,
            max_outer_iters: 10,
            sinkhorn_iters: 20,
            transform_mode: TransformMode::Translation,
            pair_gate_distance: 5.0,
            pair_min_prob: 0.05,
            min_track_length: 3,
            sr_factor: 8,
            density_sigma: 2.0,
            gather_radius: 24.0,
            avg_sigma: 12.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(UlmError::Config(msg));
        if self.psf_patch_size.is_multiple_of(2) || self.psf_patch_size < 3 {
            return err(format!(
                "psf_patch_size must be odd and >= 3, got {}",
                self.psf_patch_size
            ));
        }
        if self.com_window.is_multiple_of(2) || self.com_window == 0 {
            return err(format!("com_window must be odd, got {}", self.com_window));
        }
        if !(self.corr_threshold > 0.0 && self.corr_threshold < 1.0) {
            return err(format!(
                "corr_threshold must lie in (0, 1), got {}",
                self.corr_threshold
            ));
        }
        if self.min_peak_separation == 0 {
            return err("min_peak_separation must be positive".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("w1", self.w1),
            ("w2", self.w2),
            ("pair_gate_distance", self.pair_gate_distance),
            ("density_sigma", self.density_sigma),
            ("gather_radius", self.gather_radius),
            ("avg_sigma", self.avg_sigma),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("{name} must be finite and positive, got {v}"));
            }
        }
        if !(self.pair_min_prob.is_finite() && (0.0..=1.0).contains(&self.pair_min_prob)) {
            return err(format!(
                "pair_min_prob must lie in [0, 1], got {}",
                self.pair_min_prob
            ));
        }
        if self.max_outer_iters == 0 || self.sinkhorn_iters == 0 {
            return err("max_outer_iters and sinkhorn_iters must be positive".into());
        }
        if self.min_track_length < 2 {
            return err(format!(
                "min_track_length must be >= 2, got {}",
                self.min_track_length
            ));
        }
        if self.sr_factor == 0 {
            return err("sr_factor must be positive".into());
        }
        Ok(())
    }
}

/// Parses a flat `key = value` config file. `#` starts a comment, blank
/// lines are ignored, unknown keys are an error naming the key, and
/// missing keys keep their defaults. `gather_radius` defaults to
/// `3 * sr_factor` and `avg_sigma` to `gather_radius / 2` when unset.
impl std::str::FromStr for PipelineConfig {
    type Err = UlmError;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut saw_gather_radius = false;
        let mut saw_avg_sigma = false;
        for (key, value, line) in parse_kv_lines(text)? {
            let parse_err = |what: &str| {
                UlmError::Config(format!(
                    "line {line}: {key} expects {what}, got \"{value}\""
                ))
            };
            match key.as_str() {
                "psf_patch_size" => {
                    cfg.psf_patch_size = value.parse().map_err(|_| parse_err("an integer"))?
                }
                "corr_threshold" => {
                    cfg.corr_threshold = value.parse().map_err(|_| parse_err("a number"))?
                }
                "min_peak_separation" => {
                    cfg.min_peak_separation = value.parse().map_err(|_| parse_err("an integer"))?
                }
                "com_window" => {
                    cfg.com_window = value.parse().map_err(|_| parse_err("an integer"))?
                }
                "alpha" => cfg.alpha = value.parse().map_err(|_| parse_err("a number"))?,
                "beta" => cfg.beta = value.parse().map_err(|_| parse_err("a number"))?,
                "gamma" => cfg.gamma = value.parse().map_err(|_| parse_err("a number"))?,
                "w1" => cfg.w1 = value.parse().map_err(|_| parse_err("a number"))?,
                "w2" => cfg.w2 = value.parse().map_err(|_| parse_err("a number"))?,
                "max_outer_iters" => {
                    cfg.max_outer_iters = value.parse().map_err(|_| parse_err("an integer"))?
                }
                "sinkhorn_iters" => {
                    cfg.sinkhorn_iters = value.parse().map_err(|_| parse_err("an integer"))?
                }
                "transform_mode" => {
                    cfg.transform_mode = match value.as_str() {
                        "translation" => TransformMode::Translation,
                        "affine" => TransformMode::Affine,
                        _ => return Err(parse_err("\"translation\" or \"affine\"")),
                    }
                }
                "pair_gate_distance" => {
                    cfg.pair_gate_distance = value.parse().map_err(|_| parse_err("a number"))?
                }
                "pair_min_prob" => {
                    cfg.pair_min_prob = value.parse().map_err(|_| parse_err("a number"))?
                }
                "min_track_length" => {
                    cfg.min_track_length = value.parse().map_err(|_| parse_err("an integer"))?
                }
                "sr_factor" => {
                    cfg.sr_factor = value.parse().map_err(|_| parse_err("an integer"))?
                }
                "density_sigma" => {
                    cfg.density_sigma = value.parse().map_err(|_| parse_err("a number"))?
                }
                "gather_radius" => {
                    cfg.gather_radius = value.parse().map_err(|_| parse_err("a number"))?;
                    saw_gather_radius = true;
                }
                "avg_sigma" => {
                    cfg.avg_sigma = value.parse().map_err(|_| parse_err("a number"))?;
                    saw_avg_sigma = true;
                }
                _ => {
                    return Err(UlmError::Config(format!(
                        "line {line}: unknown key \"{key}\""
                    )));
                }
            }
        }
        if !saw_gather_radius {
            cfg.gather_radius = 3.0 * cfg.sr_factor as f64;
        }
        if !saw_avg_sigma {
            cfg.avg_sigma = cfg.gather_radius / 2.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| UlmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_str(&text).map_err(|e| match e {
            UlmError::Config(msg) => UlmError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// All tunables as (key, value) pairs, in config-file key order.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("psf_patch_size".into(), self.psf_patch_size.to_string()),
            ("corr_threshold".into(), self.corr_threshold.to_string()),
            (
                "min_peak_separation".into(),
                self.min_peak_separation.to_string(),
            ),
            ("com_window".into(), self.com_window.to_string()),
            ("alpha".into(), self.alpha.to_string()),
            ("beta".into(), self.beta.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("w1".into(), self.w1.to_string()),
            ("w2".into(), self.w2.to_string()),
            ("max_outer_iters".into(), self.max_outer_iters.to_string()),
            ("sinkhorn_iters".into(), self.sinkhorn_iters.to_string()),
            ("transform_mode".into(), self.transform_mode.to_string()),
            (
                "pair_gate_distance".into(),
                self.pair_gate_distance.to_string(),
            ),
            ("pair_min_prob".into(), self.pair_min_prob.to_string()),
            ("min_track_length".into(), self.min_track_length.to_string()),
            ("sr_factor".into(), self.sr_factor.to_string()),
            ("density_sigma".into(), self.density_sigma.to_string()),
            ("gather_radius".into(), self.gather_radius.to_string()),
            ("avg_sigma".into(), self.avg_sigma.to_string()),
        ]
    }
}

impl fmt::Display for TransformMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformMode::Translation => write!(f, "translation"),
            TransformMode::Affine => write!(f, "affine"),
        }
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments. Returns
/// (key, value, 1-based line number) triples in file order.
pub(crate) fn parse_kv_lines(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(UlmError::Config(format!(
                "line {line}: expected \"key = value\", got \"{content}\""
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(UlmError::Config(format!("line {line}: empty key")));
        }
        out.push((key.to_string(), value.to_string(), line));
    }
    Ok(out)
}
