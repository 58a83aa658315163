//! Synthetic contrast-enhanced frame stacks with known ground truth.
//!
//! A scenario places straight vessel segments in an image; bubbles flow
//! along each vessel with a parabolic lateral speed profile, are rendered as
//! Gaussian spots, and optionally covered with clamped Gaussian pixel noise.
//! The simulation keeps the exact sequence of positions and analytic
//! velocities, which `evaluate` compares against pipeline output with an
//! optimal per-frame assignment.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::parse_kv_lines;
use crate::error::{Result, UlmError};
use crate::stack::FrameStack;
use crate::tracks::Track;
use crate::types::{BubbleSet, Vec2};

/// Straight vessel segment with a parabolic speed profile across its width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vessel {
    pub start: Vec2,
    pub end: Vec2,
    /// Half-width of the tube, in pixels.
    pub radius_px: f64,
    /// Speed on the center line, in meters per second.
    pub peak_speed_mps: f64,
}

impl Vessel {
    pub fn length_px(&self) -> f64 {
        self.end.dist(self.start)
    }

    /// Unit vector from start to end.
    pub fn axis_unit(&self) -> Vec2 {
        (self.end - self.start) * self.length_px().recip()
    }

    /// Unit vector perpendicular to the axis.
    pub fn normal_unit(&self) -> Vec2 {
        let a = self.axis_unit();
        Vec2::new(-a.c, a.r)
    }

    /// How many bubbles the vessel can hold at once.
    pub fn capacity(&self) -> usize {
        self.length_px().floor() as usize
    }
}

/// Synthetic acquisition layout: image geometry, imaging parameters, and the
/// vessels bubbles flow through.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    /// Number of bubbles present on every frame.
    pub n_bubbles: usize,
    /// Width of the rendered Gaussian spot, in pixels.
    pub psf_sigma: f64,
    /// Standard deviation of additive pixel noise; 0 disables it.
    pub noise_std: f64,
    pub pixel_size_mm: f64,
    pub frame_rate_hz: f64,
    pub vessels: Vec<Vessel>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            height: 128,
            width: 128,
            n_frames: 100,
            n_bubbles: 10,
            psf_sigma: 1.5,
            noise_std: 0.0,
            pixel_size_mm: 0.1,
            frame_rate_hz: 100.0,
            vessels: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(UlmError::Config(msg));
        if self.height < 8 || self.width < 8 {
            return err(format!(
                "image must be at least 8 x 8, got {} x {}",
                self.height, self.width
            ));
        }
        if self.n_frames == 0 {
            return err("n_frames must be positive".into());
        }
        if self.n_bubbles == 0 {
            return err("n_bubbles must be positive".into());
        }
        if !(self.psf_sigma.is_finite() && self.psf_sigma > 0.0) {
            return err(format!(
                "psf_sigma must be positive, got {}",
                self.psf_sigma
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return err(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            ));
        }
        if !(self.pixel_size_mm.is_finite() && self.pixel_size_mm > 0.0) {
            return err(format!(
                "pixel_size_mm must be positive, got {}",
                self.pixel_size_mm
            ));
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return err(format!(
                "frame_rate_hz must be positive, got {}",
                self.frame_rate_hz
            ));
        }
        if self.vessels.is_empty() {
            return err("scenario needs at least one vessel".into());
        }
        for (i, v) in self.vessels.iter().enumerate() {
            if !(v.radius_px.is_finite() && v.radius_px > 0.0) {
                return err(format!(
                    "vessel {i}: radius must be positive, got {}",
                    v.radius_px
                ));
            }
            if !(v.peak_speed_mps.is_finite() && v.peak_speed_mps > 0.0) {
                return err(format!(
                    "vessel {i}: peak speed must be positive, got {}",
                    v.peak_speed_mps
                ));
            }
            if v.length_px() < 1.0 {
                return err(format!("vessel {i}: shorter than one pixel"));
            }
            for p in [v.start, v.end] {
                if !(p.r.is_finite() && p.c.is_finite())
                    || p.r < 0.0
                    || p.c < 0.0
                    || p.r >= self.height as f64
                    || p.c >= self.width as f64
                {
                    return err(format!(
                        "vessel {i}: endpoint ({}, {}) outside the {} x {} image",
                        p.r, p.c, self.height, self.width
                    ));
                }
            }
        }
        let capacity: usize = self.vessels.iter().map(Vessel::capacity).sum();
        if capacity < self.n_bubbles {
            return err(format!(
                "vessels hold at most {capacity} bubbles, scenario asks for {}",
                self.n_bubbles
            ));
        }
        Ok(())
    }
}

/// Parses the flat scenario format: `key = value` lines plus one
/// `vessel = r0 c0 r1 c1 radius_px peak_speed_mps` line per vessel.
impl std::str::FromStr for Scenario {
    type Err = UlmError;

    fn from_str(text: &str) -> Result<Self> {
        let mut sc = Scenario::default();
        for (key, value, line) in parse_kv_lines(text)? {
            let parse_err = |what: &str| {
                UlmError::Config(format!(
                    "line {line}: {key} expects {what}, got \"{value}\""
                ))
            };
            match key.as_str() {
                "height" => sc.height = value.parse().map_err(|_| parse_err("an integer"))?,
                "width" => sc.width = value.parse().map_err(|_| parse_err("an integer"))?,
                "n_frames" => sc.n_frames = value.parse().map_err(|_| parse_err("an integer"))?,
                "n_bubbles" => sc.n_bubbles = value.parse().map_err(|_| parse_err("an integer"))?,
                "psf_sigma" => sc.psf_sigma = value.parse().map_err(|_| parse_err("a number"))?,
                "noise_std" => sc.noise_std = value.parse().map_err(|_| parse_err("a number"))?,
                "pixel_size_mm" => {
                    sc.pixel_size_mm = value.parse().map_err(|_| parse_err("a number"))?
                }
                "frame_rate_hz" => {
                    sc.frame_rate_hz = value.parse().map_err(|_| parse_err("a number"))?
                }
                "vessel" => {
                    let nums: Vec<f64> = value
                        .split_whitespace()
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| parse_err("six numbers"))?;
                    if nums.len() != 6 {
                        return Err(parse_err(
                            "six numbers: r0 c0 r1 c1 radius_px peak_speed_mps",
                        ));
                    }
                    sc.vessels.push(Vessel {
                        start: Vec2::new(nums[0], nums[1]),
                        end: Vec2::new(nums[2], nums[3]),
                        radius_px: nums[4],
                        peak_speed_mps: nums[5],
                    });
                }
                _ => {
                    return Err(UlmError::Config(format!(
                        "line {line}: unknown key \"{key}\""
                    )));
                }
            }
        }
        sc.validate()?;
        Ok(sc)
    }
}

impl Scenario {
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
}

/// Speed at lateral `offset` from the center line of a vessel with
/// half-width `radius`: peak at the center, zero at the wall.
pub fn parabolic_speed(peak_mps: f64, offset: f64, radius: f64) -> f64 {
    (peak_mps * (1.0 - (offset / radius).powi(2))).max(0.0)
}

/// Renders Gaussian spots of width `sigma` at the given (position,
/// amplitude) pairs onto a `height` x `width` frame. Spots are truncated at
/// six sigma; accumulation happens in f64 before the f32 cast.
pub fn render_frame(height: usize, width: usize, bubbles: &[(Vec2, f32)], sigma: f64) -> Vec<f32> {
    let mut acc = vec![0.0f64; height * width];
    let cutoff = 6.0 * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for &(p, a) in bubbles {
        let r0 = ((p.r - cutoff).floor() as i64).max(0);
        let r1 = ((p.r + cutoff).ceil() as i64).min(height as i64 - 1);
        let c0 = ((p.c - cutoff).floor() as i64).max(0);
        let c1 = ((p.c + cutoff).ceil() as i64).min(width as i64 - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let d2 = (r as f64 - p.r).powi(2) + (c as f64 - p.c).powi(2);
                acc[r as usize * width + c as usize] += a as f64 * (-d2 * inv).exp();
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// A synthetic stack together with its ground truth.
pub struct SimOutput {
    pub stack: FrameStack,
    /// Every bubble on every frame as (track id, position), in a fixed
    /// per-frame order.
    pub truth_frames: Vec<Vec<(usize, Vec2)>>,
    /// Truth tracks with at least two points. A bubble leaving its vessel
    /// re-enters at the start as a new track. Velocities are the analytic
    /// per-step values in meters per second.
    pub tracks: Vec<Track>,
}

struct Segment {
    id: usize,
    vessel: usize,
    velocity_mps: Vec2,
    speed_px_per_frame: f64,
    points: Vec<(usize, Vec2)>,
}

struct BubbleState {
    segment: usize,
    axial_px: f64,
    offset_px: f64,
    amplitude: f32,
}

/// Runs the scenario: spawns `n_bubbles` bubbles across the vessels
/// (round-robin, respecting per-vessel capacity), advances them one frame at
/// a time, renders each frame, and records the exact trajectory of every
/// bubble. Identical inputs produce an identical stack and truth.
pub fn simulate(scenario: &Scenario, seed: u64) -> Result<SimOutput> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Noise comes from its own generator so the bubble trajectories do not
    // depend on whether noise is enabled.
    let noise_seed = seed ^ 0x9E37_79B9_7F4A_7C15;

    // The stack stores imaging parameters as f32; derive truth velocities
    // from the same rounded values the pipeline will read back.
    let pixel_size_mm = scenario.pixel_size_mm as f32 as f64;
    let frame_rate_hz = scenario.frame_rate_hz as f32 as f64;
    let px_per_mps = 1.0 / (pixel_size_mm * 1e-3 * frame_rate_hz);

    let mut remaining: Vec<usize> = scenario.vessels.iter().map(Vessel::capacity).collect();
    let mut segments: Vec<Segment> = Vec::new();
    let mut states: Vec<BubbleState> = Vec::new();

    let spawn = |vessel_idx: usize,
                 axial_px: f64,
                 rng: &mut ChaCha8Rng,
                 segments: &mut Vec<Segment>|
     -> BubbleState {
        let vessel = &scenario.vessels[vessel_idx];
        let offset_px = rng.gen_range(-vessel.radius_px..vessel.radius_px);
        let amplitude = 0.7 + 0.3 * rng.gen::<f32>();
        let speed_mps = parabolic_speed(vessel.peak_speed_mps, offset_px, vessel.radius_px);
        let id = segments.len();
        segments.push(Segment {
            id,
            vessel: vessel_idx,
            velocity_mps: vessel.axis_unit() * speed_mps,
            speed_px_per_frame: speed_mps * px_per_mps,
            points: Vec::new(),
        });
        BubbleState {
            segment: id,
            axial_px,
            offset_px,
            amplitude,
        }
    };

    let mut vessel_cursor = 0usize;
    for _ in 0..scenario.n_bubbles {
        while remaining[vessel_cursor % scenario.vessels.len()] == 0 {
            vessel_cursor += 1;
        }
        let v = vessel_cursor % scenario.vessels.len();
        remaining[v] -= 1;
        vessel_cursor += 1;
        let axial = rng.gen_range(0.0..scenario.vessels[v].length_px());
        let state = spawn(v, axial, &mut rng, &mut segments);
        states.push(state);
    }

    let mut truth_frames: Vec<Vec<(usize, Vec2)>> = Vec::with_capacity(scenario.n_frames);
    let mut data = Vec::with_capacity(scenario.n_frames * scenario.height * scenario.width);

    for frame in 0..scenario.n_frames {
        let mut frame_truth = Vec::with_capacity(states.len());
        let mut rendered = Vec::with_capacity(states.len());
        for state in &mut states {
            let vessel = &scenario.vessels[segments[state.segment].vessel];
            let position = vessel.start
                + vessel.axis_unit() * state.axial_px
                + vessel.normal_unit() * state.offset_px;
            segments[state.segment].points.push((frame, position));
            frame_truth.push((segments[state.segment].id, position));
            rendered.push((position, state.amplitude));
        }
        let mut pixels = render_frame(
            scenario.height,
            scenario.width,
            &rendered,
            scenario.psf_sigma,
        );
        if scenario.noise_std > 0.0 {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed.wrapping_add(frame as u64));
            for v in &mut pixels {
                let n: f64 = noise_rng.sample(StandardNormal);
                *v = (*v + (n * scenario.noise_std) as f32).max(0.0);
            }
        }
        data.extend_from_slice(&pixels);
        truth_frames.push(frame_truth);

        // Advance to the next frame; a bubble past the end re-enters at the
        // start of its vessel as a fresh track.
        for state in &mut states {
            let vessel_idx = segments[state.segment].vessel;
            let length = scenario.vessels[vessel_idx].length_px();
            state.axial_px += segments[state.segment].speed_px_per_frame;
            if state.axial_px >= length {
                let axial = state.axial_px - length;
                *state = spawn(
                    vessel_idx,
                    axial.min(length * 0.999),
                    &mut rng,
                    &mut segments,
                );
            }
        }
    }

    let stack = FrameStack::new(
        scenario.n_frames,
        scenario.height,
        scenario.width,
        scenario.pixel_size_mm as f32,
        scenario.frame_rate_hz as f32,
        data,
    )?;
    let tracks = segments
        .into_iter()
        .filter(|s| s.points.len() >= 2)
        .map(|s| {
            let velocities = vec![s.velocity_mps; s.points.len() - 1];
            Track {
                id: s.id,
                points: s.points,
                velocities,
            }
        })
        .collect();
    Ok(SimOutput {
        stack,
        truth_frames,
        tracks,
    })
}

const FORBIDDEN: f64 = 1e15;

/// Minimum-cost assignment of rows to columns (Jonker-Volgenant with
/// potentials, O(n^3)). `cost` is row-major `n_rows` x `n_cols`; every row
/// beyond the smaller dimension stays unassigned. Entries of `FORBIDDEN`
/// magnitude are effectively excluded unless no complete assignment avoids
/// them.
pub fn hungarian_assign(cost: &[f64], n_rows: usize, n_cols: usize) -> Vec<Option<usize>> {
    assert_eq!(cost.len(), n_rows * n_cols);
    if n_rows == 0 || n_cols == 0 {
        return vec![None; n_rows];
    }
    // Pad to square with zero-cost entries: padding columns absorb surplus
    // rows (and vice versa) without biasing which real pairs are chosen.
    let n = n_rows.max(n_cols);
    let at = |r: usize, c: usize| -> f64 {
        if r < n_rows && c < n_cols {
            cost[r * n_cols + c]
        } else {
            0.0
        }
    };

    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_row = vec![0usize; n + 1]; // 1-based row matched to each column
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; n_rows];
    for j in 1..=n {
        let i = col_row[j];
        if i >= 1 && i - 1 < n_rows && j - 1 < n_cols {
            assignment[i - 1] = Some(j - 1);
        }
    }
    assignment
}

/// Detection and identity quality of pipeline output against ground truth.
#[derive(Clone, Copy, Debug)]
pub struct Metrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Matched detections over all detections; 1 when nothing was detected.
    pub precision: f64,
    /// Matched detections over all truth bubbles; 1 when there is no truth.
    pub recall: f64,
    /// Root-mean-square position error over matched detections, in pixels.
    pub rmse_px: f64,
    /// Fraction of predicted track links whose endpoints match the same
    /// truth track; 1 when there are no links.
    pub identity_accuracy: f64,
}

/// Scores detections and tracks against ground truth. Per frame, truth and
/// detections are matched by a minimum-cost assignment over distances capped
/// at `tol_px`; matched pairs within the tolerance are true positives and
/// contribute to the position error. A predicted track link counts as
/// correct when both of its endpoints are true positives matched to the
/// same truth track.
pub fn evaluate(
    truth_frames: &[Vec<(usize, Vec2)>],
    pred_sets: &[BubbleSet],
    pred_tracks: &[Track],
    tol_px: f64,
) -> Result<Metrics> {
    if truth_frames.len() != pred_sets.len() {
        return Err(UlmError::Contract(format!(
            "truth has {} frames, predictions have {}",
            truth_frames.len(),
            pred_sets.len()
        )));
    }
    if !(tol_px.is_finite() && tol_px > 0.0) {
        return Err(UlmError::Contract(format!(
            "matching tolerance must be positive, got {tol_px}"
        )));
    }

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut sq_err = 0.0f64;
    // Per frame: position bits of a matched detection -> truth track id.
    let mut matched_ids: Vec<Vec<((u64, u64), usize)>> = Vec::with_capacity(pred_sets.len());

    for (truth, set) in truth_frames.iter().zip(pred_sets.iter()) {
        let (nt, np) = (truth.len(), set.len());
        let mut frame_ids = Vec::new();
        let mut matched = 0usize;
        if nt > 0 && np > 0 {
            let mut cost = vec![0.0f64; nt * np];
            for (ti, &(_, tpos)) in truth.iter().enumerate() {
                for pi in 0..np {
                    let d = tpos.dist(set.position(pi));
                    cost[ti * np + pi] = if d <= tol_px { d } else { FORBIDDEN };
                }
            }
            for (ti, assigned) in hungarian_assign(&cost, nt, np).into_iter().enumerate() {
                if let Some(pi) = assigned {
                    let d = truth[ti].1.dist(set.position(pi));
                    if d <= tol_px {
                        matched += 1;
                        sq_err += d * d;
                        let p = set.position(pi);
                        frame_ids.push(((p.r.to_bits(), p.c.to_bits()), truth[ti].0));
                    }
                }
            }
        }
        tp += matched;
        fp += np - matched;
        fn_ += nt - matched;
        matched_ids.push(frame_ids);
    }

    let mut links = 0usize;
    let mut correct = 0usize;
    for track in pred_tracks {
        for pair in track.points.windows(2) {
            links += 1;
            let (f0, p0) = pair[0];
            let (f1, p1) = pair[1];
            let id0 = matched_ids.get(f0).and_then(|m| {
                m.iter()
                    .find(|(bits, _)| *bits == (p0.r.to_bits(), p0.c.to_bits()))
                    .map(|&(_, id)| id)
            });
            let id1 = matched_ids.get(f1).and_then(|m| {
                m.iter()
                    .find(|(bits, _)| *bits == (p1.r.to_bits(), p1.c.to_bits()))
                    .map(|&(_, id)| id)
            });
            if let (Some(a), Some(b)) = (id0, id1) {
                if a == b {
                    correct += 1;
                }
            }
        }
    }

    let ratio = |num: usize, den: usize| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(Metrics {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        rmse_px: if tp == 0 {
            0.0
        } else {
            (sq_err / tp as f64).sqrt()
        },
        identity_accuracy: ratio(correct, links),
    })
}
