//! Microbubble localization: PSF correlation, peak picking, and subpixel
//! refinement.
//!
//! A frame is scanned with a mean-subtracted, unit-energy PSF patch. Bubble
//! candidates are strict local maxima of the normalized correlation map,
//! thinned by a minimum separation, then refined to subpixel positions with
//! an intensity-weighted average over a small window.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Result, UlmError};
use crate::stack::{Frame, FrameStack};
use crate::types::{Bubble, BubbleSet, Vec2};

/// Normalized cross-correlation of one frame against a PSF patch.
///
/// Pixels closer than half a patch to the border cannot host a full window;
/// they are marked invalid and their value is filled with -1.
#[derive(Clone, Debug)]
pub struct CorrelationMap {
    pub height: usize,
    pub width: usize,
    half: usize,
    values: Vec<f32>,
}

impl CorrelationMap {
    pub fn value(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.width + c]
    }

    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        r >= self.half
            && c >= self.half
            && r + self.half < self.height
            && c + self.half < self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Where the matched filter comes from: cut out of a frame, or synthesized
/// as an isotropic Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PsfSource {
    Extracted {
        frame: usize,
        row: usize,
        col: usize,
    },
    Gaussian {
        sigma: f64,
    },
}

/// Cuts a k x k patch centered on `(row, col)` of frame `frame_index`,
/// subtracts its mean, and scales it to unit energy.
pub fn extract_psf(
    stack: &FrameStack,
    frame_index: usize,
    row: usize,
    col: usize,
    k: usize,
) -> Result<Vec<f32>> {
    if frame_index >= stack.n_frames {
        return Err(UlmError::Contract(format!(
            "frame index {frame_index} out of range, stack has {} frames",
            stack.n_frames
        )));
    }
    let frame = stack.view(frame_index);
    let patch = frame
        .patch(row, col, k)
        .ok_or(UlmError::WindowOutOfBounds {
            op: "extract_psf",
            window: k,
            row,
            col,
            height: frame.height,
            width: frame.width,
        })?;
    normalize_patch(&patch)
}

/// Mean-subtracted, unit-energy isotropic Gaussian kernel of side k.
pub fn gaussian_psf(k: usize, sigma: f64) -> Result<Vec<f32>> {
    if k.is_multiple_of(2) || k == 0 {
        return Err(UlmError::Contract(format!(
            "kernel side must be odd, got {k}"
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(UlmError::Contract(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let half = (k / 2) as f64;
    let mut kernel = Vec::with_capacity(k * k);
    for r in 0..k {
        for c in 0..k {
            let dr = r as f64 - half;
            let dc = c as f64 - half;
            kernel.push((-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp() as f32);
        }
    }
    normalize_patch(&kernel)
}

pub fn resolve_psf(stack: &FrameStack, source: PsfSource, k: usize) -> Result<Vec<f32>> {
    match source {
        PsfSource::Extracted { frame, row, col } => extract_psf(stack, frame, row, col, k),
        PsfSource::Gaussian { sigma } => gaussian_psf(k, sigma),
    }
}

fn normalize_patch(patch: &[f32]) -> Result<Vec<f32>> {
    let n = patch.len() as f64;
    let mean = patch.iter().map(|v| *v as f64).sum::<f64>() / n;
    let centered: Vec<f64> = patch.iter().map(|v| *v as f64 - mean).collect();
    let energy: f64 = centered.iter().map(|v| v * v).sum();
    if energy <= 0.0 || energy <= n * 1e-18 {
        return Err(UlmError::ZeroEnergy);
    }
    let scale = energy.sqrt().recip();
    Ok(centered.iter().map(|v| (v * scale) as f32).collect())
}

/// Zero-normalized cross-correlation of `frame` against `psf` at every pixel
/// that can host a full window. `psf` must be mean-subtracted and unit-energy
/// (the output of `extract_psf` or `gaussian_psf`), so each value is the
/// cosine similarity between the PSF and the mean-subtracted window, in
/// [-1, 1]. Windows with no variance correlate to 0.
pub fn correlation_map(frame: &Frame<'_>, psf: &[f32]) -> CorrelationMap {
    let k = (psf.len() as f64).sqrt().round() as usize;
    assert_eq!(k * k, psf.len(), "psf patch must be square");
    assert_eq!(k % 2, 1, "psf patch side must be odd");
    assert!(
        frame.height >= k && frame.width >= k,
        "frame {}x{} smaller than psf patch {k}x{k}",
        frame.height,
        frame.width
    );
    let half = k / 2;
    let (h, w) = (frame.height, frame.width);
    let mut values = vec![-1.0f32; h * w];

    values
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(r, row_out)| {
            if r < half || r + half >= h {
                return;
            }
            for c in half..w - half {
                let mut dot = 0.0f64;
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for dr in 0..k {
                    let base = (r + dr - half) * w + c - half;
                    let prow = dr * k;
                    for dc in 0..k {
                        let v = frame.data[base + dc] as f64;
                        dot += psf[prow + dc] as f64 * v;
                        sum += v;
                        sumsq += v * v;
                    }
                }
                let n = (k * k) as f64;
                // Energy of the mean-subtracted window; guard the catastrophic
                // cancellation of near-constant windows.
                let css = sumsq - sum * sum / n;
                row_out[c] = if css <= sumsq * 1e-9 || css <= 0.0 {
                    0.0
                } else {
                    (dot / css.sqrt()) as f32
                };
            }
        });

    CorrelationMap {
        height: h,
        width: w,
        half,
        values,
    }
}

/// Strict 8-neighbor local maxima of the map with value >= `threshold`,
/// thinned greedily in order of descending correlation so that every kept
/// pair of peaks is at least `min_sep` apart in Chebyshev distance.
pub fn detect_peaks(map: &CorrelationMap, threshold: f32, min_sep: usize) -> Vec<(usize, usize)> {
    let (h, w) = (map.height, map.width);
    let mut candidates: Vec<(f32, usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !map.is_valid(r, c) {
                continue;
            }
            let v = map.value(r, c);
            if v < threshold {
                continue;
            }
            let mut is_peak = true;
            'nb: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    if map.value(nr as usize, nc as usize) >= v {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                candidates.push((v, r, c));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut accepted: Vec<(usize, usize)> = Vec::new();
    for (_, r, c) in candidates {
        let clear = accepted.iter().all(|&(ar, ac)| {
            let dr = r.abs_diff(ar);
            let dc = c.abs_diff(ac);
            dr.max(dc) >= min_sep
        });
        if clear {
            accepted.push((r, c));
        }
    }
    accepted
}

/// Refines an integer peak to a subpixel position with an intensity-weighted
/// average over a `window x window` neighborhood. Each pixel is weighted by
/// its intensity minus the window minimum, floored at zero; if every weight
/// vanishes the integer peak is returned unchanged. Also returns the
/// intensity at the integer peak.
pub fn subpixel_refine(
    frame: &Frame<'_>,
    peak: (usize, usize),
    window: usize,
) -> Result<(Vec2, f32)> {
    if window.is_multiple_of(2) || window == 0 {
        return Err(UlmError::Contract(format!(
            "refinement window must be odd, got {window}"
        )));
    }
    let (r, c) = peak;
    if !frame.fits_window(r, c, window) {
        return Err(UlmError::WindowOutOfBounds {
            op: "subpixel_refine",
            window,
            row: r,
            col: c,
            height: frame.height,
            width: frame.width,
        });
    }
    let half = window / 2;
    let amplitude = frame.get(r, c);

    let mut min = f64::INFINITY;
    for dr in 0..window {
        for dc in 0..window {
            min = min.min(frame.get(r + dr - half, c + dc - half) as f64);
        }
    }
    let mut total = 0.0f64;
    let mut sum_r = 0.0f64;
    let mut sum_c = 0.0f64;
    for dr in 0..window {
        for dc in 0..window {
            let w = (frame.get(r + dr - half, c + dc - half) as f64 - min).max(0.0);
            total += w;
            sum_r += w * (r + dr - half) as f64;
            sum_c += w * (c + dc - half) as f64;
        }
    }
    if total <= 0.0 {
        return Ok((Vec2::new(r as f64, c as f64), amplitude));
    }
    Ok((Vec2::new(sum_r / total, sum_c / total), amplitude))
}

/// Localizes every bubble on one frame: correlation map, peak picking, then
/// subpixel refinement and patch extraction per peak. Bubbles come out
/// ordered by descending detection correlation.
pub fn localize_frame(
    frame: &Frame<'_>,
    frame_index: usize,
    psf: &[f32],
    cfg: &PipelineConfig,
) -> Result<BubbleSet> {
    let k = cfg.psf_patch_size;
    let map = correlation_map(frame, psf);
    let peaks = detect_peaks(&map, cfg.corr_threshold, cfg.min_peak_separation);
    // Both the patch and the refinement window must fit.
    let margin = (k / 2).max(cfg.com_window / 2);
    let mut bubbles = Vec::with_capacity(peaks.len());
    for (r, c) in peaks {
        if r < margin || c < margin || r + margin >= frame.height || c + margin >= frame.width {
            continue;
        }
        let (position, amplitude) = subpixel_refine(frame, (r, c), cfg.com_window)?;
        let patch = frame
            .patch(r, c, k)
            .expect("peak margin guarantees a full patch");
        bubbles.push(Bubble {
            position,
            amplitude,
            patch,
        });
    }
    Ok(BubbleSet {
        frame_index,
        bubbles,
    })
}

/// Localizes every frame of the stack in parallel. Output order follows
/// frame order and is independent of thread count.
pub fn localize_stack(
    stack: &FrameStack,
    psf: &[f32],
    cfg: &PipelineConfig,
) -> Result<Vec<BubbleSet>> {
    (0..stack.n_frames)
        .into_par_iter()
        .map(|f| localize_frame(&stack.view(f), f, psf, cfg))
        .collect()
}

/// One row of a bubble CSV file.
#[derive(Clone, Copy, Debug)]
pub struct BubbleRow {
    pub frame: usize,
    pub position: Vec2,
    pub amplitude: f32,
}

/// Writes bubble sets as CSV with header `frame,row,col,amplitude`;
/// positions carry four decimal places.
pub fn write_bubbles_csv(sets: &[BubbleSet], path: &Path) -> Result<()> {
    let mut out = String::from("frame,row,col,amplitude\n");
    for set in sets {
        for b in &set.bubbles {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.6}\n",
                set.frame_index, b.position.r, b.position.c, b.amplitude
            ));
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|source| UlmError::Io {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_bubbles_csv(path: &Path) -> Result<Vec<BubbleRow>> {
    let text = fs::read_to_string(path).map_err(|source| UlmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fmt = |line: usize, reason: String| UlmError::Format {
        path: path.to_path_buf(),
        offset: line as u64,
        reason: format!("line {line}: {reason}"),
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "frame,row,col,amplitude" {
                return Err(fmt(1, format!("unexpected header \"{line}\"")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(fmt(
                i + 1,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        }
        let frame = fields[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| fmt(i + 1, format!("bad frame index \"{}\"", fields[0])))?;
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| fmt(i + 1, format!("bad number \"{s}\"")))
        };
        rows.push(BubbleRow {
            frame,
            position: Vec2::new(parse(fields[1])?, parse(fields[2])?),
            amplitude: parse(fields[3])? as f32,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render_frame;

    fn frame_of(data: &[f32], h: usize, w: usize) -> Frame<'_> {
        Frame {
            data,
            height: h,
            width: w,
        }
    }

    #[test]
    fn extract_psf_is_zero_mean_unit_energy() {
        let data = render_frame(32, 32, &[(Vec2::new(16.0, 16.0), 1.0)], 1.5);
        let stack = FrameStack::new(1, 32, 32, 0.1, 100.0, data).unwrap();
        let psf = extract_psf(&stack, 0, 16, 16, 7).unwrap();
        let mean: f64 = psf.iter().map(|v| *v as f64).sum::<f64>() / 49.0;
        let energy: f64 = psf.iter().map(|v| (*v as f64).powi(2)).sum();
        assert!(mean.abs() < 1e-7, "mean {mean}");
        assert!((energy - 1.0).abs() < 1e-6, "energy {energy}");
    }

    #[test]
    fn extract_psf_matches_synthetic_kernel() {
        let data = render_frame(32, 32, &[(Vec2::new(16.0, 16.0), 1.0)], 1.5);
        let stack = FrameStack::new(1, 32, 32, 0.1, 100.0, data).unwrap();
        let extracted = extract_psf(&stack, 0, 16, 16, 7).unwrap();
        let analytic = gaussian_psf(7, 1.5).unwrap();
        let corr: f64 = extracted
            .iter()
            .zip(analytic.iter())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        assert!(corr > 0.99, "correlation {corr}");
    }

    #[test]
    fn extract_psf_rejects_constant_patch() {
        let stack = FrameStack::new(1, 16, 16, 0.1, 100.0, vec![3.0; 256]).unwrap();
        assert!(matches!(
            extract_psf(&stack, 0, 8, 8, 5),
            Err(UlmError::ZeroEnergy)
        ));
    }

    #[test]
    fn extract_psf_rejects_border_window() {
        let stack = FrameStack::new(1, 16, 16, 0.1, 100.0, vec![0.0; 256]).unwrap();
        assert!(matches!(
            extract_psf(&stack, 0, 1, 8, 5),
            Err(UlmError::WindowOutOfBounds { .. })
        ));
    }

    #[test]
    fn matched_filter_peaks_at_one_on_its_own_site() {
        let data = render_frame(32, 32, &[(Vec2::new(15.0, 18.0), 0.8)], 1.2);
        let psf = gaussian_psf(7, 1.2).unwrap();
        let map = correlation_map(&frame_of(&data, 32, 32), &psf);
        let v = map.value(15, 18);
        assert!((v - 1.0).abs() < 1e-4, "peak correlation {v}");
        // And it is the global maximum of the valid region.
        for r in 0..32 {
            for c in 0..32 {
                if map.is_valid(r, c) {
                    assert!(map.value(r, c) <= v + 1e-6);
                }
            }
        }
    }

    #[test]
    fn two_planted_copies_correlate_near_one() {
        let data = render_frame(
            40,
            40,
            &[(Vec2::new(10.0, 10.0), 1.0), (Vec2::new(28.0, 30.0), 0.5)],
            1.2,
        );
        let psf = gaussian_psf(7, 1.2).unwrap();
        let map = correlation_map(&frame_of(&data, 40, 40), &psf);
        assert!(map.value(10, 10) > 0.999);
        assert!(map.value(28, 30) > 0.999);
    }

    #[test]
    fn all_zero_frame_correlates_to_zero() {
        let data = vec![0.0f32; 32 * 32];
        let psf = gaussian_psf(7, 1.2).unwrap();
        let map = correlation_map(&frame_of(&data, 32, 32), &psf);
        for r in 0..32 {
            for c in 0..32 {
                if map.is_valid(r, c) {
                    assert_eq!(map.value(r, c), 0.0);
                } else {
                    assert_eq!(map.value(r, c), -1.0);
                }
            }
        }
    }

    #[test]
    fn correlation_values_stay_within_unit_bound() {
        let data = render_frame(
            48,
            48,
            &[
                (Vec2::new(12.3, 9.8), 1.0),
                (Vec2::new(30.0, 31.5), 0.7),
                (Vec2::new(20.1, 40.2), 0.4),
            ],
            1.4,
        );
        let psf = gaussian_psf(9, 1.4).unwrap();
        let map = correlation_map(&frame_of(&data, 48, 48), &psf);
        for r in 0..48 {
            for c in 0..48 {
                if map.is_valid(r, c) {
                    assert!(map.value(r, c).abs() <= 1.0 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn detect_peaks_keeps_the_stronger_of_a_close_pair() {
        // Two strict maxima 2 apart with min_sep 3: only the stronger survives.
        let mut data = vec![0.0f32; 20 * 20];
        data[10 * 20 + 10] = 1.0;
        data[10 * 20 + 12] = 0.9;
        let map = CorrelationMap {
            height: 20,
            width: 20,
            half: 1,
            values: data,
        };
        let peaks = detect_peaks(&map, 0.5, 3);
        assert_eq!(peaks, vec![(10, 10)]);
        // With min_sep 1 both survive, strongest first.
        let peaks = detect_peaks(&map, 0.5, 1);
        assert_eq!(peaks, vec![(10, 10), (10, 12)]);
    }

    #[test]
    fn detect_peaks_requires_strict_maxima() {
        // A 2-pixel plateau has no strict 8-neighbor maximum.
        let mut data = vec![0.0f32; 20 * 20];
        data[10 * 20 + 10] = 1.0;
        data[10 * 20 + 11] = 1.0;
        let map = CorrelationMap {
            height: 20,
            width: 20,
            half: 1,
            values: data,
        };
        assert!(detect_peaks(&map, 0.5, 3).is_empty());
    }

    #[test]
    fn refine_weights_give_one_and_a_half_along_columns() {
        // 3x3 window whose min-subtracted weights are (0, 1, 1) in every row:
        // column center of mass lands halfway between the last two columns.
        #[rustfmt::skip]
        let data = vec![
            1.0f32, 2.0, 2.0,
            1.0, 2.0, 2.0,
            1.0, 2.0, 2.0,
        ];
        let frame = frame_of(&data, 3, 3);
        let (pos, _) = subpixel_refine(&frame, (1, 1), 3).unwrap();
        assert!((pos.c - 1.5).abs() < 1e-12, "col {}", pos.c);
        assert!((pos.r - 1.0).abs() < 1e-12, "row {}", pos.r);
    }

    #[test]
    fn refine_on_constant_window_returns_integer_peak() {
        let data = vec![5.0f32; 9 * 9];
        let frame = frame_of(&data, 9, 9);
        let (pos, amp) = subpixel_refine(&frame, (4, 5), 3).unwrap();
        assert_eq!(pos, Vec2::new(4.0, 5.0));
        assert_eq!(amp, 5.0);
    }

    #[test]
    fn refine_recovers_planted_subpixel_position() {
        let truth = Vec2::new(10.3, 12.7);
        let data = render_frame(24, 24, &[(truth, 1.0)], 1.2);
        let frame = frame_of(&data, 24, 24);
        let (pos, _) = subpixel_refine(&frame, (10, 13), 5).unwrap();
        assert!(pos.dist(truth) < 0.3, "refined {pos:?} vs {truth:?}");
    }

    #[test]
    fn localize_frame_on_zero_frame_is_empty() {
        let data = vec![0.0f32; 32 * 32];
        let cfg = PipelineConfig::default();
        let psf = gaussian_psf(7, 1.2).unwrap();
        let set = localize_frame(&frame_of(&data, 32, 32), 0, &psf, &cfg).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn localize_frame_finds_fifteen_separated_bubbles() {
        let mut truth = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if truth.len() == 15 {
                    break;
                }
                truth.push((
                    Vec2::new(8.0 + 16.0 * i as f64 + 0.3, 8.0 + 16.0 * j as f64 - 0.2),
                    1.0,
                ));
            }
        }
        let data = render_frame(64, 64, &truth, 1.2);
        let cfg = PipelineConfig::default();
        let psf = gaussian_psf(7, 1.2).unwrap();
        let set = localize_frame(&frame_of(&data, 64, 64), 0, &psf, &cfg).unwrap();
        assert_eq!(set.len(), 15);
        for (pos, _) in &truth {
            let best = set
                .positions()
                .map(|p| p.dist(*pos))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.15, "bubble at {pos:?} recovered within {best}");
        }
    }

    #[test]
    fn localization_is_equivariant_to_integer_shifts() {
        let truth = Vec2::new(14.4, 13.6);
        let shifted = Vec2::new(17.4, 18.6);
        let a = render_frame(40, 40, &[(truth, 1.0)], 1.2);
        let b = render_frame(40, 40, &[(shifted, 1.0)], 1.2);
        let cfg = PipelineConfig::default();
        let psf = gaussian_psf(7, 1.2).unwrap();
        let sa = localize_frame(&frame_of(&a, 40, 40), 0, &psf, &cfg).unwrap();
        let sb = localize_frame(&frame_of(&b, 40, 40), 0, &psf, &cfg).unwrap();
        assert_eq!(sa.len(), 1);
        assert_eq!(sb.len(), 1);
        let d = sb.position(0) - sa.position(0);
        assert!(
            (d.r - 3.0).abs() < 1e-9 && (d.c - 5.0).abs() < 1e-9,
            "shift {d:?}"
        );
    }

    #[test]
    fn localization_is_invariant_to_intensity_scale() {
        let data = render_frame(40, 40, &[(Vec2::new(20.2, 21.9), 1.0)], 1.2);
        let scaled: Vec<f32> = data.iter().map(|v| v * 7.5).collect();
        let cfg = PipelineConfig::default();
        let psf = gaussian_psf(7, 1.2).unwrap();
        let sa = localize_frame(&frame_of(&data, 40, 40), 0, &psf, &cfg).unwrap();
        let sb = localize_frame(&frame_of(&scaled, 40, 40), 0, &psf, &cfg).unwrap();
        assert_eq!(sa.len(), 1);
        assert_eq!(sb.len(), 1);
        // Scaling rounds each f32 sample, which nudges the weighted average
        // by the order of 1e-7 px.
        assert!(sa.position(0).dist(sb.position(0)) < 1e-5);
    }

    #[test]
    fn bubbles_csv_round_trips() {
        let data = render_frame(32, 32, &[(Vec2::new(16.2, 15.8), 1.0)], 1.2);
        let cfg = PipelineConfig::default();
        let psf = gaussian_psf(7, 1.2).unwrap();
        let set = localize_frame(&frame_of(&data, 32, 32), 3, &psf, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bubbles.csv");
        write_bubbles_csv(std::slice::from_ref(&set), &path).unwrap();
        let rows = read_bubbles_csv(&path).unwrap();
        assert_eq!(rows.len(), set.len());
        assert_eq!(rows[0].frame, 3);
        assert!(rows[0].position.dist(set.position(0)) < 1e-3);
    }
}
