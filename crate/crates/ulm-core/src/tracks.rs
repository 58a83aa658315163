//! Chaining frame-to-frame pairings into tracks and deriving velocities.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Result, UlmError};
use crate::register::Pairing;
use crate::types::{BubbleSet, Vec2};

/// One microbubble trajectory. Points are (frame index, position) with
/// strictly consecutive frames; `velocities[i]` belongs to the step from
/// `points[i]` to `points[i + 1]`, in meters per second.
#[derive(Clone, Debug)]
pub struct Track {
    pub id: usize,
    pub points: Vec<(usize, Vec2)>,
    pub velocities: Vec<Vec2>,
}

/// A velocity measurement anchored at the midpoint of one track step.
/// `position` is in original pixel coordinates, `velocity` in meters per
/// second.
#[derive(Clone, Copy, Debug)]
pub struct VelocitySample {
    pub position: Vec2,
    pub velocity: Vec2,
    pub track_id: usize,
}

/// Velocity of a step between consecutive frames: pixel displacement scaled
/// by the physical pixel size (millimeters, hence the 1e-3) and the frame
/// rate.
pub fn step_velocity(p0: Vec2, p1: Vec2, pixel_size_mm: f64, frame_rate_hz: f64) -> Vec2 {
    (p1 - p0) * (pixel_size_mm * 1e-3 * frame_rate_hz)
}

/// Chains per-frame-pair pairings into tracks. `pairings[t]` pairs bubbles
/// of `sets[t]` (rows) with bubbles of `sets[t + 1]` (columns). Each
/// accepted pair extends the chain ending at its reference bubble or starts
/// a new chain; chains shorter than `min_track_length` points are dropped.
/// Track ids are assigned in the deterministic order chains are closed.
pub fn link(
    sets: &[BubbleSet],
    pairings: &[Pairing],
    pixel_size_mm: f64,
    frame_rate_hz: f64,
    min_track_length: usize,
) -> Result<Vec<Track>> {
    if sets.is_empty() {
        return Ok(Vec::new());
    }
    if pairings.len() + 1 != sets.len() {
        return Err(UlmError::Contract(format!(
            "{} pairings cannot chain {} bubble sets",
            pairings.len(),
            sets.len()
        )));
    }

    let mut tracks: Vec<Track> = Vec::new();
    let mut next_id = 0usize;
    let mut close = |chain: Vec<(usize, Vec2)>, tracks: &mut Vec<Track>| {
        if chain.len() < min_track_length {
            return;
        }
        let velocities = chain
            .windows(2)
            .map(|w| step_velocity(w[0].1, w[1].1, pixel_size_mm, frame_rate_hz))
            .collect();
        tracks.push(Track {
            id: next_id,
            points: chain,
            velocities,
        });
        next_id += 1;
    };

    // Open chains keyed by bubble index in the current frame.
    let mut open: Vec<Option<Vec<(usize, Vec2)>>> = vec![None; sets[0].len()];
    for (t, pairing) in pairings.iter().enumerate() {
        let mut carried: Vec<Option<Vec<(usize, Vec2)>>> = vec![None; sets[t + 1].len()];
        for pb in &pairing.pairs {
            let mut chain = open[pb.ref_idx]
                .take()
                .unwrap_or_else(|| vec![(t, sets[t].position(pb.ref_idx))]);
            chain.push((t + 1, sets[t + 1].position(pb.tgt_idx)));
            carried[pb.tgt_idx] = Some(chain);
        }
        for slot in open.iter_mut() {
            if let Some(chain) = slot.take() {
                close(chain, &mut tracks);
            }
        }
        open = carried;
    }
    for slot in open.iter_mut() {
        if let Some(chain) = slot.take() {
            close(chain, &mut tracks);
        }
    }
    Ok(tracks)
}

/// One velocity sample per track step, anchored at the step midpoint, in
/// track order.
pub fn velocity_samples(tracks: &[Track]) -> Vec<VelocitySample> {
    let mut out = Vec::new();
    for track in tracks {
        for (i, v) in track.velocities.iter().enumerate() {
            let mid = (track.points[i].1 + track.points[i + 1].1) * 0.5;
            out.push(VelocitySample {
                position: mid,
                velocity: *v,
                track_id: track.id,
            });
        }
    }
    out
}

/// Writes tracks as CSV with header `track_id,frame,row,col,vr_mps,vc_mps`.
/// Each row carries the velocity of the step leaving that point; the last
/// point of a track repeats the final step's velocity.
pub fn write_tracks_csv(tracks: &[Track], path: &Path) -> Result<()> {
    let mut out = String::from("track_id,frame,row,col,vr_mps,vc_mps\n");
    for track in tracks {
        for (i, (frame, pos)) in track.points.iter().enumerate() {
            let v = if track.velocities.is_empty() {
                Vec2::ZERO
            } else {
                track.velocities[i.min(track.velocities.len() - 1)]
            };
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.6},{:.6}\n",
                track.id, frame, pos.r, pos.c, v.r, v.c
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

/// Reads a track CSV written by `write_tracks_csv` (or the synthetic ground
/// truth writer). Rows of one track must be contiguous and in frame order.
pub fn read_tracks_csv(path: &Path) -> Result<Vec<Track>> {
    let text = fs::read_to_string(path).map_err(|source| UlmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fmt = |line: usize, reason: String| UlmError::Format {
        path: path.to_path_buf(),
        offset: line as u64,
        reason: format!("line {line}: {reason}"),
    };
    let mut tracks: Vec<Track> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "track_id,frame,row,col,vr_mps,vc_mps" {
                return Err(fmt(1, format!("unexpected header \"{line}\"")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(fmt(
                i + 1,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let id = fields[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| fmt(i + 1, format!("bad track id \"{}\"", fields[0])))?;
        let frame = fields[1]
            .trim()
            .parse::<usize>()
            .map_err(|_| fmt(i + 1, format!("bad frame index \"{}\"", fields[1])))?;
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| fmt(i + 1, format!("bad number \"{s}\"")))
        };
        let pos = Vec2::new(num(fields[2])?, num(fields[3])?);
        let vel = Vec2::new(num(fields[4])?, num(fields[5])?);
        match tracks.last_mut() {
            Some(track) if track.id == id => {
                let last_frame = track.points.last().unwrap().0;
                if frame != last_frame + 1 {
                    return Err(fmt(
                        i + 1,
                        format!("track {id} jumps from frame {last_frame} to {frame}"),
                    ));
                }
                // The previous row's velocity was the step into this point.
                track.points.push((frame, pos));
                track.velocities.push(vel);
            }
            _ => {
                if tracks.iter().any(|t| t.id == id) {
                    return Err(fmt(
                        i + 1,
                        format!("track {id} appears in two separate blocks"),
                    ));
                }
                tracks.push(Track {
                    id,
                    points: vec![(frame, pos)],
                    velocities: vec![vel],
                });
            }
        }
    }
    // Per-row velocities include a duplicate on the last point; trim to one
    // velocity per step.
    for track in &mut tracks {
        track
            .velocities
            .truncate(track.points.len().saturating_sub(1));
    }
    Ok(tracks)
}
