//! The full chain: localize every frame, register and pair consecutive
//! frames, link pairs into tracks, and render the super-resolution maps.

use std::time::Instant;

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Result, UlmError};
use crate::localize::{localize_stack, resolve_psf, PsfSource};
use crate::maps::{render_density, render_velocity, DensityMap, VelocityField};
use crate::register::{pair, register, Pairing, Transform};
use crate::stack::FrameStack;
use crate::tracks::{link, velocity_samples, Track};
use crate::types::BubbleSet;

/// Everything the pipeline produces, stage by stage.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub sets: Vec<BubbleSet>,
    /// Transform fitted from frame `t + 1` onto frame `t`, one per
    /// consecutive frame pair.
    pub transforms: Vec<Transform>,
    pub pairings: Vec<Pairing>,
    pub tracks: Vec<Track>,
    pub density: DensityMap,
    pub velocity: VelocityField,
}

/// Wall-clock cost of each stage, in milliseconds.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageTimings {
    pub localize_ms: f64,
    pub register_ms: f64,
    pub link_ms: f64,
    pub render_ms: f64,
}

/// Registers every consecutive frame pair and reads hard pairs off the
/// converged probabilities. Pairs of frames are independent, so they run in
/// parallel; the output order is by frame.
pub fn register_pairs(
    sets: &[BubbleSet],
    cfg: &PipelineConfig,
) -> Result<Vec<(Transform, Pairing)>> {
    (0..sets.len().saturating_sub(1))
        .into_par_iter()
        .map(|t| {
            let (f, p) = register(&sets[t], &sets[t + 1], cfg)?;
            let pairing = pair(&p, &sets[t], &sets[t + 1], &f, cfg);
            Ok((f, pairing))
        })
        .collect()
}

/// Runs localization, tracking, and rendering on a stack.
pub fn run_pipeline(
    stack: &FrameStack,
    psf: PsfSource,
    cfg: &PipelineConfig,
) -> Result<(PipelineOutput, StageTimings)> {
    cfg.validate()?;
    if stack.n_frames == 0 {
        return Err(UlmError::Config("stack has no frames to process".into()));
    }
    let psf = resolve_psf(stack, psf, cfg.psf_patch_size)?;
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let sets = localize_stack(stack, &psf, cfg)?;
    timings.localize_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let registered = register_pairs(&sets, cfg)?;
    let (transforms, pairings): (Vec<Transform>, Vec<Pairing>) = registered.into_iter().unzip();
    timings.register_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let tracks = link(
        &sets,
        &pairings,
        stack.pixel_size_mm as f64,
        stack.frame_rate_hz as f64,
        cfg.min_track_length,
    )?;
    timings.link_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let density = render_density(&sets, stack.height, stack.width, cfg);
    let samples = velocity_samples(&tracks);
    let velocity = render_velocity(&samples, stack.height, stack.width, cfg);
    timings.render_ms = t.elapsed().as_secs_f64() * 1e3;

    Ok((
        PipelineOutput {
            sets,
            transforms,
            pairings,
            tracks,
            density,
            velocity,
        },
        timings,
    ))
}
