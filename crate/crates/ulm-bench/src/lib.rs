//! Deterministic fixture builders shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulm_core::{Bubble, BubbleSet, Scenario, Vec2, Vessel};

/// Two-vessel flow phantom covering both speed regimes.
pub fn demo_scenario(n_frames: usize) -> Scenario {
    Scenario {
        height: 128,
        width: 128,
        n_frames,
        n_bubbles: 12,
        psf_sigma: 1.5,
        noise_std: 0.05,
        pixel_size_mm: 0.1,
        frame_rate_hz: 100.0,
        vessels: vec![
            Vessel {
                start: Vec2::new(40.0, 8.0),
                end: Vec2::new(40.0, 120.0),
                radius_px: 2.5,
                peak_speed_mps: 0.002,
            },
            Vessel {
                start: Vec2::new(88.0, 8.0),
                end: Vec2::new(88.0, 120.0),
                radius_px: 2.5,
                peak_speed_mps: 0.020,
            },
        ],
    }
}

fn smooth_patch(rng: &mut impl Rng, k: usize) -> Vec<f32> {
    let sigma = 1.2 + 0.6 * rng.gen::<f64>();
    let half = (k / 2) as f64;
    let mut patch = Vec::with_capacity(k * k);
    for r in 0..k {
        for c in 0..k {
            let d2 = (r as f64 - half).powi(2) + (c as f64 - half).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp() + 0.02 * rng.gen::<f64>();
            patch.push(v as f32);
        }
    }
    patch
}

/// A well-separated reference set and a jittered copy of it, sized for the
/// registration benchmarks. Positions keep at least three pixels of
/// separation, matching what the detector can emit.
pub fn registration_pair(n: usize, seed: u64, patch_size: usize) -> (BubbleSet, BubbleSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<Vec2> = Vec::new();
    while positions.len() < n {
        let cand = Vec2::new(
            4.0 + 120.0 * rng.gen::<f64>(),
            4.0 + 120.0 * rng.gen::<f64>(),
        );
        if positions.iter().all(|p| (*p - cand).norm() >= 3.0) {
            positions.push(cand);
        }
    }
    let build = |positions: &[Vec2], frame_index: usize, rng: &mut ChaCha8Rng| BubbleSet {
        frame_index,
        bubbles: positions
            .iter()
            .map(|&position| Bubble {
                position,
                amplitude: 1.0,
                patch: smooth_patch(rng, patch_size),
            })
            .collect(),
    };
    let reference = build(&positions, 0, &mut rng);
    let shifted: Vec<Vec2> = positions
        .iter()
        .map(|p| {
            Vec2::new(
                p.r + 0.8 + 0.4 * (rng.gen::<f64>() - 0.5),
                p.c - 0.5 + 0.4 * (rng.gen::<f64>() - 0.5),
            )
        })
        .collect();
    let target = build(&shifted, 1, &mut rng);
    (reference, target)
}

/// A square positive matrix for the normalization benchmark.
pub fn positive_matrix(n: usize, seed: u64) -> ulm_core::ProbabilityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ulm_core::ProbabilityMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            p.set(i, j, 1e-3 + rng.gen::<f64>());
        }
    }
    p
}
