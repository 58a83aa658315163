//! Fuzzy registration of consecutive bubble sets.
//!
//! Two bubble sets are aligned by alternating between two updates: a fuzzy
//! pairing probability for every (reference, target) bubble pair, and a
//! spatial transform fitted against those probabilities. The pairing
//! probability is the product of a location likelihood and a patch-disparity
//! likelihood, normalized toward a doubly stochastic matrix by alternating
//! row and column scaling. The transform minimizes a probability-weighted
//! quadratic cost and is obtained in closed form at every step. Hard pairs
//! are read off the final matrix greedily, gated by probability and by
//! post-transform distance.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::config::PipelineConfig;
use crate::error::{Result, UlmError};
use crate::types::{BubbleSet, Vec2};

/// Convergence target for the row/column sums during the normalization
/// inside `register`. Kept far below the doubly-stochastic guarantee of
/// 1e-3 so that registering a set against itself leaves essentially no
/// asymmetry in the probabilities — and therefore no spurious shift.
pub const SINKHORN_TOL: f64 = 1e-9;
/// Outer alternation stops once the transform parameters move less than this.
pub const PARAM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformMode {
    Translation,
    Affine,
}

/// Spatial transform mapping target-frame positions onto the reference
/// frame, stored in displacement form: zero parameters mean identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    /// f(y) = y + t
    Translation { t: Vec2 },
    /// f(y) = y + L y + t, where L is the deviation of the linear part from
    /// the identity.
    Affine { lin: [[f64; 2]; 2], t: Vec2 },
}

impl Transform {
    pub fn identity(mode: TransformMode) -> Self {
        match mode {
            TransformMode::Translation => Transform::Translation { t: Vec2::ZERO },
            TransformMode::Affine => Transform::Affine {
                lin: [[0.0; 2]; 2],
                t: Vec2::ZERO,
            },
        }
    }

    pub fn mode(&self) -> TransformMode {
        match self {
            Transform::Translation { .. } => TransformMode::Translation,
            Transform::Affine { .. } => TransformMode::Affine,
        }
    }

    pub fn apply(&self, y: Vec2) -> Vec2 {
        y + self.displacement(y)
    }

    /// u(y) = f(y) - y
    pub fn displacement(&self, y: Vec2) -> Vec2 {
        match self {
            Transform::Translation { t } => *t,
            Transform::Affine { lin, t } => Vec2::new(
                lin[0][0] * y.r + lin[0][1] * y.c + t.r,
                lin[1][0] * y.r + lin[1][1] * y.c + t.c,
            ),
        }
    }

    /// Parameter vector; identity is all zeros.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Transform::Translation { t } => vec![t.r, t.c],
            Transform::Affine { lin, t } => {
                vec![lin[0][0], lin[0][1], lin[1][0], lin[1][1], t.r, t.c]
            }
        }
    }

    pub fn param_norm(&self) -> f64 {
        self.params().iter().map(|p| p * p).sum::<f64>().sqrt()
    }

    /// Euclidean distance between parameter vectors; transforms of different
    /// modes are treated as infinitely far apart.
    pub fn param_delta(&self, other: &Transform) -> f64 {
        let (a, b) = (self.params(), other.params());
        if a.len() != b.len() {
            return f64::INFINITY;
        }
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

/// Dense pairing probability matrix, reference bubbles along rows and target
/// bubbles along columns.
#[derive(Clone, Debug)]
pub struct ProbabilityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ProbabilityMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ProbabilityMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        ProbabilityMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols..(i + 1) * self.cols].iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                sums[j] += self.get(i, j);
            }
        }
        sums
    }

    /// Largest |sum - 1| over all row and column sums.
    pub fn max_sum_deviation(&self) -> f64 {
        let mut dev: f64 = 0.0;
        for s in self.row_sums().into_iter().chain(self.col_sums()) {
            dev = dev.max((s - 1.0).abs());
        }
        dev
    }

    /// Column index of the largest entry of row `i`, ties to the left.
    pub fn row_argmax(&self, i: usize) -> Option<usize> {
        if self.cols == 0 {
            return None;
        }
        let row = &self.data[i * self.cols..(i + 1) * self.cols];
        let mut best = 0;
        for j in 1..self.cols {
            if row[j] > row[best] {
                best = j;
            }
        }
        Some(best)
    }
}

/// Location likelihood of reference position `x` against transformed target
/// position `fy`: `(1/w1) * exp(-d^2 / (2 w1))` with `d = |x - fy|`.
pub fn p_loc(x: Vec2, fy: Vec2, w1: f64) -> f64 {
    (x.dist_sq(fy) / (-2.0 * w1)).exp() / w1
}

fn unit_energy(patch: &[f32]) -> Vec<f64> {
    let energy: f64 = patch.iter().map(|v| (*v as f64).powi(2)).sum();
    if energy <= 0.0 {
        return vec![0.0; patch.len()];
    }
    let scale = energy.sqrt().recip();
    patch.iter().map(|v| *v as f64 * scale).collect()
}

fn normalized_ssd(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(UlmError::Contract(format!(
            "patch shapes differ: {} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    let (ua, ub) = (unit_energy(a), unit_energy(b));
    Ok(ua
        .iter()
        .zip(ub.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Patch-disparity likelihood: both patches are scaled to unit energy, then
/// `(1/w2) * exp(-ssd / (2 w2))` of their squared difference.
pub fn p_psf(a: &[f32], b: &[f32], w2: f64) -> Result<f64> {
    Ok((normalized_ssd(a, b)? / (-2.0 * w2)).exp() / w2)
}

/// Raw (unnormalized) pairing probabilities: entry (i, j) is the product of
/// the location likelihood of reference i against the transformed target j
/// and their patch-disparity likelihood.
pub fn probability_matrix(
    reference: &BubbleSet,
    target: &BubbleSet,
    f: &Transform,
    w1: f64,
    w2: f64,
) -> Result<ProbabilityMatrix> {
    let m = reference.len();
    let n = target.len();
    let mut out = ProbabilityMatrix::zeros(m, n);
    for j in 0..n {
        let fy = f.apply(target.position(j));
        for i in 0..m {
            let loc = p_loc(reference.position(i), fy, w1);
            let psf = p_psf(&reference.bubbles[i].patch, &target.bubbles[j].patch, w2)?;
            out.set(i, j, loc * psf);
        }
    }
    Ok(out)
}

/// Alternately rescales rows and columns toward unit sums, for at most
/// `iters` sweeps or until every row and column sum is within `tol` of 1.
/// For square matrices this converges to a doubly stochastic matrix; for
/// rectangular input the sums cannot all reach 1 and the final column
/// normalization wins. A row or column with no positive entry is an orphan
/// bubble and is reported as an error.
pub fn sinkhorn_normalize(
    p: &ProbabilityMatrix,
    iters: usize,
    tol: f64,
) -> Result<ProbabilityMatrix> {
    for (i, v) in p.data.iter().enumerate() {
        if !(v.is_finite() && *v >= 0.0) {
            return Err(UlmError::Contract(format!(
                "probability entry ({}, {}) is {v}; entries must be finite and non-negative",
                i / p.cols.max(1),
                i % p.cols.max(1)
            )));
        }
    }
    for (i, s) in p.row_sums().iter().enumerate() {
        if *s <= 0.0 {
            return Err(UlmError::Orphan {
                axis: "row",
                index: i,
            });
        }
    }
    for (j, s) in p.col_sums().iter().enumerate() {
        if *s <= 0.0 {
            return Err(UlmError::Orphan {
                axis: "column",
                index: j,
            });
        }
    }

    let mut out = p.clone();
    for _ in 0..iters {
        for i in 0..out.rows {
            let row = &mut out.data[i * out.cols..(i + 1) * out.cols];
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let col_sums = out.col_sums();
        for i in 0..out.rows {
            for j in 0..out.cols {
                out.data[i * out.cols + j] /= col_sums[j];
            }
        }
        if out.max_sum_deviation() < tol {
            break;
        }
    }
    Ok(out)
}

/// Registration cost: probability-weighted squared distances, plus
/// probability-weighted patch disparity, plus the squared displacement
/// penalty over all targets.
pub fn cost(
    reference: &BubbleSet,
    target: &BubbleSet,
    p: &ProbabilityMatrix,
    f: &Transform,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..target.len() {
        let y = target.position(j);
        let fy = f.apply(y);
        for i in 0..reference.len() {
            let pij = p.get(i, j);
            if pij == 0.0 && (alpha == 0.0 || beta == 0.0) {
                continue;
            }
            total += alpha * pij * reference.position(i).dist_sq(fy);
            total +=
                beta * pij * normalized_ssd(&reference.bubbles[i].patch, &target.bubbles[j].patch)?;
        }
        total += gamma * fy.dist_sq(y);
    }
    Ok(total)
}

/// Solves the 3x3 system M x = b for two right-hand sides by Gaussian
/// elimination with partial pivoting. None when M is rank deficient.
fn solve3_two(m: [[f64; 3]; 3], b1: [f64; 3], b2: [f64; 3]) -> Option<([f64; 3], [f64; 3])> {
    let mut a = [[0.0f64; 5]; 3];
    let mut scale: f64 = 1.0;
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] = m[i][j];
            scale = scale.max(m[i][j].abs());
        }
        a[i][3] = b1[i];
        a[i][4] = b2[i];
    }
    let tol = 1e-12 * scale.max(1.0);
    for col in 0..3 {
        let pivot_row = (col..3)
            .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() <= tol {
            return None;
        }
        a.swap(col, pivot_row);
        for r in col + 1..3 {
            let factor = a[r][col] / a[col][col];
            for c in col..5 {
                a[r][c] -= factor * a[col][c];
            }
        }
    }
    let mut x1 = [0.0f64; 3];
    let mut x2 = [0.0f64; 3];
    for i in (0..3).rev() {
        let mut s1 = a[i][3];
        let mut s2 = a[i][4];
        for j in i + 1..3 {
            s1 -= a[i][j] * x1[j];
            s2 -= a[i][j] * x2[j];
        }
        x1[i] = s1 / a[i][i];
        x2[i] = s2 / a[i][i];
    }
    Some((x1, x2))
}

fn fit_translation(
    reference: &BubbleSet,
    target: &BubbleSet,
    p: &ProbabilityMatrix,
    alpha: f64,
    gamma: f64,
) -> Transform {
    let mut weight = 0.0;
    let mut num = Vec2::ZERO;
    for i in 0..reference.len() {
        let x = reference.position(i);
        for j in 0..target.len() {
            let pij = p.get(i, j);
            if pij == 0.0 {
                continue;
            }
            weight += pij;
            num = num + (x - target.position(j)) * pij;
        }
    }
    let denom = alpha * weight + gamma * target.len() as f64;
    if !(denom.is_finite() && denom > 0.0) {
        return Transform::identity(TransformMode::Translation);
    }
    Transform::Translation {
        t: num * (alpha / denom),
    }
}

fn fit_affine(
    reference: &BubbleSet,
    target: &BubbleSet,
    p: &ProbabilityMatrix,
    alpha: f64,
    gamma: f64,
) -> Option<Transform> {
    let m = reference.len();
    let n = target.len();
    // Per-target probability mass and probability-weighted reference centroid.
    let mut mass = vec![0.0f64; n];
    let mut zr = vec![0.0f64; n];
    let mut zc = vec![0.0f64; n];
    for i in 0..m {
        let x = reference.position(i);
        for j in 0..n {
            let pij = p.get(i, j);
            mass[j] += pij;
            zr[j] += pij * x.r;
            zc[j] += pij * x.c;
        }
    }
    // Both displacement components share one normal matrix over the basis
    // (y_r, y_c, 1).
    let mut mat = [[0.0f64; 3]; 3];
    let mut rhs_r = [0.0f64; 3];
    let mut rhs_c = [0.0f64; 3];
    for j in 0..n {
        let y = target.position(j);
        let phi = [y.r, y.c, 1.0];
        let g = alpha * mass[j] + gamma;
        for a in 0..3 {
            for b in 0..3 {
                mat[a][b] += g * phi[a] * phi[b];
            }
            rhs_r[a] += alpha * (zr[j] - mass[j] * y.r) * phi[a];
            rhs_c[a] += alpha * (zc[j] - mass[j] * y.c) * phi[a];
        }
    }
    let (tr_row, tr_col) = solve3_two(mat, rhs_r, rhs_c)?;
    Some(Transform::Affine {
        lin: [[tr_row[0], tr_row[1]], [tr_col[0], tr_col[1]]],
        t: Vec2::new(tr_row[2], tr_col[2]),
    })
}

/// Closed-form minimizer of the registration cost over the transform with
/// the pairing probabilities held fixed. The patch-disparity term does not
/// depend on the transform, so only the position and displacement terms are
/// solved: a weighted linear least-squares problem in the transform
/// parameters. Rank-deficient affine systems (for example, all mass on
/// collinear targets) fall back to the translation solution, visible as a
/// `Translation` result in affine mode.
pub fn fit_transform(
    reference: &BubbleSet,
    target: &BubbleSet,
    p: &ProbabilityMatrix,
    alpha: f64,
    gamma: f64,
    mode: TransformMode,
) -> Transform {
    match mode {
        TransformMode::Translation => fit_translation(reference, target, p, alpha, gamma),
        TransformMode::Affine => fit_affine(reference, target, p, alpha, gamma)
            .unwrap_or_else(|| fit_translation(reference, target, p, alpha, gamma)),
    }
}

/// Normalization wrapper that tolerates hopeless bubbles: rows and columns
/// with no positive entry are left at zero (they cannot pair with anything
/// and are resolved as unmatched by the pairing gate), and the remaining
/// submatrix is normalized.
fn normalize_active(p: &ProbabilityMatrix, iters: usize, tol: f64) -> Result<ProbabilityMatrix> {
    let active_rows: Vec<usize> = (0..p.rows())
        .filter(|&i| (0..p.cols()).any(|j| p.get(i, j) > 0.0))
        .collect();
    let active_cols: Vec<usize> = (0..p.cols())
        .filter(|&j| (0..p.rows()).any(|i| p.get(i, j) > 0.0))
        .collect();
    if active_rows.len() == p.rows() && active_cols.len() == p.cols() {
        return if p.rows() == p.cols() {
            Ok(sinkhorn_symmetric(p.clone(), iters, tol))
        } else {
            sinkhorn_normalize(p, iters, tol)
        };
    }
    let mut out = ProbabilityMatrix::zeros(p.rows(), p.cols());
    if active_rows.is_empty() || active_cols.is_empty() {
        return Ok(out);
    }
    let sub = ProbabilityMatrix::from_fn(active_rows.len(), active_cols.len(), |i, j| {
        p.get(active_rows[i], active_cols[j])
    });
    let sub = if sub.rows() == sub.cols() {
        sinkhorn_symmetric(sub, iters, tol)
    } else {
        sinkhorn_normalize(&sub, iters, tol)?
    };
    for (si, &i) in active_rows.iter().enumerate() {
        for (sj, &j) in active_cols.iter().enumerate() {
            out.set(i, j, sub.get(si, sj));
        }
    }
    Ok(out)
}

/// Square-matrix normalization by simultaneous scaling: each sweep divides
/// entry (i, j) by sqrt(row sum i) * sqrt(col sum j). This walks to the
/// same doubly stochastic limit as the alternating row/column form, but a
/// symmetric matrix stays exactly symmetric after every sweep — registering
/// a set against itself therefore cannot pick up a direction bias from a
/// partially converged normalization, no matter how slowly the matrix
/// mixes. Rows and columns must all hold a positive entry.
fn sinkhorn_symmetric(mut p: ProbabilityMatrix, iters: usize, tol: f64) -> ProbabilityMatrix {
    debug_assert_eq!(p.rows(), p.cols());
    for _ in 0..iters {
        if p.max_sum_deviation() < tol {
            break;
        }
        let inv_r: Vec<f64> = p.row_sums().iter().map(|s| s.sqrt().recip()).collect();
        let inv_c: Vec<f64> = p.col_sums().iter().map(|s| s.sqrt().recip()).collect();
        for i in 0..p.rows() {
            for j in 0..p.cols() {
                // The scale product commutes bitwise, which keeps symmetric
                // input bitwise symmetric.
                let g = inv_r[i] * inv_c[j];
                let v = p.get(i, j) * g;
                p.set(i, j, v);
            }
        }
    }
    p
}

/// Registers a target bubble set onto a reference set.
///
/// Starting from the identity, runs up to `max_outer_iters` alternations of
/// probability update (probability matrix, then row/column normalization)
/// and transform fit, stopping early once the transform parameters move less
/// than `PARAM_TOL`. Returns the final transform together with the
/// normalized probability matrix of the last alternation. Empty sets
/// short-circuit to the identity and an empty matrix.
pub fn register(
    reference: &BubbleSet,
    target: &BubbleSet,
    cfg: &PipelineConfig,
) -> Result<(Transform, ProbabilityMatrix)> {
    let m = reference.len();
    let n = target.len();
    let mut f = Transform::identity(cfg.transform_mode);
    if m == 0 || n == 0 {
        return Ok((f, ProbabilityMatrix::zeros(m, n)));
    }

    // The patch-disparity factor does not depend on the transform; compute it
    // once. The per-iteration product below multiplies the same two floats as
    // `probability_matrix`, so both paths agree bit for bit.
    let mut psf_factor = ProbabilityMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let v = p_psf(
                &reference.bubbles[i].patch,
                &target.bubbles[j].patch,
                cfg.w2,
            )?;
            psf_factor.set(i, j, v);
        }
    }

    let mut p_final = ProbabilityMatrix::zeros(m, n);
    for _ in 0..cfg.max_outer_iters {
        let mut raw = ProbabilityMatrix::zeros(m, n);
        for j in 0..n {
            let fy = f.apply(target.position(j));
            for i in 0..m {
                let loc = p_loc(reference.position(i), fy, cfg.w1);
                raw.set(i, j, loc * psf_factor.get(i, j));
            }
        }
        let p = normalize_active(&raw, cfg.sinkhorn_iters, SINKHORN_TOL)?;
        let f_new = fit_transform(
            reference,
            target,
            &p,
            cfg.alpha,
            cfg.gamma,
            cfg.transform_mode,
        );
        let delta = f.param_delta(&f_new);
        f = f_new;
        p_final = p;
        if delta < PARAM_TOL {
            break;
        }
    }
    Ok((f, p_final))
}

/// One accepted bubble pair.
#[derive(Clone, Copy, Debug)]
pub struct PairedBubble {
    pub ref_idx: usize,
    pub tgt_idx: usize,
    /// Normalized pairing probability the pair was accepted at.
    pub prob: f64,
    /// Distance between the reference bubble and the transformed target.
    pub dist_px: f64,
}

/// Hard one-to-one pairing between two bubble sets.
#[derive(Clone, Debug, Default)]
pub struct Pairing {
    pub pairs: Vec<PairedBubble>,
    pub unmatched_ref: Vec<usize>,
    pub unmatched_tgt: Vec<usize>,
}

/// Reads hard pairs off a normalized probability matrix greedily: entries
/// are visited in order of decreasing probability; an entry whose row and
/// column are still free is accepted if its probability reaches
/// `pair_min_prob` and the post-transform distance stays within
/// `pair_gate_distance`, and skipped otherwise. Bubbles left without an
/// accepted entry are reported unmatched.
pub fn pair(
    p: &ProbabilityMatrix,
    reference: &BubbleSet,
    target: &BubbleSet,
    f: &Transform,
    cfg: &PipelineConfig,
) -> Pairing {
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            let v = p.get(i, j);
            if v > 0.0 {
                entries.push((v, i, j));
            }
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut row_used = vec![false; p.rows()];
    let mut col_used = vec![false; p.cols()];
    let mut pairs = Vec::new();
    for (prob, i, j) in entries {
        if prob < cfg.pair_min_prob {
            break;
        }
        if row_used[i] || col_used[j] {
            continue;
        }
        let dist_px = reference.position(i).dist(f.apply(target.position(j)));
        if dist_px <= cfg.pair_gate_distance {
            row_used[i] = true;
            col_used[j] = true;
            pairs.push(PairedBubble {
                ref_idx: i,
                tgt_idx: j,
                prob,
                dist_px,
            });
        }
    }
    Pairing {
        pairs,
        unmatched_ref: (0..reference.len()).filter(|&i| !row_used[i]).collect(),
        unmatched_tgt: (0..target.len()).filter(|&j| !col_used[j]).collect(),
    }
}

/// Appends one frame pair's accepted pairs to a debug CSV with header
/// `frame,i,j,prob,dist_px`; `frame` is the reference frame index.
pub fn write_pairings_csv(pairings: &[(usize, &Pairing)], path: &Path) -> Result<()> {
    let mut out = String::from("frame,i,j,prob,dist_px\n");
    for (frame, pairing) in pairings {
        for p in &pairing.pairs {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.4}\n",
                frame, p.ref_idx, p.tgt_idx, p.prob, p.dist_px
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
