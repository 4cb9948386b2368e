//! Radial-shell error metrics, volume alignment, and the hidden-data
//! baselines.
//!
//! Two volumes are compared shell by shell after bringing them into a
//! common frame: the strong metric averages voxelwise relative
//! differences, the weak metric compares shell sums. Voxels masked in
//! either volume (beamstop, uncovered corners, rotated samples leaving
//! the grid) are excluded from numerator and denominator alike.

use rayon::prelude::*;

use crate::emc::geometry::IntensityVolume;
use crate::emc::interp::{compress_rows, interpolation_weights};
use crate::error::{EmcError, Result};
use crate::rotations::{
    geodesic_distance, random_rotation_set, sample_rotation_grid, Quaternion,
};
use crate::synthetic::FrameSet;

/// Disjoint radial shells `s_u <= ||voxel|| < s_{u+1}` in voxel units.
#[derive(Debug, Clone)]
pub struct ShellPartition {
    side: usize,
    boundaries: Vec<f64>,
    shells: Vec<Vec<usize>>,
}

impl ShellPartition {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn n_shells(&self) -> usize {
        self.shells.len()
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Shell midpoints, `s_u + width/2`.
    pub fn centers(&self) -> Vec<f64> {
        self.boundaries
            .windows(2)
            .map(|w| (w[0] + w[1]) / 2.0)
            .collect()
    }

    pub fn members(&self, u: usize) -> &[usize] {
        &self.shells[u]
    }
}

/// Unit-width (by default) shells from radius 1 to `side / 2`.
pub fn make_shells(side: usize, width: f64) -> Result<ShellPartition> {
    make_shells_masked(side, width, None)
}

/// Same, but voxels flagged in `masked` are excluded from membership.
pub fn make_shells_masked(
    side: usize,
    width: f64,
    masked: Option<&[bool]>,
) -> Result<ShellPartition> {
    if !(width > 0.0) {
        return Err(EmcError::Config(format!(
            "shell width must be > 0, got {width}"
        )));
    }
    let probe = IntensityVolume::new_filled(side, 0.0)?;
    if let Some(m) = masked {
        if m.len() != probe.len() {
            return Err(EmcError::GridMismatch(
                "mask length does not match the grid".into(),
            ));
        }
    }
    let rmax = (side / 2) as f64;
    let mut boundaries = vec![1.0];
    while boundaries.last().unwrap() + width <= rmax + 1e-9 {
        boundaries.push(boundaries.last().unwrap() + width);
    }
    let n_shells = boundaries.len() - 1;
    let mut shells = vec![Vec::new(); n_shells];
    for l in 0..probe.len() {
        if masked.map_or(false, |m| m[l]) {
            continue;
        }
        let r = probe.radius_of(l);
        if r < boundaries[0] || r >= *boundaries.last().unwrap() {
            continue;
        }
        let u = ((r - boundaries[0]) / width) as usize;
        let u = u.min(n_shells - 1);
        // guard against rounding at shell edges
        let u = if r < boundaries[u] { u - 1 } else { u };
        let u = if r >= boundaries[u + 1] { u + 1 } else { u };
        shells[u].push(l);
    }
    Ok(ShellPartition {
        side,
        boundaries,
        shells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Strong,
    Weak,
    Bootstrap,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Strong => "strong",
            MetricKind::Weak => "weak",
            MetricKind::Bootstrap => "bootstrap",
        }
    }
}

/// Per-shell error values; shells with no valid voxels hold NaN and are
/// skipped by the aggregation helpers.
#[derive(Debug, Clone)]
pub struct ShellErrorCurve {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub metric: MetricKind,
}

impl ShellErrorCurve {
    /// Mean over shells whose center lies in the open interval
    /// `(lo, hi)` (voxel units), skipping absent shells.
    pub fn mean_over(&self, lo: f64, hi: f64) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (&r, &v) in self.radii.iter().zip(&self.values) {
            if r > lo && r < hi && v.is_finite() {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            None
        } else {
            Some(sum / n as f64)
        }
    }

    /// Mean over shells whose center maps into `(lo, hi)` in the physical
    /// units of the base 64-grid (voxel radius divided by `side / 64`),
    /// so curves from different grid sizes cover comparable regions.
    pub fn mean_over_physical(&self, lo: f64, hi: f64, side: usize) -> Option<f64> {
        let scale = side as f64 / 64.0;
        self.mean_over(lo * scale, hi * scale)
    }
}

/// Trilinear sample of `volume` at centered coordinate `point`.
/// Masked voxels are excluded and the remaining weights renormalized;
/// returns None when no unmasked weight is available.
fn sample_masked(volume: &IntensityVolume, point: [f64; 3]) -> Option<f64> {
    let weights = interpolation_weights(point, volume.side());
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for (l, w) in weights {
        if !volume.is_masked(l) {
            acc += w * volume.values()[l];
            wsum += w;
        }
    }
    if wsum > 0.0 {
        Some(acc / wsum)
    } else {
        None
    }
}

/// The volume rotated by `r`: value at `x` is `volume(r^-1 x)`. Voxels
/// whose preimage leaves the grid or lands in fully-masked cells come
/// back masked.
pub fn resample_rotated(volume: &IntensityVolume, r: Quaternion) -> IntensityVolume {
    let side = volume.side();
    let inv = r.conjugate().rotation_matrix();
    let mut out = IntensityVolume::new_filled(side, 0.0).expect("same side as input");
    let n = out.len();
    let values_masked: Vec<(f64, bool)> = (0..n)
        .into_par_iter()
        .map(|l| {
            let c = volume.coord_of(l);
            let p = crate::rotations::apply_matrix(&inv, c);
            match sample_masked(volume, p) {
                Some(v) => (v, false),
                None => (0.0, true),
            }
        })
        .collect();
    for (l, (v, m)) in values_masked.into_iter().enumerate() {
        out.values_mut()[l] = v;
        out.set_masked(l, m);
    }
    out
}

fn check_pair(w1: &IntensityVolume, w2: &IntensityVolume, partition: &ShellPartition) -> Result<()> {
    if w1.side() != w2.side() || w1.side() != partition.side() {
        return Err(EmcError::GridMismatch(format!(
            "volume sides {} / {} vs partition side {}",
            w1.side(),
            w2.side(),
            partition.side()
        )));
    }
    Ok(())
}

fn shell_fold(
    w1: &IntensityVolume,
    w2: &IntensityVolume,
    r: Quaternion,
    partition: &ShellPartition,
    per_voxel: impl Fn(&mut (f64, f64, usize), f64, f64) + Sync + Send,
) -> Vec<(f64, f64, usize)> {
    let identity = r == Quaternion::identity();
    let inv = r.conjugate().rotation_matrix();
    (0..partition.n_shells())
        .into_par_iter()
        .map(|u| {
            let mut acc = (0.0, 0.0, 0usize);
            for &l in partition.members(u) {
                if w1.is_masked(l) {
                    continue;
                }
                let b = if identity {
                    if w2.is_masked(l) {
                        continue;
                    }
                    w2.values()[l]
                } else {
                    let c = w1.coord_of(l);
                    let p = crate::rotations::apply_matrix(&inv, c);
                    match sample_masked(w2, p) {
                        Some(v) => v,
                        None => continue,
                    }
                };
                per_voxel(&mut acc, w1.values()[l], b);
            }
            acc
        })
        .collect()
}

/// Strong shell error: per-shell mean of
/// `|W1 - RW2| / max(rho, (|W1| + |RW2|) / 2)`.
/// `rho` defaults to `1e-6 x` mean unmasked `|W1|`.
pub fn strong_shell_error(
    w1: &IntensityVolume,
    w2: &IntensityVolume,
    r: Quaternion,
    partition: &ShellPartition,
    rho: Option<f64>,
) -> Result<ShellErrorCurve> {
    check_pair(w1, w2, partition)?;
    let rho = match rho {
        Some(v) if v > 0.0 => v,
        Some(v) => {
            return Err(EmcError::Config(format!("rho must be > 0, got {v}")));
        }
        None => 1e-6 * w1.map(f64::abs).unmasked_mean(),
    };
    let rho = rho.max(1e-300);
    let folds = shell_fold(w1, w2, r, partition, |acc, a, b| {
        acc.0 += (a - b).abs() / ((a.abs() + b.abs()) / 2.0).max(rho);
        acc.2 += 1;
    });
    let values = folds
        .iter()
        .map(|&(num, _, n)| if n > 0 { num / n as f64 } else { f64::NAN })
        .collect();
    Ok(ShellErrorCurve {
        radii: partition.centers(),
        values,
        metric: MetricKind::Strong,
    })
}

/// Weak shell error: `sum |W1 - RW2| / sum |W1 + RW2| / 2` per shell.
pub fn weak_shell_error(
    w1: &IntensityVolume,
    w2: &IntensityVolume,
    r: Quaternion,
    partition: &ShellPartition,
) -> Result<ShellErrorCurve> {
    check_pair(w1, w2, partition)?;
    let folds = shell_fold(w1, w2, r, partition, |acc, a, b| {
        acc.0 += (a - b).abs();
        acc.1 += (a + b).abs() / 2.0;
    });
    let values = folds
        .iter()
        .map(|&(num, den, _)| if den > 0.0 { num / den } else { f64::NAN })
        .collect();
    Ok(ShellErrorCurve {
        radii: partition.centers(),
        values,
        metric: MetricKind::Weak,
    })
}

/// Ratio curve for bootstrap uncertainty maps:
/// `sum |R_total| / sum |W_a|` per shell.
pub fn bootstrap_shell_error(
    r_total: &IntensityVolume,
    w_a: &IntensityVolume,
    partition: &ShellPartition,
) -> Result<ShellErrorCurve> {
    check_pair(r_total, w_a, partition)?;
    let folds = shell_fold(r_total, w_a, Quaternion::identity(), partition, |acc, a, b| {
        acc.0 += a.abs();
        acc.1 += b.abs();
    });
    let values = folds
        .iter()
        .map(|&(num, den, _)| if den > 0.0 { num / den } else { f64::NAN })
        .collect();
    Ok(ShellErrorCurve {
        radii: partition.centers(),
        values,
        metric: MetricKind::Bootstrap,
    })
}

/// Mean weak error over all shells: the alignment objective.
fn weak_mean_objective(
    w_fixed: &IntensityVolume,
    w_moving: &IntensityVolume,
    r: Quaternion,
    partition: &ShellPartition,
) -> f64 {
    match weak_shell_error(w_fixed, w_moving, r, partition) {
        Ok(curve) => {
            let finite: Vec<f64> = curve.values.iter().cloned().filter(|v| v.is_finite()).collect();
            if finite.is_empty() {
                f64::INFINITY
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            }
        }
        Err(_) => f64::INFINITY,
    }
}

/// Cheap global weak error over a deterministic voxel subsample, used to
/// rank coarse alignment candidates.
fn coarse_objective(
    w_fixed: &IntensityVolume,
    w_moving: &IntensityVolume,
    r: Quaternion,
    sample: &[usize],
) -> f64 {
    let inv = r.conjugate().rotation_matrix();
    let mut num = 0.0;
    let mut den = 0.0;
    for &l in sample {
        let a = w_fixed.values()[l];
        let c = w_fixed.coord_of(l);
        let p = crate::rotations::apply_matrix(&inv, c);
        if let Some(b) = sample_masked(w_moving, p) {
            num += (a - b).abs();
            den += (a + b).abs() / 2.0;
        }
    }
    if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone)]
pub struct AlignOptions {
    /// Refinement order of the coarse rotation grid.
    pub coarse_n: usize,
    /// Upper bound on voxels scored during the coarse stage.
    pub subsample: usize,
    /// Stop refining when the step falls below this angle (radians).
    pub min_step: f64,
    /// ... or when the score improves by less than this.
    pub min_improvement: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            coarse_n: 3,
            subsample: 8192,
            min_step: 0.2_f64.to_radians(),
            min_improvement: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    /// Rotation taking the moving volume onto the fixed one.
    pub rotation: Quaternion,
    /// Mean weak shell error at that rotation.
    pub score: f64,
}

/// Finds the rotation minimizing the mean weak shell error of
/// `(w_fixed, R w_moving)`: coarse scan over a rotation grid, then
/// derivative-free descent on the quaternion sphere from the best
/// candidates. With `restarts > 1`, the refinements are clustered and the
/// best member of the largest basin wins. Identity is always among the
/// candidates, so aligning a volume to itself returns exactly identity.
pub fn align_volumes(
    w_moving: &IntensityVolume,
    w_fixed: &IntensityVolume,
    restarts: usize,
    seed: u64,
    options: &AlignOptions,
) -> Result<Alignment> {
    if w_moving.side() != w_fixed.side() {
        return Err(EmcError::GridMismatch(format!(
            "volume sides differ: {} vs {}",
            w_moving.side(),
            w_fixed.side()
        )));
    }
    let restarts = restarts.max(1);
    let partition = make_shells(w_fixed.side(), 1.0)?;

    // deterministic unmasked subsample for the coarse stage
    let unmasked: Vec<usize> = (0..w_fixed.len())
        .filter(|&l| !w_fixed.is_masked(l) && w_fixed.radius_of(l) >= 1.0)
        .collect();
    let stride = (unmasked.len() / options.subsample).max(1);
    let sample: Vec<usize> = unmasked.into_iter().step_by(stride).collect();

    let coarse = sample_rotation_grid(options.coarse_n)?;
    let mut candidates: Vec<Quaternion> = vec![Quaternion::identity()];
    candidates.extend_from_slice(coarse.quaternions());
    // a few seeded extras so restarts explore beyond the grid
    let extras = random_rotation_set(restarts, seed)?;
    candidates.extend_from_slice(extras.quaternions());

    let mut scored: Vec<(f64, Quaternion)> = candidates
        .par_iter()
        .map(|&q| (coarse_objective(w_fixed, w_moving, q, &sample), q))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    scored.truncate(restarts);

    let refined: Vec<Alignment> = scored
        .into_iter()
        .map(|(_, q)| refine_alignment(w_fixed, w_moving, q, &partition, options))
        .collect();

    // modal basin: largest group of mutually close refined rotations
    let basin_radius = (3.0 * options.min_step).max(0.02);
    let mut best: Option<Alignment> = None;
    let mut best_size = 0usize;
    for a in &refined {
        let mut size = 0usize;
        let mut leader = *a;
        for b in &refined {
            if geodesic_distance(a.rotation, b.rotation) <= basin_radius {
                size += 1;
                if b.score < leader.score {
                    leader = *b;
                }
            }
        }
        if size > best_size || (size == best_size && best.map_or(true, |x| leader.score < x.score))
        {
            best_size = size;
            best = Some(leader);
        }
    }
    Ok(best.expect("at least one candidate"))
}

fn refine_alignment(
    w_fixed: &IntensityVolume,
    w_moving: &IntensityVolume,
    start: Quaternion,
    partition: &ShellPartition,
    options: &AlignOptions,
) -> Alignment {
    let mut current = start;
    let mut score = weak_mean_objective(w_fixed, w_moving, current, partition);
    let mut step = 5.0_f64.to_radians();
    let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    while step >= options.min_step {
        let mut improved = false;
        for axis in axes {
            for sign in [1.0, -1.0] {
                let delta = Quaternion::from_axis_angle(axis, sign * step);
                let cand = delta.product(current).canonical();
                let s = weak_mean_objective(w_fixed, w_moving, cand, partition);
                if s < score - options.min_improvement {
                    current = cand;
                    score = s;
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    Alignment {
        rotation: current,
        score,
    }
}

/// The four hidden-data baseline curves: reconstructions with all (100%)
/// or half (50%) of the noiseless frames inserted at random rotations,
/// compared with the truth.
#[derive(Debug, Clone)]
pub struct HiddenDataBaselines {
    pub r100_strong: ShellErrorCurve,
    pub r100_weak: ShellErrorCurve,
    pub r50_strong: ShellErrorCurve,
    pub r50_weak: ShellErrorCurve,
}

pub fn hidden_data_baselines(
    noiseless_frames: &FrameSet,
    truth: &IntensityVolume,
    seed: u64,
) -> Result<HiddenDataBaselines> {
    let true_rots = noiseless_frames
        .true_rotations()
        .ok_or_else(|| EmcError::MissingVariant("true rotations".into()))?;
    let m = noiseless_frames.n_frames();
    let scrambled = random_rotation_set(m, seed)?;

    let grid = noiseless_frames.detector();
    let side = truth.side();
    let w_cross = compress_rows(
        noiseless_frames.frames().view(),
        scrambled.quaternions(),
        grid,
        side,
    )?;
    let mut half: Vec<Quaternion> = scrambled.quaternions()[..m / 2].to_vec();
    half.extend_from_slice(&true_rots[m / 2..]);
    let w_half = compress_rows(noiseless_frames.frames().view(), &half, grid, side)?;

    let partition = make_shells(side, 1.0)?;
    let id = Quaternion::identity();
    Ok(HiddenDataBaselines {
        r100_strong: strong_shell_error(&w_cross, truth, id, &partition, None)?,
        r100_weak: weak_shell_error(&w_cross, truth, id, &partition)?,
        r50_strong: strong_shell_error(&w_half, truth, id, &partition, None)?,
        r50_weak: weak_shell_error(&w_half, truth, id, &partition)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(side: usize, seed: u64) -> IntensityVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = IntensityVolume::new_filled(side, 0.0).unwrap();
        for x in v.values_mut() {
            *x = rng.gen_range(0.1..5.0);
        }
        v
    }

    #[test]
    fn shells_cover_expected_range() {
        let p = make_shells(64, 1.0).unwrap();
        assert_eq!(p.n_shells(), 31);
        assert_eq!(p.boundaries()[0], 1.0);
        assert_eq!(*p.boundaries().last().unwrap(), 32.0);
        // disjoint: each voxel appears at most once
        let mut seen = std::collections::HashSet::new();
        for u in 0..p.n_shells() {
            for &l in p.members(u) {
                assert!(seen.insert(l), "voxel {l} in two shells");
            }
        }
    }

    #[test]
    fn shells_plus_mask_plus_corners_cover_the_cube() {
        let side = 32;
        let mut vol = IntensityVolume::new_filled(side, 1.0).unwrap();
        vol.mask_center_sphere(4.0);
        let p = make_shells_masked(side, 1.0, Some(vol.masked())).unwrap();
        let in_shells: usize = (0..p.n_shells()).map(|u| p.members(u).len()).sum();
        let masked = vol.masked_count();
        // corners: everything else (r < 1 unmasked or r >= side/2)
        let probe = IntensityVolume::new_filled(side, 0.0).unwrap();
        let mut corners = 0usize;
        for l in 0..probe.len() {
            let r = probe.radius_of(l);
            if !vol.is_masked(l) && !(1.0..16.0).contains(&r) {
                corners += 1;
            }
        }
        assert_eq!(in_shells + masked + corners, side * side * side);
    }

    #[test]
    fn identical_volumes_have_zero_error() {
        let v = random_volume(16, 3);
        let p = make_shells(16, 1.0).unwrap();
        let id = Quaternion::identity();
        let s = strong_shell_error(&v, &v, id, &p, None).unwrap();
        let w = weak_shell_error(&v, &v, id, &p).unwrap();
        for (&a, &b) in s.values.iter().zip(&w.values) {
            assert_eq!(a, 0.0);
            assert_eq!(b, 0.0);
        }
    }

    #[test]
    fn uniform_scaling_gives_the_scalar_formula() {
        // W2 = 3 W1 with positive W1: every shell reads |1-3|/((1+3)/2) = 1
        let v = random_volume(16, 5);
        let scaled = v.map(|x| 3.0 * x);
        let p = make_shells(16, 1.0).unwrap();
        let id = Quaternion::identity();
        let s = strong_shell_error(&v, &scaled, id, &p, None).unwrap();
        let w = weak_shell_error(&v, &scaled, id, &p).unwrap();
        for &a in s.values.iter().chain(w.values.iter()) {
            assert_relative_eq!(a, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn metrics_match_scalar_oracle() {
        let a = random_volume(16, 7);
        let b = random_volume(16, 8);
        let p = make_shells(16, 1.0).unwrap();
        let id = Quaternion::identity();
        let rho = 1e-6 * a.map(f64::abs).unmasked_mean();
        let s = strong_shell_error(&a, &b, id, &p, None).unwrap();
        let w = weak_shell_error(&a, &b, id, &p).unwrap();
        for u in 0..p.n_shells() {
            let mut strong_sum = 0.0;
            let mut num = 0.0;
            let mut den = 0.0;
            let mut n = 0usize;
            for &l in p.members(u) {
                let (x, y) = (a.values()[l], b.values()[l]);
                strong_sum += (x - y).abs() / ((x.abs() + y.abs()) / 2.0).max(rho);
                num += (x - y).abs();
                den += (x + y).abs() / 2.0;
                n += 1;
            }
            if n > 0 {
                assert_relative_eq!(s.values[u], strong_sum / n as f64, epsilon = 1e-12);
                assert_relative_eq!(w.values[u], num / den, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn metrics_are_scale_invariant_and_symmetric_at_identity() {
        let a = random_volume(16, 9);
        let b = random_volume(16, 10);
        let p = make_shells(16, 1.0).unwrap();
        let id = Quaternion::identity();
        let w_ab = weak_shell_error(&a, &b, id, &p).unwrap();
        let w_ba = weak_shell_error(&b, &a, id, &p).unwrap();
        let s_ab = strong_shell_error(&a, &b, id, &p, None).unwrap();
        let s_ba = strong_shell_error(&b, &a, id, &p, None).unwrap();
        for u in 0..p.n_shells() {
            assert_relative_eq!(w_ab.values[u], w_ba.values[u], epsilon = 1e-12);
            assert_relative_eq!(s_ab.values[u], s_ba.values[u], epsilon = 1e-9);
        }
        let a2 = a.map(|x| 17.0 * x);
        let b2 = b.map(|x| 17.0 * x);
        let w_scaled = weak_shell_error(&a2, &b2, id, &p).unwrap();
        let s_scaled = strong_shell_error(&a2, &b2, id, &p, None).unwrap();
        for u in 0..p.n_shells() {
            assert_relative_eq!(w_scaled.values[u], w_ab.values[u], epsilon = 1e-12);
            assert_relative_eq!(s_scaled.values[u], s_ab.values[u], epsilon = 1e-12);
        }
    }

    #[test]
    fn bootstrap_curve_trivial_cases() {
        let w_a = random_volume(16, 11);
        let p = make_shells(16, 1.0).unwrap();
        let zero = w_a.map(|_| 0.0);
        let c = bootstrap_shell_error(&zero, &w_a, &p).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.0 || v.is_nan()));
        let c = bootstrap_shell_error(&w_a, &w_a, &p).unwrap();
        for &v in &c.values {
            if v.is_finite() {
                assert_relative_eq!(v, 1.0, epsilon = 1e-12);
            }
        }
        // scalar oracle on a random pair
        let r = random_volume(16, 12);
        let c = bootstrap_shell_error(&r, &w_a, &p).unwrap();
        for u in 0..p.n_shells() {
            let num: f64 = p.members(u).iter().map(|&l| r.values()[l].abs()).sum();
            let den: f64 = p.members(u).iter().map(|&l| w_a.values()[l].abs()).sum();
            if den > 0.0 {
                assert_relative_eq!(c.values[u], num / den, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn self_alignment_returns_identity() {
        let spec = crate::synthetic::PhantomSpec::reference(16);
        let v = crate::synthetic::build_phantom(&spec).unwrap();
        let a = align_volumes(&v, &v, 1, 0, &AlignOptions::default()).unwrap();
        assert_eq!(a.rotation, Quaternion::identity());
        assert_eq!(a.score, 0.0);
    }

    #[test]
    fn mean_over_physical_rescales_with_side() {
        let curve = ShellErrorCurve {
            radii: vec![10.0, 20.0, 30.0, 40.0],
            values: vec![1.0, 2.0, 3.0, 4.0],
            metric: MetricKind::Weak,
        };
        // side 64: physical == voxel radii
        assert_eq!(curve.mean_over_physical(8.0, 30.0, 64), Some(1.5));
        // side 128: (8, 30) physical is (16, 60) in voxel units
        assert_eq!(curve.mean_over_physical(8.0, 30.0, 128), Some(3.0));
    }
}
