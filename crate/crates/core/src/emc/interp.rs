//! Trilinear gather (expansion) and scatter-average (compression) between
//! the 3D volume grid and rotated detector slices.
//!
//! Both directions share the same weight function, so one expand /
//! compress round trip has the familiar O(h^2) smearing of linear
//! interpolation. Compression accumulates slice chunks in a fixed order,
//! which makes the result bit-reproducible regardless of the worker
//! count.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use super::geometry::{DetectorGrid, IntensityVolume};
use super::steps::SliceStack;
use crate::error::{EmcError, Result};
use crate::rotations::{apply_matrix, Quaternion, RotationSet};

/// Rotations per scatter chunk; chunks merge in index order.
const ROT_CHUNK: usize = 64;
/// Chunks processed concurrently per wave (bounds transient memory).
const WAVE_CHUNKS: usize = 8;

/// Trilinear weights of `point` (centered coordinates) over the enclosing
/// voxels of a cubic grid. Out-of-grid corners are dropped, so interior
/// points get weights summing to 1 and fully exterior points get an empty
/// list. Zero-weight corners are omitted: a point exactly on a voxel
/// center yields a single `(index, 1.0)` pair.
pub fn interpolation_weights(point: [f64; 3], side: usize) -> Vec<(usize, f64)> {
    let mut buf = [(0usize, 0.0f64); 8];
    let n = weights_into(point, side, &mut buf);
    buf[..n].to_vec()
}

#[inline]
pub(crate) fn weights_into(point: [f64; 3], side: usize, out: &mut [(usize, f64); 8]) -> usize {
    let h = (side / 2) as f64;
    let s = side as f64;
    let gx = point[0] + h;
    let gy = point[1] + h;
    let gz = point[2] + h;
    if !(gx > -1.0 && gx < s && gy > -1.0 && gy < s && gz > -1.0 && gz < s) {
        return 0;
    }
    let fx = gx.floor();
    let fy = gy.floor();
    let fz = gz.floor();
    let tx = gx - fx;
    let ty = gy - fy;
    let tz = gz - fz;
    let ix = fx as i64;
    let iy = fy as i64;
    let iz = fz as i64;
    let side_i = side as i64;
    let mut n = 0;
    for dx in 0..2i64 {
        let cx = ix + dx;
        if cx < 0 || cx >= side_i {
            continue;
        }
        let wx = if dx == 0 { 1.0 - tx } else { tx };
        if wx == 0.0 {
            continue;
        }
        for dy in 0..2i64 {
            let cy = iy + dy;
            if cy < 0 || cy >= side_i {
                continue;
            }
            let wy = if dy == 0 { 1.0 - ty } else { ty };
            if wy == 0.0 {
                continue;
            }
            for dz in 0..2i64 {
                let cz = iz + dz;
                if cz < 0 || cz >= side_i {
                    continue;
                }
                let wz = if dz == 0 { 1.0 - tz } else { tz };
                if wz == 0.0 {
                    continue;
                }
                let l = ((cx as usize) * side + cy as usize) * side + cz as usize;
                out[n] = (l, wx * wy * wz);
                n += 1;
            }
        }
    }
    n
}

/// Fills one detector slice by gathering the volume at the rotated pixel
/// coordinates. Masked pixels stay 0.
pub(crate) fn expand_row(volume: &IntensityVolume, q: Quaternion, grid: &DetectorGrid, row: &mut [f64]) {
    let m = q.rotation_matrix();
    let side = volume.side();
    let values = volume.values();
    let mut buf = [(0usize, 0.0f64); 8];
    for (i, out) in row.iter_mut().enumerate() {
        if grid.is_masked(i) {
            *out = 0.0;
            continue;
        }
        let p = apply_matrix(&m, grid.coords()[i]);
        let n = weights_into(p, side, &mut buf);
        let mut acc = 0.0;
        for &(l, w) in &buf[..n] {
            acc += w * values[l];
        }
        *out = acc;
    }
}

/// Expansion step: slices the volume along every rotation.
pub fn expand(volume: &IntensityVolume, rotations: &RotationSet, grid: &DetectorGrid) -> Result<SliceStack> {
    check_sides(volume.side(), grid)?;
    let m_pix = grid.m_pix();
    let mut values = Array2::zeros((rotations.len(), m_pix));
    let quats = rotations.quaternions();
    let chunks: Vec<_> = values
        .axis_chunks_iter_mut(ndarray::Axis(0), ROT_CHUNK)
        .collect();
    chunks.into_par_iter().enumerate().for_each(|(chunk, mut block)| {
        let base = chunk * ROT_CHUNK;
        for (r, mut row) in block.outer_iter_mut().enumerate() {
            expand_row(volume, quats[base + r], grid, row.as_slice_mut().unwrap());
        }
    });
    SliceStack::new(values)
}

/// Partial scatter sums for a set of slices.
pub(crate) struct ScatterAccumulator {
    num: Vec<f64>,
    den: Vec<f64>,
    side: usize,
}

impl ScatterAccumulator {
    pub(crate) fn new(side: usize) -> Self {
        let n = side * side * side;
        ScatterAccumulator {
            num: vec![0.0; n],
            den: vec![0.0; n],
            side,
        }
    }

    /// Scatters one slice into the running sums. Masked pixels are skipped
    /// entirely (they carry no data, not a zero measurement).
    pub(crate) fn scatter_row(&mut self, q: Quaternion, grid: &DetectorGrid, row: ArrayView1<f64>) {
        let m = q.rotation_matrix();
        let mut buf = [(0usize, 0.0f64); 8];
        for (i, &value) in row.iter().enumerate() {
            if grid.is_masked(i) {
                continue;
            }
            let p = apply_matrix(&m, grid.coords()[i]);
            let n = weights_into(p, self.side, &mut buf);
            for &(l, w) in &buf[..n] {
                self.num[l] += w * value;
                self.den[l] += w;
            }
        }
    }

    pub(crate) fn merge(&mut self, other: &ScatterAccumulator) {
        for (a, b) in self.num.iter_mut().zip(&other.num) {
            *a += b;
        }
        for (a, b) in self.den.iter_mut().zip(&other.den) {
            *a += b;
        }
    }

    /// Weighted average; voxels that received no weight are masked.
    pub(crate) fn finish(self) -> IntensityVolume {
        let n = self.num.len();
        let mut values = vec![0.0; n];
        let mut masked = vec![false; n];
        for l in 0..n {
            if self.den[l] > 0.0 {
                values[l] = self.num[l] / self.den[l];
            } else {
                masked[l] = true;
            }
        }
        IntensityVolume::from_parts(self.side, values, masked)
            .expect("accumulator sides are validated")
    }
}

/// Workhorse behind compression: scatter-averages arbitrary rows (model
/// slices or measured frames) at their rotations into a fresh volume.
pub(crate) fn compress_rows(
    rows: ArrayView2<f64>,
    quats: &[Quaternion],
    grid: &DetectorGrid,
    side: usize,
) -> Result<IntensityVolume> {
    check_sides(side, grid)?;
    if rows.nrows() != quats.len() {
        return Err(EmcError::GridMismatch(format!(
            "{} slices for {} rotations",
            rows.nrows(),
            quats.len()
        )));
    }
    if rows.ncols() != grid.m_pix() {
        return Err(EmcError::GridMismatch(format!(
            "slices have {} pixels, detector has {}",
            rows.ncols(),
            grid.m_pix()
        )));
    }
    let n_rows = rows.nrows();
    let chunk_starts: Vec<usize> = (0..n_rows).step_by(ROT_CHUNK).collect();
    let mut acc = ScatterAccumulator::new(side);
    for wave in chunk_starts.chunks(WAVE_CHUNKS) {
        let partials: Vec<ScatterAccumulator> = wave
            .par_iter()
            .map(|&start| {
                let end = (start + ROT_CHUNK).min(n_rows);
                let mut part = ScatterAccumulator::new(side);
                for r in start..end {
                    part.scatter_row(quats[r], grid, rows.row(r));
                }
                part
            })
            .collect();
        for p in &partials {
            acc.merge(p);
        }
    }
    Ok(acc.finish())
}

/// Compression step: inserts the slices back into the volume as a
/// weight-normalized average. Voxels with zero accumulated weight come
/// back masked (query via `masked_count`); that is a reported condition,
/// not a failure.
pub fn compress(
    slices: &SliceStack,
    rotations: &RotationSet,
    grid: &DetectorGrid,
    side: usize,
) -> Result<IntensityVolume> {
    compress_rows(slices.values().view(), rotations.quaternions(), grid, side)
}

/// One expand-then-compress round trip (`c . e . W`), streamed so the full
/// slice stack is never materialized. This is the smearing operator used
/// both by validation and by the bootstrap smearing estimate.
pub fn roundtrip_smear(
    volume: &IntensityVolume,
    quats: &[Quaternion],
    grid: &DetectorGrid,
) -> Result<IntensityVolume> {
    check_sides(volume.side(), grid)?;
    let side = volume.side();
    let m_pix = grid.m_pix();
    let n_rows = quats.len();
    let chunk_starts: Vec<usize> = (0..n_rows).step_by(ROT_CHUNK).collect();
    let mut acc = ScatterAccumulator::new(side);
    for wave in chunk_starts.chunks(WAVE_CHUNKS) {
        let partials: Vec<ScatterAccumulator> = wave
            .par_iter()
            .map(|&start| {
                let end = (start + ROT_CHUNK).min(n_rows);
                let mut part = ScatterAccumulator::new(side);
                let mut row = vec![0.0; m_pix];
                for r in start..end {
                    expand_row(volume, quats[r], grid, &mut row);
                    part.scatter_row(quats[r], grid, ndarray::aview1(&row));
                }
                part
            })
            .collect();
        for p in &partials {
            acc.merge(p);
        }
    }
    Ok(acc.finish())
}

fn check_sides(side: usize, grid: &DetectorGrid) -> Result<()> {
    if side != grid.side() {
        return Err(EmcError::GridMismatch(format!(
            "volume side {side} vs detector side {}",
            grid.side()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn volume_from_fn(side: usize, f: impl Fn(f64, f64, f64) -> f64) -> IntensityVolume {
        let mut v = IntensityVolume::new_filled(side, 0.0).unwrap();
        for l in 0..v.len() {
            let c = v.coord_of(l);
            v.values_mut()[l] = f(c[0], c[1], c[2]);
        }
        v
    }

    #[test]
    fn weight_on_voxel_center_is_single_pair() {
        let w = interpolation_weights([1.0, -2.0, 0.0], 8);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].1, 1.0);
        let v = IntensityVolume::new_filled(8, 0.0).unwrap();
        assert_eq!(w[0].0, v.index(5, 2, 4));
    }

    #[test]
    fn weight_at_cell_center_is_eight_eighths() {
        let w = interpolation_weights([0.5, 0.5, 0.5], 8);
        assert_eq!(w.len(), 8);
        for &(_, wi) in &w {
            assert_relative_eq!(wi, 0.125, epsilon = 1e-15);
        }
    }

    #[test]
    fn weights_reproduce_affine_fields_exactly() {
        // trilinear interpolation is exact on X + 2Y + 3Z
        let side = 8;
        let v = volume_from_fn(side, |x, y, z| x + 2.0 * y + 3.0 * z);
        for point in [
            [0.3, -1.7, 2.2],
            [-3.9, 3.0, 0.01],
            [2.5, 2.5, -2.5],
            [0.0, 0.0, 0.0],
        ] {
            let expected = point[0] + 2.0 * point[1] + 3.0 * point[2];
            let got: f64 = interpolation_weights(point, side)
                .iter()
                .map(|&(l, w)| w * v.values()[l])
                .sum();
            assert_relative_eq!(got, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn exterior_points_get_no_weights() {
        assert!(interpolation_weights([100.0, 0.0, 0.0], 8).is_empty());
        assert!(interpolation_weights([0.0, -5.1, 0.0], 8).is_empty());
    }

    #[test]
    fn expand_identity_reads_central_plane() {
        let side = 8;
        let mut v = IntensityVolume::new_filled(side, 0.0).unwrap();
        let lit = v.index(2, 5, side / 2); // z = 0 plane
        v.values_mut()[lit] = 7.5;
        let grid = DetectorGrid::new(side, 0.0).unwrap();
        let set = RotationSet::uniform(vec![Quaternion::identity()]).unwrap();
        let slices = expand(&v, &set, &grid).unwrap();
        let pix = 2 * side + 5;
        assert_eq!(slices.values()[(0, pix)], 7.5);
        let total: f64 = slices.values().row(0).sum();
        assert_eq!(total, 7.5);
    }

    #[test]
    fn expand_constant_volume_gives_constant_slices() {
        let side = 8;
        let v = IntensityVolume::new_filled(side, 3.25).unwrap();
        let grid = DetectorGrid::new(side, 2.0).unwrap();
        let q = Quaternion::from_axis_angle([1.0, 0.4, -0.2], 0.83);
        let set = RotationSet::uniform(vec![q]).unwrap();
        let slices = expand(&v, &set, &grid).unwrap();
        for (i, &w) in slices.values().row(0).iter().enumerate() {
            if grid.is_masked(i) {
                assert_eq!(w, 0.0);
            } else {
                // pixels whose rotated coordinate stays interior see the
                // exact constant; near the cube boundary weights are cut
                let p = q.apply(grid.coords()[i]);
                let interior = p.iter().all(|&c| c > -3.0 && c < 2.0);
                if interior {
                    assert_relative_eq!(w, 3.25, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn expand_matches_naive_gather_oracle() {
        let side = 8;
        let v = volume_from_fn(side, |x, y, z| {
            (x * 0.7).sin().abs() + 0.1 * y * y + (z + 5.1).ln()
        });
        let grid = DetectorGrid::new(side, 1.5).unwrap();
        let q = Quaternion::from_axis_angle([0.3, -1.0, 0.77], 1.234);
        let set = RotationSet::uniform(vec![q]).unwrap();
        let slices = expand(&v, &set, &grid).unwrap();
        // independent naive implementation
        let m = q.rotation_matrix();
        for i in 0..grid.m_pix() {
            let expected = if grid.is_masked(i) {
                0.0
            } else {
                let c = grid.coords()[i];
                let p = [
                    m[0][0] * c[0] + m[0][1] * c[1] + m[0][2] * c[2],
                    m[1][0] * c[0] + m[1][1] * c[1] + m[1][2] * c[2],
                    m[2][0] * c[0] + m[2][1] * c[1] + m[2][2] * c[2],
                ];
                interpolation_weights(p, side)
                    .iter()
                    .map(|&(l, w)| w * v.values()[l])
                    .sum()
            };
            assert_relative_eq!(slices.values()[(0, i)], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn compress_single_identity_slice_fills_central_plane() {
        let side = 8;
        let grid = DetectorGrid::new(side, 0.0).unwrap();
        let mut rows = Array2::zeros((1, grid.m_pix()));
        for i in 0..grid.m_pix() {
            rows[(0, i)] = i as f64 + 1.0;
        }
        let set = RotationSet::uniform(vec![Quaternion::identity()]).unwrap();
        let stack = SliceStack::new(rows).unwrap();
        let vol = compress(&stack, &set, &grid, side).unwrap();
        let mut covered = 0;
        for l in 0..vol.len() {
            if !vol.is_masked(l) {
                covered += 1;
            }
        }
        assert_eq!(covered, side * side); // exactly the z = 0 plane
        for px in 0..side {
            for py in 0..side {
                let l = vol.index(px, py, side / 2);
                assert_relative_eq!(
                    vol.values()[l],
                    (px * side + py) as f64 + 1.0,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn compress_constant_slices_cancel_weights() {
        let side = 8;
        let grid = DetectorGrid::new(side, 1.0).unwrap();
        let quats: Vec<Quaternion> = (0..24)
            .map(|i| Quaternion::from_axis_angle([1.0, 0.3 * i as f64, 0.7], 0.37 * i as f64))
            .collect();
        let rows = Array2::from_elem((quats.len(), grid.m_pix()), 4.5);
        // masked pixels must carry zero
        let mut rows = rows;
        for mut row in rows.outer_iter_mut() {
            for i in 0..grid.m_pix() {
                if grid.is_masked(i) {
                    row[i] = 0.0;
                }
            }
        }
        let set = RotationSet::uniform(quats).unwrap();
        let vol = compress(&SliceStack::new(rows).unwrap(), &set, &grid, side).unwrap();
        for l in 0..vol.len() {
            if !vol.is_masked(l) {
                assert_relative_eq!(vol.values()[l], 4.5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn compress_is_deterministic_across_worker_counts() {
        let side = 8;
        let grid = DetectorGrid::new(side, 0.0).unwrap();
        let set = crate::rotations::random_rotation_set(200, 5).unwrap();
        let v = volume_from_fn(side, |x, y, z| 1.0 + 0.01 * (x + y + z).abs());
        let slices = expand(&v, &set, &grid).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| compress(&slices, &set, &grid, side).unwrap())
        };
        let a = run(1);
        let b = run(2);
        assert_eq!(a.values(), b.values());
        assert_eq!(a.masked(), b.masked());
    }

    #[test]
    fn roundtrip_matches_expand_then_compress() {
        let side = 8;
        let grid = DetectorGrid::new(side, 0.0).unwrap();
        let set = crate::rotations::random_rotation_set(50, 11).unwrap();
        let v = volume_from_fn(side, |x, y, z| (x - 0.5).abs() + (y * z).abs() + 1.0);
        let slices = expand(&v, &set, &grid).unwrap();
        let direct = compress(&slices, &set, &grid, side).unwrap();
        let streamed = roundtrip_smear(&v, set.quaternions(), &grid).unwrap();
        for l in 0..direct.len() {
            assert_eq!(direct.is_masked(l), streamed.is_masked(l));
            assert_relative_eq!(direct.values()[l], streamed.values()[l], epsilon = 1e-12);
        }
    }
}
