//! Grids shared by the whole pipeline: the cubic intensity volume and the
//! flat detector.
//!
//! Both use centered integer coordinates: a grid of side `s` (even) has
//! voxel / pixel centers at `i - s/2` for `i in 0..s`, so the origin is a
//! grid point and the coordinate range is `[-s/2, s/2 - 1]`. The linear
//! index convention is `(x * side + y) * side + z` for volumes and
//! `x * side + y` for detector pixels (detector lies in the `z = 0`
//! plane).

use crate::error::{EmcError, Result};

/// Cubic grid of Fourier intensities with a per-voxel exclusion mask.
///
/// Masked voxels (beamstop region, or voxels never covered by the
/// compression step) carry value 0 and are excluded from likelihood sums,
/// shell metrics and normalization. Model volumes are nonnegative; the
/// same container also holds signed derived maps (bias, smearing), which
/// is why the constructor does not force a sign.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityVolume {
    side: usize,
    values: Vec<f64>,
    masked: Vec<bool>,
}

impl IntensityVolume {
    pub fn new_filled(side: usize, value: f64) -> Result<Self> {
        check_side(side)?;
        Ok(IntensityVolume {
            side,
            values: vec![value; side * side * side],
            masked: vec![false; side * side * side],
        })
    }

    pub fn from_parts(side: usize, values: Vec<f64>, masked: Vec<bool>) -> Result<Self> {
        check_side(side)?;
        let n = side * side * side;
        if values.len() != n || masked.len() != n {
            return Err(EmcError::GridMismatch(format!(
                "volume of side {side} needs {n} voxels, got {} values / {} mask entries",
                values.len(),
                masked.len()
            )));
        }
        Ok(IntensityVolume {
            side,
            values,
            masked,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.side + y) * self.side + z
    }

    /// Centered coordinate of voxel `l`.
    #[inline]
    pub fn coord_of(&self, l: usize) -> [f64; 3] {
        let s = self.side;
        let h = (s / 2) as f64;
        let z = l % s;
        let y = (l / s) % s;
        let x = l / (s * s);
        [x as f64 - h, y as f64 - h, z as f64 - h]
    }

    /// Euclidean distance of voxel `l` from the grid center, voxel units.
    #[inline]
    pub fn radius_of(&self, l: usize) -> f64 {
        let c = self.coord_of(l);
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    #[inline]
    pub fn is_masked(&self, l: usize) -> bool {
        self.masked[l]
    }

    pub fn set_masked(&mut self, l: usize, m: bool) {
        self.masked[l] = m;
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Mean of the unmasked voxel values; 0 for a fully-masked volume.
    pub fn unmasked_mean(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (v, &m) in self.values.iter().zip(&self.masked) {
            if !m {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Zeroes and masks every voxel with center closer than `radius` to
    /// the grid center (voxel units).
    pub fn mask_center_sphere(&mut self, radius: f64) {
        if radius <= 0.0 {
            return;
        }
        for l in 0..self.values.len() {
            if self.radius_of(l) < radius {
                self.values[l] = 0.0;
                self.masked[l] = true;
            }
        }
    }

    /// Voxelwise combination with a union mask.
    pub fn map2(&self, other: &IntensityVolume, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.side != other.side {
            return Err(EmcError::GridMismatch(format!(
                "volume sides differ: {} vs {}",
                self.side, other.side
            )));
        }
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let masked: Vec<bool> = self
            .masked
            .iter()
            .zip(&other.masked)
            .map(|(&a, &b)| a || b)
            .collect();
        let mut out = IntensityVolume::from_parts(self.side, values, masked)?;
        for l in 0..out.values.len() {
            if out.masked[l] {
                out.values[l] = 0.0;
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for (v, &m) in out.values.iter_mut().zip(&self.masked) {
            *v = if m { 0.0 } else { f(*v) };
        }
        out
    }
}

fn check_side(side: usize) -> Result<()> {
    if side < 2 || side % 2 != 0 {
        return Err(EmcError::Config(format!(
            "grid side must be even and >= 2, got {side}"
        )));
    }
    Ok(())
}

/// `sum_l |a~ - b~|` with both volumes normalized to unit mean; means and
/// sum run over the voxels unmasked in both, so a mask difference (e.g.
/// an unmasked initial guess against a compressed volume) does not skew
/// the scale.
pub(crate) fn normalized_l1_change(a: &IntensityVolume, b: &IntensityVolume) -> f64 {
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    let mut n = 0usize;
    for l in 0..a.values().len() {
        if !a.is_masked(l) && !b.is_masked(l) {
            sum_a += a.values()[l];
            sum_b += b.values()[l];
            n += 1;
        }
    }
    if n == 0 {
        return 0.0;
    }
    let ma = sum_a / n as f64;
    let mb = sum_b / n as f64;
    let sa = if ma > 0.0 { 1.0 / ma } else { 1.0 };
    let sb = if mb > 0.0 { 1.0 / mb } else { 1.0 };
    let mut total = 0.0;
    for l in 0..a.values().len() {
        if !a.is_masked(l) && !b.is_masked(l) {
            total += (a.values()[l] * sa - b.values()[l] * sb).abs();
        }
    }
    total
}

/// Flat square detector in the `z = 0` plane with a circular beamstop
/// mask around the center.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorGrid {
    side: usize,
    mask_radius: f64,
    coords: Vec<[f64; 3]>,
    masked: Vec<bool>,
    n_unmasked: usize,
}

impl DetectorGrid {
    /// Pixels with center distance `< mask_radius` (voxel units) from the
    /// detector center are masked. `mask_radius = 0` masks nothing.
    pub fn new(side: usize, mask_radius: f64) -> Result<Self> {
        check_side(side)?;
        if !(mask_radius >= 0.0) {
            return Err(EmcError::Config(format!(
                "mask radius must be >= 0, got {mask_radius}"
            )));
        }
        let h = (side / 2) as f64;
        let mut coords = Vec::with_capacity(side * side);
        let mut masked = Vec::with_capacity(side * side);
        for px in 0..side {
            for py in 0..side {
                let x = px as f64 - h;
                let y = py as f64 - h;
                coords.push([x, y, 0.0]);
                masked.push((x * x + y * y).sqrt() < mask_radius);
            }
        }
        let n_unmasked = masked.iter().filter(|&&m| !m).count();
        Ok(DetectorGrid {
            side,
            mask_radius,
            coords,
            masked,
            n_unmasked,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn mask_radius(&self) -> f64 {
        self.mask_radius
    }

    pub fn m_pix(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    #[inline]
    pub fn is_masked(&self, i: usize) -> bool {
        self.masked[i]
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn n_unmasked(&self) -> usize {
        self.n_unmasked
    }
}
