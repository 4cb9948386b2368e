//! Discretization of the rotation group.
//!
//! Rotations are unit quaternions (scalar-first). Because `q` and `-q` map
//! to the same rotation matrix, every quaternion produced here is
//! canonicalized to the half-sphere with `w >= 0` so that sets can be
//! compared and deduplicated.
//!
//! Two samplings are provided: a quasi-uniform grid obtained by refining
//! the 600-cell tessellation of the unit 3-sphere (`sample_rotation_grid`,
//! count `10 (5 n^3 + n)`), and i.i.d. uniform draws
//! (`random_rotation_set`).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{EmcError, Result};

const SIGN_EPS: f64 = 1e-9;

/// Unit quaternion, scalar-first `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    /// Normalizes the components to unit length. Returns `None` for a
    /// near-zero input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n2 = w * w + x * x + y * y + z * z;
        if n2 < 1e-24 || !n2.is_finite() {
            return None;
        }
        let inv = 1.0 / n2.sqrt();
        Some(Quaternion {
            w: w * inv,
            x: x * inv,
            y: y * inv,
            z: z * inv,
        })
    }

    pub fn identity() -> Self {
        Quaternion {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Wraps components that are already unit-norm (within 1e-9) without
    /// renormalizing, preserving the exact bit pattern — used when reading
    /// persisted sets back.
    pub fn from_unit(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n2 = w * w + x * x + y * y + z * z;
        if (n2 - 1.0).abs() > 2e-9 {
            return None;
        }
        Some(Quaternion { w, x, y, z })
    }

    /// Rotation by `angle` (radians) about `axis`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < 1e-300 {
            return Quaternion::identity();
        }
        let (s, c) = ((angle / 2.0).sin(), (angle / 2.0).cos());
        Quaternion {
            w: c,
            x: s * axis[0] / n,
            y: s * axis[1] / n,
            z: s * axis[2] / n,
        }
    }

    /// Flips the sign so that `w > 0` (ties broken on x, then y, then z).
    /// Both signs represent the same rotation.
    pub fn canonical(self) -> Self {
        let flip = if self.w > SIGN_EPS {
            false
        } else if self.w < -SIGN_EPS {
            true
        } else if self.x > SIGN_EPS {
            false
        } else if self.x < -SIGN_EPS {
            true
        } else if self.y > SIGN_EPS {
            false
        } else if self.y < -SIGN_EPS {
            true
        } else {
            self.z < 0.0
        };
        if flip {
            Quaternion {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        }
    }

    pub fn dot(self, other: Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Hamilton product; `(q2 * q1)` is the rotation "q1 first, then q2".
    pub fn product(self, rhs: Quaternion) -> Quaternion {
        let (w1, x1, y1, z1) = (self.w, self.x, self.y, self.z);
        let (w2, x2, y2, z2) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Quaternion {
            w: w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            x: w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            y: w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            z: w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        }
    }

    pub fn conjugate(self) -> Quaternion {
        Quaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Row-major active rotation matrix.
    pub fn rotation_matrix(self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    pub fn apply(self, v: [f64; 3]) -> [f64; 3] {
        apply_matrix(&self.rotation_matrix(), v)
    }
}

#[inline]
pub(crate) fn apply_matrix(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Applies the rotation of `q` to every coordinate. Norm-preserving.
pub fn rotate_coordinates(q: Quaternion, coords: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let m = q.rotation_matrix();
    coords.iter().map(|&v| apply_matrix(&m, v)).collect()
}

/// Geodesic distance on SO(3): `2 acos(|<q1, q2>|)`, in `[0, pi]`.
///
/// Antipodal quaternions are the same rotation, hence the absolute value.
pub fn geodesic_distance(q1: Quaternion, q2: Quaternion) -> f64 {
    2.0 * q1.dot(q2).abs().clamp(0.0, 1.0).acos()
}

/// A discretized rotation space: unit quaternions with prior weights
/// summing to one.
#[derive(Debug, Clone)]
pub struct RotationSet {
    quaternions: Vec<Quaternion>,
    weights: Vec<f64>,
}

impl RotationSet {
    /// Builds a set with explicit weights. Weights must be positive and
    /// sum to 1 within 1e-12.
    pub fn new(quaternions: Vec<Quaternion>, weights: Vec<f64>) -> Result<Self> {
        if quaternions.is_empty() {
            return Err(EmcError::Config("empty rotation set".into()));
        }
        if quaternions.len() != weights.len() {
            return Err(EmcError::Config(format!(
                "{} rotations but {} weights",
                quaternions.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(EmcError::Config("rotation weights must be positive".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(EmcError::Config(format!(
                "rotation weights sum to {sum}, expected 1"
            )));
        }
        for (i, q) in quaternions.iter().enumerate() {
            if (q.norm() - 1.0).abs() > 1e-12 {
                return Err(EmcError::Config(format!(
                    "quaternion {i} is not unit-norm"
                )));
            }
        }
        Ok(RotationSet {
            quaternions,
            weights,
        })
    }

    /// Uniform weights `1 / M`.
    pub fn uniform(quaternions: Vec<Quaternion>) -> Result<Self> {
        let m = quaternions.len();
        if m == 0 {
            return Err(EmcError::Config("empty rotation set".into()));
        }
        let w = 1.0 / m as f64;
        // Distribute the rounding remainder on the last weight so the sum
        // is exactly 1 in floating point.
        let mut weights = vec![w; m];
        let sum: f64 = weights.iter().sum();
        weights[m - 1] += 1.0 - sum;
        RotationSet::new(quaternions, weights)
    }

    pub fn len(&self) -> usize {
        self.quaternions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quaternions.is_empty()
    }

    pub fn quaternions(&self) -> &[Quaternion] {
        &self.quaternions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mean over grid points of the geodesic distance to their nearest
    /// neighbor. Brute force, O(M^2); intended for validation at desk
    /// scale.
    pub fn mean_nearest_neighbor_spacing(&self) -> f64 {
        let quats = &self.quaternions;
        let total: f64 = quats
            .par_iter()
            .enumerate()
            .map(|(i, &q)| {
                let mut best = f64::INFINITY;
                for (j, &p) in quats.iter().enumerate() {
                    if i != j {
                        // max |dot| <=> min geodesic distance
                        let d = q.dot(p).abs();
                        let cand = 2.0 * d.clamp(0.0, 1.0).acos();
                        if cand < best {
                            best = cand;
                        }
                    }
                }
                best
            })
            .sum();
        total / quats.len() as f64
    }

    /// Index of the grid rotation nearest to `q` (geodesic).
    pub fn nearest(&self, q: Quaternion) -> usize {
        let mut best = 0usize;
        let mut best_dot = -1.0;
        for (j, &p) in self.quaternions.iter().enumerate() {
            let d = q.dot(p).abs();
            if d > best_dot {
                best_dot = d;
                best = j;
            }
        }
        best
    }
}

/// Number of rotations produced by `sample_rotation_grid(n)`.
pub fn grid_rotation_count(n: usize) -> usize {
    10 * (5 * n * n * n + n)
}

/// Quasi-uniform rotation grid: the vertices of the 600-cell plus the
/// edge / face / cell barycentric refinements of order `n`, projected to
/// the unit 3-sphere and deduplicated over the double cover. Produces
/// exactly `10 (5 n^3 + n)` rotations with uniform weights.
pub fn sample_rotation_grid(n: usize) -> Result<RotationSet> {
    if n == 0 {
        return Err(EmcError::Config("grid refinement must be >= 1".into()));
    }
    let vertices = cell600_vertices();
    let (edges, faces, cells) = cell600_complex(&vertices);

    let mut points: Vec<[f64; 4]> = Vec::with_capacity(2 * grid_rotation_count(n));
    points.extend_from_slice(&vertices);
    for &(a, b) in &edges {
        let (va, vb) = (vertices[a], vertices[b]);
        for i in 1..n {
            points.push(combine(&[(i, va), (n - i, vb)]));
        }
    }
    for &(a, b, c) in &faces {
        let (va, vb, vc) = (vertices[a], vertices[b], vertices[c]);
        for i in 1..n {
            for j in 1..(n - i) {
                let k = n - i - j;
                if k >= 1 {
                    points.push(combine(&[(i, va), (j, vb), (k, vc)]));
                }
            }
        }
    }
    for &(a, b, c, d) in &cells {
        let (va, vb, vc, vd) = (vertices[a], vertices[b], vertices[c], vertices[d]);
        for i in 1..n {
            for j in 1..(n - i) {
                for k in 1..(n - i - j) {
                    let l = n - i - j - k;
                    if l >= 1 {
                        points.push(combine(&[(i, va), (j, vb), (k, vc), (l, vd)]));
                    }
                }
            }
        }
    }

    // Collapse the antipodal double cover: canonical sign, then exact
    // dedup on coordinates quantized far below the grid spacing.
    let mut keyed: Vec<([i64; 4], Quaternion)> = points
        .into_iter()
        .map(|p| {
            let q = Quaternion::new(p[0], p[1], p[2], p[3])
                .expect("refined 600-cell point has nonzero norm")
                .canonical();
            (quantize(q), q)
        })
        .collect();
    keyed.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    keyed.dedup_by(|a, b| a.0 == b.0);

    let expected = grid_rotation_count(n);
    debug_assert_eq!(keyed.len(), expected, "600-cell refinement count");
    if keyed.len() != expected {
        return Err(EmcError::Config(format!(
            "600-cell refinement produced {} rotations, expected {}",
            keyed.len(),
            expected
        )));
    }
    RotationSet::uniform(keyed.into_iter().map(|(_, q)| q).collect())
}

fn combine(terms: &[(usize, [f64; 4])]) -> [f64; 4] {
    let mut p = [0.0; 4];
    for &(c, v) in terms {
        for (pi, vi) in p.iter_mut().zip(v.iter()) {
            *pi += c as f64 * vi;
        }
    }
    p
}

fn quantize(q: Quaternion) -> [i64; 4] {
    const SCALE: f64 = 1e7;
    [
        (q.w * SCALE).round() as i64,
        (q.x * SCALE).round() as i64,
        (q.y * SCALE).round() as i64,
        (q.z * SCALE).round() as i64,
    ]
}

/// The 120 vertices of the unit-circumradius 600-cell.
fn cell600_vertices() -> Vec<[f64; 4]> {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut v: Vec<[f64; 4]> = Vec::with_capacity(120);
    for axis in 0..4 {
        for sign in [1.0, -1.0] {
            let mut p = [0.0; 4];
            p[axis] = sign;
            v.push(p);
        }
    }
    for sw in [0.5, -0.5] {
        for sx in [0.5, -0.5] {
            for sy in [0.5, -0.5] {
                for sz in [0.5, -0.5] {
                    v.push([sw, sx, sy, sz]);
                }
            }
        }
    }
    // Even permutations of (phi, 1, 1/phi, 0) / 2 with free signs on the
    // nonzero entries.
    let base = [phi / 2.0, 0.5, 1.0 / (2.0 * phi), 0.0];
    for perm in even_permutations() {
        for signs in 0..8u32 {
            let mut p = [0.0; 4];
            for (slot, &src) in perm.iter().enumerate() {
                let mut val = base[src];
                if src < 3 && (signs >> src) & 1 == 1 {
                    val = -val;
                }
                p[slot] = val;
            }
            v.push(p);
        }
    }
    debug_assert_eq!(v.len(), 120);
    v
}

/// The 12 even permutations of 4 indices.
fn even_permutations() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(12);
    let mut idx = [0usize, 1, 2, 3];
    permute(&mut idx, 0, &mut out);
    out
}

fn permute(idx: &mut [usize; 4], k: usize, out: &mut Vec<[usize; 4]>) {
    if k == 4 {
        if parity(idx) == 0 {
            out.push(*idx);
        }
        return;
    }
    for i in k..4 {
        idx.swap(k, i);
        permute(idx, k + 1, out);
        idx.swap(k, i);
    }
}

fn parity(idx: &[usize; 4]) -> usize {
    let mut inv = 0;
    for i in 0..4 {
        for j in (i + 1)..4 {
            if idx[i] > idx[j] {
                inv += 1;
            }
        }
    }
    inv % 2
}

/// Edges, triangular faces and tetrahedral cells of the 600-cell.
/// Adjacent unit vertices have inner product phi/2 ~ 0.809.
fn cell600_complex(
    vertices: &[[f64; 4]],
) -> (
    Vec<(usize, usize)>,
    Vec<(usize, usize, usize)>,
    Vec<(usize, usize, usize, usize)>,
) {
    let n = vertices.len();
    let adjacent = |a: usize, b: usize| -> bool {
        let d: f64 = (0..4).map(|i| vertices[a][i] * vertices[b][i]).sum();
        d > 0.7
    };
    let mut edges = Vec::with_capacity(720);
    for a in 0..n {
        for b in (a + 1)..n {
            if adjacent(a, b) {
                edges.push((a, b));
            }
        }
    }
    let mut faces = Vec::with_capacity(1200);
    for &(a, b) in &edges {
        for c in (b + 1)..n {
            if adjacent(a, c) && adjacent(b, c) {
                faces.push((a, b, c));
            }
        }
    }
    let mut cells = Vec::with_capacity(600);
    for &(a, b, c) in &faces {
        for d in (c + 1)..n {
            if adjacent(a, d) && adjacent(b, d) && adjacent(c, d) {
                cells.push((a, b, c, d));
            }
        }
    }
    debug_assert_eq!(edges.len(), 720);
    debug_assert_eq!(faces.len(), 1200);
    debug_assert_eq!(cells.len(), 600);
    (edges, faces, cells)
}

/// `count` i.i.d. uniform rotations (normalized Gaussian 4-vectors),
/// deterministic per seed. Uniform weights.
pub fn random_rotation_set(count: usize, seed: u64) -> Result<RotationSet> {
    if count == 0 {
        return Err(EmcError::Config("rotation count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x526f74); // rotation stream tag
    let mut quats = Vec::with_capacity(count);
    while quats.len() < count {
        let g: [f64; 4] = [
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
            rng.sample(rand_distr::StandardNormal),
        ];
        if let Some(q) = Quaternion::new(g[0], g[1], g[2], g[3]) {
            quats.push(q.canonical());
        }
    }
    RotationSet::uniform(quats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grid_counts_match_formula() {
        for n in 1..=4 {
            let set = sample_rotation_grid(n).unwrap();
            assert_eq!(set.len(), grid_rotation_count(n), "n = {n}");
        }
        assert_eq!(grid_rotation_count(1), 60);
        assert_eq!(grid_rotation_count(20), 400_200);
    }

    #[test]
    fn grid_weights_normalized_and_unit_norm() {
        let set = sample_rotation_grid(3).unwrap();
        let sum: f64 = set.weights().iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        for q in set.quaternions() {
            assert!((q.norm() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn grid_has_no_double_cover_duplicates() {
        let set = sample_rotation_grid(2).unwrap();
        let m = set.len();
        for i in 0..m {
            for j in (i + 1)..m {
                let d = geodesic_distance(set.quaternions()[i], set.quaternions()[j]);
                assert!(d > 1e-6, "rotations {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn random_set_deterministic_and_seed_sensitive() {
        let a = random_rotation_set(1000, 7).unwrap();
        let b = random_rotation_set(1000, 7).unwrap();
        for (qa, qb) in a.quaternions().iter().zip(b.quaternions()) {
            assert_eq!(qa, qb);
        }
        let c = random_rotation_set(2, 8).unwrap();
        let d = random_rotation_set(2, 9).unwrap();
        assert!(c
            .quaternions()
            .iter()
            .zip(d.quaternions())
            .any(|(x, y)| x != y));
    }

    #[test]
    fn random_set_is_haar_uniform_in_the_mean() {
        // The Haar-mean rotation matrix is zero; with 1e5 draws the entry
        // standard error is ~0.002, so 0.02 is a ten-sigma band.
        let set = random_rotation_set(100_000, 42).unwrap();
        let mut mean = [[0.0f64; 3]; 3];
        for q in set.quaternions() {
            let m = q.rotation_matrix();
            for r in 0..3 {
                for c in 0..3 {
                    mean[r][c] += m[r][c];
                }
            }
        }
        for row in &mut mean {
            for e in row.iter_mut() {
                *e /= 100_000.0;
                assert!(e.abs() < 0.02, "matrix mean entry {e}");
            }
        }
    }

    #[test]
    fn rotate_identity_and_axis() {
        let coords = vec![[1.0, 0.0, 0.0], [0.3, -2.0, 5.5]];
        let out = rotate_coordinates(Quaternion::identity(), &coords);
        assert_eq!(out, coords);

        let q = Quaternion::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let out = rotate_coordinates(q, &[[1.0, 0.0, 0.0]]);
        assert_relative_eq!(out[0][0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(out[0][1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(out[0][2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_composition_matches_quaternion_product() {
        let q1 = Quaternion::from_axis_angle([1.0, 2.0, -0.5], 0.7);
        let q2 = Quaternion::from_axis_angle([-0.3, 1.0, 2.0], 1.9);
        let v = [0.4, -1.2, 2.5];
        let seq = q2.apply(q1.apply(v));
        let prod = q2.product(q1).apply(v);
        for i in 0..3 {
            assert_relative_eq!(seq[i], prod[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_is_isometry() {
        let q = Quaternion::from_axis_angle([0.2, -1.0, 0.8], 2.4);
        for v in [[3.0, 4.0, 0.0], [-1.0, 2.0, 7.0], [1e-3, 0.0, 1e3]] {
            let r = q.apply(v);
            let n0 = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let n1 = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            assert_relative_eq!(n0, n1, epsilon = 1e-12 * n0.max(1.0));
        }
    }

    #[test]
    fn geodesic_distance_cases() {
        let q = Quaternion::from_axis_angle([0.0, 1.0, 0.0], 0.9);
        assert_eq!(geodesic_distance(q, q), 0.0);
        let neg = Quaternion::new(-q.w, -q.x, -q.y, -q.z).unwrap();
        assert!(geodesic_distance(q, neg) < 1e-7);
        let r = Quaternion::from_axis_angle([1.0, 0.0, 0.0], std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(
            geodesic_distance(Quaternion::identity(), r),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn canonical_sign_is_stable() {
        let q = Quaternion::new(-0.5, 0.5, 0.5, 0.5).unwrap().canonical();
        assert!(q.w > 0.0);
        let zero_w = Quaternion::new(0.0, -1.0, 0.0, 0.0).unwrap().canonical();
        assert!(zero_w.x > 0.0);
    }

    #[test]
    fn uniform_weights_sum_exactly_to_one() {
        for m in [1usize, 3, 7, 60, 1000] {
            let quats = vec![Quaternion::identity(); m];
            let set = RotationSet::uniform(quats).unwrap();
            let sum: f64 = set.weights().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "m = {m}: sum {sum}");
        }
    }
}
