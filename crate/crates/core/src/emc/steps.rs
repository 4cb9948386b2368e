//! Expectation and maximization steps.
//!
//! The per-pixel Poisson log-likelihood sums reduce to matrix products
//! between the frame counts and the log-slices, so the heavy lifting is
//! done by blocked GEMMs over rotation chunks. All reductions accumulate
//! in fixed chunk order.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::FluenceMode;
use crate::error::{EmcError, Result};
use crate::synthetic::FrameSet;

const ROT_CHUNK: usize = 128;
const FRAME_CHUNK: usize = 64;

/// Fluence floor for frames with zero total counts; keeps logs finite
/// without influencing responsibilities (per-frame shifts cancel in the
/// E step).
const MIN_FRAME_SUM: f64 = 1e-100;

/// 2D model slices `W_ij`, one row per rotation. Nonnegative and finite;
/// masked detector pixels carry 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    values: Array2<f64>,
}

impl SliceStack {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(EmcError::Config(
                "slice stack must be nonnegative and finite".into(),
            ));
        }
        Ok(SliceStack { values })
    }

    pub fn n_rotations(&self) -> usize {
        self.values.nrows()
    }

    pub fn m_pix(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub(crate) fn row_sums(&self) -> Vec<f64> {
        self.values.outer_iter().map(|r| r.sum()).collect()
    }
}

/// Posterior rotation probabilities `P_jk`. Stored frame-major (one
/// contiguous row per frame); each frame's distribution sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityMatrix {
    by_frame: Array2<f64>,
}

impl ResponsibilityMatrix {
    pub fn from_by_frame(by_frame: Array2<f64>) -> Result<Self> {
        for (k, row) in by_frame.outer_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(EmcError::Config(format!(
                    "responsibility column for frame {k} sums to {sum}"
                )));
            }
            if row.iter().any(|p| !(0.0..=1.0 + 1e-12).contains(p)) {
                return Err(EmcError::Config(format!(
                    "responsibility column for frame {k} leaves [0, 1]"
                )));
            }
        }
        Ok(ResponsibilityMatrix { by_frame })
    }

    /// One-hot responsibilities with frame `k` assigned to rotation `k`
    /// (used when the rotation list is the frames' own true rotations).
    pub fn identity(n: usize) -> Self {
        let mut by_frame = Array2::zeros((n, n));
        for k in 0..n {
            by_frame[(k, k)] = 1.0;
        }
        ResponsibilityMatrix { by_frame }
    }

    /// `P_jk`.
    #[inline]
    pub fn get(&self, rotation: usize, frame: usize) -> f64 {
        self.by_frame[(frame, rotation)]
    }

    pub fn n_rotations(&self) -> usize {
        self.by_frame.ncols()
    }

    pub fn n_frames(&self) -> usize {
        self.by_frame.nrows()
    }

    /// Frame-major view (`n_frames x n_rotations`).
    pub fn by_frame(&self) -> &Array2<f64> {
        &self.by_frame
    }

    /// Most probable rotation of frame `k`; ties go to the lowest index.
    pub fn mode_of_frame(&self, k: usize) -> usize {
        let row = self.by_frame.row(k);
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for (j, &p) in row.iter().enumerate() {
            if p > best_p {
                best_p = p;
                best = j;
            }
        }
        best
    }

    pub fn modes(&self) -> Vec<usize> {
        (0..self.n_frames()).map(|k| self.mode_of_frame(k)).collect()
    }

    /// Total responsibility mass per rotation.
    pub fn rotation_mass(&self) -> Array1<f64> {
        self.by_frame.sum_axis(Axis(0))
    }
}

/// Per-(rotation, frame) fluence `phi_jk`. The estimator factorizes as
/// `phi_jk = row_j * col_k` (frame counts over slice sums times a global
/// normalization), so only the two factors are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct FluenceMatrix {
    row: Vec<f64>,
    col: Vec<f64>,
}

impl FluenceMatrix {
    pub fn from_factors(row: Vec<f64>, col: Vec<f64>) -> Result<Self> {
        if row.iter().chain(col.iter()).any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(EmcError::Config(
                "fluence factors must be positive and finite".into(),
            ));
        }
        Ok(FluenceMatrix { row, col })
    }

    pub fn ones(n_rotations: usize, n_frames: usize) -> Self {
        FluenceMatrix {
            row: vec![1.0; n_rotations],
            col: vec![1.0; n_frames],
        }
    }

    /// Rotation-independent fluences (e.g. recorded true values).
    pub fn per_frame(fluences: &[f64], n_rotations: usize) -> Result<Self> {
        FluenceMatrix::from_factors(vec![1.0; n_rotations], fluences.to_vec())
    }

    #[inline]
    pub fn get(&self, rotation: usize, frame: usize) -> f64 {
        self.row[rotation] * self.col[frame]
    }

    pub fn n_rotations(&self) -> usize {
        self.row.len()
    }

    pub fn n_frames(&self) -> usize {
        self.col.len()
    }

    pub fn row_factors(&self) -> &[f64] {
        &self.row
    }

    pub fn col_factors(&self) -> &[f64] {
        &self.col
    }
}

/// Floor applied to slice values entering a logarithm:
/// `1e-12 x` mean unmasked slice value, kept strictly positive.
pub(crate) fn slice_log_floor(slices: &SliceStack, n_unmasked: usize) -> f64 {
    let denom = (slices.n_rotations() * n_unmasked) as f64;
    let mean = if denom > 0.0 {
        slices.values().sum() / denom
    } else {
        0.0
    };
    (1e-12 * mean).max(1e-300)
}

/// `C_jk = sum_i K_ik ln(max(W_ij, floor))` and `b_j = sum_i W_ij`.
/// Masked pixels hold `K = 0` and `W = 0`, so they drop out of both.
pub(crate) fn count_log_products(
    frames: ArrayView2<f64>,
    slices: &SliceStack,
    floor: f64,
) -> (Array2<f64>, Vec<f64>) {
    let m_rot = slices.n_rotations();
    let m_data = frames.nrows();
    let m_pix = slices.m_pix();
    let mut c = Array2::zeros((m_rot, m_data));
    let mut b = vec![0.0; m_rot];
    let kt = frames.t();
    let c_chunks: Vec<_> = c.axis_chunks_iter_mut(Axis(0), ROT_CHUNK).collect();
    let w_chunks: Vec<_> = slices.values().axis_chunks_iter(Axis(0), ROT_CHUNK).collect();
    let b_chunks: Vec<_> = b.chunks_mut(ROT_CHUNK).collect();
    c_chunks
        .into_par_iter()
        .zip(w_chunks)
        .zip(b_chunks)
        .for_each(|((mut cc, ww), bb)| {
            let mut lnw = Array2::zeros((ww.nrows(), m_pix));
            for (r, row) in ww.outer_iter().enumerate() {
                let mut sum = 0.0;
                let lnw_row = lnw.row_mut(r).into_slice().unwrap();
                for (i, &v) in row.iter().enumerate() {
                    sum += v;
                    lnw_row[i] = v.max(floor).ln();
                }
                bb[r] = sum;
            }
            general_mat_mul(1.0, &lnw, &kt, 0.0, &mut cc);
        });
    (c, b)
}

/// Assembles the joint log-likelihood `Q_jk` from the precomputed stats.
pub(crate) fn q_from_stats(
    c: &Array2<f64>,
    b: &[f64],
    fluence: &FluenceMatrix,
    n_unmasked: usize,
) -> Result<Array2<f64>> {
    let ln_row: Vec<f64> = fluence.row_factors().iter().map(|v| v.ln()).collect();
    let ln_col: Vec<f64> = fluence.col_factors().iter().map(|v| v.ln()).collect();
    let n_un = n_unmasked as f64;
    let mut q = c.clone();
    let q_chunks: Vec<_> = q.axis_chunks_iter_mut(Axis(0), ROT_CHUNK).collect();
    q_chunks.into_par_iter().enumerate().for_each(|(chunk, mut qq)| {
        let base = chunk * ROT_CHUNK;
        for (r, mut row) in qq.outer_iter_mut().enumerate() {
            let j = base + r;
            let phi_j = fluence.row_factors()[j];
            for (k, v) in row.iter_mut().enumerate() {
                *v += n_un * (ln_row[j] + ln_col[k]) - phi_j * fluence.col_factors()[k] * b[j];
            }
        }
    });
    for ((j, k), v) in q.indexed_iter() {
        if !v.is_finite() {
            return Err(EmcError::NonFiniteLikelihood {
                frame: k,
                rotation: j,
            });
        }
    }
    Ok(q)
}

/// Joint log-likelihood table
/// `Q_jk = sum_i (K_ik ln W_ij + ln phi_jk - phi_jk W_ij)` over unmasked
/// pixels. Slice values entering the log are floored (see
/// `slice_log_floor`); the linear term uses the raw values.
pub fn log_likelihood_table(
    frames: &FrameSet,
    slices: &SliceStack,
    fluence: &FluenceMatrix,
) -> Result<Array2<f64>> {
    check_dims(frames, slices, fluence)?;
    let floor = slice_log_floor(slices, frames.detector().n_unmasked());
    let (c, b) = count_log_products(frames.frames().view(), slices, floor);
    q_from_stats(&c, &b, fluence, frames.detector().n_unmasked())
}

/// Normalizes the likelihood table into per-frame rotation probabilities
/// using max-subtraction, so each frame's distribution sums to 1 exactly
/// up to rounding.
pub fn e_step_from_table(q: &Array2<f64>, weights: &[f64]) -> Result<ResponsibilityMatrix> {
    let (m_rot, m_data) = q.dim();
    if weights.len() != m_rot {
        return Err(EmcError::GridMismatch(format!(
            "{} weights for {} rotations",
            weights.len(),
            m_rot
        )));
    }
    let ln_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut by_frame = Array2::zeros((m_data, m_rot));
    let rows: Vec<_> = by_frame.outer_iter_mut().collect();
    let statuses: Vec<Result<()>> = rows
        .into_par_iter()
        .enumerate()
        .map(|(k, mut row)| {
            let mut max = f64::NEG_INFINITY;
            for j in 0..m_rot {
                let l = q[(j, k)] + ln_w[j];
                row[j] = l;
                if l > max {
                    max = l;
                }
            }
            if !max.is_finite() {
                return Err(EmcError::DegenerateFrame { frame: k });
            }
            let mut sum = 0.0;
            for j in 0..m_rot {
                let e = (row[j] - max).exp();
                row[j] = e;
                sum += e;
            }
            for j in 0..m_rot {
                row[j] /= sum;
            }
            Ok(())
        })
        .collect();
    for s in statuses {
        s?;
    }
    ResponsibilityMatrix::from_by_frame(by_frame)
}

/// Expectation step: `P_jk ∝ w_j exp(Q_jk)`, normalized per frame.
pub fn e_step(
    frames: &FrameSet,
    slices: &SliceStack,
    fluence: &FluenceMatrix,
    weights: &[f64],
) -> Result<ResponsibilityMatrix> {
    let q = log_likelihood_table(frames, slices, fluence)?;
    e_step_from_table(&q, weights)
}

/// Fluence update
/// `phi_jk = (sum_i K_ik / sum_i W_ij) * prev_volume_sum_ratio`.
/// In fixed mode the matrix is all ones.
pub fn m_step_fluence(
    frames: &FrameSet,
    slices: &SliceStack,
    prev_volume_sum_ratio: f64,
    mode: FluenceMode,
) -> Result<FluenceMatrix> {
    let m_rot = slices.n_rotations();
    let m_data = frames.n_frames();
    if mode == FluenceMode::Fixed {
        return Ok(FluenceMatrix::ones(m_rot, m_data));
    }
    let col: Vec<f64> = frames
        .frame_sums()
        .into_iter()
        .map(|s| s.max(MIN_FRAME_SUM))
        .collect();
    let b = slices.row_sums();
    let mut row = Vec::with_capacity(m_rot);
    for (j, &bj) in b.iter().enumerate() {
        if bj <= 0.0 {
            return Err(EmcError::EmptySlice { rotation: j });
        }
        row.push(prev_volume_sum_ratio / bj);
    }
    FluenceMatrix::from_factors(row, col)
}

/// Multiplicative slice update
/// `W_ij = sum_k P_jk K_ik / sum_k P_jk phi_jk`.
/// Rotations whose responsibility mass falls below
/// `1e-12 M_data / M_rot` keep their previous slice values.
pub fn m_step_slices(
    frames: &FrameSet,
    resp: &ResponsibilityMatrix,
    fluence: &FluenceMatrix,
    prev: &SliceStack,
) -> Result<SliceStack> {
    let m_rot = resp.n_rotations();
    let m_data = frames.n_frames();
    let m_pix = frames.m_pix();
    if resp.n_frames() != m_data || fluence.n_frames() != m_data || fluence.n_rotations() != m_rot {
        return Err(EmcError::GridMismatch(
            "responsibility/fluence dimensions do not match the frames".into(),
        ));
    }
    if prev.n_rotations() != m_rot || prev.m_pix() != m_pix {
        return Err(EmcError::GridMismatch(
            "previous slice stack does not match".into(),
        ));
    }
    let bf = resp.by_frame();
    let mass = resp.rotation_mass();
    let col = Array1::from(fluence.col_factors().to_vec());
    let weighted_counts = bf.t().dot(&col); // sum_k P_jk col_k
    let threshold = 1e-12 * m_data as f64 / m_rot as f64;

    let mut w = Array2::zeros((m_rot, m_pix));
    let pt = bf.t();
    let k_mat = frames.frames().view();
    let w_chunks: Vec<_> = w.axis_chunks_iter_mut(Axis(0), ROT_CHUNK).collect();
    w_chunks.into_par_iter().enumerate().for_each(|(chunk, mut ww)| {
        let start = chunk * ROT_CHUNK;
        let end = start + ww.nrows();
        let p_block = pt.slice(ndarray::s![start..end, ..]);
        general_mat_mul(1.0, &p_block, &k_mat, 0.0, &mut ww);
        for (r, mut row) in ww.outer_iter_mut().enumerate() {
            let j = start + r;
            let den = fluence.row_factors()[j] * weighted_counts[j];
            if mass[j] < threshold || den <= 0.0 {
                row.assign(&prev.values().row(j));
            } else {
                let inv = 1.0 / den;
                row.mapv_inplace(|v| v * inv);
            }
        }
    });
    // GEMM rounding can leave tiny negative values where P*K is all zero
    let w = w.mapv(|v| if v < 0.0 && v > -1e-300 { 0.0 } else { v });
    SliceStack::new(w)
}

/// Per-frame statistics used by the divergence:
/// `E_k = sum_i K ln K` (with `0 ln 0 = 0`) and `A_k = sum_i K`.
pub(crate) fn frame_entropy_stats(frames: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<_> = frames.outer_iter().collect();
    let pairs: Vec<(f64, f64)> = rows
        .into_par_iter()
        .map(|row| {
            let mut e = 0.0;
            let mut a = 0.0;
            for &k in row.iter() {
                a += k;
                if k > 0.0 {
                    e += k * k.ln();
                }
            }
            (e, a)
        })
        .collect();
    pairs.into_iter().unzip()
}

pub(crate) fn divergence_from_stats(
    c: &Array2<f64>,
    b: &[f64],
    e_k: &[f64],
    a_k: &[f64],
    resp: &ResponsibilityMatrix,
    fluence: &FluenceMatrix,
) -> Result<f64> {
    let ln_row: Vec<f64> = fluence.row_factors().iter().map(|v| v.ln()).collect();
    let ln_col: Vec<f64> = fluence.col_factors().iter().map(|v| v.ln()).collect();
    let bf = resp.by_frame();
    let frame_chunks: Vec<_> = bf.axis_chunks_iter(Axis(0), FRAME_CHUNK).collect();
    let partials: Vec<f64> = frame_chunks
        .into_par_iter()
        .enumerate()
        .map(|(chunk, block)| {
            let base = chunk * FRAME_CHUNK;
            let mut local = 0.0;
            for (r, row) in block.outer_iter().enumerate() {
                let k = base + r;
                for (j, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        let phi = fluence.row_factors()[j] * fluence.col_factors()[k];
                        local += p
                            * (e_k[k] - c[(j, k)] - a_k[k] * (ln_row[j] + ln_col[k]) - a_k[k]
                                + phi * b[j]);
                    }
                }
            }
            local
        })
        .collect();
    let d: f64 = partials.iter().sum();
    if !d.is_finite() {
        return Err(EmcError::Config("Klein divergence is not finite".into()));
    }
    Ok(d)
}

/// The NNMF objective
/// `D(PK || P phi W) = sum_ijk [P K ln(PK / (P phi W)) - P K + P phi W]`
/// with `0 ln 0 = 0`, summed over unmasked pixels.
pub fn klein_divergence(
    frames: &FrameSet,
    resp: &ResponsibilityMatrix,
    fluence: &FluenceMatrix,
    slices: &SliceStack,
) -> Result<f64> {
    check_dims(frames, slices, fluence)?;
    if resp.n_frames() != frames.n_frames() || resp.n_rotations() != slices.n_rotations() {
        return Err(EmcError::GridMismatch(
            "responsibility dimensions do not match".into(),
        ));
    }
    let floor = slice_log_floor(slices, frames.detector().n_unmasked());
    let (c, b) = count_log_products(frames.frames().view(), slices, floor);
    let (e_k, a_k) = frame_entropy_stats(frames.frames().view());
    divergence_from_stats(&c, &b, &e_k, &a_k, resp, fluence)
}

fn check_dims(frames: &FrameSet, slices: &SliceStack, fluence: &FluenceMatrix) -> Result<()> {
    if frames.m_pix() != slices.m_pix() {
        return Err(EmcError::GridMismatch(format!(
            "frames have {} pixels, slices {}",
            frames.m_pix(),
            slices.m_pix()
        )));
    }
    if fluence.n_rotations() != slices.n_rotations() || fluence.n_frames() != frames.n_frames() {
        return Err(EmcError::GridMismatch(
            "fluence dimensions do not match frames/slices".into(),
        ));
    }
    Ok(())
}
