//! The EMC iteration: expansion, expectation, NNMF maximization with
//! per-frame fluence, compression, and the convergence loop.
//!
//! One iteration runs e -> E -> M -> C: slice the current volume along
//! every candidate rotation, estimate per-frame rotation probabilities,
//! re-estimate slices and fluences by multiplicative updates, and
//! scatter-average the updated slices back into the volume. The loop
//! stops when the L1 change between consecutive volumes (normalized to
//! unit mean over unmasked voxels) drops to `epsilon`.

pub mod geometry;
pub mod interp;
pub mod steps;

pub use geometry::{DetectorGrid, IntensityVolume};
pub use interp::{compress, expand, interpolation_weights, roundtrip_smear};
pub use steps::{
    e_step, e_step_from_table, klein_divergence, log_likelihood_table, m_step_fluence,
    m_step_slices, FluenceMatrix, ResponsibilityMatrix, SliceStack,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EmcError, Result};
use crate::rotations::RotationSet;
use crate::synthetic::FrameSet;

/// Whether the M step estimates per-frame fluences or pins them at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluenceMode {
    Estimate,
    Fixed,
}

#[derive(Debug, Clone)]
pub struct EmcConfig {
    /// Stopping threshold on the normalized L1 volume change.
    pub epsilon: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub fluence_mode: FluenceMode,
}

impl Default for EmcConfig {
    fn default() -> Self {
        EmcConfig {
            epsilon: 0.001,
            max_iterations: 60,
            seed: 0,
            fluence_mode: FluenceMode::Estimate,
        }
    }
}

impl EmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(EmcError::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(EmcError::Config("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration record. The divergence is evaluated with the fresh
/// responsibilities both before (`divergence_pre_m`) and after
/// (`divergence_post_m`) the fluence + slice update pair, so monotonicity
/// of the M step can be audited directly.
#[derive(Debug, Clone, Copy)]
pub struct IterationTrace {
    pub iteration: usize,
    pub change_metric: f64,
    pub divergence_pre_m: f64,
    pub divergence_post_m: f64,
}

#[derive(Debug, Clone)]
pub struct EmcResult {
    pub volume: IntensityVolume,
    pub responsibilities: ResponsibilityMatrix,
    pub fluence: FluenceMatrix,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationTrace>,
}

/// Fluence handling inside the loop: estimated each iteration, pinned at
/// one, or frozen to known per-frame values.
#[derive(Debug, Clone)]
pub(crate) enum LoopFluence {
    Estimate,
    FixedOne,
    FrozenPerFrame(Vec<f64>),
}

/// Full specification of one EMC run. `e_frames` drive the expectation
/// step while `m_frames` are consumed by the maximization step; they are
/// the same set in ordinary reconstructions but differ in controlled
/// error-chain measurements.
pub(crate) struct LoopSpec<'a> {
    pub e_frames: &'a FrameSet,
    pub m_frames: &'a FrameSet,
    pub rotations: &'a RotationSet,
    pub config: &'a EmcConfig,
    pub init: Option<IntensityVolume>,
    /// Freeze responsibilities to the identity assignment (frame k at
    /// rotation k); requires the rotation list to match the frame order.
    pub frozen_resp: bool,
    pub fluence: LoopFluence,
}

/// Runs the EMC loop on one frame set.
pub fn run_emc(
    frames: &FrameSet,
    rotations: &RotationSet,
    config: &EmcConfig,
    init: Option<IntensityVolume>,
) -> Result<EmcResult> {
    let fluence = match config.fluence_mode {
        FluenceMode::Estimate => LoopFluence::Estimate,
        FluenceMode::Fixed => LoopFluence::FixedOne,
    };
    run_loop(LoopSpec {
        e_frames: frames,
        m_frames: frames,
        rotations,
        config,
        init,
        frozen_resp: false,
        fluence,
    })
}

/// Seeded initial model: unmasked voxels drawn U(0.5, 1.5) times the mean
/// photon count per unmasked pixel.
pub fn initial_volume(side: usize, mean_count: f64, seed: u64) -> Result<IntensityVolume> {
    let mut volume = IntensityVolume::new_filled(side, 0.0)?;
    let scale = if mean_count > 0.0 { mean_count } else { 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x496e6974); // init stream tag
    for v in volume.values_mut() {
        *v = rng.gen_range(0.5..1.5) * scale;
    }
    Ok(volume)
}

pub(crate) fn run_loop(spec: LoopSpec<'_>) -> Result<EmcResult> {
    let LoopSpec {
        e_frames,
        m_frames,
        rotations,
        config,
        init,
        frozen_resp,
        fluence: fluence_mode,
    } = spec;
    config.validate()?;
    if e_frames.detector() != m_frames.detector() {
        return Err(EmcError::GridMismatch(
            "expectation and maximization frames use different detectors".into(),
        ));
    }
    if e_frames.n_frames() != m_frames.n_frames() {
        return Err(EmcError::GridMismatch(
            "expectation and maximization frame counts differ".into(),
        ));
    }
    if m_frames.n_frames() == 0 {
        return Err(EmcError::Config("no frames to reconstruct".into()));
    }
    if frozen_resp && rotations.len() != m_frames.n_frames() {
        return Err(EmcError::GridMismatch(
            "frozen responsibilities need one rotation per frame".into(),
        ));
    }

    let grid = e_frames.detector();
    let side = grid.side();
    let n_unmasked = grid.n_unmasked();
    let m_data = m_frames.n_frames();
    let same_frames = std::ptr::eq(e_frames, m_frames);
    let weights = rotations.weights();

    let mut volume = match init {
        Some(v) => {
            if v.side() != side {
                return Err(EmcError::GridMismatch(format!(
                    "initial volume side {} vs detector side {side}",
                    v.side()
                )));
            }
            v
        }
        None => initial_volume(side, m_frames.mean_unmasked(), config.seed)?,
    };

    let frozen_fluence = match &fluence_mode {
        LoopFluence::FrozenPerFrame(values) => Some(steps::FluenceMatrix::per_frame(
            values,
            rotations.len(),
        )?),
        _ => None,
    };
    let mut fluence = match &frozen_fluence {
        Some(f) => f.clone(),
        None => steps::FluenceMatrix::ones(rotations.len(), m_data),
    };

    // Frame statistics for the divergence are constant across iterations.
    let (e_k, a_k) = steps::frame_entropy_stats(m_frames.frames().view());

    let mut responsibilities: Option<ResponsibilityMatrix> = None;
    let mut trace = Vec::new();
    let mut prev_volume_sum: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;

    for iteration in 1..=config.max_iterations {
        iterations = iteration;

        // e step: slice the current model.
        let slices = expand(&volume, rotations, grid)?;
        let floor = steps::slice_log_floor(&slices, n_unmasked);
        let (c_m, b) = steps::count_log_products(m_frames.frames().view(), &slices, floor);

        // E step.
        let resp = if frozen_resp {
            ResponsibilityMatrix::identity(m_data)
        } else if same_frames {
            let q = steps::q_from_stats(&c_m, &b, &fluence, n_unmasked)?;
            steps::e_step_from_table(&q, weights)?
        } else {
            let (c_e, _) = steps::count_log_products(e_frames.frames().view(), &slices, floor);
            let q = steps::q_from_stats(&c_e, &b, &fluence, n_unmasked)?;
            steps::e_step_from_table(&q, weights)?
        };

        let divergence_pre_m =
            steps::divergence_from_stats(&c_m, &b, &e_k, &a_k, &resp, &fluence)?;
        drop(c_m);

        // M step: fluences, then slices.
        let volume_sum = volume.sum();
        let ratio = match prev_volume_sum {
            Some(prev) if volume_sum > 0.0 => prev / volume_sum,
            _ => 1.0,
        };
        let new_fluence = match &fluence_mode {
            LoopFluence::Estimate => {
                steps::m_step_fluence(m_frames, &slices, ratio, FluenceMode::Estimate)?
            }
            LoopFluence::FixedOne => steps::FluenceMatrix::ones(rotations.len(), m_data),
            LoopFluence::FrozenPerFrame(_) => frozen_fluence.clone().unwrap(),
        };
        let new_slices = steps::m_step_slices(m_frames, &resp, &new_fluence, &slices)?;
        drop(slices);

        let floor_post = steps::slice_log_floor(&new_slices, n_unmasked);
        let (c_post, b_post) =
            steps::count_log_products(m_frames.frames().view(), &new_slices, floor_post);
        let divergence_post_m =
            steps::divergence_from_stats(&c_post, &b_post, &e_k, &a_k, &resp, &new_fluence)?;
        drop(c_post);

        // C step.
        let new_volume = compress(&new_slices, rotations, grid, side)?;
        drop(new_slices);

        let change_metric = geometry::normalized_l1_change(&new_volume, &volume);
        trace.push(IterationTrace {
            iteration,
            change_metric,
            divergence_pre_m,
            divergence_post_m,
        });

        prev_volume_sum = Some(volume_sum);
        volume = new_volume;
        fluence = new_fluence;
        responsibilities = Some(resp);

        if change_metric <= config.epsilon {
            converged = true;
            break;
        }
    }

    Ok(EmcResult {
        volume,
        responsibilities: responsibilities.expect("at least one iteration ran"),
        fluence,
        iterations,
        converged,
        trace,
    })
}
