//! Quantifying reconstruction uncertainty.
//!
//! With ground truth available, the algorithmic error sources (smearing,
//! noise, rotation estimation, fluence estimation) are isolated by
//! running the EMC loop with controlled mixtures of true and estimated
//! quantities and comparing against reference volumes. Without ground
//! truth, two bootstrap estimators ([`standard_bootstrap`],
//! [`emb_bootstrap`]) assemble a total-uncertainty map from resampled
//! reconstructions.

pub mod bootstrap;

pub use bootstrap::{
    bootstrap_both, emb_bootstrap, intensity_sweep, standard_bootstrap, BootstrapConfig,
    BootstrapResult, SweepRow, SweepSpec,
};

use crate::emc::geometry::{DetectorGrid, IntensityVolume};
use crate::emc::interp::{compress_rows, roundtrip_smear};
use crate::emc::{self, EmcConfig, EmcResult, LoopFluence, LoopSpec};
use crate::error::{EmcError, Result};
use crate::metrics::{
    align_volumes, make_shells, strong_shell_error, weak_shell_error, AlignOptions,
    ShellErrorCurve,
};
use crate::rotations::{Quaternion, RotationSet};
use crate::synthetic::FrameSet;

/// The best possible reconstruction: one compression of the noiseless
/// frames at their recorded true rotations. Reference for every error
/// that excludes smearing.
pub fn best_reconstruction(noiseless_frames: &FrameSet) -> Result<IntensityVolume> {
    let rots = noiseless_frames
        .true_rotations()
        .ok_or_else(|| EmcError::MissingVariant("true rotations".into()))?;
    compress_rows(
        noiseless_frames.frames().view(),
        rots,
        noiseless_frames.detector(),
        noiseless_frames.side(),
    )
}

/// Voxelwise difference between one expand/compress round trip of a
/// volume and the volume itself — the data-free smearing estimate.
pub fn estimate_smearing(
    volume: &IntensityVolume,
    rotations: &[Quaternion],
    grid: &DetectorGrid,
) -> Result<IntensityVolume> {
    if rotations.is_empty() {
        return Err(EmcError::Config(
            "smearing estimate needs at least one rotation".into(),
        ));
    }
    let smeared = roundtrip_smear(volume, rotations, grid)?;
    smeared.map2(volume, |rt, wm| rt - wm)
}

/// Which frame set feeds a step of an error chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FramesVariant {
    /// Noiseless frames.
    Noiseless,
    /// Poisson counts around the noiseless frames.
    Noisy,
    /// Fluence-scaled noiseless frames.
    Fluence,
    /// Poisson counts around the fluence-scaled frames.
    FluenceNoisy,
}

impl FramesVariant {
    fn involves_fluence(self) -> bool {
        matches!(self, FramesVariant::Fluence | FramesVariant::FluenceNoisy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RespSource {
    /// Responsibilities frozen at the recorded rotations.
    True,
    /// Estimated each iteration on the reconstruction grid.
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluenceSource {
    /// Fluences frozen at the recorded draws (1 for unscaled sets).
    True,
    /// Estimated each iteration by the multiplicative update.
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceVolume {
    /// Compare against the best reconstruction (excludes smearing).
    Best,
    /// Compare against the analytic truth (includes smearing).
    Truth,
}

/// One row of the error-decomposition table: the M step consumes
/// `frames`, the E step always sees the noisy counterpart of the family,
/// and frozen quantities bypass their update step.
#[derive(Debug, Clone)]
pub struct ErrorChainSpec {
    pub label: String,
    pub frames: FramesVariant,
    pub resp: RespSource,
    pub fluence: FluenceSource,
    pub reference: ReferenceVolume,
}

impl ErrorChainSpec {
    /// Builds the named decomposition row. Recognized names: `R_S`,
    /// `R_N`, `R_T`, `R_N+R_T`, `R_F`, `R_F+R_N`, `R_F+R_T`,
    /// `R_F+R_N+R_T`, and any of those prefixed with `R_S+` (which
    /// switches the reference to the truth).
    pub fn table_row(name: &str) -> Result<Self> {
        let (reference, rest) = match name.strip_prefix("R_S+") {
            Some(rest) => (ReferenceVolume::Truth, rest),
            None if name == "R_S" => {
                return Ok(ErrorChainSpec {
                    label: name.into(),
                    frames: FramesVariant::Noiseless,
                    resp: RespSource::True,
                    fluence: FluenceSource::True,
                    reference: ReferenceVolume::Truth,
                });
            }
            None => (ReferenceVolume::Best, name),
        };
        let (frames, resp, fluence) = match rest {
            "R_N" => (FramesVariant::Noisy, RespSource::True, FluenceSource::True),
            "R_T" => (
                FramesVariant::Noiseless,
                RespSource::Estimated,
                FluenceSource::True,
            ),
            "R_N+R_T" => (
                FramesVariant::Noisy,
                RespSource::Estimated,
                FluenceSource::True,
            ),
            "R_F" => (
                FramesVariant::Fluence,
                RespSource::True,
                FluenceSource::Estimated,
            ),
            "R_F+R_N" => (
                FramesVariant::FluenceNoisy,
                RespSource::True,
                FluenceSource::Estimated,
            ),
            "R_F+R_T" => (
                FramesVariant::Fluence,
                RespSource::Estimated,
                FluenceSource::Estimated,
            ),
            "R_F+R_N+R_T" => (
                FramesVariant::FluenceNoisy,
                RespSource::Estimated,
                FluenceSource::Estimated,
            ),
            other => {
                return Err(EmcError::Config(format!(
                    "unknown error-chain row '{other}'"
                )));
            }
        };
        Ok(ErrorChainSpec {
            label: name.into(),
            frames,
            resp,
            fluence,
            reference,
        })
    }

    /// All rows of the decomposition table.
    pub fn standard_rows() -> Vec<&'static str> {
        vec![
            "R_S",
            "R_N",
            "R_T",
            "R_N+R_T",
            "R_F",
            "R_F+R_N",
            "R_F+R_T",
            "R_F+R_N+R_T",
            "R_S+R_N+R_T",
            "R_S+R_F+R_N+R_T",
        ]
    }
}

/// The dataset family an error chain draws from. All variants share the
/// same true rotations (and fluences, where applicable).
pub struct ChainDatasets<'a> {
    pub noiseless: &'a FrameSet,
    pub noisy: Option<&'a FrameSet>,
    pub fluence: Option<&'a FrameSet>,
    pub fluence_noisy: Option<&'a FrameSet>,
    pub truth: &'a IntensityVolume,
    pub best: &'a IntensityVolume,
}

impl<'a> ChainDatasets<'a> {
    fn get(&self, v: FramesVariant) -> Result<&'a FrameSet> {
        let (set, name) = match v {
            FramesVariant::Noiseless => (Some(self.noiseless), "noiseless"),
            FramesVariant::Noisy => (self.noisy, "noisy"),
            FramesVariant::Fluence => (self.fluence, "fluence"),
            FramesVariant::FluenceNoisy => (self.fluence_noisy, "fluence-noisy"),
        };
        set.ok_or_else(|| EmcError::MissingVariant(name.into()))
    }
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub emc: EmcConfig,
    pub align: AlignOptions,
    pub align_restarts: usize,
    pub align_seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            emc: EmcConfig::default(),
            align: AlignOptions::default(),
            align_restarts: 3,
            align_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainMeasurement {
    pub label: String,
    pub weak: ShellErrorCurve,
    pub strong: ShellErrorCurve,
    pub volume: IntensityVolume,
    pub alignment: Quaternion,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs one decomposition row: EMC with the specified mixture of true
/// and estimated quantities, alignment to the reference, then the shell
/// curves of (reconstruction, R reference).
pub fn measure_error_chain(
    spec: &ErrorChainSpec,
    datasets: &ChainDatasets<'_>,
    grid_rotations: &RotationSet,
    config: &ChainConfig,
) -> Result<ChainMeasurement> {
    let m_frames = datasets.get(spec.frames)?;
    let e_variant = if spec.frames.involves_fluence() {
        FramesVariant::FluenceNoisy
    } else {
        FramesVariant::Noisy
    };
    // frozen responsibilities never consult the E-step frames
    let e_frames = match spec.resp {
        RespSource::True => m_frames,
        RespSource::Estimated => datasets.get(e_variant)?,
    };

    let true_rotation_set;
    let rotations = match spec.resp {
        RespSource::Estimated => grid_rotations,
        RespSource::True => {
            let rots = m_frames
                .true_rotations()
                .ok_or_else(|| EmcError::MissingVariant("true rotations".into()))?;
            true_rotation_set = RotationSet::uniform(rots.to_vec())?;
            &true_rotation_set
        }
    };

    let fluence = match spec.fluence {
        FluenceSource::Estimated => LoopFluence::Estimate,
        FluenceSource::True => match m_frames.true_fluences() {
            Some(f) => LoopFluence::FrozenPerFrame(f.to_vec()),
            None => LoopFluence::FixedOne,
        },
    };

    let result: EmcResult = emc::run_loop(LoopSpec {
        e_frames,
        m_frames,
        rotations,
        config: &config.emc,
        init: None,
        frozen_resp: spec.resp == RespSource::True,
        fluence,
    })?;

    let reference = match spec.reference {
        ReferenceVolume::Best => datasets.best,
        ReferenceVolume::Truth => datasets.truth,
    };

    // with frozen true rotations the reconstruction is already in the
    // reference frame; otherwise the gauge is arbitrary
    let alignment = match spec.resp {
        RespSource::True => Quaternion::identity(),
        RespSource::Estimated => {
            align_volumes(
                reference,
                &result.volume,
                config.align_restarts,
                config.align_seed,
                &config.align,
            )?
            .rotation
        }
    };

    let partition = make_shells(result.volume.side(), 1.0)?;
    let weak = weak_shell_error(&result.volume, reference, alignment, &partition)?;
    let strong = strong_shell_error(&result.volume, reference, alignment, &partition, None)?;
    Ok(ChainMeasurement {
        label: spec.label.clone(),
        weak,
        strong,
        volume: result.volume,
        alignment,
        iterations: result.iterations,
        converged: result.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotations::random_rotation_set;
    use crate::synthetic::{
        apply_beamstop_frames, build_phantom, generate_noiseless_frames, PhantomSpec,
    };

    #[test]
    fn best_reconstruction_of_constant_frames_is_constant() {
        let truth = IntensityVolume::new_filled(16, 3.0).unwrap();
        let rots = random_rotation_set(30, 4).unwrap();
        let frames = generate_noiseless_frames(&truth, rots.quaternions()).unwrap();
        let best = best_reconstruction(&frames).unwrap();
        for l in 0..best.len() {
            if !best.is_masked(l) {
                let c = best.coord_of(l);
                let interior = c.iter().all(|&x| x > -7.0 && x < 6.0);
                if interior {
                    approx::assert_relative_eq!(best.values()[l], 3.0, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn smearing_estimate_of_constant_volume_vanishes() {
        // constants survive the trilinear round trip exactly wherever
        // gathers are not truncated by the cube boundary (the outermost
        // voxel layer picks up partial-weight contamination)
        let v = IntensityVolume::new_filled(16, 2.0).unwrap();
        let rots = random_rotation_set(40, 6).unwrap();
        let grid = DetectorGrid::new(16, 0.0).unwrap();
        let s = estimate_smearing(&v, rots.quaternions(), &grid).unwrap();
        for l in 0..s.len() {
            let c = s.coord_of(l);
            if !s.is_masked(l) && c.iter().all(|&x| (-6.0..=6.0).contains(&x)) {
                assert!(s.values()[l].abs() < 1e-12, "voxel {l}: {}", s.values()[l]);
            }
        }
    }

    #[test]
    fn smearing_estimate_matches_its_definition() {
        let spec = PhantomSpec::reference(16);
        let v = build_phantom(&spec).unwrap();
        let rots = random_rotation_set(25, 7).unwrap();
        let grid = DetectorGrid::new(16, 0.0).unwrap();
        let s = estimate_smearing(&v, rots.quaternions(), &grid).unwrap();
        let rt = roundtrip_smear(&v, rots.quaternions(), &grid).unwrap();
        for l in 0..s.len() {
            if !s.is_masked(l) {
                approx::assert_relative_eq!(
                    s.values()[l],
                    rt.values()[l] - v.values()[l],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn all_true_chain_on_noiseless_frames_is_exact() {
        // every quantity frozen at its true value on noiseless frames
        // reproduces the best reconstruction, so the curve is zero
        let spec = PhantomSpec::reference(16);
        let truth = build_phantom(&spec).unwrap();
        let rots = random_rotation_set(60, 9).unwrap();
        let frames = generate_noiseless_frames(&truth, rots.quaternions()).unwrap();
        let frames = apply_beamstop_frames(frames, 2.0).unwrap();
        let best = best_reconstruction(&frames).unwrap();
        let datasets = ChainDatasets {
            noiseless: &frames,
            noisy: None,
            fluence: None,
            fluence_noisy: None,
            truth: &truth,
            best: &best,
        };
        let grid_rotations = crate::rotations::sample_rotation_grid(1).unwrap();
        let row = ErrorChainSpec {
            label: "all-true".into(),
            frames: FramesVariant::Noiseless,
            resp: RespSource::True,
            fluence: FluenceSource::True,
            reference: ReferenceVolume::Best,
        };
        let m = measure_error_chain(&row, &datasets, &grid_rotations, &ChainConfig::default())
            .unwrap();
        for &v in &m.weak.values {
            if v.is_finite() {
                assert!(v.abs() < 1e-12, "weak value {v}");
            }
        }
    }

    #[test]
    fn table_rows_parse() {
        for name in ErrorChainSpec::standard_rows() {
            let spec = ErrorChainSpec::table_row(name).unwrap();
            assert_eq!(spec.label, name);
        }
        assert!(ErrorChainSpec::table_row("R_X").is_err());
        let rs = ErrorChainSpec::table_row("R_S").unwrap();
        assert_eq!(rs.reference, ReferenceVolume::Truth);
        let combined = ErrorChainSpec::table_row("R_S+R_F+R_N+R_T").unwrap();
        assert_eq!(combined.reference, ReferenceVolume::Truth);
        assert_eq!(combined.frames, FramesVariant::FluenceNoisy);
    }
}
