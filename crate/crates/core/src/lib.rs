//! Reconstruction of 3D Fourier intensity volumes from 2D diffraction
//! frames of unknown orientation and fluence, via the
//! Expansion-Maximization-Compression (EMC) iteration with an NNMF-style
//! maximization step, plus tooling to quantify how trustworthy a given
//! reconstruction is: ground-truth error decomposition on synthetic data
//! and two bootstrap estimators that work without ground truth.
//!
//! The crate is organized around the pipeline stages:
//!
//! * [`rotations`] — discretization of SO(3) (600-cell refinement grids,
//!   uniform random sets) and quaternion algebra.
//! * [`synthetic`] — ground-truth phantom volumes and synthetic frame sets
//!   with controlled rotation, fluence, Poisson noise, beamstop and
//!   background.
//! * [`emc`] — the EMC loop itself: expansion, expectation, multiplicative
//!   maximization with per-frame fluence, compression, convergence.
//! * [`metrics`] — radial-shell error curves, volume alignment, and the
//!   hidden-data baselines that calibrate failed vs. proper
//!   reconstructions.
//! * [`uncertainty`] — error-chain measurements against ground truth and
//!   the standard / EMB bootstrap estimators.
//! * [`io`] — binary volume / frame-set persistence and CSV emission.

pub mod emc;
pub mod error;
pub mod io;
pub mod metrics;
pub mod rotations;
pub mod synthetic;
pub mod uncertainty;

pub use emc::{
    DetectorGrid, EmcConfig, EmcResult, FluenceMatrix, FluenceMode, IntensityVolume,
    ResponsibilityMatrix, SliceStack,
};
pub use error::{EmcError, Result};
pub use rotations::{Quaternion, RotationSet};
pub use synthetic::{BackgroundFrame, FrameSet, PhantomSpec};
