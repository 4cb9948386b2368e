//! Binary and CSV persistence.
//!
//! Volumes and frames are flat little-endian float64 arrays with JSON
//! sidecars / manifests carrying the grid geometry, seeds and provenance.
//! Curves and traces are plain CSV meant for external plotting. Linear
//! layouts: volumes are `(x * side + y) * side + z`, frame files are
//! row-major `frame x pixel` with pixel index `px * side + py`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::emc::geometry::{DetectorGrid, IntensityVolume};
use crate::emc::IterationTrace;
use crate::error::{EmcError, Result};
use crate::metrics::ShellErrorCurve;
use crate::rotations::{Quaternion, RotationSet};
use crate::synthetic::FrameSet;
use crate::uncertainty::BootstrapResult;

fn io_err(path: &Path, source: std::io::Error) -> EmcError {
    EmcError::io(path.display().to_string(), source)
}

pub fn write_f64_file(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_f64_file(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    if bytes.len() != expected_len * 8 {
        return Err(EmcError::Format {
            path: path.display().to_string(),
            reason: format!(
                "expected {} float64 values ({} bytes), found {} bytes",
                expected_len,
                expected_len * 8,
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Sidecar of a persisted volume.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub side: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Writes `<base>.f64`, `<base>.json` and `<base>.mask` (one byte per
/// voxel flagging exclusions).
pub fn write_volume(base: &Path, volume: &IntensityVolume, meta: &VolumeMeta) -> Result<()> {
    let mut meta = meta.clone();
    meta.side = volume.side();
    write_f64_file(&base.with_extension("f64"), volume.values())?;
    let mask_bytes: Vec<u8> = volume.masked().iter().map(|&m| m as u8).collect();
    let mask_path = base.with_extension("mask");
    fs::write(&mask_path, mask_bytes).map_err(|e| io_err(&mask_path, e))?;
    let json_path = base.with_extension("json");
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))
}

pub fn read_volume(base: &Path) -> Result<(IntensityVolume, VolumeMeta)> {
    let json_path = base.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
    let meta: VolumeMeta = serde_json::from_str(&text)?;
    let n = meta.side * meta.side * meta.side;
    let values = read_f64_file(&base.with_extension("f64"), n)?;
    let mask_path = base.with_extension("mask");
    let masked = if mask_path.exists() {
        let bytes = fs::read(&mask_path).map_err(|e| io_err(&mask_path, e))?;
        if bytes.len() != n {
            return Err(EmcError::Format {
                path: mask_path.display().to_string(),
                reason: format!("expected {n} mask bytes, found {}", bytes.len()),
            });
        }
        bytes.into_iter().map(|b| b != 0).collect()
    } else {
        // fall back to the beamstop sphere recorded in the sidecar
        let probe = IntensityVolume::new_filled(meta.side, 0.0)?;
        let radius = meta.mask_radius.unwrap_or(0.0);
        (0..n).map(|l| probe.radius_of(l) < radius).collect()
    };
    Ok((IntensityVolume::from_parts(meta.side, values, masked)?, meta))
}

/// Manifest of a persisted frame-set directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FrameSetManifest {
    pub side: usize,
    pub m_data: usize,
    pub mask_radius: f64,
    /// Which pipeline produced this set (noiseless / noisy / ...).
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fluence_range: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background_level: Option<f64>,
    #[serde(default)]
    pub has_rotations: bool,
    #[serde(default)]
    pub has_fluences: bool,
}

/// Writes `manifest.json`, `frames.f64` and, when recorded,
/// `rotations.f64` (scalar-first quadruples) and `fluences.f64`.
pub fn write_frame_set(dir: &Path, set: &FrameSet, manifest: &FrameSetManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = manifest.clone();
    manifest.side = set.side();
    manifest.m_data = set.n_frames();
    manifest.mask_radius = set.detector().mask_radius();
    manifest.has_rotations = set.true_rotations().is_some();
    manifest.has_fluences = set.true_fluences().is_some();

    let frames_flat: Vec<f64> = set.frames().iter().cloned().collect();
    write_f64_file(&dir.join("frames.f64"), &frames_flat)?;
    if let Some(rots) = set.true_rotations() {
        let flat: Vec<f64> = rots
            .iter()
            .flat_map(|q| [q.w, q.x, q.y, q.z])
            .collect();
        write_f64_file(&dir.join("rotations.f64"), &flat)?;
    }
    if let Some(fl) = set.true_fluences() {
        write_f64_file(&dir.join("fluences.f64"), fl)?;
    }
    let json_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))
}

pub fn read_frame_set(dir: &Path) -> Result<(FrameSet, FrameSetManifest)> {
    let json_path = dir.join("manifest.json");
    let text = fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
    let manifest: FrameSetManifest = serde_json::from_str(&text)?;
    let m_pix = manifest.side * manifest.side;
    let flat = read_f64_file(&dir.join("frames.f64"), manifest.m_data * m_pix)?;
    let frames = ndarray::Array2::from_shape_vec((manifest.m_data, m_pix), flat)
        .expect("length checked above");
    let detector = DetectorGrid::new(manifest.side, manifest.mask_radius)?;
    let rotations = if manifest.has_rotations {
        let flat = read_f64_file(&dir.join("rotations.f64"), manifest.m_data * 4)?;
        Some(
            flat.chunks_exact(4)
                .map(|c| {
                    Quaternion::from_unit(c[0], c[1], c[2], c[3]).ok_or_else(|| EmcError::Format {
                        path: dir.join("rotations.f64").display().to_string(),
                        reason: "quaternion is not unit-norm".into(),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let fluences = if manifest.has_fluences {
        Some(read_f64_file(&dir.join("fluences.f64"), manifest.m_data)?)
    } else {
        None
    };
    Ok((FrameSet::new(frames, detector, rotations, fluences)?, manifest))
}

/// Sidecar for persisted rotation sets.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RotationSetMeta {
    pub m_rot: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Writes `<base>.quat` (M x 4 little-endian float64, scalar first) and
/// `<base>.json`.
pub fn write_rotation_set(base: &Path, set: &RotationSet, meta: &RotationSetMeta) -> Result<()> {
    let mut meta = meta.clone();
    meta.m_rot = set.len();
    let flat: Vec<f64> = set
        .quaternions()
        .iter()
        .flat_map(|q| [q.w, q.x, q.y, q.z])
        .collect();
    write_f64_file(&base.with_extension("quat"), &flat)?;
    let json_path = base.with_extension("json");
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))
}

pub fn read_rotation_set(base: &Path) -> Result<(RotationSet, RotationSetMeta)> {
    let json_path = base.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
    let meta: RotationSetMeta = serde_json::from_str(&text)?;
    let flat = read_f64_file(&base.with_extension("quat"), meta.m_rot * 4)?;
    let quats = flat
        .chunks_exact(4)
        .map(|c| {
            Quaternion::from_unit(c[0], c[1], c[2], c[3]).ok_or_else(|| EmcError::Format {
                path: base.with_extension("quat").display().to_string(),
                reason: "quaternion is not unit-norm".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((RotationSet::uniform(quats)?, meta))
}

/// One labeled curve destined for the tidy CSV output.
#[derive(Debug, Clone)]
pub struct LabeledCurve {
    pub label: String,
    pub side: usize,
    pub curve: ShellErrorCurve,
}

/// Tidy CSV with columns `shell_radius,value,metric,label,side`.
/// Shells with no valid voxels are omitted.
pub fn write_curves(path: &Path, curves: &[LabeledCurve]) -> Result<()> {
    let mut out = String::from("shell_radius,value,metric,label,side\n");
    for lc in curves {
        for (&r, &v) in lc.curve.radii.iter().zip(&lc.curve.values) {
            if v.is_finite() {
                out.push_str(&format!(
                    "{r},{v},{},{},{}\n",
                    lc.curve.metric.as_str(),
                    lc.label,
                    lc.side
                ));
            }
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Convergence trace CSV: `iteration,change_metric,klein_divergence`
/// (the divergence after the M step of that iteration).
pub fn write_trace(path: &Path, trace: &[IterationTrace]) -> Result<()> {
    let mut out = String::from("iteration,change_metric,klein_divergence\n");
    for t in trace {
        out.push_str(&format!(
            "{},{},{}\n",
            t.iteration, t.change_metric, t.divergence_post_m
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub b: usize,
    pub beta: f64,
    pub universe_converged: bool,
    pub samples_converged: usize,
    pub samples_total: usize,
    pub unseen_frames: usize,
    /// Scalar-first quadruples, one per sample (standard estimator).
    pub sample_alignments: Vec<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub universe_alignment: Option<[f64; 4]>,
}

/// Persists a bootstrap result as a directory of volumes plus
/// `summary.json` and `curves.csv`.
pub fn write_bootstrap_result(dir: &Path, result: &BootstrapResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta = VolumeMeta {
        side: result.w_a.side(),
        ..VolumeMeta::default()
    };
    for (name, vol) in [
        ("W_a", &result.w_a),
        ("W_M", &result.w_m),
        ("V", &result.variance),
        ("R_std", &result.r_std),
        ("R_bias", &result.r_bias),
        ("R_S_hat", &result.r_s_hat),
        ("R_total", &result.r_total),
    ] {
        let mut m = meta.clone();
        m.label = Some(name.to_string());
        write_volume(&dir.join(name), vol, &m)?;
    }
    let summary = BootstrapSummary {
        b: result.b,
        beta: result.beta,
        universe_converged: result.universe_converged,
        samples_converged: result.sample_converged.iter().filter(|&&c| c).count(),
        samples_total: result.sample_converged.len(),
        unseen_frames: result.unseen_frames,
        sample_alignments: result
            .sample_alignments
            .iter()
            .map(|q| [q.w, q.x, q.y, q.z])
            .collect(),
        universe_alignment: result.universe_alignment.map(|q| [q.w, q.x, q.y, q.z]),
    };
    let json_path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))?;

    let curve = result.uncertainty_curve()?;
    write_curves(
        &dir.join("curves.csv"),
        &[LabeledCurve {
            label: "R_total".into(),
            side: result.w_a.side(),
            curve,
        }],
    )
}

/// Reads back the volumes of a persisted bootstrap result.
pub fn read_bootstrap_volumes(dir: &Path) -> Result<BootstrapVolumes> {
    let load = |name: &str| -> Result<IntensityVolume> {
        Ok(read_volume(&dir.join(name))?.0)
    };
    let json_path = dir.join("summary.json");
    let text = fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
    let summary: BootstrapSummary = serde_json::from_str(&text)?;
    Ok(BootstrapVolumes {
        w_a: load("W_a")?,
        w_m: load("W_M")?,
        variance: load("V")?,
        r_std: load("R_std")?,
        r_bias: load("R_bias")?,
        r_s_hat: load("R_S_hat")?,
        r_total: load("R_total")?,
        summary,
    })
}

#[derive(Debug, Clone)]
pub struct BootstrapVolumes {
    pub w_a: IntensityVolume,
    pub w_m: IntensityVolume,
    pub variance: IntensityVolume,
    pub r_std: IntensityVolume,
    pub r_bias: IntensityVolume,
    pub r_s_hat: IntensityVolume,
    pub r_total: IntensityVolume,
    pub summary: BootstrapSummary,
}

/// File names of the dataset variants written by the generation pipeline.
pub fn variant_dir(root: &Path, variant: &str) -> PathBuf {
    root.join(variant)
}

/// Appends rows to a sweep table CSV, creating it with a header first.
pub fn write_sweep_table(path: &Path, rows: &[crate::uncertainty::SweepRow]) -> Result<()> {
    let mut out = String::from("p_c,background,m_data,mean_uncertainty\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.p_c, r.background as u8, r.m_data, r.mean_uncertainty
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}
