//! Reconstruction metrics, rigid ICP, and per-angle error tables.
//!
//! Shapes are in centimeters; `shape3d` is reported in millimeters.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, Calibration, CameraPose, Mat3, Shape, Vec3};
use crate::losses::quaternion_sign_align;
use crate::morphable::{kabsch, RigidTransform};
use crate::synthdata::Scene;
use crate::training::RegressorModel;

pub const ICP_MAX_ITERATIONS: usize = 50;
pub const ICP_TOLERANCE: f64 = 1e-6;

fn check_same_len(a: &Shape, b: &Shape) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidShape(format!(
            "shapes differ in point count: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Mean Euclidean point distance, in millimeters.
pub fn shape3d_error(gt: &Shape, pred: &Shape) -> Result<f64> {
    check_same_len(gt, pred)?;
    let sum: f64 = gt
        .points()
        .iter()
        .zip(pred.points())
        .map(|(a, b)| (a - b).norm())
        .sum();
    Ok(10.0 * sum / gt.len().max(1) as f64)
}

/// `‖t − t̂‖₂` in centimeters.
pub fn translation_error(gt: &CameraPose, pred: &CameraPose) -> f64 {
    (gt.t() - pred.t()).norm()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Geodesic angle `2·acos(|q·q̂|)`.
    #[default]
    Standard,
    /// `acos(2·(q·q̂))`, clamped into the domain. Saturates at 0 for small angles.
    DoubledDot,
}

impl std::str::FromStr for RotationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(RotationMode::Standard),
            "doubled_dot" | "doubled-dot" => Ok(RotationMode::DoubledDot),
            other => Err(Error::ConfigInvalid(format!("unknown rotation mode `{other}`"))),
        }
    }
}

/// Rotation error in degrees.
pub fn rotation_error(gt: &CameraPose, pred: &CameraPose, mode: RotationMode) -> f64 {
    let (a, b) = (gt.q(), pred.q());
    let radians = match mode {
        // Equal to 2·acos(|q·q̂|) but exact near zero angle.
        RotationMode::Standard => {
            let b = quaternion_sign_align(a, b);
            let diff = a.to_vector() - b.to_vector();
            let sum = a.to_vector() + b.to_vector();
            4.0 * diff.norm().atan2(sum.norm())
        }
        RotationMode::DoubledDot => (2.0 * a.dot(b)).clamp(-1.0, 1.0).acos(),
    };
    radians.to_degrees()
}

/// Mean pixel distance between corresponding projections.
pub fn reprojection_error(k: &Calibration, gt: (&Shape, &CameraPose), pred: (&Shape, &CameraPose)) -> Result<f64> {
    check_same_len(gt.0, pred.0)?;
    let a = project(k, gt.1, gt.0)?;
    let b = project(k, pred.1, pred.0)?;
    let sum: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).norm()).sum();
    Ok(sum / a.len().max(1) as f64)
}

/// Extent of the shape along the camera's optical axis.
pub fn depth_extent(shape: &Shape, pose: &CameraPose) -> f64 {
    let (lo, hi) = shape
        .points()
        .iter()
        .map(|p| pose.transform_point(p).z)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| (lo.min(z), hi.max(z)));
    hi - lo
}

/// Predicted-over-true camera-frame depth extent (1 = no flattening).
pub fn depth_extent_ratio(gt: (&Shape, &CameraPose), pred: (&Shape, &CameraPose)) -> f64 {
    depth_extent(pred.0, pred.1) / depth_extent(gt.0, gt.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpAlignment {
    pub aligned: Shape,
    pub transform: RigidTransform,
    /// Root mean squared per-coordinate residual to the closest target points.
    pub rms: f64,
    pub landmark_rms: f64,
    pub initial_landmark_rms: f64,
    pub iterations: usize,
}

fn landmark_rms(source: &Shape, target: &Shape, pairs: &[(usize, usize)], tf: &RigidTransform) -> f64 {
    let sum: f64 = pairs
        .iter()
        .map(|&(s, t)| (tf.apply(&source.points()[s]) - target.points()[t]).norm_squared())
        .sum();
    (sum / (3 * pairs.len()) as f64).sqrt()
}

/// Closest target index for every point (lowest index wins ties).
fn nearest(points: &[Vec3], target: &[Vec3]) -> (Vec<usize>, f64) {
    let mut sq = 0.0;
    let idx = points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (j, q) in target.iter().enumerate() {
                let d = (p - q).norm_squared();
                if d < best.0 {
                    best = (d, j);
                }
            }
            sq += best.0;
            best.1
        })
        .collect();
    (idx, (sq / (3 * points.len()) as f64).sqrt())
}

/// Landmark Kabsch initialization followed by point-to-point ICP.
///
/// An ICP update is only accepted if it does not increase the landmark RMS
/// above the Kabsch initialization.
pub fn rigid_icp_align(source: &Shape, target: &Shape, landmarks: &[(usize, usize)]) -> Result<IcpAlignment> {
    if landmarks.len() < 3
        || landmarks
            .iter()
            .any(|&(s, t)| s >= source.len() || t >= target.len())
    {
        return Err(Error::DegenerateLandmarks);
    }
    let src: Vec<Vec3> = landmarks.iter().map(|&(s, _)| source.points()[s]).collect();
    let dst: Vec<Vec3> = landmarks.iter().map(|&(_, t)| target.points()[t]).collect();
    let c = src.iter().sum::<Vec3>() / src.len() as f64;
    let mut cov = Mat3::zeros();
    for p in &src {
        cov += (p - c) * (p - c).transpose();
    }
    let mut ev = SymmetricEigen::new(cov).eigenvalues;
    ev.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-10 * ev[0] {
        return Err(Error::DegenerateLandmarks);
    }

    let mut tf = kabsch(&src, &dst)?;
    let initial = landmark_rms(source, target, landmarks, &tf);
    let mut current = tf.apply_shape(source);
    let (mut matches, mut rms) = nearest(current.points(), target.points());
    let mut iterations = 0;
    while iterations < ICP_MAX_ITERATIONS {
        let matched: Vec<Vec3> = matches.iter().map(|&j| target.points()[j]).collect();
        let step = kabsch(current.points(), &matched)?;
        let candidate = step.after(&tf);
        if landmark_rms(source, target, landmarks, &candidate) > initial {
            break;
        }
        iterations += 1;
        tf = candidate;
        current = tf.apply_shape(source);
        let (next_matches, next_rms) = nearest(current.points(), target.points());
        let change = (rms - next_rms).abs();
        matches = next_matches;
        rms = next_rms;
        if change < ICP_TOLERANCE {
            break;
        }
    }
    Ok(IcpAlignment {
        landmark_rms: landmark_rms(source, target, landmarks, &tf),
        aligned: current,
        transform: tf,
        rms,
        initial_landmark_rms: initial,
        iterations,
    })
}

/// Metrics of one (scene, view) sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub subject_id: usize,
    pub view: usize,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub shape3d_mm: f64,
    pub translation_cm: f64,
    pub rotation_deg: f64,
    pub reprojection_px: f64,
    pub depth_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub shape3d_mm: f64,
    pub translation_cm: f64,
    pub rotation_deg: f64,
    pub reprojection_px: f64,
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Self {
            shape3d_mm: mean(|s| s.shape3d_mm),
            translation_cm: mean(|s| s.translation_cm),
            rotation_deg: mean(|s| s.rotation_deg),
            reprojection_px: mean(|s| s.reprojection_px),
            samples,
        }
    }

    /// Mean depth-extent ratio over samples with `|yaw| > min_abs_yaw`.
    pub fn profile_depth_ratio(&self, min_abs_yaw: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| s.yaw.abs() > min_abs_yaw)
            .map(|s| s.depth_ratio)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.samples {
            w.serialize(s).map_err(|e| Error::format("csv", e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregate summary without the per-sample rows.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "samples": self.samples.len(),
            "shape3d_mm": self.shape3d_mm,
            "translation_cm": self.translation_cm,
            "rotation_deg": self.rotation_deg,
            "reprojection_px": self.reprojection_px,
            "angle_convention": "R = Rz(roll)·Rx(pitch)·Ry(yaw), degrees",
        })
    }
}

/// Metrics of one prediction against its ground truth.
pub fn sample_metrics(
    k: &Calibration,
    gt: (&Shape, &CameraPose),
    pred: (&Shape, &CameraPose),
    mode: RotationMode,
) -> Result<(f64, f64, f64, f64, f64)> {
    Ok((
        shape3d_error(gt.0, pred.0)?,
        translation_error(gt.1, pred.1),
        rotation_error(gt.1, pred.1, mode),
        reprojection_error(k, gt, pred)?,
        depth_extent_ratio(gt, pred),
    ))
}

/// Runs the regressor on every view of `scenes` and scores it.
pub fn evaluate_regressor<'a>(
    reg: &RegressorModel,
    scenes: impl IntoIterator<Item = &'a Scene>,
    mode: RotationMode,
) -> Result<MetricReport> {
    let k = reg.calibration();
    let model = reg.decoder();
    let scenes: Vec<&Scene> = scenes.into_iter().collect();
    let observations: Vec<_> = scenes.iter().flat_map(|s| s.views.iter().map(|v| &v.observation)).collect();
    let predictions = reg.predict_batch(&observations)?;
    let mut preds = predictions.into_iter();
    let mut samples = Vec::with_capacity(observations.len());
    for scene in scenes {
        for (v, view) in scene.views.iter().enumerate() {
            let pred = preds.next().expect("one prediction per view");
            let shape = model.synthesize(&pred.alpha)?;
            let pose = pred.pose()?;
            let context = |e: Error| e.in_sample(format!("subject {} view {v}", scene.subject_id));
            let (s3, tr, rot, rep, ratio) =
                sample_metrics(k, (&scene.gt_shape, &view.pose), (&shape, &pose), mode).map_err(context)?;
            let (yaw, pitch, roll) = view.pose.yaw_pitch_roll();
            samples.push(SampleMetrics {
                subject_id: scene.subject_id,
                view: v,
                yaw,
                pitch,
                roll,
                shape3d_mm: s3,
                translation_cm: tr,
                rotation_deg: rot,
                reprojection_px: rep,
                depth_ratio: ratio,
            });
        }
    }
    Ok(MetricReport::from_samples(samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Yaw,
    Pitch,
    Roll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleBin {
    pub axis: Axis,
    pub lo_deg: f64,
    pub hi_deg: f64,
    pub count: usize,
    pub shape3d_mm: f64,
    pub reprojection_px: f64,
}

/// Groups samples by ground-truth yaw, pitch and roll. Only populated bins are
/// returned, ordered by axis and then angle.
pub fn per_angle_bins(samples: &[SampleMetrics], bin_width_deg: f64) -> Result<Vec<AngleBin>> {
    if !(bin_width_deg.is_finite() && bin_width_deg > 0.0) {
        return Err(Error::ConfigInvalid(format!("bin width must be positive, got {bin_width_deg}")));
    }
    let mut out = Vec::new();
    for axis in [Axis::Yaw, Axis::Pitch, Axis::Roll] {
        let mut bins: BTreeMap<i64, (usize, f64, f64)> = BTreeMap::new();
        for s in samples {
            let angle = match axis {
                Axis::Yaw => s.yaw,
                Axis::Pitch => s.pitch,
                Axis::Roll => s.roll,
            };
            let e = bins.entry((angle / bin_width_deg).floor() as i64).or_default();
            e.0 += 1;
            e.1 += s.shape3d_mm;
            e.2 += s.reprojection_px;
        }
        out.extend(bins.into_iter().map(|(b, (n, s3, rep))| AngleBin {
            axis,
            lo_deg: b as f64 * bin_width_deg,
            hi_deg: (b + 1) as f64 * bin_width_deg,
            count: n,
            shape3d_mm: s3 / n as f64,
            reprojection_px: rep / n as f64,
        }));
    }
    Ok(out)
}

pub fn write_bins_csv<W: Write>(bins: &[AngleBin], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in bins {
        w.serialize(b).map_err(|e| Error::format("csv", e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Rotation-only sign check used by tests and reports: the aligned quaternion
/// of `pred` relative to `gt`.
pub fn aligned_quaternion(gt: &CameraPose, pred: &CameraPose) -> crate::geometry::Quaternion {
    quaternion_sign_align(gt.q(), pred.q())
}
