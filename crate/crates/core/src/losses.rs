//! Training losses with values and analytic gradients w.r.t. the network
//! outputs `(α, raw quaternion, t)`.
//!
//! Every norm is mean-reduced over its coordinates. ℓ1 terms use the
//! subgradient `sign(0) = 0`. Gradients flow through shape synthesis
//! (`∂/∂α = Φᵀ·∂/∂x̂`) and through the quaternion normalization Jacobian.

use nalgebra::{DVector, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    quat_normalize, rotation_grad_to_quat, Calibration, CameraPose, Mat3, Mat4, Quaternion, Shape,
    Vec2, Vec3,
};
use crate::morphable::{MorphableModel, ShapeParams};

/// Raw network outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub alpha: ShapeParams,
    /// Quaternion head output before normalization.
    pub q_raw: [f64; 4],
    pub t: Vec3,
}

impl Prediction {
    /// The prediction that reproduces `pose` and `alpha` exactly.
    pub fn exact(alpha: ShapeParams, pose: &CameraPose) -> Self {
        Self {
            alpha,
            q_raw: pose.q().to_array(),
            t: pose.t(),
        }
    }

    pub fn pose(&self) -> Result<CameraPose> {
        let (q, _) = quat_normalize(self.q_raw)?;
        CameraPose::new(q, self.t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub shape: Shape,
    pub pose: CameraPose,
}

/// Weights of the multiterm baselines: `alpha_w` for the concatenated pose
/// term of the coarse loss, `beta_w`/`gamma_w` for the rotation/translation
/// terms of the XQT loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultitermWeights {
    pub alpha_w: f64,
    pub beta_w: f64,
    pub gamma_w: f64,
}

impl Default for MultitermWeights {
    fn default() -> Self {
        Self {
            alpha_w: 1.0,
            beta_w: 1.0,
            gamma_w: 1.0,
        }
    }
}

impl MultitermWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha_w", self.alpha_w),
            ("beta_w", self.beta_w),
            ("gamma_w", self.gamma_w),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::ConfigInvalid(format!("{name} must be ≥ 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Loss value and gradients w.r.t. `(α, q_raw, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_alpha: Vec<f64>,
    pub grad_qraw: [f64; 4],
    pub grad_t: Vec3,
    /// Smallest absolute ℓ1 residual (infinite for smooth losses). Finite
    /// difference checks are unreliable when this is tiny.
    pub kink_margin: f64,
}

/// How the pose error is carried onto the predicted shape before it is
/// projected into the virtual views.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    /// `x̃ = [R|t]⁻¹·[R̂|t̂]·x̂`: the true camera sees `x̃` exactly where the
    /// predicted camera sees `x̂`, so the input view reproduces the
    /// single-view loss.
    #[default]
    Reprojective,
    /// `x̃ = [R|t]·[R̂|t̂]⁻¹·x̂` applied to the object-frame shape. A rotation
    /// error is amplified by the camera distance into a translation.
    Composed,
}

impl std::str::FromStr for Distortion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reprojective" => Ok(Distortion::Reprojective),
            "composed" => Ok(Distortion::Composed),
            other => Err(Error::ConfigInvalid(format!("unknown distortion `{other}`"))),
        }
    }
}

/// Frame in which virtual view rotations are expressed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewAnchor {
    /// View rotations act on the object frame directly.
    #[default]
    World,
    /// View rotations are applied on top of the true camera rotation, so the
    /// identity view is the input view.
    Input,
}

impl std::str::FromStr for ViewAnchor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "world" => Ok(ViewAnchor::World),
            "input" => Ok(ViewAnchor::Input),
            other => Err(Error::ConfigInvalid(format!("unknown view anchor `{other}`"))),
        }
    }
}

/// Virtual cameras used by the multiview reprojection loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    views: Vec<CameraPose>,
    distortion: Distortion,
    anchor: ViewAnchor,
}

impl ViewSet {
    pub fn new(views: Vec<CameraPose>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::ConfigInvalid("a view set needs at least one view".into()));
        }
        Ok(Self {
            views,
            distortion: Distortion::default(),
            anchor: ViewAnchor::default(),
        })
    }

    pub fn with_anchor(mut self, anchor: ViewAnchor) -> Self {
        self.anchor = anchor;
        self
    }

    pub fn anchor(&self) -> ViewAnchor {
        self.anchor
    }

    pub fn with_distortion(mut self, distortion: Distortion) -> Self {
        self.distortion = distortion;
        self
    }

    pub fn distortion(&self) -> Distortion {
        self.distortion
    }

    pub fn views(&self) -> &[CameraPose] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Distribution of camera poses around an object at the origin.
///
/// Angles are uniform in `±range` (degrees, rotation `Rz(roll)·Rx(pitch)·Ry(yaw)`);
/// the translation is `t_mean` plus independent Gaussian noise with per-axis
/// standard deviations `t_sigma` (cm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewSampler {
    pub yaw_range: f64,
    pub pitch_range: f64,
    pub roll_range: f64,
    pub t_mean: [f64; 3],
    pub t_sigma: [f64; 3],
}

impl Default for ViewSampler {
    fn default() -> Self {
        Self {
            yaw_range: 90.0,
            pitch_range: 30.0,
            roll_range: 15.0,
            t_mean: [0.0, 0.0, -60.0],
            t_sigma: [2.0, 2.0, 5.0],
        }
    }
}

impl ViewSampler {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.yaw_range, self.pitch_range, self.roll_range]
            .iter()
            .chain(&self.t_sigma)
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.t_mean.iter().all(|v| v.is_finite())
            && self.t_mean[2] < 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("invalid view sampler {self:?}")))
        }
    }

    fn uniform<R: Rng + ?Sized>(rng: &mut R, range: f64) -> f64 {
        if range > 0.0 {
            rng.random_range(-range..=range)
        } else {
            0.0
        }
    }

    /// One pose. Translations that would bring the camera closer than a third
    /// of the mean distance are redrawn.
    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> CameraPose {
        let yaw = Self::uniform(rng, self.yaw_range);
        let pitch = Self::uniform(rng, self.pitch_range);
        let roll = Self::uniform(rng, self.roll_range);
        let q = Quaternion::from_yaw_pitch_roll(yaw, pitch, roll);
        let limit = self.t_mean[2] / 3.0;
        let t = loop {
            let t = Vec3::from_fn(|i, _| {
                let s = self.t_sigma[i];
                let noise = if s > 0.0 {
                    Normal::new(0.0, s).expect("finite sigma").sample(rng)
                } else {
                    0.0
                };
                self.t_mean[i] + noise
            });
            if t.z < limit {
                break t;
            }
        };
        CameraPose::new(q, t).expect("sampled quaternion is unit")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<ViewSet> {
        ViewSet::new((0..count).map(|_| self.sample_pose(rng)).collect())
    }
}

/// Returns `q_pred` or `−q_pred`, whichever has non-negative dot with `q_gt`.
/// A zero dot keeps `q_pred`.
pub fn quaternion_sign_align(q_gt: Quaternion, q_pred: Quaternion) -> Quaternion {
    if q_gt.dot(q_pred) < 0.0 {
        -q_pred
    } else {
        q_pred
    }
}

/// Loss selection with whatever extra inputs each loss needs.
#[derive(Debug, Clone)]
pub enum LossSpec {
    Gal,
    Srl,
    Mrl(ViewSet),
    Coarse(MultitermWeights),
    Xqt(MultitermWeights),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Gal,
    Srl,
    Mrl,
    Coarse,
    Xqt,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Coarse,
        LossKind::Xqt,
        LossKind::Gal,
        LossKind::Srl,
        LossKind::Mrl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Gal => "gal",
            LossKind::Srl => "srl",
            LossKind::Mrl => "mrl",
            LossKind::Coarse => "coarse",
            LossKind::Xqt => "xqt",
        }
    }

    /// Multiterm baselines carry weights that need tuning.
    pub fn is_multiterm(self) -> bool {
        matches!(self, LossKind::Coarse | LossKind::Xqt)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gal" => Ok(LossKind::Gal),
            "srl" => Ok(LossKind::Srl),
            "mrl" => Ok(LossKind::Mrl),
            "coarse" => Ok(LossKind::Coarse),
            "xqt" => Ok(LossKind::Xqt),
            other => Err(Error::ConfigInvalid(format!("unknown loss `{other}`"))),
        }
    }
}

impl LossSpec {
    pub fn kind(&self) -> LossKind {
        match self {
            LossSpec::Gal => LossKind::Gal,
            LossSpec::Srl => LossKind::Srl,
            LossSpec::Mrl(_) => LossKind::Mrl,
            LossSpec::Coarse(_) => LossKind::Coarse,
            LossSpec::Xqt(_) => LossKind::Xqt,
        }
    }
}

/// Prediction with the shape already decoded.
#[derive(Debug, Clone)]
pub struct Decoded<'a> {
    /// Flat predicted shape `x̂` (3N values).
    pub shape: &'a [f64],
    pub q: Quaternion,
    pub t: Vec3,
}

/// Gradients w.r.t. the decoded prediction (flat shape, unit quaternion, t).
#[derive(Debug, Clone)]
pub struct ShapeSpaceGrad {
    pub value: f64,
    pub grad_shape: Vec<f64>,
    pub grad_q: Vector4<f64>,
    pub grad_t: Vec3,
    pub kink_margin: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn point(flat: &[f64], n: usize) -> Vec3 {
    Vec3::new(flat[3 * n], flat[3 * n + 1], flat[3 * n + 2])
}

fn add_point(flat: &mut [f64], n: usize, g: &Vec3) {
    flat[3 * n] += g.x;
    flat[3 * n + 1] += g.y;
    flat[3 * n + 2] += g.z;
}

fn check_dims(shape: &[f64], gt: &GroundTruth) -> Result<usize> {
    let n = gt.shape.len();
    if shape.len() != 3 * n {
        return Err(Error::ParamDimension {
            expected: 3 * n,
            got: shape.len(),
        });
    }
    Ok(n)
}

/// Shape-space evaluation of any loss. `k` is required by the projective losses.
pub fn evaluate_decoded(
    spec: &LossSpec,
    k: &Calibration,
    pred: &Decoded<'_>,
    gt: &GroundTruth,
) -> Result<ShapeSpaceGrad> {
    match spec {
        LossSpec::Gal => gal_decoded(pred, gt),
        LossSpec::Srl => srl_decoded(k, pred, gt),
        LossSpec::Mrl(views) => mrl_decoded(k, pred, gt, views),
        LossSpec::Coarse(w) => multiterm_decoded(pred, gt, w, true),
        LossSpec::Xqt(w) => multiterm_decoded(pred, gt, w, false),
    }
}

fn gal_decoded(pred: &Decoded<'_>, gt: &GroundTruth) -> Result<ShapeSpaceGrad> {
    let n = check_dims(pred.shape, gt)?;
    let r_gt = gt.pose.rotation();
    let r = pred.q.rotation_unchecked();
    let scale = 1.0 / (3 * n) as f64;
    let mut value = 0.0;
    let mut margin = f64::INFINITY;
    let mut grad_shape = vec![0.0; 3 * n];
    let mut grad_r = Mat3::zeros();
    let mut grad_t = Vec3::zeros();
    for (i, x) in gt.shape.points().iter().enumerate() {
        let y = r_gt * x + gt.pose.t();
        let xh = point(pred.shape, i);
        let yh = r * xh + pred.t;
        let d = yh - y;
        value += d.abs().sum();
        margin = margin.min(d.abs().min());
        let s = d.map(sign) * scale;
        add_point(&mut grad_shape, i, &(r.transpose() * s));
        grad_r += s * xh.transpose();
        grad_t += s;
    }
    Ok(ShapeSpaceGrad {
        value: value * scale,
        grad_shape,
        grad_q: rotation_grad_to_quat(pred.q, &grad_r),
        grad_t,
        kink_margin: margin,
    })
}

fn srl_decoded(k: &Calibration, pred: &Decoded<'_>, gt: &GroundTruth) -> Result<ShapeSpaceGrad> {
    let n = check_dims(pred.shape, gt)?;
    let r_gt = gt.pose.rotation();
    let r = pred.q.rotation_unchecked();
    let scale = 1.0 / (2 * n) as f64;
    let mut value = 0.0;
    let mut margin = f64::INFINITY;
    let mut grad_shape = vec![0.0; 3 * n];
    let mut grad_r = Mat3::zeros();
    let mut grad_t = Vec3::zeros();
    for (i, x) in gt.shape.points().iter().enumerate() {
        let c_gt = r_gt * x + gt.pose.t();
        let p_gt = k
            .project_camera_point(&c_gt)
            .ok_or(Error::BehindImagePlane { index: i, w: c_gt.z })?;
        let xh = point(pred.shape, i);
        let c = r * xh + pred.t;
        let p = k
            .project_camera_point(&c)
            .ok_or(Error::BehindImagePlane { index: i, w: c.z })?;
        let d = p - p_gt;
        value += d.abs().sum();
        margin = margin.min(d.abs().min());
        let g_cam = k.pullback(&c, &(d.map(sign) * scale));
        add_point(&mut grad_shape, i, &(r.transpose() * g_cam));
        grad_r += g_cam * xh.transpose();
        grad_t += g_cam;
    }
    Ok(ShapeSpaceGrad {
        value: value * scale,
        grad_shape,
        grad_q: rotation_grad_to_quat(pred.q, &grad_r),
        grad_t,
        kink_margin: margin,
    })
}

fn mrl_decoded(
    k: &Calibration,
    pred: &Decoded<'_>,
    gt: &GroundTruth,
    views: &ViewSet,
) -> Result<ShapeSpaceGrad> {
    let n = check_dims(pred.shape, gt)?;
    let r_gt = gt.pose.rotation();
    let r_hat = pred.q.rotation_unchecked();
    let scale = 1.0 / (2 * n * views.len()) as f64;
    // Both conventions are x̃ = A·y + b with y an affine function of x̂.
    // Reprojective: A = Rᵀ·R̂, y = x̂, b = Rᵀ(t̂ − t).
    // Composed: A = R·R̂ᵀ, y = x̂ − t̂, b = t.
    let (a, offset) = match views.distortion() {
        Distortion::Reprojective => (r_gt.transpose() * r_hat, r_gt.transpose() * (pred.t - gt.pose.t())),
        Distortion::Composed => (r_gt * r_hat.transpose(), gt.pose.t()),
    };
    let distorted: Vec<(Vec3, Vec3)> = (0..n)
        .map(|i| {
            let y = match views.distortion() {
                Distortion::Reprojective => point(pred.shape, i),
                Distortion::Composed => point(pred.shape, i) - pred.t,
            };
            (y, a * y + offset)
        })
        .collect();
    let mut grad_z = vec![Vec3::zeros(); n];
    let mut value = 0.0;
    let mut margin = f64::INFINITY;
    for view in views.views() {
        let rv = match views.anchor() {
            ViewAnchor::World => view.rotation(),
            ViewAnchor::Input => view.rotation() * r_gt,
        };
        let tv = view.t();
        for (i, x) in gt.shape.points().iter().enumerate() {
            let c_gt = rv * x + tv;
            let p_gt = k
                .project_camera_point(&c_gt)
                .ok_or(Error::BehindImagePlane { index: i, w: c_gt.z })?;
            let c = rv * distorted[i].1 + tv;
            let p = k
                .project_camera_point(&c)
                .ok_or(Error::BehindImagePlane { index: i, w: c.z })?;
            let d: Vec2 = p - p_gt;
            value += d.abs().sum();
            margin = margin.min(d.abs().min());
            let g_cam = k.pullback(&c, &(d.map(sign) * scale));
            grad_z[i] += rv.transpose() * g_cam;
        }
    }
    let mut grad_shape = vec![0.0; 3 * n];
    let mut grad_a = Mat3::zeros();
    let mut sum_g = Vec3::zeros();
    let at = a.transpose();
    for (i, g) in grad_z.iter().enumerate() {
        add_point(&mut grad_shape, i, &(at * g));
        grad_a += g * distorted[i].0.transpose();
        sum_g += g;
    }
    let (grad_r_hat, grad_t) = match views.distortion() {
        // A = Rᵀ·R̂ ⇒ ∂L/∂R̂ = R·∂L/∂A; ∂b/∂t̂ = Rᵀ.
        Distortion::Reprojective => (r_gt * grad_a, r_gt * sum_g),
        // A = R·R̂ᵀ ⇒ ∂L/∂R̂ = (∂L/∂A)ᵀ·R; y depends on t̂ through −t̂.
        Distortion::Composed => (grad_a.transpose() * r_gt, -(at * sum_g)),
    };
    Ok(ShapeSpaceGrad {
        value: value * scale,
        grad_shape,
        grad_q: rotation_grad_to_quat(pred.q, &grad_r_hat),
        grad_t,
        kink_margin: margin,
    })
}

/// Coarse: `mean(x − x̂)² + α·mean([q,t] − [q̂,t̂])²`.
/// XQT: `mean(x − x̂)² + β·mean(q − q̂)² + γ·mean(t − t̂)²`.
fn multiterm_decoded(
    pred: &Decoded<'_>,
    gt: &GroundTruth,
    w: &MultitermWeights,
    coarse: bool,
) -> Result<ShapeSpaceGrad> {
    let n = check_dims(pred.shape, gt)?;
    let gt_flat = gt.shape.to_flat();
    let scale = 1.0 / (3 * n) as f64;
    let mut value = 0.0;
    let mut grad_shape = vec![0.0; 3 * n];
    for ((g, &xh), &x) in grad_shape.iter_mut().zip(pred.shape).zip(&gt_flat) {
        let d = xh - x;
        value += d * d * scale;
        *g = 2.0 * d * scale;
    }
    let q_gt = gt.pose.q();
    let aligned = quaternion_sign_align(q_gt, pred.q);
    let flip = if aligned == pred.q { 1.0 } else { -1.0 };
    let dq = aligned.to_vector() - q_gt.to_vector();
    let dt = pred.t - gt.pose.t();
    let (wq, wt) = if coarse {
        (w.alpha_w / 7.0, w.alpha_w / 7.0)
    } else {
        (w.beta_w / 4.0, w.gamma_w / 3.0)
    };
    value += wq * dq.norm_squared() + wt * dt.norm_squared();
    Ok(ShapeSpaceGrad {
        value,
        grad_shape,
        grad_q: dq * (2.0 * wq * flip),
        grad_t: dt * (2.0 * wt),
        kink_margin: f64::INFINITY,
    })
}

/// Unweighted terms of the multiterm losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultitermTerms {
    /// `mean(x − x̂)²`.
    pub shape: f64,
    /// `mean([q,t] − [q̂,t̂])²`, the coarse pose term.
    pub pose: f64,
    /// `mean(q − q̂)²`.
    pub rotation: f64,
    /// `mean(t − t̂)²`.
    pub translation: f64,
}

pub fn multiterm_terms(model: &MorphableModel, pred: &Prediction, gt: &GroundTruth) -> Result<MultitermTerms> {
    let shape = model.synthesize(&pred.alpha)?;
    if shape.len() != gt.shape.len() {
        return Err(Error::ParamDimension {
            expected: shape.len(),
            got: gt.shape.len(),
        });
    }
    let n = shape.len();
    let shape_term = shape
        .points()
        .iter()
        .zip(gt.shape.points())
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        / (3 * n) as f64;
    let (q, _) = quat_normalize(pred.q_raw)?;
    let dq = (quaternion_sign_align(gt.pose.q(), q).to_vector() - gt.pose.q().to_vector()).norm_squared();
    let dt = (pred.t - gt.pose.t()).norm_squared();
    Ok(MultitermTerms {
        shape: shape_term,
        pose: (dq + dt) / 7.0,
        rotation: dq / 4.0,
        translation: dt / 3.0,
    })
}

/// Decodes a prediction, evaluates `spec` and pulls gradients back to `(α, q_raw, t)`.
pub fn evaluate(
    spec: &LossSpec,
    model: &MorphableModel,
    k: &Calibration,
    pred: &Prediction,
    gt: &GroundTruth,
) -> Result<LossReport> {
    if gt.shape.len() != model.n_points() {
        return Err(Error::ParamDimension {
            expected: model.n_points(),
            got: gt.shape.len(),
        });
    }
    let shape = model.synthesize_flat(pred.alpha.alpha())?;
    let (q, jac) = quat_normalize(pred.q_raw)?;
    let decoded = Decoded {
        shape: shape.as_slice(),
        q,
        t: pred.t,
    };
    let g = evaluate_decoded(spec, k, &decoded, gt)?;
    Ok(pull_back(model, &jac, g))
}

pub(crate) fn pull_back(model: &MorphableModel, jac: &Mat4, g: ShapeSpaceGrad) -> LossReport {
    let grad_alpha = model.pullback(&DVector::from_vec(g.grad_shape));
    let gq = jac.transpose() * g.grad_q;
    LossReport {
        value: g.value,
        grad_alpha,
        grad_qraw: [gq[0], gq[1], gq[2], gq[3]],
        grad_t: g.grad_t,
        kink_margin: g.kink_margin,
    }
}

/// Geometric alignment loss: mean ℓ1 between `[R|t]·x_H` and `[R̂|t̂]·x̂_H`.
pub fn gal_loss(model: &MorphableModel, pred: &Prediction, gt: &GroundTruth) -> Result<LossReport> {
    evaluate(&LossSpec::Gal, model, &Calibration::default(), pred, gt)
}

/// Single-view reprojection loss: mean ℓ1 between the two projections.
pub fn srl_loss(
    model: &MorphableModel,
    k: &Calibration,
    pred: &Prediction,
    gt: &GroundTruth,
) -> Result<LossReport> {
    evaluate(&LossSpec::Srl, model, k, pred, gt)
}

/// Multiview reprojection loss: the prediction is distorted by the relative
/// pose `D = [R|t]·[R̂|t̂]⁻¹` and compared with the ground truth in every
/// virtual view; per-view mean ℓ1 errors are averaged over views.
pub fn mrl_loss(
    model: &MorphableModel,
    k: &Calibration,
    pred: &Prediction,
    gt: &GroundTruth,
    views: &ViewSet,
) -> Result<LossReport> {
    evaluate(&LossSpec::Mrl(views.clone()), model, k, pred, gt)
}

pub fn coarse_loss(
    model: &MorphableModel,
    pred: &Prediction,
    gt: &GroundTruth,
    w: &MultitermWeights,
) -> Result<LossReport> {
    w.validate()?;
    evaluate(&LossSpec::Coarse(*w), model, &Calibration::default(), pred, gt)
}

pub fn xqt_loss(
    model: &MorphableModel,
    pred: &Prediction,
    gt: &GroundTruth,
    w: &MultitermWeights,
) -> Result<LossReport> {
    w.validate()?;
    evaluate(&LossSpec::Xqt(*w), model, &Calibration::default(), pred, gt)
}

/// `‖α̂‖²` with gradient `2α̂`; the weight is applied by the caller.
pub fn reg_term(pred: &Prediction) -> LossReport {
    let a = pred.alpha.alpha();
    LossReport {
        value: a.iter().map(|v| v * v).sum(),
        grad_alpha: a.iter().map(|v| 2.0 * v).collect(),
        grad_qraw: [0.0; 4],
        grad_t: Vec3::zeros(),
        kink_margin: f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_apply, pose_relative, project};
    use crate::morphable::template::synthetic_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (MorphableModel, Calibration, GroundTruth, ShapeParams) {
        let (_, model) = synthetic_model(64, 16, 6, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alpha = model.sample_params(&mut rng);
        let shape = model.synthesize(&alpha).unwrap();
        let pose = CameraPose::new(
            Quaternion::from_yaw_pitch_roll(25.0, -10.0, 5.0),
            Vec3::new(1.0, -2.0, -58.0),
        )
        .unwrap();
        (model, Calibration::default(), GroundTruth { shape, pose }, alpha)
    }

    fn views(n: usize, seed: u64) -> ViewSet {
        ViewSampler::default()
            .sample(&mut ChaCha8Rng::seed_from_u64(seed), n)
            .unwrap()
    }

    fn all_specs() -> Vec<LossSpec> {
        let w = MultitermWeights {
            alpha_w: 3.0,
            beta_w: 2.0,
            gamma_w: 0.5,
        };
        vec![
            LossSpec::Gal,
            LossSpec::Srl,
            LossSpec::Mrl(views(3, 1)),
            LossSpec::Coarse(w),
            LossSpec::Xqt(w),
        ]
    }

    #[test]
    fn zero_at_truth() {
        let (model, k, gt, alpha) = setup();
        let pred = Prediction::exact(alpha, &gt.pose);
        for spec in all_specs() {
            let r = evaluate(&spec, &model, &k, &pred, &gt).unwrap();
            assert!(r.value <= 1e-10, "{:?}: {}", spec.kind(), r.value);
            if matches!(spec.kind(), LossKind::Coarse | LossKind::Xqt) {
                assert!(r.grad_alpha.iter().all(|g| g.abs() < 1e-10));
                assert!(r.grad_t.norm() < 1e-10);
            }
        }
    }

    #[test]
    fn gal_translation_offset() {
        let (model, _, gt, alpha) = setup();
        let mut pred = Prediction::exact(alpha, &gt.pose);
        pred.t += Vec3::x();
        let r = gal_loss(&model, &pred, &gt).unwrap();
        assert!((r.value - 1.0 / 3.0).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn flattened_shape_fools_srl_not_gal() {
        let (_, k, gt, _) = setup();
        // Slide every point along its viewing ray toward the mean camera depth.
        let posed = pose_apply(&gt.pose, &gt.shape);
        let mean_z = posed.centroid().z;
        let flat_cam = posed.map(|c| c * (mean_z / c.z));
        let rt = gt.pose.rotation().transpose();
        let flattened = flat_cam.map(|c| rt * (c - gt.pose.t()));
        let flat_gt = GroundTruth {
            shape: flattened,
            pose: gt.pose,
        };
        // Compare the flattened shape (as a "prediction" in shape space) against the truth.
        let flat = flat_gt.shape.to_flat();
        let decoded = Decoded {
            shape: &flat,
            q: gt.pose.q(),
            t: gt.pose.t(),
        };
        let srl = evaluate_decoded(&LossSpec::Srl, &k, &decoded, &gt).unwrap();
        let gal = evaluate_decoded(&LossSpec::Gal, &k, &decoded, &gt).unwrap();
        assert!(srl.value < 1e-9, "srl {}", srl.value);
        assert!(gal.value > 0.5, "gal {}", gal.value);
    }

    #[test]
    fn mrl_with_exact_pose_is_mean_of_srl_views() {
        let (model, k, gt, alpha) = setup();
        let mut a = alpha.alpha().to_vec();
        a[0] += 3.0;
        a[2] -= 1.5;
        let pred = Prediction::exact(ShapeParams::new(a).unwrap(), &gt.pose);
        let vs = views(4, 7);
        let mrl = mrl_loss(&model, &k, &pred, &gt, &vs).unwrap();
        let mut acc = 0.0;
        for v in vs.views() {
            let p = Prediction {
                q_raw: v.q().to_array(),
                t: v.t(),
                ..pred.clone()
            };
            let g = GroundTruth {
                shape: gt.shape.clone(),
                pose: *v,
            };
            acc += srl_loss(&model, &k, &p, &g).unwrap().value;
        }
        assert!((mrl.value - acc / 4.0).abs() < 1e-12);
    }

    #[test]
    fn mrl_in_the_input_view_is_srl() {
        let (model, k, gt, alpha) = setup();
        let mut a = alpha.alpha().to_vec();
        a[1] -= 2.0;
        let pred = Prediction {
            alpha: ShapeParams::new(a).unwrap(),
            q_raw: [0.95, 0.08, -0.2, 0.04],
            t: gt.pose.t() + Vec3::new(0.7, -0.4, 3.0),
        };
        let input_view = ViewSet::new(vec![gt.pose]).unwrap();
        let mrl = mrl_loss(&model, &k, &pred, &gt, &input_view).unwrap();
        let srl = srl_loss(&model, &k, &pred, &gt).unwrap();
        assert!((mrl.value - srl.value).abs() < 1e-9);
        let composed = mrl_loss(&model, &k, &pred, &gt, &input_view.with_distortion(Distortion::Composed)).unwrap();
        assert!((composed.value - srl.value).abs() > 1e-3);
        // An anchored identity rotation is the input view too.
        let anchored = ViewSet::new(vec![CameraPose::new(Quaternion::IDENTITY, gt.pose.t()).unwrap()])
            .unwrap()
            .with_anchor(ViewAnchor::Input);
        let r = mrl_loss(&model, &k, &pred, &gt, &anchored).unwrap();
        assert!((r.value - srl.value).abs() < 1e-9);
        assert!(r.grad_qraw.iter().zip(&mrl.grad_qraw).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn composed_distortion_matches_pose_relative() {
        let (model, k, gt, alpha) = setup();
        let pred = Prediction {
            alpha: alpha.clone(),
            q_raw: [0.9, -0.1, 0.25, 0.1],
            t: gt.pose.t() + Vec3::new(-1.0, 0.5, 2.0),
        };
        let d = pose_relative(&gt.pose, &pred.pose().unwrap());
        let x_hat = model.synthesize(&alpha).unwrap();
        let distorted = x_hat.map(|p| (d * p.push(1.0)).xyz());
        let vs = views(3, 11);
        let mut acc = 0.0;
        for v in vs.views() {
            let a = project(&k, v, &gt.shape).unwrap();
            let b = project(&k, v, &distorted).unwrap();
            acc += a.iter().zip(&b).map(|(p, q)| (p - q).abs().sum()).sum::<f64>() / (2 * a.len()) as f64;
        }
        let composed = mrl_loss(&model, &k, &pred, &gt, &vs.clone().with_distortion(Distortion::Composed)).unwrap();
        assert!((composed.value - acc / 3.0).abs() < 1e-10);
        // The default moves the prediction by the inverse composition.
        let inv = gt.pose.inverse_homogeneous() * pred.pose().unwrap().to_homogeneous();
        let moved = x_hat.map(|p| (inv * p.push(1.0)).xyz());
        let mut acc = 0.0;
        for v in vs.views() {
            let a = project(&k, v, &gt.shape).unwrap();
            let b = project(&k, v, &moved).unwrap();
            acc += a.iter().zip(&b).map(|(p, q)| (p - q).abs().sum()).sum::<f64>() / (2 * a.len()) as f64;
        }
        let default = mrl_loss(&model, &k, &pred, &gt, &vs).unwrap();
        assert!((default.value - acc / 3.0).abs() < 1e-10);
    }

    #[test]
    fn multiterm_terms_recompose_losses() {
        let (model, _, gt, alpha) = setup();
        let mut a = alpha.alpha().to_vec();
        a[0] += 1.0;
        let pred = Prediction {
            alpha: ShapeParams::new(a).unwrap(),
            q_raw: [-0.9, 0.2, 0.1, 0.0],
            t: gt.pose.t() + Vec3::new(1.0, 2.0, -3.0),
        };
        let w = MultitermWeights {
            alpha_w: 0.7,
            beta_w: 2.0,
            gamma_w: 0.3,
        };
        let terms = multiterm_terms(&model, &pred, &gt).unwrap();
        let coarse = coarse_loss(&model, &pred, &gt, &w).unwrap().value;
        let xqt = xqt_loss(&model, &pred, &gt, &w).unwrap().value;
        assert!((coarse - (terms.shape + 0.7 * terms.pose)).abs() < 1e-12);
        assert!((xqt - (terms.shape + 2.0 * terms.rotation + 0.3 * terms.translation)).abs() < 1e-12);
    }

    #[test]
    fn mrl_is_average_of_single_views() {
        let (model, k, gt, alpha) = setup();
        let mut pred = Prediction::exact(alpha, &gt.pose);
        pred.q_raw = [0.9, 0.1, 0.3, -0.05];
        pred.t += Vec3::new(0.5, -0.3, 2.0);
        let vs = views(5, 9);
        let all = mrl_loss(&model, &k, &pred, &gt, &vs).unwrap();
        let single: f64 = vs
            .views()
            .iter()
            .map(|v| {
                mrl_loss(&model, &k, &pred, &gt, &ViewSet::new(vec![*v]).unwrap())
                    .unwrap()
                    .value
            })
            .sum::<f64>()
            / 5.0;
        assert!((all.value - single).abs() < 1e-12);
    }

    #[test]
    fn multiterm_weight_annihilation() {
        let (model, _, gt, alpha) = setup();
        let mut a = alpha.alpha().to_vec();
        a[1] += 2.0;
        let pred = Prediction {
            alpha: ShapeParams::new(a).unwrap(),
            q_raw: [0.8, 0.2, 0.1, 0.0],
            t: Vec3::new(1.0, 2.0, -50.0),
        };
        let zero = MultitermWeights {
            alpha_w: 0.0,
            beta_w: 0.0,
            gamma_w: 0.0,
        };
        let c = coarse_loss(&model, &pred, &gt, &zero).unwrap();
        let x = xqt_loss(&model, &pred, &gt, &zero).unwrap();
        let shape = model.synthesize(&pred.alpha).unwrap();
        let mse = shape
            .to_flat()
            .iter()
            .zip(gt.shape.to_flat())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / (3 * shape.len()) as f64;
        assert!((c.value - mse).abs() < 1e-12);
        assert!((x.value - mse).abs() < 1e-12);
        assert_eq!(c.grad_qraw, [0.0; 4]);
    }

    #[test]
    fn multiterm_ignores_quaternion_sign() {
        let (model, _, gt, alpha) = setup();
        let w = MultitermWeights::default();
        let mut pred = Prediction::exact(alpha, &gt.pose);
        pred.q_raw = (-gt.pose.q()).to_array();
        assert!(xqt_loss(&model, &pred, &gt, &w).unwrap().value < 1e-12);
        assert!(coarse_loss(&model, &pred, &gt, &w).unwrap().value < 1e-12);
    }

    #[test]
    fn reg_term_arithmetic() {
        let pred = Prediction {
            alpha: ShapeParams::new(vec![3.0, 4.0]).unwrap(),
            q_raw: [1.0, 0.0, 0.0, 0.0],
            t: Vec3::zeros(),
        };
        let r = reg_term(&pred);
        assert_eq!(r.value, 25.0);
        assert_eq!(r.grad_alpha, vec![6.0, 8.0]);
        let zero = Prediction {
            alpha: ShapeParams::new(vec![0.0; 2]).unwrap(),
            ..pred
        };
        assert_eq!(reg_term(&zero).value, 0.0);
    }

    #[test]
    fn sign_align_rules() {
        let a = Quaternion::new(0.5, 0.5, 0.5, 0.5);
        assert_eq!(quaternion_sign_align(a, a), a);
        assert_eq!(quaternion_sign_align(a, -a), a);
        let b = Quaternion::new(0.5, -0.5, 0.5, -0.5);
        assert_eq!(a.dot(b), 0.0);
        assert_eq!(quaternion_sign_align(a, b), b);
    }

    #[test]
    fn normalization_invariance() {
        let (model, k, gt, alpha) = setup();
        let pred = Prediction {
            alpha,
            q_raw: [0.7, 0.2, -0.3, 0.1],
            t: Vec3::new(0.5, 0.5, -57.0),
        };
        for spec in all_specs() {
            let base = evaluate(&spec, &model, &k, &pred, &gt).unwrap();
            let dot: f64 = base
                .grad_qraw
                .iter()
                .zip(&pred.q_raw)
                .map(|(g, q)| g * q)
                .sum();
            assert!(dot.abs() < 1e-8, "{:?}: {dot}", spec.kind());
            for c in [0.5, 3.0, 10.0] {
                let scaled = Prediction {
                    q_raw: pred.q_raw.map(|v| v * c),
                    ..pred.clone()
                };
                let r = evaluate(&spec, &model, &k, &scaled, &gt).unwrap();
                assert!((r.value - base.value).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn gal_invariant_under_common_translation() {
        let (model, _, gt, alpha) = setup();
        let mut a = alpha.alpha().to_vec();
        a[0] -= 2.0;
        let pred = Prediction {
            alpha: ShapeParams::new(a).unwrap(),
            q_raw: Quaternion::from_yaw_pitch_roll(20.0, -5.0, 3.0).to_array(),
            t: Vec3::new(0.0, -1.0, -61.0),
        };
        let base = gal_loss(&model, &pred, &gt).unwrap().value;
        let shift = Vec3::new(3.0, -1.0, 2.0);
        let moved_gt = GroundTruth {
            shape: gt.shape.clone(),
            pose: CameraPose::new(gt.pose.q(), gt.pose.t() + shift).unwrap(),
        };
        let moved_pred = Prediction {
            t: pred.t + shift,
            ..pred
        };
        let moved = gal_loss(&model, &moved_pred, &moved_gt).unwrap().value;
        assert!((moved - base).abs() < 1e-10);
    }

    #[test]
    fn behind_image_plane_propagates() {
        let (model, k, gt, alpha) = setup();
        let mut pred = Prediction::exact(alpha, &gt.pose);
        // Put the camera centre on the plane of vertex 5.
        let x5 = model.synthesize(&pred.alpha).unwrap().points()[5];
        pred.t.z = -(gt.pose.rotation() * x5).z;
        let err = srl_loss(&model, &k, &pred, &gt);
        assert!(matches!(err, Err(Error::BehindImagePlane { index: 5, .. })), "{err:?}");
    }
}
