//! Central finite-difference verification of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Calibration, Vec3};
use crate::losses::{
    evaluate, Distortion, GroundTruth, LossKind, LossReport, LossSpec, MultitermWeights, Prediction,
    ViewAnchor, ViewSampler,
};
use crate::morphable::{MorphableModel, ShapeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradBlock {
    Alpha,
    QRaw,
    T,
}

impl GradBlock {
    pub fn name(self) -> &'static str {
        match self {
            GradBlock::Alpha => "alpha",
            GradBlock::QRaw => "q_raw",
            GradBlock::T => "t",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Instances whose smallest ℓ1 residual is below this are redrawn.
    pub kink_margin: f64,
    pub max_redraws: usize,
    pub views: usize,
    #[serde(default)]
    pub distortion: Distortion,
    pub view_anchor: ViewAnchor,
    /// Test hook: perturbs the analytic gradient of one block.
    #[serde(default)]
    pub corrupt: Option<GradBlock>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            kink_margin: 1e-2,
            max_redraws: 1000,
            views: 3,
            distortion: Distortion::default(),
            view_anchor: ViewAnchor::default(),
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockStats {
    pub block: GradBlock,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: LossKind,
    pub trials: usize,
    pub redraws: usize,
    pub blocks: Vec<BlockStats>,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.failures == 0)
    }

    pub fn failed_blocks(&self) -> Vec<GradBlock> {
        self.blocks
            .iter()
            .filter(|b| b.failures > 0)
            .map(|b| b.block)
            .collect()
    }
}

/// A random prediction near a random ground truth, plus a loss spec with
/// random weights or views.
pub fn random_instance<R: Rng + ?Sized>(
    kind: LossKind,
    model: &MorphableModel,
    views: usize,
    rng: &mut R,
) -> Result<(LossSpec, Prediction, GroundTruth)> {
    let sampler = ViewSampler {
        yaw_range: 60.0,
        ..ViewSampler::default()
    };
    let gt_alpha = model.sample_params(rng);
    let gt = GroundTruth {
        shape: model.synthesize(&gt_alpha)?,
        pose: sampler.sample_pose(rng),
    };
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let alpha: Vec<f64> = gt_alpha
        .alpha()
        .iter()
        .zip(model.eigenvalues())
        .map(|(a, l)| a + 0.5 * l.sqrt().max(0.1) * normal())
        .collect();
    let q = gt.pose.q().to_array();
    let scale = 0.5 + 1.5 * (normal().abs().min(1.0));
    let q_raw = q.map(|v| (v + 0.1 * normal()) * scale);
    let t = gt.pose.t() + Vec3::new(normal(), normal(), 2.0 * normal());
    let pred = Prediction {
        alpha: ShapeParams::new(alpha)?,
        q_raw,
        t,
    };
    let mut weight = || rng.random_range(0.1..5.0);
    let spec = match kind {
        LossKind::Gal => LossSpec::Gal,
        LossKind::Srl => LossSpec::Srl,
        LossKind::Mrl => LossSpec::Mrl(ViewSampler::default().sample(rng, views)?),
        LossKind::Coarse | LossKind::Xqt => {
            let w = MultitermWeights {
                alpha_w: weight(),
                beta_w: weight(),
                gamma_w: weight(),
            };
            if kind == LossKind::Coarse {
                LossSpec::Coarse(w)
            } else {
                LossSpec::Xqt(w)
            }
        }
    };
    Ok((spec, pred, gt))
}

fn perturbed(pred: &Prediction, block: GradBlock, i: usize, h: f64) -> Result<Prediction> {
    let mut p = pred.clone();
    match block {
        GradBlock::Alpha => {
            let mut a = p.alpha.alpha().to_vec();
            a[i] += h;
            p.alpha = ShapeParams::new(a)?;
        }
        GradBlock::QRaw => p.q_raw[i] += h,
        GradBlock::T => p.t[i] += h,
    }
    Ok(p)
}

fn analytic(report: &LossReport, block: GradBlock) -> Vec<f64> {
    match block {
        GradBlock::Alpha => report.grad_alpha.clone(),
        GradBlock::QRaw => report.grad_qraw.to_vec(),
        GradBlock::T => report.grad_t.as_slice().to_vec(),
    }
}

/// Compares analytic and central-difference gradients of one instance.
/// Returns `(block, max abs err, max rel err, failed)` per block.
pub fn check_instance(
    spec: &LossSpec,
    model: &MorphableModel,
    k: &Calibration,
    pred: &Prediction,
    gt: &GroundTruth,
    config: &GradCheckConfig,
) -> Result<Vec<(GradBlock, f64, f64, bool)>> {
    let report = evaluate(spec, model, k, pred, gt)?;
    let mut out = Vec::with_capacity(3);
    for block in [GradBlock::Alpha, GradBlock::QRaw, GradBlock::T] {
        let mut grad = analytic(&report, block);
        if config.corrupt == Some(block) {
            grad[0] += 1.0 + grad[0].abs();
        }
        let (mut max_abs, mut max_rel, mut failed) = (0.0f64, 0.0f64, false);
        for (i, &a) in grad.iter().enumerate() {
            let plus = evaluate(spec, model, k, &perturbed(pred, block, i, config.step)?, gt)?;
            let minus = evaluate(spec, model, k, &perturbed(pred, block, i, -config.step)?, gt)?;
            let numeric = (plus.value - minus.value) / (2.0 * config.step);
            let err = (a - numeric).abs();
            let rel = err / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            max_abs = max_abs.max(err);
            if err > config.abs_tol {
                max_rel = max_rel.max(rel);
            }
            if err > config.abs_tol && rel > config.rel_tol {
                failed = true;
            }
        }
        out.push((block, max_abs, max_rel, failed));
    }
    Ok(out)
}

/// Runs `config.trials` random instances of one loss.
pub fn check_loss(
    kind: LossKind,
    model: &MorphableModel,
    k: &Calibration,
    config: &GradCheckConfig,
    seed: u64,
) -> Result<LossCheck> {
    if config.trials == 0 {
        return Err(Error::ConfigInvalid("grad-check needs at least one trial".into()));
    }
    if !(config.step > 0.0 && config.step.is_finite()) {
        return Err(Error::ConfigInvalid(format!("invalid step {}", config.step)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<BlockStats> = [GradBlock::Alpha, GradBlock::QRaw, GradBlock::T]
        .into_iter()
        .map(|block| BlockStats {
            block,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            failures: 0,
        })
        .collect();
    let mut redraws = 0;
    for _ in 0..config.trials {
        let mut attempts = 0;
        let (spec, pred, gt) = loop {
            let mut inst = random_instance(kind, model, config.views, &mut rng)?;
            if let LossSpec::Mrl(views) = inst.0 {
                inst.0 = LossSpec::Mrl(views.with_distortion(config.distortion).with_anchor(config.view_anchor));
            }
            match evaluate(&inst.0, model, k, &inst.1, &inst.2) {
                Ok(r) if r.kink_margin >= config.kink_margin => break inst,
                Ok(_) | Err(Error::BehindImagePlane { .. }) => {}
                Err(e) => return Err(e),
            }
            attempts += 1;
            redraws += 1;
            if attempts > config.max_redraws {
                return Err(Error::ConfigInvalid(format!(
                    "no instance of {kind} clear of ℓ1 kinks after {attempts} draws"
                )));
            }
        };
        for (stats, (_, abs, rel, failed)) in blocks
            .iter_mut()
            .zip(check_instance(&spec, model, k, &pred, &gt, config)?)
        {
            stats.max_abs_err = stats.max_abs_err.max(abs);
            stats.max_rel_err = stats.max_rel_err.max(rel);
            stats.failures += usize::from(failed);
        }
    }
    Ok(LossCheck {
        loss: kind,
        trials: config.trials,
        redraws,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::reg_term;
    use crate::morphable::template::synthetic_model;

    fn model() -> MorphableModel {
        synthetic_model(48, 14, 6, 11).unwrap().1
    }

    #[test]
    fn every_loss_passes() {
        let m = model();
        let k = Calibration::default();
        let config = GradCheckConfig {
            trials: 10,
            ..GradCheckConfig::default()
        };
        for kind in LossKind::ALL {
            let r = check_loss(kind, &m, &k, &config, 1).unwrap();
            assert!(r.passed(), "{kind}: {:?}", r.blocks);
        }
    }

    #[test]
    fn composed_distortion_passes() {
        let config = GradCheckConfig {
            trials: 10,
            distortion: Distortion::Composed,
            ..GradCheckConfig::default()
        };
        let r = check_loss(LossKind::Mrl, &model(), &Calibration::default(), &config, 3).unwrap();
        assert!(r.passed(), "{:?}", r.blocks);
    }

    #[test]
    fn input_anchored_views_pass() {
        let config = GradCheckConfig {
            trials: 10,
            view_anchor: ViewAnchor::Input,
            ..GradCheckConfig::default()
        };
        let r = check_loss(LossKind::Mrl, &model(), &Calibration::default(), &config, 4).unwrap();
        assert!(r.passed(), "{:?}", r.blocks);
    }

    #[test]
    fn corrupted_block_is_named() {
        let m = model();
        let config = GradCheckConfig {
            trials: 2,
            corrupt: Some(GradBlock::T),
            ..GradCheckConfig::default()
        };
        let r = check_loss(LossKind::Gal, &m, &Calibration::default(), &config, 2).unwrap();
        assert_eq!(r.failed_blocks(), vec![GradBlock::T]);
    }

    #[test]
    fn zero_trials_rejected() {
        let config = GradCheckConfig {
            trials: 0,
            ..GradCheckConfig::default()
        };
        assert!(matches!(
            check_loss(LossKind::Gal, &model(), &Calibration::default(), &config, 0),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn reg_term_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pred = Prediction {
                alpha: ShapeParams::new(a.clone()).unwrap(),
                q_raw: [1.0, 0.0, 0.0, 0.0],
                t: Vec3::zeros(),
            };
            let g = reg_term(&pred).grad_alpha;
            for i in 0..5 {
                let h = 1e-5;
                let mut p = a.clone();
                p[i] += h;
                let mut m = a.clone();
                m[i] -= h;
                let f = |v: Vec<f64>| {
                    reg_term(&Prediction {
                        alpha: ShapeParams::new(v).unwrap(),
                        ..pred.clone()
                    })
                    .value
                };
                let numeric = (f(p) - f(m)) / (2.0 * h);
                assert!((numeric - g[i]).abs() <= 1e-6_f64.max(1e-4 * g[i].abs()));
            }
        }
    }
}
