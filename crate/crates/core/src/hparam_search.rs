//! Tuning of the multiterm baselines: term-scale estimation, bounded
//! log-uniform random search, and the JSON-lines trial log.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{multiterm_terms, GroundTruth, LossKind, MultitermWeights, Prediction};
use crate::morphable::MorphableModel;
use crate::synthdata::Scene;
use crate::training::{INIT_QUATERNION, INIT_TRANSLATION};

pub const TRIAL_LOG_FORMAT: &str = "morphloss-trials";
pub const TRIAL_LOG_VERSION: u32 = 1;
pub const DEFAULT_BUDGET: usize = 20;
pub const MIN_SCALE_SCENES: usize = 20;
pub const LR_BOUNDS: Bounds = Bounds { lo: 1e-5, hi: 1e-3 };
pub const SELECTION_RULE: &str =
    "minimize shape3d/mean(shape3d) + reprojection/mean(reprojection) over successful trials";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_finite() && self.hi.is_finite() && 0.0 < self.lo && self.lo < self.hi {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!(
                "bounds need 0 < lower < upper, got ({}, {})",
                self.lo, self.hi
            )))
        }
    }

    /// `(0.1·scale, 10·scale)`.
    pub fn around(scale: f64) -> Result<Self> {
        Self::new(0.1 * scale, 10.0 * scale)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn sample_log_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let v = rng.random_range(self.lo.ln()..=self.hi.ln()).exp();
        v.clamp(self.lo, self.hi)
    }
}

/// Searched hyperparameters. Weights without bounds stay at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub alpha_w: Option<Bounds>,
    pub beta_w: Option<Bounds>,
    pub gamma_w: Option<Bounds>,
    pub lr: Bounds,
    pub budget: usize,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::ConfigInvalid("search budget must be at least 1".into()));
        }
        for b in [self.alpha_w, self.beta_w, self.gamma_w].iter().flatten() {
            b.validate()?;
        }
        self.lr.validate()
    }

    /// The space searched for `loss`: the coarse loss tunes `alpha_w`, XQT
    /// tunes `beta_w` and `gamma_w`, both tune the learning rate.
    pub fn for_loss(loss: LossKind, scales: &TermScales, budget: usize) -> Result<Self> {
        let (alpha_w, beta_w, gamma_w) = match loss {
            LossKind::Coarse => (Some(Bounds::around(scales.alpha_scale)?), None, None),
            LossKind::Xqt => (
                None,
                Some(Bounds::around(scales.beta_scale)?),
                Some(Bounds::around(scales.gamma_scale)?),
            ),
            other => {
                return Err(Error::ConfigInvalid(format!(
                    "{other} has no hyperparameters to search"
                )))
            }
        };
        let space = Self {
            alpha_w,
            beta_w,
            gamma_w,
            lr: LR_BOUNDS,
            budget,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrialParams {
        let mut draw = |b: Option<Bounds>| b.map_or(1.0, |b| b.sample_log_uniform(rng));
        let weights = MultitermWeights {
            alpha_w: draw(self.alpha_w),
            beta_w: draw(self.beta_w),
            gamma_w: draw(self.gamma_w),
        };
        TrialParams {
            weights,
            lr: self.lr.sample_log_uniform(rng),
        }
    }

    pub fn contains(&self, p: &TrialParams) -> bool {
        let ok = |b: Option<Bounds>, v: f64| b.map_or(v == 1.0, |b| b.contains(v));
        ok(self.alpha_w, p.weights.alpha_w)
            && ok(self.beta_w, p.weights.beta_w)
            && ok(self.gamma_w, p.weights.gamma_w)
            && self.lr.contains(p.lr)
    }
}

/// Ratios that bring each weighted term to the scale of the shape term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermScales {
    pub alpha_scale: f64,
    pub beta_scale: f64,
    pub gamma_scale: f64,
}

/// `shape_mean / term_mean` for each term.
pub fn scales_from_means(shape: f64, pose: f64, rotation: f64, translation: f64) -> Result<TermScales> {
    let ratio = |term: &'static str, v: f64| {
        if v > 0.0 && v.is_finite() && shape > 0.0 && shape.is_finite() {
            Ok(shape / v)
        } else {
            Err(Error::ScaleUndefined { term: term.into() })
        }
    };
    Ok(TermScales {
        alpha_scale: ratio("pose", pose)?,
        beta_scale: ratio("rotation", rotation)?,
        gamma_scale: ratio("translation", translation)?,
    })
}

/// Mean multiterm terms of the freshly initialized predictor over every view
/// of `scenes`, turned into scales.
pub fn estimate_scales(model: &MorphableModel, scenes: &[Scene]) -> Result<TermScales> {
    if scenes.len() < MIN_SCALE_SCENES {
        return Err(Error::ConfigInvalid(format!(
            "scale estimation needs at least {MIN_SCALE_SCENES} scenes, got {}",
            scenes.len()
        )));
    }
    let init = Prediction {
        alpha: model.zero_params(),
        q_raw: INIT_QUATERNION,
        t: INIT_TRANSLATION.into(),
    };
    let mut sums = [0.0; 4];
    let mut count = 0usize;
    for scene in scenes {
        for view in &scene.views {
            let gt = GroundTruth {
                shape: scene.gt_shape.clone(),
                pose: view.pose,
            };
            let t = multiterm_terms(model, &init, &gt)?;
            for (s, v) in sums.iter_mut().zip([t.shape, t.pose, t.rotation, t.translation]) {
                *s += v;
            }
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    scales_from_means(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub weights: MultitermWeights,
    pub lr: f64,
}

/// Validation metrics a trial reports back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub shape3d_mm: f64,
    pub reprojection_px: f64,
    #[serde(default)]
    pub translation_cm: Option<f64>,
    #[serde(default)]
    pub rotation_deg: Option<f64>,
}

impl TrialMetrics {
    pub fn new(shape3d_mm: f64, reprojection_px: f64) -> Self {
        Self {
            shape3d_mm,
            reprojection_px,
            translation_cm: None,
            rotation_deg: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub params: MultitermWeights,
    pub lr: f64,
    pub metrics: Option<TrialMetrics>,
    pub composite: Option<f64>,
    pub wall_time: f64,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn trial_params(&self) -> TrialParams {
        TrialParams {
            weights: self.params,
            lr: self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLogHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub space: SearchSpace,
    pub selection: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub header: TrialLogHeader,
    pub trials: Vec<TrialRecord>,
    /// Index into `trials` of the selected trial.
    pub best: usize,
}

impl SearchOutcome {
    pub fn best_trial(&self) -> &TrialRecord {
        &self.trials[self.best]
    }

    pub fn successes(&self) -> usize {
        self.trials.iter().filter(|t| t.status == TrialStatus::Ok).count()
    }

    pub fn write_log<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for t in &self.trials {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_log(&self) -> String {
        let mut buf = Vec::new();
        self.write_log(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }
}

/// Parses a trial log back into its header and records.
pub fn read_trial_log<R: BufRead>(input: R) -> Result<(TrialLogHeader, Vec<TrialRecord>)> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format("trial log", "empty input"))??;
    let header: TrialLogHeader = serde_json::from_str(&first)?;
    if header.format != TRIAL_LOG_FORMAT || header.version != TRIAL_LOG_VERSION {
        return Err(Error::format(
            "trial log",
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TrialRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format("trial log", format!("line {}: {e}", i + 2)))?;
        records.push(r);
    }
    Ok((header, records))
}

pub fn parse_trial_log(text: &str) -> Result<(TrialLogHeader, Vec<TrialRecord>)> {
    read_trial_log(text.as_bytes())
}

/// Runs `space.budget` trials of `train_fn` at log-uniform samples and selects
/// the successful trial with the lowest normalized shape + reprojection
/// composite. Failed trials are logged and skipped.
pub fn random_search<F>(space: &SearchSpace, mut train_fn: F, seed: u64) -> Result<SearchOutcome>
where
    F: FnMut(usize, &TrialParams) -> Result<TrialMetrics>,
{
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(space.budget);
    for trial in 0..space.budget {
        let params = space.sample(&mut rng);
        let start = Instant::now();
        let result = train_fn(trial, &params).and_then(|m| {
            if m.shape3d_mm.is_finite() && m.reprojection_px.is_finite() {
                Ok(m)
            } else {
                Err(Error::format("trial metrics", "non-finite validation metric"))
            }
        });
        let wall_time = start.elapsed().as_secs_f64();
        let (metrics, status, error) = match result {
            Ok(m) => (Some(m), TrialStatus::Ok, None),
            Err(e) => {
                log::warn!("trial {trial} failed: {e}");
                (None, TrialStatus::Failed, Some(e.to_string()))
            }
        };
        trials.push(TrialRecord {
            trial,
            params: params.weights,
            lr: params.lr,
            metrics,
            composite: None,
            wall_time,
            status,
            error,
        });
    }
    let ok: Vec<&TrialMetrics> = trials.iter().filter_map(|t| t.metrics.as_ref()).collect();
    if ok.is_empty() {
        return Err(Error::SearchFailed { failures: trials.len() });
    }
    let mean = |f: fn(&TrialMetrics) -> f64| {
        let m = ok.iter().map(|t| f(t)).sum::<f64>() / ok.len() as f64;
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    let (ms, mr) = (mean(|m| m.shape3d_mm), mean(|m| m.reprojection_px));
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in trials.iter_mut().enumerate() {
        if let Some(m) = &t.metrics {
            let c = m.shape3d_mm / ms + m.reprojection_px / mr;
            t.composite = Some(c);
            if best.is_none_or(|(_, b)| c < b) {
                best = Some((i, c));
            }
        }
    }
    Ok(SearchOutcome {
        header: TrialLogHeader {
            format: TRIAL_LOG_FORMAT.into(),
            version: TRIAL_LOG_VERSION,
            seed,
            space: space.clone(),
            selection: SELECTION_RULE.into(),
        },
        trials,
        best: best.expect("at least one success").0,
    })
}
