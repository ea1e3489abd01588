//! Regressor training: minibatch Adam over (scene, view) samples with any of
//! the five losses.

mod adam;
pub mod checkpoint;
mod network;

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use network::{init_model, ArchConfig, BlockInfo, RegressorModel, INIT_QUATERNION, INIT_TRANSLATION};

use crate::error::{Error, Result};
use crate::geometry::{quat_normalize, Calibration, Vec3};
use crate::losses::{evaluate_decoded, Decoded, Distortion, GroundTruth, LossKind, LossSpec, MultitermWeights, ViewAnchor, ViewSampler};
use crate::synthdata::{symmetrize_all, Dataset, ObservationVector, Scene, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub weights: MultitermWeights,
    /// Virtual views per sample for the multiview loss.
    pub views: usize,
    pub view_sampler: ViewSampler,
    pub distortion: Distortion,
    pub view_anchor: ViewAnchor,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Train on the training split plus its mirror image.
    pub symmetrize: bool,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Gal,
            weights: MultitermWeights::default(),
            views: 2,
            view_sampler: ViewSampler::default(),
            distortion: Distortion::default(),
            view_anchor: ViewAnchor::default(),
            batch_size: 32,
            epochs: 120,
            seed: 0,
            lr: 1e-4,
            clip_norm: 10.0,
            symmetrize: false,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Default budget per loss; the single-view reprojection loss trains longer.
    pub fn default_epochs(loss: LossKind) -> usize {
        if loss == LossKind::Srl {
            500
        } else {
            120
        }
    }

    pub fn for_loss(loss: LossKind) -> Self {
        Self {
            loss,
            epochs: Self::default_epochs(loss),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch_size must be positive".into()));
        }
        if self.loss == LossKind::Mrl && self.views == 0 {
            return Err(Error::ConfigInvalid("the multiview loss needs views ≥ 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::ConfigInvalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::ConfigInvalid(format!("clip_norm must be ≥ 0, got {}", self.clip_norm)));
        }
        self.weights.validate()?;
        self.view_sampler.validate()?;
        self.arch.validate()
    }

    fn spec<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<LossSpec> {
        Ok(match self.loss {
            LossKind::Gal => LossSpec::Gal,
            LossKind::Srl => LossSpec::Srl,
            LossKind::Mrl => LossSpec::Mrl(
                self.view_sampler
                    .sample(rng, self.views)?.with_distortion(self.distortion)
                    .with_anchor(self.view_anchor),
            ),
            LossKind::Coarse => LossSpec::Coarse(self.weights),
            LossKind::Xqt => LossSpec::Xqt(self.weights),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub clipped_batches: usize,
    /// Wall-clock seconds; the only nondeterministic field.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub loss: LossKind,
    pub samples: usize,
    pub epochs: Vec<EpochRecord>,
    pub total_time_s: f64,
}

impl TrainingHistory {
    pub fn mean_epoch_time(&self) -> f64 {
        if self.epochs.is_empty() {
            0.0
        } else {
            self.epochs.iter().map(|e| e.wall_time_s).sum::<f64>() / self.epochs.len() as f64
        }
    }

    /// Equality ignoring wall-clock fields.
    pub fn same_trajectory(&self, other: &TrainingHistory) -> bool {
        self.loss == other.loss
            && self.samples == other.samples
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_loss.map(f64::to_bits) == b.val_loss.map(f64::to_bits)
                    && a.clipped_batches == b.clipped_batches
            })
    }
}

/// One training example: a single view of a scene.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub subject_id: usize,
    pub view: usize,
    pub observation: &'a ObservationVector,
    pub truth: GroundTruth,
}

pub fn samples_of<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Vec<Sample<'a>> {
    scenes
        .into_iter()
        .flat_map(|s| {
            s.views.iter().enumerate().map(move |(v, view)| Sample {
                subject_id: s.subject_id,
                view: v,
                observation: &view.observation,
                truth: GroundTruth {
                    shape: s.gt_shape.clone(),
                    pose: view.pose,
                },
            })
        })
        .collect()
}

/// Mean loss over `batch` and, if requested, its gradient w.r.t. every
/// trainable parameter.
pub fn batch_objective(
    reg: &RegressorModel,
    batch: &[&Sample<'_>],
    specs: &[LossSpec],
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let n = batch.len();
    if n == 0 || specs.len() != n {
        return Err(Error::ConfigInvalid("batch and loss specs must be non-empty and aligned".into()));
    }
    let observations: Vec<&ObservationVector> = batch.iter().map(|s| s.observation).collect();
    let cache = reg.forward(reg.normalize_inputs(&observations)?);
    let out = reg.decode_outputs(&cache);
    let model = reg.decoder();
    let mut shapes = model.basis() * &out.alpha;
    for mut col in shapes.column_iter_mut() {
        col += model.mean_flat();
    }
    let dim = shapes.nrows();
    let k = reg.calibration();
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut g_shape = DMatrix::<f64>::zeros(dim, n);
    let mut g_q = DMatrix::<f64>::zeros(4, n);
    let mut g_t = DMatrix::<f64>::zeros(3, n);
    for (j, (sample, spec)) in batch.iter().zip(specs).enumerate() {
        let raw = [0, 1, 2, 3].map(|i| out.q_raw[(i, j)]);
        let context = |e: Error| e.in_sample(format!("subject {} view {}", sample.subject_id, sample.view));
        let (q, jac) = quat_normalize(raw).map_err(context)?;
        let decoded = Decoded {
            shape: &shapes.as_slice()[j * dim..(j + 1) * dim],
            q,
            t: Vec3::new(out.t[(0, j)], out.t[(1, j)], out.t[(2, j)]),
        };
        let r = evaluate_decoded(spec, k, &decoded, &sample.truth).map_err(context)?;
        value += r.value * inv;
        if with_grad {
            g_shape
                .column_mut(j)
                .iter_mut()
                .zip(&r.grad_shape)
                .for_each(|(d, s)| *d = s * inv);
            let gq = jac.transpose() * r.grad_q * inv;
            g_q.set_column(j, &gq);
            g_t.set_column(j, &(r.grad_t * inv));
        }
    }
    if !with_grad {
        return Ok((value, None));
    }
    let g_alpha = model.basis().tr_mul(&g_shape);
    Ok((value, Some(reg.backward(&cache, g_alpha, g_q, g_t))))
}

/// Mean loss over `samples` in fixed order (no gradients).
pub fn mean_loss(reg: &RegressorModel, samples: &[Sample<'_>], specs: &[LossSpec], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, spec_chunk) in samples.chunks(batch_size.max(1)).zip(specs.chunks(batch_size.max(1))) {
        let refs: Vec<&Sample<'_>> = chunk.iter().collect();
        let (v, _) = batch_objective(reg, &refs, spec_chunk, false)?;
        total += v * chunk.len() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains a fresh regressor on the training split of `dataset`.
pub fn train(
    model: &crate::morphable::MorphableModel,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(RegressorModel, TrainingHistory)> {
    config.validate()?;
    let k: Calibration = *dataset.calibration();
    let base: Vec<Scene> = dataset.split(Split::Train).cloned().collect();
    if base.is_empty() {
        return Err(Error::ConfigInvalid("training split is empty".into()));
    }
    let train_scenes = if config.symmetrize {
        symmetrize_all(&base, model, &k)?
    } else {
        base
    };
    let landmarks = train_scenes[0].landmarks.len();
    let mut reg = init_model(model, &config.arch, &k, landmarks, config.seed)?;
    let samples = samples_of(&train_scenes);
    let val_scenes: Vec<&Scene> = dataset.split(Split::Val).collect();
    let val_samples = samples_of(val_scenes.iter().copied());
    let mut val_rng = rng_stream(config.seed, 3);
    let val_specs = val_samples
        .iter()
        .map(|_| config.spec(&mut val_rng))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = AdamState::new(reg.n_params(), config.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = rng_stream(config.seed, 1);
    let mut view_rng = rng_stream(config.seed, 2);
    let mut history = TrainingHistory {
        loss: config.loss,
        samples: samples.len(),
        epochs: Vec::with_capacity(config.epochs),
        total_time_s: 0.0,
    };
    let start = Instant::now();
    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut clipped = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample<'_>> = chunk.iter().map(|&i| &samples[i]).collect();
            let specs = batch
                .iter()
                .map(|_| config.spec(&mut view_rng))
                .collect::<Result<Vec<_>>>()?;
            let (value, grad) = batch_objective(&reg, &batch, &specs, true)?;
            let mut grad = grad.expect("gradient requested");
            total += value * batch.len() as f64;
            if config.clip_norm > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > config.clip_norm {
                    let s = config.clip_norm / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                    clipped += 1;
                }
            }
            let blocks = reg.blocks().to_vec();
            adam_step(&mut adam, reg.params_mut(), &grad, &blocks)?;
        }
        let val_loss = if val_samples.is_empty() {
            None
        } else {
            Some(mean_loss(&reg, &val_samples, &val_specs, 256)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / samples.len() as f64,
            val_loss,
            clipped_batches: clipped,
            wall_time_s: epoch_start.elapsed().as_secs_f64(),
        };
        if clipped > 0 {
            log::debug!("epoch {epoch}: gradient clipped in {clipped} batches");
        }
        log::info!(
            "{} epoch {epoch}: train {:.6} val {:?}",
            config.loss,
            record.train_loss,
            record.val_loss
        );
        history.epochs.push(record);
    }
    history.total_time_s = start.elapsed().as_secs_f64();
    Ok((reg, history))
}
