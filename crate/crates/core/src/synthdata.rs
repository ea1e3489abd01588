//! Synthetic ground-truth scenes: subjects drawn from a morphable model,
//! random camera poses, and noisy projected landmarks as observations.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Calibration, CameraPose, Shape};
use crate::losses::ViewSampler;
use crate::morphable::{mirror_shape, pairing_permutation, MorphableModel, ShapeParams};

pub const FORMAT_NAME: &str = "morphloss-scenes";
pub const FORMAT_VERSION: u32 = 1;
/// Pose draws per view before giving up.
pub const POSE_RETRIES: usize = 100;
const MIN_W: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Noisy pixel coordinates `(u₁, v₁, …, u_L, v_L)` of the landmark vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ObservationVector(Vec<f64>);

impl TryFrom<Vec<f64>> for ObservationVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ObservationVector> for Vec<f64> {
    fn from(o: ObservationVector) -> Self {
        o.0
    }
}

impl ObservationVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if !values.len().is_multiple_of(2) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                "observation",
                "expected an even number of finite values",
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn landmark_count(&self) -> usize {
        self.0.len() / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub pose: CameraPose,
    pub observation: ObservationVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub subject_id: usize,
    pub split: Split,
    #[serde(default)]
    pub mirrored: bool,
    pub gt_params: ShapeParams,
    pub gt_shape: Shape,
    /// Vertex index of each observed landmark.
    pub landmarks: Vec<usize>,
    pub views: Vec<View>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub test_subjects: usize,
    /// Mean views per subject; counts are `1 + Poisson(mean − 1)`.
    pub mean_views: f64,
    pub poses: ViewSampler,
    pub landmarks: usize,
    pub noise_px: f64,
    pub calibration: Calibration,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_subjects: 200,
            val_subjects: 30,
            test_subjects: 60,
            mean_views: 4.4,
            poses: ViewSampler::default(),
            landmarks: 32,
            noise_px: 1.0,
            calibration: Calibration::default(),
        }
    }
}

impl DatasetConfig {
    pub fn subjects(&self) -> usize {
        self.train_subjects + self.val_subjects + self.test_subjects
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects() == 0 {
            return Err(Error::ConfigInvalid("dataset needs at least one subject".into()));
        }
        if !(self.mean_views.is_finite() && self.mean_views >= 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "mean_views must be ≥ 1, got {}",
                self.mean_views
            )));
        }
        if self.landmarks == 0 {
            return Err(Error::ConfigInvalid("landmark count must be positive".into()));
        }
        if !(self.noise_px.is_finite() && self.noise_px >= 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "noise_px must be ≥ 0, got {}",
                self.noise_px
            )));
        }
        self.poses.validate()
    }

    fn split_of(&self, subject: usize) -> Split {
        if subject < self.train_subjects {
            Split::Train
        } else if subject < self.train_subjects + self.val_subjects {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Picks `count` landmark vertices spread over the model.
///
/// With a symmetry pairing, `count` must be even: the first half are
/// right-side vertices (`x > 0` on the mean) and the second half their mirror
/// partners in the same order.
pub fn select_landmarks(model: &MorphableModel, count: usize) -> Result<Vec<usize>> {
    let n = model.n_points();
    match model.symmetry_pairs() {
        Some(pairs) => {
            let mean = model.mean().points();
            let mut right: Vec<(usize, usize)> = pairs
                .iter()
                .filter(|(a, b)| a != b)
                .map(|&(a, b)| if mean[a].x >= mean[b].x { (a, b) } else { (b, a) })
                .collect();
            right.sort_unstable();
            let half = count / 2;
            if !count.is_multiple_of(2) || half == 0 || half > right.len() {
                return Err(Error::ConfigInvalid(format!(
                    "need an even landmark count in 2..={}, got {count}",
                    2 * right.len()
                )));
            }
            let chosen: Vec<(usize, usize)> = (0..half)
                .map(|k| right[((2 * k + 1) * right.len()) / (2 * half)])
                .collect();
            Ok(chosen
                .iter()
                .map(|p| p.0)
                .chain(chosen.iter().map(|p| p.1))
                .collect())
        }
        None => {
            if count == 0 || count > n {
                return Err(Error::ConfigInvalid(format!(
                    "landmark count must be in 1..={n}, got {count}"
                )));
            }
            Ok((0..count).map(|k| ((2 * k + 1) * n) / (2 * count)).collect())
        }
    }
}

fn pose_is_usable(k: &Calibration, pose: &CameraPose, shape: &Shape, landmarks: &[usize]) -> bool {
    let in_front = shape
        .points()
        .iter()
        .all(|p| pose.transform_point(p).z < -MIN_W);
    in_front
        && landmarks.iter().all(|&i| {
            k.project_camera_point(&pose.transform_point(&shape.points()[i]))
                .is_some_and(|uv| k.contains(&uv))
        })
}

/// Exact landmark projections plus Gaussian noise.
pub fn observe<R: rand::Rng + ?Sized>(
    k: &Calibration,
    pose: &CameraPose,
    shape: &Shape,
    landmarks: &[usize],
    noise_px: f64,
    rng: &mut R,
) -> Result<ObservationVector> {
    let noise = Normal::new(0.0, noise_px)
        .map_err(|e| Error::ConfigInvalid(format!("observation noise: {e}")))?;
    let mut values = Vec::with_capacity(2 * landmarks.len());
    for &i in landmarks {
        let c = pose.transform_point(&shape.points()[i]);
        let uv = k
            .project_camera_point(&c)
            .ok_or(Error::BehindImagePlane { index: i, w: c.z })?;
        values.push(uv.x + noise.sample(rng));
        values.push(uv.y + noise.sample(rng));
    }
    ObservationVector::new(values)
}

/// Generates every subject of `config`. Subject `i` draws from its own
/// stream of the seeded generator, so a subject does not depend on the others.
pub fn generate_dataset(model: &MorphableModel, config: &DatasetConfig, seed: u64) -> Result<Vec<Scene>> {
    config.validate()?;
    let landmarks = select_landmarks(model, config.landmarks)?;
    let k = &config.calibration;
    let extra_views = Poisson::new(config.mean_views - 1.0).ok();
    (0..config.subjects())
        .map(|subject| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(subject as u64);
            let gt_params = model.sample_params(&mut rng);
            let gt_shape = model.synthesize(&gt_params)?;
            let count = 1 + extra_views.map_or(0, |p| p.sample(&mut rng) as usize);
            let mut views = Vec::with_capacity(count);
            for _ in 0..count {
                let pose = (0..POSE_RETRIES)
                    .map(|_| config.poses.sample_pose(&mut rng))
                    .find(|pose| pose_is_usable(k, pose, &gt_shape, &landmarks))
                    .ok_or(Error::PoseSampling {
                        attempts: POSE_RETRIES,
                    })?;
                let observation = observe(k, &pose, &gt_shape, &landmarks, config.noise_px, &mut rng)?;
                views.push(View { pose, observation });
            }
            Ok(Scene {
                subject_id: subject,
                split: config.split_of(subject),
                mirrored: false,
                gt_params,
                gt_shape,
                landmarks: landmarks.clone(),
                views,
            })
        })
        .collect()
}

/// Mirror image of a scene about the camera's `x = 0` plane.
///
/// `k` supplies the principal point for `u' = 2·cx − u`.
pub fn symmetrize(scene: &Scene, model: &MorphableModel, k: &Calibration) -> Result<Scene> {
    let pairs = model.symmetry_pairs().ok_or(Error::NotSymmetrizable)?;
    let perm = pairing_permutation(pairs, model.n_points());
    // Landmark l of the mirrored scene observes the partner of landmark l.
    let landmark_perm: Vec<usize> = scene
        .landmarks
        .iter()
        .map(|&v| {
            scene
                .landmarks
                .iter()
                .position(|&w| w == perm[v])
                .ok_or(Error::NotSymmetrizable)
        })
        .collect::<Result<_>>()?;
    let gt_params = model.mirror_params(&scene.gt_params)?;
    let gt_shape = model.synthesize(&gt_params)?;
    debug_assert!(
        mirror_shape(&scene.gt_shape, pairs)
            .points()
            .iter()
            .zip(gt_shape.points())
            .all(|(a, b)| (a - b).norm() < 1e-6)
    );
    let views = scene
        .views
        .iter()
        .map(|view| {
            let obs = view.observation.values();
            let mut values = Vec::with_capacity(obs.len());
            for &src in &landmark_perm {
                values.push(2.0 * k.cx() - obs[2 * src]);
                values.push(obs[2 * src + 1]);
            }
            Ok(View {
                pose: view.pose.mirrored(),
                observation: ObservationVector::new(values)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Scene {
        subject_id: scene.subject_id,
        split: scene.split,
        mirrored: !scene.mirrored,
        gt_params,
        gt_shape,
        landmarks: scene.landmarks.clone(),
        views,
    })
}

/// Appends the mirror image of every scene (the original order is kept,
/// mirrored scenes follow).
pub fn symmetrize_all(scenes: &[Scene], model: &MorphableModel, k: &Calibration) -> Result<Vec<Scene>> {
    let mirrored = scenes
        .iter()
        .map(|s| symmetrize(s, model, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(scenes.iter().cloned().chain(mirrored).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub model_hash: String,
    pub seed: u64,
    pub config: DatasetConfig,
}

impl DatasetHeader {
    pub fn new(model: &MorphableModel, config: &DatasetConfig, seed: u64) -> Self {
        Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            model_hash: model.content_hash(),
            seed,
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn generate(model: &MorphableModel, config: &DatasetConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            header: DatasetHeader::new(model, config, seed),
            scenes: generate_dataset(model, config, seed)?,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn calibration(&self) -> &Calibration {
        &self.header.config.calibration
    }

    /// Rejects scenes whose dimensions disagree with `model`.
    pub fn check_model(&self, model: &MorphableModel) -> Result<()> {
        for s in &self.scenes {
            if s.gt_shape.len() != model.n_points() || s.gt_params.len() != model.n_components() {
                return Err(Error::format(
                    "scenes",
                    format!("subject {} does not match the model dimensions", s.subject_id),
                ));
            }
            if s.landmarks.iter().any(|&i| i >= model.n_points()) {
                return Err(Error::format("scenes", "landmark index out of range"));
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for scene in &self.scenes {
            serde_json::to_writer(&mut out, scene)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::format("scenes", "empty file"))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
            return Err(Error::format(
                "scenes",
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let mut scenes = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let scene: Scene = serde_json::from_str(&line)?;
            validate_scene(&scene)?;
            scenes.push(scene);
        }
        Ok(Self { header, scenes })
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::read_jsonl(text.as_bytes())
    }
}

fn validate_scene(scene: &Scene) -> Result<()> {
    if scene.views.is_empty() {
        return Err(Error::format("scenes", format!("subject {} has no views", scene.subject_id)));
    }
    let l = scene.landmarks.len();
    if scene.views.iter().any(|v| v.observation.landmark_count() != l) {
        return Err(Error::format("scenes", "observation length differs from landmark count"));
    }
    if scene.landmarks.iter().any(|&i| i >= scene.gt_shape.len()) {
        return Err(Error::format("scenes", "landmark index out of range"));
    }
    Ok(())
}
