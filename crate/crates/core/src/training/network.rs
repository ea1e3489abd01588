//! The three-headed regressor: a tanh encoder over landmark observations and
//! three one-hidden-layer heads for shape coefficients, raw quaternion and
//! translation. Samples are matrix columns so every layer is one gemm.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_normalize, Calibration, Vec3};
use crate::losses::Prediction;
use crate::morphable::{MorphableModel, ShapeParams};
use crate::synthdata::ObservationVector;

/// Network prediction before any loss: `(0, (1,0,0,0), (0,0,−60))`.
pub const INIT_QUATERNION: [f64; 4] = [1.0, 0.0, 0.0, 0.0];
pub const INIT_TRANSLATION: [f64; 3] = [0.0, 0.0, -60.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub encoder: Vec<usize>,
    pub head_hidden: usize,
    /// Per-axis scale of the translation head output (cm per unit).
    pub t_scale: [f64; 3],
    /// Scale each shape output by `√λ_i` so unit outputs are one standard deviation.
    pub scale_alpha: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            encoder: vec![128, 128],
            head_hidden: 256,
            t_scale: [2.0, 2.0, 5.0],
            scale_alpha: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.encoder.contains(&0) || self.head_hidden == 0 {
            return Err(Error::ConfigInvalid(
                "encoder and head widths must be positive".into(),
            ));
        }
        if self.t_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::ConfigInvalid("t_scale entries must be positive".into()));
        }
        Ok(())
    }
}

/// One named parameter tensor inside the flat parameter vector (column-major).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    weight: usize,
    bias: usize,
    tanh: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Head {
    Shape = 0,
    Quat = 1,
    Trans = 2,
}

const HEADS: [(Head, &str); 3] = [(Head::Shape, "head_s"), (Head::Quat, "head_q"), (Head::Trans, "head_t")];

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    arch: ArchConfig,
    calibration: Calibration,
    input_dim: usize,
    params: Vec<f64>,
    blocks: Vec<BlockInfo>,
    encoder: Vec<Dense>,
    heads: [[Dense; 2]; 3],
    alpha_scale: Vec<f64>,
    decode: MorphableModel,
}

fn push_block(blocks: &mut Vec<BlockInfo>, total: &mut usize, name: String, rows: usize, cols: usize) -> usize {
    blocks.push(BlockInfo {
        name,
        rows,
        cols,
        offset: *total,
    });
    *total += rows * cols;
    blocks.len() - 1
}

fn layout(arch: &ArchConfig, input_dim: usize, outputs: [usize; 3]) -> (Vec<BlockInfo>, Vec<Dense>, [[Dense; 2]; 3], usize) {
    let mut blocks = Vec::new();
    let mut total = 0;
    let mut encoder = Vec::new();
    let mut fan_in = input_dim;
    for (i, &width) in arch.encoder.iter().enumerate() {
        let weight = push_block(&mut blocks, &mut total, format!("encoder.{i}.weight"), width, fan_in);
        let bias = push_block(&mut blocks, &mut total, format!("encoder.{i}.bias"), width, 1);
        encoder.push(Dense { weight, bias, tanh: true });
        fan_in = width;
    }
    let features = fan_in;
    let mut heads = [[Dense { weight: 0, bias: 0, tanh: false }; 2]; 3];
    for (head, name) in HEADS {
        let h = arch.head_hidden;
        let w0 = push_block(&mut blocks, &mut total, format!("{name}.0.weight"), h, features);
        let b0 = push_block(&mut blocks, &mut total, format!("{name}.0.bias"), h, 1);
        let out = outputs[head as usize];
        let w1 = push_block(&mut blocks, &mut total, format!("{name}.1.weight"), out, h);
        let b1 = push_block(&mut blocks, &mut total, format!("{name}.1.bias"), out, 1);
        heads[head as usize] = [
            Dense { weight: w0, bias: b0, tanh: true },
            Dense { weight: w1, bias: b1, tanh: false },
        ];
    }
    (blocks, encoder, heads, total)
}

/// Intermediate activations of one batch forward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    input: DMatrix<f64>,
    encoder: Vec<DMatrix<f64>>,
    hidden: [DMatrix<f64>; 3],
    /// Head outputs (pre-scaling), one column per sample.
    pub(crate) outputs: [DMatrix<f64>; 3],
}

/// Decoded predictions of one batch.
#[derive(Debug, Clone)]
pub(crate) struct BatchPrediction {
    pub(crate) alpha: DMatrix<f64>,
    pub(crate) q_raw: DMatrix<f64>,
    pub(crate) t: DMatrix<f64>,
}

impl RegressorModel {
    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// The frozen decode layer `x̂ = m + Φα̂`.
    pub fn decoder(&self) -> &MorphableModel {
        &self.decode
    }

    /// Replaces all trainable parameters (checkpoint loading).
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ParamDimension {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::format("checkpoint", "non-finite parameter"));
        }
        self.params = params;
        Ok(())
    }

    fn view(&self, block: usize) -> DMatrixView<'_, f64> {
        let b = &self.blocks[block];
        DMatrixView::from_slice(&self.params[b.range()], b.rows, b.cols)
    }

    fn dense(&self, layer: Dense, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = self.view(layer.weight) * x;
        let bias = self.view(layer.bias);
        for mut col in z.column_iter_mut() {
            col += &bias;
        }
        if layer.tanh {
            z.apply(|v| *v = v.tanh());
        }
        z
    }

    /// Maps pixel observations to roughly `[−1, 1]` using the image size.
    pub fn normalize_inputs(&self, observations: &[&ObservationVector]) -> Result<DMatrix<f64>> {
        let k = &self.calibration;
        let (hx, hy) = (0.5 * k.width(), 0.5 * k.height());
        let mut x = DMatrix::<f64>::zeros(self.input_dim, observations.len());
        for (j, obs) in observations.iter().enumerate() {
            let v = obs.values();
            if v.len() != self.input_dim {
                return Err(Error::ParamDimension {
                    expected: self.input_dim,
                    got: v.len(),
                });
            }
            let mut col = x.column_mut(j);
            for i in 0..v.len() / 2 {
                col[2 * i] = (v[2 * i] - k.cx()) / hx;
                col[2 * i + 1] = (v[2 * i + 1] - k.cy()) / hy;
            }
        }
        Ok(x)
    }

    pub(crate) fn forward(&self, input: DMatrix<f64>) -> ForwardCache {
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for (i, &layer) in self.encoder.iter().enumerate() {
            let x = if i == 0 { &input } else { &encoder[i - 1] };
            let y = self.dense(layer, x);
            encoder.push(y);
        }
        let features = encoder.last().expect("encoder has a layer");
        let hidden = self.heads.map(|[l0, _]| self.dense(l0, features));
        let outputs = [0, 1, 2].map(|h| self.dense(self.heads[h][1], &hidden[h]));
        ForwardCache {
            input,
            encoder,
            hidden,
            outputs,
        }
    }

    pub(crate) fn decode_outputs(&self, cache: &ForwardCache) -> BatchPrediction {
        let mut alpha = cache.outputs[Head::Shape as usize].clone();
        for mut col in alpha.column_iter_mut() {
            col.iter_mut().zip(&self.alpha_scale).for_each(|(a, s)| *a *= s);
        }
        let mut t = cache.outputs[Head::Trans as usize].clone();
        for mut col in t.column_iter_mut() {
            for i in 0..3 {
                col[i] = INIT_TRANSLATION[i] + self.arch.t_scale[i] * col[i];
            }
        }
        BatchPrediction {
            alpha,
            q_raw: cache.outputs[Head::Quat as usize].clone(),
            t,
        }
    }

    /// Back-propagates gradients w.r.t. the decoded `(α̂, q_raw, t̂)` columns
    /// into a flat gradient aligned with [`Self::params`].
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        mut d_alpha: DMatrix<f64>,
        d_q: DMatrix<f64>,
        mut d_t: DMatrix<f64>,
    ) -> Vec<f64> {
        for mut col in d_alpha.column_iter_mut() {
            col.iter_mut().zip(&self.alpha_scale).for_each(|(a, s)| *a *= s);
        }
        for mut col in d_t.column_iter_mut() {
            for i in 0..3 {
                col[i] *= self.arch.t_scale[i];
            }
        }
        let mut grad = vec![0.0; self.params.len()];
        let features = cache.encoder.last().expect("encoder has a layer");
        let mut d_features = DMatrix::<f64>::zeros(features.nrows(), features.ncols());
        for (h, d_out) in [d_alpha, d_q, d_t].into_iter().enumerate() {
            let [l0, l1] = self.heads[h];
            let d_hidden = self.dense_backward(&mut grad, l1, &cache.hidden[h], None, d_out);
            let d_in = self.dense_backward(&mut grad, l0, features, Some(&cache.hidden[h]), d_hidden);
            d_features += d_in;
        }
        let mut d = d_features;
        for i in (0..self.encoder.len()).rev() {
            let x = if i == 0 { &cache.input } else { &cache.encoder[i - 1] };
            d = self.dense_backward(&mut grad, self.encoder[i], x, Some(&cache.encoder[i]), d);
        }
        grad
    }

    /// `d_y` is the gradient w.r.t. the layer output; `y` is that output
    /// (needed for tanh layers). Returns the gradient w.r.t. the input `x`.
    fn dense_backward(
        &self,
        grad: &mut [f64],
        layer: Dense,
        x: &DMatrix<f64>,
        y: Option<&DMatrix<f64>>,
        mut d_y: DMatrix<f64>,
    ) -> DMatrix<f64> {
        if layer.tanh {
            let y = y.expect("tanh layer needs its output");
            d_y.zip_apply(y, |d, a| *d *= 1.0 - a * a);
        }
        let wb = &self.blocks[layer.weight];
        let mut gw = DMatrixViewMut::from_slice(&mut grad[wb.range()], wb.rows, wb.cols);
        gw.gemm(1.0, &d_y, &x.transpose(), 1.0);
        let bb = &self.blocks[layer.bias];
        let gb = &mut grad[bb.range()];
        for col in d_y.column_iter() {
            gb.iter_mut().zip(col.iter()).for_each(|(g, d)| *g += d);
        }
        self.view(layer.weight).tr_mul(&d_y)
    }

    /// Predictions for a batch of observations, in input order.
    pub fn predict_batch(&self, observations: &[&ObservationVector]) -> Result<Vec<Prediction>> {
        let cache = self.forward(self.normalize_inputs(observations)?);
        let out = self.decode_outputs(&cache);
        (0..observations.len())
            .map(|j| {
                Ok(Prediction {
                    alpha: ShapeParams::new(out.alpha.column(j).iter().copied().collect())?,
                    q_raw: [0, 1, 2, 3].map(|i| out.q_raw[(i, j)]),
                    t: Vec3::new(out.t[(0, j)], out.t[(1, j)], out.t[(2, j)]),
                })
            })
            .collect()
    }

    pub fn predict(&self, observation: &ObservationVector) -> Result<Prediction> {
        Ok(self.predict_batch(&[observation])?.remove(0))
    }

    /// Unit quaternion emitted by the quaternion head after normalization.
    pub fn predict_quaternion(&self, observation: &ObservationVector) -> Result<crate::geometry::Quaternion> {
        Ok(quat_normalize(self.predict(observation)?.q_raw)?.0)
    }
}

/// Builds the regressor with the initial prediction `α̂ = 0`,
/// `q̂ = (1,0,0,0)`, `t̂ = (0,0,−60)` for every input.
///
/// Hidden weights are uniform in `±1/√fan_in`; final-layer weights are zero.
pub fn init_model(
    model: &MorphableModel,
    arch: &ArchConfig,
    calibration: &Calibration,
    landmarks: usize,
    seed: u64,
) -> Result<RegressorModel> {
    arch.validate()?;
    if landmarks == 0 {
        return Err(Error::ConfigInvalid("regressor needs at least one landmark".into()));
    }
    let input_dim = 2 * landmarks;
    let outputs = [model.n_components(), 4, 3];
    let (blocks, encoder, heads, total) = layout(arch, input_dim, outputs);
    let mut params = vec![0.0; total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden: Vec<Dense> = encoder.iter().copied().chain(heads.iter().map(|h| h[0])).collect();
    for layer in hidden {
        let b = &blocks[layer.weight];
        let bound = 1.0 / (b.cols as f64).sqrt();
        params[b.range()]
            .iter_mut()
            .for_each(|p| *p = rng.random_range(-bound..bound));
    }
    let q_bias = &blocks[heads[Head::Quat as usize][1].bias];
    params[q_bias.range()].copy_from_slice(&INIT_QUATERNION);
    let alpha_scale = if arch.scale_alpha {
        model.eigenvalues().iter().map(|l| l.sqrt().max(1e-6)).collect()
    } else {
        vec![1.0; model.n_components()]
    };
    Ok(RegressorModel {
        arch: arch.clone(),
        calibration: *calibration,
        input_dim,
        params,
        blocks,
        encoder,
        heads,
        alpha_scale,
        decode: model.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Shape};
    use crate::morphable::template::synthetic_model;

    fn small() -> (MorphableModel, RegressorModel) {
        let (_, m) = synthetic_model(64, 12, 5, 3).unwrap();
        let arch = ArchConfig {
            encoder: vec![8, 8],
            head_hidden: 8,
            ..ArchConfig::default()
        };
        let r = init_model(&m, &arch, &Calibration::default(), 4, 1).unwrap();
        (m, r)
    }

    #[test]
    fn init_prediction_is_exact() {
        let (m, r) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let obs = ObservationVector::new((0..8).map(|_| rng.random_range(-500.0..500.0)).collect()).unwrap();
            let p = r.predict(&obs).unwrap();
            assert!(p.alpha.alpha().iter().all(|&a| a == 0.0));
            assert_eq!(p.q_raw, INIT_QUATERNION);
            assert_eq!(p.t, Vec3::from(INIT_TRANSLATION));
            let shape = m.synthesize(&p.alpha).unwrap();
            let pose = p.pose().unwrap();
            let centroid = Shape::new(vec![shape.centroid()]).unwrap();
            let c = project(r.calibration(), &pose, &centroid).unwrap()[0];
            assert!((c.x - 112.0).abs() < 1e-9 && (c.y - 112.0).abs() < 1e-9, "{c}");
        }
    }

    #[test]
    fn same_seed_same_params() {
        let (m, a) = small();
        let b = init_model(&m, a.arch(), &Calibration::default(), 4, 1).unwrap();
        assert_eq!(a.params(), b.params());
        let c = init_model(&m, a.arch(), &Calibration::default(), 4, 2).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn blocks_tile_the_parameter_vector() {
        let (_, r) = small();
        let mut next = 0;
        for b in r.blocks() {
            assert_eq!(b.offset, next);
            next += b.len();
        }
        assert_eq!(next, r.n_params());
    }
}
