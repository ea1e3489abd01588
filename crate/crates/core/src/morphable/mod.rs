//! Linear 3D morphable model: construction and shape synthesis.

mod pca;
mod procrustes;
pub mod template;

pub use pca::{build_model, build_symmetric_model};
pub use procrustes::{
    kabsch, procrustes_align, procrustes_align_to, RigidTransform, GPA_MAX_ITERATIONS,
    GPA_TOLERANCE,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Shape, Vec3};

/// Orthogonality tolerance for basis columns.
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-8;

/// Mean shape `m`, identity basis `Φ` (3N × B, unit-norm columns) and
/// per-component variances `Λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    mean: Shape,
    mean_flat: DVector<f64>,
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    symmetry_pairs: Option<Vec<(usize, usize)>>,
}

impl MorphableModel {
    pub fn new(
        mean: Shape,
        basis: DMatrix<f64>,
        eigenvalues: Vec<f64>,
        symmetry_pairs: Option<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        let dim = 3 * mean.len();
        if basis.nrows() != dim {
            return Err(Error::ParamDimension {
                expected: dim,
                got: basis.nrows(),
            });
        }
        let b = basis.ncols();
        if eigenvalues.len() != b {
            return Err(Error::ParamDimension {
                expected: b,
                got: eigenvalues.len(),
            });
        }
        if b > dim {
            return Err(Error::RankDeficient {
                requested: b,
                max: dim,
            });
        }
        if !basis.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidShape("non-finite basis entry".into()));
        }
        if eigenvalues.iter().any(|e| !(e.is_finite() && *e >= 0.0))
            || eigenvalues.windows(2).any(|w| w[0] < w[1])
        {
            return Err(Error::InvalidShape(
                "eigenvalues must be finite, non-negative and non-increasing".into(),
            ));
        }
        let gram = basis.transpose() * &basis;
        for i in 0..b {
            if (gram[(i, i)] - 1.0).abs() > ORTHOGONALITY_TOLERANCE {
                return Err(Error::InvalidShape(format!("basis column {i} is not unit norm")));
            }
            for j in 0..i {
                if gram[(i, j)].abs() > ORTHOGONALITY_TOLERANCE {
                    return Err(Error::InvalidShape(format!(
                        "basis columns {j} and {i} are not orthogonal"
                    )));
                }
            }
        }
        if let Some(pairs) = &symmetry_pairs {
            validate_pairs(pairs, mean.len())?;
        }
        let mean_flat = DVector::from_vec(mean.to_flat());
        Ok(Self {
            mean,
            mean_flat,
            basis,
            eigenvalues,
            symmetry_pairs,
        })
    }

    pub fn with_symmetry_pairs(mut self, pairs: Vec<(usize, usize)>) -> Result<Self> {
        validate_pairs(&pairs, self.n_points())?;
        self.symmetry_pairs = Some(pairs);
        Ok(self)
    }

    pub fn mean(&self) -> &Shape {
        &self.mean
    }

    pub fn mean_flat(&self) -> &DVector<f64> {
        &self.mean_flat
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn symmetry_pairs(&self) -> Option<&[(usize, usize)]> {
        self.symmetry_pairs.as_deref()
    }

    pub fn n_points(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.basis.ncols()
    }

    /// `m + Φ·α` reshaped into points.
    pub fn synthesize(&self, params: &ShapeParams) -> Result<Shape> {
        let flat = self.synthesize_flat(params.alpha())?;
        Shape::from_flat(flat.as_slice())
    }

    pub fn synthesize_flat(&self, alpha: &[f64]) -> Result<DVector<f64>> {
        if alpha.len() != self.n_components() {
            return Err(Error::ParamDimension {
                expected: self.n_components(),
                got: alpha.len(),
            });
        }
        let mut out = self.mean_flat.clone();
        out.gemv(1.0, &self.basis, &DVector::from_column_slice(alpha), 1.0);
        Ok(out)
    }

    /// `Φᵀ·g`: pulls a gradient on the flat shape back onto `α`.
    pub fn pullback(&self, grad_shape: &DVector<f64>) -> Vec<f64> {
        self.basis.tr_mul(grad_shape).as_slice().to_vec()
    }

    /// Draws `α_i ~ N(0, Λ_i)` independently.
    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ShapeParams {
        let alpha = self
            .eigenvalues
            .iter()
            .map(|&l| {
                let z: f64 = StandardNormal.sample(rng);
                l.sqrt() * z
            })
            .collect();
        ShapeParams { alpha }
    }

    pub fn zero_params(&self) -> ShapeParams {
        ShapeParams {
            alpha: vec![0.0; self.n_components()],
        }
    }

    /// Coefficients of the mirrored shape: `α' = Φᵀ·P·(Φα)` where `P` reflects
    /// about `x = 0` and swaps paired vertices. Fails unless the model has a
    /// pairing, a mirror-symmetric mean and a mirror-closed basis.
    pub fn mirror_params(&self, params: &ShapeParams) -> Result<ShapeParams> {
        let pairs = self.symmetry_pairs.as_deref().ok_or(Error::NotSymmetrizable)?;
        if params.len() != self.n_components() {
            return Err(Error::ParamDimension {
                expected: self.n_components(),
                got: params.len(),
            });
        }
        let perm = pairing_permutation(pairs, self.n_points());
        let tol = 1e-8;
        let mean_gap = (mirror_flat(&self.mean_flat, &perm) - &self.mean_flat).amax();
        if mean_gap > tol * (1.0 + self.mean_flat.amax()) {
            return Err(Error::NotSymmetrizable);
        }
        let offset = &self.basis * DVector::from_column_slice(&params.alpha);
        let mirrored = mirror_flat(&offset, &perm);
        let alpha = self.basis.tr_mul(&mirrored);
        let residual = (&self.basis * &alpha - &mirrored).amax();
        if residual > tol * (1.0 + offset.amax()) {
            return Err(Error::NotSymmetrizable);
        }
        Ok(ShapeParams {
            alpha: alpha.as_slice().to_vec(),
        })
    }

    /// Largest singular value of the retained basis (1 for orthonormal columns).
    pub fn basis_operator_norm(&self) -> f64 {
        self.basis.singular_values().max()
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(&ModelFile::from(self)).expect("model serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile::from(self)).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

fn validate_pairs(pairs: &[(usize, usize)], n: usize) -> Result<()> {
    let mut partner = vec![usize::MAX; n];
    for &(a, b) in pairs {
        if a >= n || b >= n {
            return Err(Error::InvalidShape(format!(
                "symmetry pair ({a}, {b}) out of range for {n} points"
            )));
        }
        for (i, j) in [(a, b), (b, a)] {
            if partner[i] != usize::MAX && partner[i] != j {
                return Err(Error::InvalidShape(format!(
                    "vertex {i} appears in two symmetry pairs"
                )));
            }
            partner[i] = j;
        }
    }
    Ok(())
}

/// Reflects a flat shape about the `x = 0` plane and swaps paired vertices.
pub(crate) fn mirror_flat<S>(flat: &nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::U1, S>, perm: &[usize]) -> DVector<f64>
where
    S: nalgebra::storage::Storage<f64, nalgebra::Dyn, nalgebra::U1>,
{
    let mut out = DVector::<f64>::zeros(flat.len());
    for (n, &p) in perm.iter().enumerate() {
        out[3 * n] = -flat[3 * p];
        out[3 * n + 1] = flat[3 * p + 1];
        out[3 * n + 2] = flat[3 * p + 2];
    }
    out
}

/// Mirror image of `shape` under the pairing (same topology).
pub fn mirror_shape(shape: &Shape, pairs: &[(usize, usize)]) -> Shape {
    let perm = pairing_permutation(pairs, shape.len());
    Shape::from_points_unchecked(
        perm.iter()
            .map(|&p| {
                let q = shape.points()[p];
                Vec3::new(-q.x, q.y, q.z)
            })
            .collect(),
    )
}

/// Complete vertex permutation from a pairing; unpaired vertices map to themselves.
pub fn pairing_permutation(pairs: &[(usize, usize)], n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for &(a, b) in pairs {
        perm[a] = b;
        perm[b] = a;
    }
    perm
}

/// Identity coefficients `α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ShapeParams {
    alpha: Vec<f64>,
}

impl TryFrom<Vec<f64>> for ShapeParams {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ShapeParams::new(v)
    }
}

impl From<ShapeParams> for Vec<f64> {
    fn from(p: ShapeParams) -> Self {
        p.alpha
    }
}

impl ShapeParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidShape("non-finite identity coefficient".into()));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// On-disk model layout. `basis` is row-major over the 3N × B matrix.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    n_points: usize,
    n_components: usize,
    mean: Vec<f64>,
    basis: Vec<f64>,
    eigenvalues: Vec<f64>,
    symmetry_pairs: Option<Vec<(usize, usize)>>,
}

impl From<&MorphableModel> for ModelFile {
    fn from(m: &MorphableModel) -> Self {
        let basis_rm: Vec<f64> = m.basis.transpose().as_slice().to_vec();
        ModelFile {
            n_points: m.n_points(),
            n_components: m.n_components(),
            mean: m.mean.to_flat(),
            basis: basis_rm,
            eigenvalues: m.eigenvalues.clone(),
            symmetry_pairs: m.symmetry_pairs.clone(),
        }
    }
}

impl TryFrom<ModelFile> for MorphableModel {
    type Error = Error;
    fn try_from(f: ModelFile) -> Result<Self> {
        let dim = f
            .n_points
            .checked_mul(3)
            .ok_or_else(|| Error::format("model", "n_points overflows"))?;
        if f.n_points == 0 || f.mean.len() != dim {
            return Err(Error::format(
                "model",
                format!("mean has {} values, expected {dim}", f.mean.len()),
            ));
        }
        if dim.checked_mul(f.n_components) != Some(f.basis.len()) {
            return Err(Error::format(
                "model",
                format!(
                    "basis has {} values, expected {dim}×{}",
                    f.basis.len(),
                    f.n_components
                ),
            ));
        }
        let basis = DMatrix::from_row_slice(dim, f.n_components, &f.basis);
        let mean = Shape::from_flat(&f.mean)?;
        MorphableModel::new(mean, basis, f.eigenvalues, f.symmetry_pairs)
    }
}
