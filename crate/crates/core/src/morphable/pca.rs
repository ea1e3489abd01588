//! Snapshot PCA: eigendecomposition of the subjects×subjects Gram matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{mirror_flat, pairing_permutation, MorphableModel};
use crate::error::{Error, Result};
use crate::geometry::Shape;

/// Builds a morphable model from shapes already in correspondence and aligned.
///
/// The mean is the per-coordinate average; basis columns are unit-norm
/// principal directions and eigenvalues are the sample variances (denominator
/// `S − 1`) of the training projections onto them, in non-increasing order.
pub fn build_model(aligned: &[Shape], n_components: usize) -> Result<MorphableModel> {
    let s = aligned.len();
    if s < 2 {
        return Err(Error::RankDeficient {
            requested: n_components,
            max: s.saturating_sub(1),
        });
    }
    let n_points = aligned[0].len();
    if aligned.iter().any(|a| a.len() != n_points) {
        return Err(Error::InvalidShape("shapes differ in point count".into()));
    }
    let dim = 3 * n_points;
    let max = (s - 1).min(dim);
    if n_components > max {
        return Err(Error::RankDeficient {
            requested: n_components,
            max,
        });
    }

    let mut data = DMatrix::<f64>::zeros(dim, s);
    for (j, shape) in aligned.iter().enumerate() {
        data.set_column(j, &DVector::from_vec(shape.to_flat()));
    }
    let mean = data.column_mean();
    for mut col in data.column_iter_mut() {
        col -= &mean;
    }

    let denom = (s - 1) as f64;
    let gram = data.transpose() * &data / denom;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let scale = data.norm().max(1.0);
    let mut basis = DMatrix::<f64>::zeros(dim, n_components);
    let mut eigenvalues = Vec::with_capacity(n_components);
    let mut filled = Vec::with_capacity(n_components);
    for (k, &idx) in order.iter().take(n_components).enumerate() {
        let mut dir = &data * eig.eigenvectors.column(idx);
        // Directions with tiny eigenvalues are mostly rounding noise; two
        // Gram-Schmidt passes keep them orthogonal to the columns already kept.
        for _ in 0..2 {
            for j in (0..k).filter(|&j| filled[j]) {
                let c = basis.column(j);
                let d = c.dot(&dir);
                dir.axpy(-d, &c, 1.0);
            }
        }
        let norm = dir.norm();
        if norm > 1e-10 * scale {
            basis.set_column(k, &(dir / norm));
            eigenvalues.push(eig.eigenvalues[idx].max(0.0));
            filled.push(true);
        } else {
            eigenvalues.push(0.0);
            filled.push(false);
        }
    }
    complete_orthonormal(&mut basis, &filled);
    // Clamp tiny inversions from floating noise so the order invariant holds exactly.
    for i in 1..eigenvalues.len() {
        if eigenvalues[i] > eigenvalues[i - 1] {
            eigenvalues[i] = eigenvalues[i - 1];
        }
    }

    let mean_shape = Shape::from_flat(mean.as_slice())?;
    MorphableModel::new(mean_shape, basis, eigenvalues, None)
}

/// Builds a model from `aligned` together with the mirror image of every
/// shape, without materializing the mirrored copies.
///
/// The augmented covariance splits into a symmetric and an antisymmetric
/// block, so each is decomposed separately and every basis column is exactly
/// mirror-symmetric or mirror-antisymmetric. The retained span is therefore
/// closed under mirroring. Eigenvalues use the augmented count `2S − 1`.
pub fn build_symmetric_model(
    aligned: &[Shape],
    pairs: &[(usize, usize)],
    n_components: usize,
) -> Result<MorphableModel> {
    let s = aligned.len();
    let n_points = aligned.first().map_or(0, Shape::len);
    if aligned.iter().any(|a| a.len() != n_points) {
        return Err(Error::InvalidShape("shapes differ in point count".into()));
    }
    let dim = 3 * n_points;
    let max = (2 * s).saturating_sub(1).min(dim);
    if s < 1 || n_components > max {
        return Err(Error::RankDeficient {
            requested: n_components,
            max,
        });
    }
    let perm = pairing_permutation(pairs, n_points);

    let mut data = DMatrix::<f64>::zeros(dim, s);
    for (j, shape) in aligned.iter().enumerate() {
        data.set_column(j, &DVector::from_vec(shape.to_flat()));
    }
    let raw_mean = data.column_mean();
    let mean = (&raw_mean + mirror_flat(&raw_mean, &perm)) * 0.5;
    let mut sym = DMatrix::<f64>::zeros(dim, s);
    let mut anti = DMatrix::<f64>::zeros(dim, s);
    for j in 0..s {
        let d = data.column(j) - &mean;
        let pd = mirror_flat(&d, &perm);
        sym.set_column(j, &((&d + &pd) * 0.5));
        anti.set_column(j, &((&d - &pd) * 0.5));
    }

    // Each centered shape contributes its parts twice (once per mirror copy).
    let denom = (2 * s - 1).max(1) as f64;
    let mut candidates: Vec<(f64, usize, DVector<f64>)> = Vec::new();
    let scale = data.norm().max(1.0);
    for (block, part) in [&sym, &anti].into_iter().enumerate() {
        let gram = part.transpose() * part * (2.0 / denom);
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let first = candidates.len();
        for i in order {
            let mut dir = part * eig.eigenvectors.column(i);
            // Same-block Gram-Schmidt keeps the parity of every column.
            for _ in 0..2 {
                for (_, _, c) in &candidates[first..] {
                    let d = c.dot(&dir);
                    dir.axpy(-d, c, 1.0);
                }
            }
            let norm = dir.norm();
            if norm > 1e-10 * scale {
                candidates.push((eig.eigenvalues[i].max(0.0), block, dir / norm));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut basis = DMatrix::<f64>::zeros(dim, n_components);
    let mut eigenvalues = Vec::with_capacity(n_components);
    let mut filled = vec![false; n_components];
    for (k, (value, _, dir)) in candidates.into_iter().take(n_components).enumerate() {
        basis.set_column(k, &dir);
        eigenvalues.push(value);
        filled[k] = true;
    }
    eigenvalues.resize(n_components, 0.0);
    complete_orthonormal(&mut basis, &filled);
    let mean_shape = Shape::from_flat(mean.as_slice())?;
    MorphableModel::new(mean_shape, basis, eigenvalues, Some(pairs.to_vec()))
}

/// Fills zero-variance columns with unit vectors orthogonal to everything else
/// (Gram–Schmidt against the standard basis).
fn complete_orthonormal(basis: &mut DMatrix<f64>, filled: &[bool]) {
    let dim = basis.nrows();
    let mut candidate = 0;
    for k in 0..basis.ncols() {
        if filled[k] {
            continue;
        }
        while candidate < dim {
            let mut v = DVector::<f64>::zeros(dim);
            v[candidate] = 1.0;
            candidate += 1;
            for j in 0..basis.ncols() {
                if j == k || (!filled[j] && j > k) {
                    continue;
                }
                let c = basis.column(j);
                let d = c.dot(&v);
                v -= c * d;
            }
            let n = v.norm();
            if n > 1e-6 {
                basis.set_column(k, &(v / n));
                break;
            }
        }
    }
}
