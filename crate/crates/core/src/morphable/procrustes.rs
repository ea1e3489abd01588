//! Kabsch rigid fitting and generalized Procrustes alignment (no scaling).

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Shape, Vec3};

/// Convergence threshold on RMS mean movement between iterations.
pub const GPA_TOLERANCE: f64 = 1e-8;
pub const GPA_MAX_ITERATIONS: usize = 100;

/// Rigid transform `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_shape(&self, s: &Shape) -> Shape {
        s.map(|p| self.apply(p))
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn after(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Least-squares rigid transform mapping `source[i]` onto `target[i]`.
///
/// Uses the SVD of the cross-covariance with a reflection guard so the
/// result is always a proper rotation.
pub fn kabsch(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform> {
    if source.len() != target.len() || source.is_empty() {
        return Err(Error::DegenerateGeometry(format!(
            "kabsch needs equal non-empty point sets ({} vs {})",
            source.len(),
            target.len()
        )));
    }
    let cs = centroid(source);
    let ct = centroid(target);
    let mut h = Mat3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - cs) * (t - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateGeometry("SVD did not converge".into())),
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, if d == 0.0 { 1.0 } else { d }));
    let rotation = v * fix * u.transpose();
    Ok(RigidTransform {
        rotation,
        translation: ct - rotation * cs,
    })
}

fn centered(shape: &Shape) -> Result<Vec<Vec3>> {
    let c = shape.centroid();
    let pts: Vec<Vec3> = shape.points().iter().map(|p| p - c).collect();
    let spread: f64 = pts.iter().map(|p| p.norm_squared()).sum();
    if !(spread > 1e-12) {
        return Err(Error::DegenerateGeometry(
            "shape has all points coincident".into(),
        ));
    }
    Ok(pts)
}

fn rms_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum();
    (s / a.len() as f64).sqrt()
}

/// Iterates rigid alignment of every shape to the evolving mean.
/// Returns the centered, aligned point sets and their mean.
fn gpa_core(shapes: &[Shape]) -> Result<(Vec<Vec<Vec3>>, Vec<Vec3>)> {
    if shapes.len() < 2 {
        return Err(Error::DegenerateGeometry(
            "procrustes alignment needs at least two shapes".into(),
        ));
    }
    let n = shapes[0].len();
    if let Some(bad) = shapes.iter().find(|s| s.len() != n) {
        return Err(Error::InvalidShape(format!(
            "point count mismatch: {} vs {}",
            bad.len(),
            n
        )));
    }
    let mut aligned = shapes.iter().map(centered).collect::<Result<Vec<_>>>()?;
    let mut mean = aligned[0].clone();
    for _ in 0..GPA_MAX_ITERATIONS {
        for s in aligned.iter_mut() {
            let r = kabsch(s, &mean)?.rotation;
            s.iter_mut().for_each(|p| *p = r * *p);
        }
        let mut next = vec![Vec3::zeros(); n];
        for s in &aligned {
            for (m, p) in next.iter_mut().zip(s) {
                *m += p;
            }
        }
        let k = aligned.len() as f64;
        next.iter_mut().for_each(|m| *m /= k);
        let moved = rms_distance(&next, &mean);
        mean = next;
        if moved < GPA_TOLERANCE {
            break;
        }
    }
    Ok((aligned, mean))
}

fn rotate_all(aligned: Vec<Vec<Vec3>>, r: &Mat3) -> Vec<Shape> {
    aligned
        .into_iter()
        .map(|pts| Shape::from_points_unchecked(pts.into_iter().map(|p| r * p).collect()))
        .collect()
}

/// Generalized Procrustes alignment expressed in a canonical frame.
///
/// Outputs are centered and rotated so the mean shape's principal axes
/// coincide with x, y, z (descending variance). Axis signs are fixed by an
/// index-weighted first moment, which makes the result independent of any
/// common rigid motion applied to the inputs.
pub fn procrustes_align(shapes: &[Shape]) -> Result<Vec<Shape>> {
    let (aligned, mean) = gpa_core(shapes)?;
    let r = canonical_frame(&mean);
    Ok(rotate_all(aligned, &r))
}

/// Generalized Procrustes alignment whose final mean is rotated onto
/// `reference` (which is centered first). Outputs stay centered at the origin.
pub fn procrustes_align_to(shapes: &[Shape], reference: &Shape) -> Result<Vec<Shape>> {
    if reference.len() != shapes.first().map_or(0, Shape::len) {
        return Err(Error::InvalidShape(
            "reference point count differs from the shapes".into(),
        ));
    }
    let (aligned, mean) = gpa_core(shapes)?;
    let reference = centered(reference)?;
    let r = kabsch(&mean, &reference)?.rotation;
    Ok(rotate_all(aligned, &r))
}

fn canonical_frame(mean: &[Vec3]) -> Mat3 {
    let mut cov = Mat3::zeros();
    for p in mean {
        cov += p * p.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes: Vec<Vec3> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    for axis in axes.iter_mut().take(2) {
        let moment: f64 = mean
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64 + 1.0) * axis.dot(p))
            .sum();
        if moment < 0.0 {
            *axis = -*axis;
        }
    }
    axes[2] = axes[0].cross(&axes[1]);
    Mat3::from_rows(&[
        axes[0].transpose(),
        axes[1].transpose(),
        axes[2].transpose(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_shape(rng: &mut ChaCha8Rng, n: usize) -> Shape {
        Shape::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-8.0..8.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-2.0..2.0),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_rigid(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let q = Quaternion::from_axis_angle(axis, rng.random_range(-3.0..3.0));
        RigidTransform {
            rotation: q.rotation_unchecked(),
            translation: Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            ),
        }
    }

    fn max_dev(a: &Shape, b: &Shape) -> f64 {
        a.points()
            .iter()
            .zip(b.points())
            .map(|(p, q)| (p - q).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn kabsch_recovers_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_shape(&mut rng, 30);
        let m = random_rigid(&mut rng);
        let t = m.apply_shape(&s);
        let fit = kabsch(s.points(), t.points()).unwrap();
        assert!((fit.rotation - m.rotation).abs().max() < 1e-10);
        assert!((fit.translation - m.translation).norm() < 1e-9);
    }

    #[test]
    fn kabsch_never_reflects() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_shape(&mut rng, 20);
        let mirrored = s.map(|p| Vec3::new(-p.x, p.y, p.z));
        let fit = kabsch(s.points(), mirrored.points()).unwrap();
        assert!((fit.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rotated_copy_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_shape(&mut rng, 40);
        let rz = Quaternion::from_axis_angle(Vec3::z(), 30f64.to_radians()).rotation_unchecked();
        let s2 = s.map(|p| rz * p);
        let out = procrustes_align(&[s, s2]).unwrap();
        assert!(max_dev(&out[0], &out[1]) < 1e-8);
    }

    #[test]
    fn aligned_inputs_only_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_shape(&mut rng, 25);
        let offset = Vec3::new(3.0, -2.0, 1.0);
        let noise = Normal::new(0.0, 0.005).unwrap();
        let shapes: Vec<Shape> = (0..4)
            .map(|_| {
                let pts: Vec<Vec3> = base
                    .points()
                    .iter()
                    .map(|p| p + offset + Vec3::from_fn(|_, _| noise.sample(&mut rng)))
                    .collect();
                Shape::new(pts).unwrap()
            })
            .collect();
        // Mutually aligned already: give them a common centroid first.
        let c = shapes.iter().map(Shape::centroid).sum::<Vec3>() / 4.0;
        let shapes: Vec<Shape> = shapes
            .iter()
            .map(|s| {
                let d = s.centroid() - c;
                s.map(|p| p - d)
            })
            .collect();
        let out = procrustes_align_to(&shapes, &shapes[0]).unwrap();
        let total: Vec3 = out.iter().map(Shape::centroid).sum();
        assert!(total.norm() < 1e-10);
        for (o, s) in out.iter().zip(&shapes) {
            let expected = s.map(|p| p - c);
            // GPA rotations of already-aligned noisy inputs are tiny, not zero.
            assert!(max_dev(o, &expected) < 0.05);
        }
    }

    #[test]
    fn matches_pairwise_kabsch_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_shape(&mut rng, 200);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let shapes: Vec<Shape> = (0..10)
            .map(|_| {
                let m = random_rigid(&mut rng);
                let noisy = base.map(|p| p + Vec3::from_fn(|_, _| noise.sample(&mut rng)));
                m.apply_shape(&noisy)
            })
            .collect();
        let out = procrustes_align(&shapes).unwrap();
        let n = out.len() as f64;
        let mean: Vec<Vec3> = (0..base.len())
            .map(|i| out.iter().map(|s| s.points()[i]).sum::<Vec3>() / n)
            .collect();
        let mean = Shape::new(mean).unwrap();
        for (o, s) in out.iter().zip(&shapes) {
            // Direct Kabsch of the raw input onto the GPA mean gives the same placement.
            let direct = kabsch(s.points(), mean.points()).unwrap().apply_shape(s);
            assert!(max_dev(o, &direct) < 1e-6);
            let rms = rms_distance(o.points(), mean.points());
            assert!(rms <= 0.01 * 3f64.sqrt(), "residual spread {rms}");
        }
    }

    #[test]
    fn invariant_under_common_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shapes: Vec<Shape> = (0..5).map(|_| random_shape(&mut rng, 30)).collect();
        let m = random_rigid(&mut rng);
        let moved: Vec<Shape> = shapes.iter().map(|s| m.apply_shape(s)).collect();
        let a = procrustes_align(&shapes).unwrap();
        let b = procrustes_align(&moved).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(max_dev(x, y) < 1e-8);
        }
        let reference = random_shape(&mut rng, 30);
        let a = procrustes_align_to(&shapes, &reference).unwrap();
        let b = procrustes_align_to(&moved, &reference).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(max_dev(x, y) < 1e-8);
        }
    }

    #[test]
    fn degenerate_shape_rejected() {
        let p = Shape::new(vec![Vec3::new(1.0, 1.0, 1.0); 5]).unwrap();
        let q = Shape::new(vec![Vec3::zeros(); 5]).unwrap();
        assert!(matches!(
            procrustes_align(&[p, q]),
            Err(Error::DegenerateGeometry(_))
        ));
    }
}
