//! Synthetic face template and subject population.
//!
//! The template is a grid sampled on the front half of an ellipsoid with a
//! nose-like bump, facing `+z`. Grid columns are mirror images of each other
//! across `x = 0`, which gives an exact left-right vertex pairing.
//! The population generator deforms the template with a fixed set of smooth
//! displacement fields and adds a small random rigid motion per subject, so
//! shapes are born in correspondence but not aligned.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{build_symmetric_model, procrustes_align_to, MorphableModel};
use crate::error::{Error, Result};
use crate::geometry::{Quaternion, Shape, Vec3};

const HALF_WIDTH: f64 = 7.5;
const HALF_HEIGHT: f64 = 10.0;
const DOME_DEPTH: f64 = 5.0;
const NOSE_HEIGHT: f64 = 2.5;
const NOSE_Y: f64 = -0.5;
const NOSE_SIGMA_X: f64 = 1.0;
const NOSE_SIGMA_Y: f64 = 2.2;

/// Seed for the deformation fields; fixed so every population shares its modes.
const FIELD_SEED: u64 = 0x5eed_f1e1d;
const SYMMETRIC_BUMPS: usize = 16;
const ANTISYMMETRIC_BUMPS: usize = 4;
const LATERAL_BUMPS: usize = 12;

#[derive(Debug, Clone)]
pub struct FaceTemplate {
    rows: usize,
    cols: usize,
    shape: Shape,
    pairs: Vec<(usize, usize)>,
    fields: Vec<(f64, Vec<Vec3>)>,
}

fn nose(x: f64, y: f64) -> f64 {
    NOSE_HEIGHT
        * (-(x * x) / (2.0 * NOSE_SIGMA_X * NOSE_SIGMA_X)
            - (y - NOSE_Y).powi(2) / (2.0 * NOSE_SIGMA_Y * NOSE_SIGMA_Y))
            .exp()
}

fn grid_dims(n_points: usize) -> Result<(usize, usize)> {
    if n_points < 8 || !n_points.is_multiple_of(2) {
        return Err(Error::ConfigInvalid(format!(
            "template needs an even point count ≥ 8, got {n_points}"
        )));
    }
    let target = (n_points as f64 / 2.0).sqrt();
    (2..=n_points / 2)
        .filter(|r| n_points.is_multiple_of(*r) && (n_points / r).is_multiple_of(2) && n_points / r >= 2)
        .min_by(|&a, &b| {
            (a as f64 - target)
                .abs()
                .total_cmp(&(b as f64 - target).abs())
        })
        .map(|r| (r, n_points / r))
        .ok_or_else(|| Error::ConfigInvalid(format!("cannot grid {n_points} points")))
}

impl FaceTemplate {
    pub fn new(n_points: usize) -> Result<Self> {
        let (rows, cols) = grid_dims(n_points)?;
        let mut points = Vec::with_capacity(n_points);
        let mut pairs = Vec::with_capacity(n_points / 2);
        for i in 0..rows {
            let h = -1.0 + 2.0 * (i as f64 + 0.5) / rows as f64;
            for j in 0..cols {
                let s = -1.0 + 2.0 * (j as f64 + 0.5) / cols as f64;
                let x = HALF_WIDTH * s * (1.0 - 0.5 * h * h).sqrt();
                let y = HALF_HEIGHT * h * (1.0 - 0.5 * s * s).sqrt();
                let rho2 = (x / HALF_WIDTH).powi(2) + (y / HALF_HEIGHT).powi(2);
                let z = DOME_DEPTH * (1.0 - rho2).max(0.0).sqrt() + nose(x, y);
                points.push(Vec3::new(x, y, z));
                if j < cols / 2 {
                    pairs.push((i * cols + j, i * cols + (cols - 1 - j)));
                }
            }
        }
        // Exact mirror symmetry regardless of floating rounding in s.
        for &(l, r) in &pairs {
            let p = points[r];
            points[l] = Vec3::new(-p.x, p.y, p.z);
        }
        let centroid = points.iter().sum::<Vec3>() / n_points as f64;
        let c = Vec3::new(0.0, centroid.y, centroid.z);
        points.iter_mut().for_each(|p| *p -= c);

        let shape = Shape::new(points)?;
        let fields = deformation_fields(&shape);
        Ok(Self {
            rows,
            cols,
            shape,
            pairs,
            fields,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn symmetry_pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Number of deformation fields the population generator draws from.
    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    /// `count` landmark vertex indices, closed under the left-right pairing:
    /// the second half mirrors the first half entry by entry.
    pub fn landmark_indices(&self, count: usize) -> Result<Vec<usize>> {
        if count == 0 || !count.is_multiple_of(2) || count > self.shape.len() {
            return Err(Error::ConfigInvalid(format!(
                "landmark count must be even and in 2..={}, got {count}",
                self.shape.len()
            )));
        }
        let half = count / 2;
        let half_cols = self.cols / 2;
        let golden = 0.618_033_988_749_895;
        let mut used = HashSet::new();
        let mut right = Vec::with_capacity(half);
        for k in 0..half {
            let row = ((k as f64 + 0.5) * self.rows as f64 / half as f64) as usize;
            let frac = (k as f64 * golden).fract();
            let col = half_cols + (frac * half_cols as f64) as usize;
            let mut idx = row.min(self.rows - 1) * self.cols + col.min(self.cols - 1);
            // Walk forward through right-half vertices until a free one turns up.
            while used.contains(&idx) || idx % self.cols < half_cols {
                idx = (idx + 1) % self.shape.len();
            }
            used.insert(idx);
            right.push(idx);
        }
        let partner = |i: usize| {
            let (r, c) = (i / self.cols, i % self.cols);
            r * self.cols + (self.cols - 1 - c)
        };
        let left: Vec<usize> = right.iter().map(|&i| partner(i)).collect();
        Ok(right.into_iter().chain(left).collect())
    }

    /// The template deformed by `coefficients` (one per field, standard units).
    pub fn deform(&self, coefficients: &[f64]) -> Shape {
        let mut pts = self.shape.points().to_vec();
        for ((sigma, field), &c) in self.fields.iter().zip(coefficients) {
            for (p, d) in pts.iter_mut().zip(field) {
                *p += d * (sigma * c);
            }
        }
        Shape::from_points_unchecked(pts)
    }
}

fn deformation_fields(shape: &Shape) -> Vec<(f64, Vec<Vec3>)> {
    let pts = shape.points();
    let field = |f: &dyn Fn(&Vec3) -> Vec3| pts.iter().map(f).collect::<Vec<_>>();
    let mut fields: Vec<(f64, Vec<Vec3>)> = vec![
        (0.08, field(&|p| Vec3::new(p.x, 0.0, 0.0))),
        (0.07, field(&|p| Vec3::new(0.0, p.y, 0.0))),
        (0.12, field(&|p| Vec3::new(0.0, 0.0, p.z))),
        (0.35, field(&|p| Vec3::new(0.0, 0.0, nose(p.x, p.y)))),
        (
            0.30,
            field(&|p| Vec3::new(p.x * nose(p.x, p.y) / NOSE_HEIGHT, 0.0, 0.0)),
        ),
        (
            0.12,
            field(&|p| Vec3::new(p.x * (-p.y / HALF_HEIGHT).max(0.0), 0.0, 0.0)),
        ),
        (
            0.15,
            field(&|p| Vec3::new(0.0, 0.0, p.z * (p.y / HALF_HEIGHT).max(0.0))),
        ),
        (
            0.30,
            field(&|p| Vec3::new(0.0, 0.0, (-(p.y - 4.0).powi(2) / 2.0).exp())),
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(FIELD_SEED);
    for k in 0..SYMMETRIC_BUMPS + ANTISYMMETRIC_BUMPS {
        let cx: f64 = rng.random_range(0.0..6.0);
        let cy: f64 = rng.random_range(-8.0..8.0);
        let width: f64 = rng.random_range(1.5..3.5);
        let antisymmetric = k >= SYMMETRIC_BUMPS;
        let sigma = if antisymmetric {
            0.10 * 0.8f64.powi((k - SYMMETRIC_BUMPS) as i32)
        } else {
            0.25 * 0.85f64.powi(k as i32)
        };
        let f = field(&|p| {
            let g = (-((p.x.abs() - cx).powi(2) + (p.y - cy).powi(2)) / (2.0 * width * width))
                .exp();
            let sign = if antisymmetric { p.x.signum() } else { 1.0 };
            Vec3::new(0.0, 0.0, sign * g)
        });
        fields.push((sigma, f));
    }
    // In-plane bumps; even ones are mirror-symmetric, odd ones antisymmetric.
    for k in 0..LATERAL_BUMPS {
        let cx: f64 = rng.random_range(0.0..6.0);
        let cy: f64 = rng.random_range(-8.0..8.0);
        let width: f64 = rng.random_range(2.0..4.0);
        let along_x = k % 4 < 2;
        let antisymmetric = k % 2 == 1;
        let f = field(&|p| {
            let g = (-((p.x.abs() - cx).powi(2) + (p.y - cy).powi(2)) / (2.0 * width * width))
                .exp();
            // A mirror-symmetric field is odd in x along x and even in x along y.
            let sign = if along_x != antisymmetric { p.x.signum() } else { 1.0 };
            if along_x {
                Vec3::new(sign * g, 0.0, 0.0)
            } else {
                Vec3::new(0.0, sign * g, 0.0)
            }
        });
        fields.push((0.25 * 0.9f64.powi(k as i32), f));
    }
    // Lateral shear with depth: a left-right asymmetry.
    fields.push((0.06, field(&|p| Vec3::new(p.z, 0.0, 0.0))));
    fields
}

/// Draws `count` deformed subjects, each under a small random rigid motion
/// (rotation up to 5°, translation σ = 0.5 cm).
pub fn sample_population(template: &FaceTemplate, count: usize, seed: u64) -> Result<Vec<Shape>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.5).expect("valid sigma");
    (0..count)
        .map(|_| {
            let coeffs: Vec<f64> = (0..template.n_fields())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let shape = template.deform(&coeffs);
            let axis = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let angle = rng.random_range(-5f64..5.0).to_radians();
            let r = if axis.norm() > 1e-9 {
                Quaternion::from_axis_angle(axis, angle).rotation_unchecked()
            } else {
                crate::geometry::Mat3::identity()
            };
            let t = Vec3::from_fn(|_, _| jitter.sample(&mut rng));
            Shape::new(shape.points().iter().map(|p| r * p + t).collect())
        })
        .collect()
}

/// Template → population → Procrustes (onto the template) → mirror-closed PCA.
pub fn synthetic_model(
    n_points: usize,
    n_shapes: usize,
    n_components: usize,
    seed: u64,
) -> Result<(FaceTemplate, MorphableModel)> {
    let template = FaceTemplate::new(n_points)?;
    let shapes = sample_population(&template, n_shapes, seed)?;
    let aligned = procrustes_align_to(&shapes, template.shape())?;
    let model = build_symmetric_model(&aligned, template.symmetry_pairs(), n_components)?;
    Ok((template, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid() {
        let t = FaceTemplate::new(512).unwrap();
        assert_eq!(t.grid(), (16, 32));
        assert_eq!(t.shape().len(), 512);
        assert_eq!(t.symmetry_pairs().len(), 256);
        assert!(FaceTemplate::new(7).is_err());
    }

    #[test]
    fn template_is_mirror_symmetric() {
        let t = FaceTemplate::new(128).unwrap();
        for &(a, b) in t.symmetry_pairs() {
            let (p, q) = (t.shape().points()[a], t.shape().points()[b]);
            assert_eq!(p.x, -q.x);
            assert_eq!(p.y, q.y);
            assert_eq!(p.z, q.z);
        }
        let c = t.shape().centroid();
        assert!(c.norm() < 1e-12);
    }

    #[test]
    fn nose_is_closest_to_camera() {
        let t = FaceTemplate::new(512).unwrap();
        let front = t
            .shape()
            .points()
            .iter()
            .max_by(|a, b| a.z.total_cmp(&b.z))
            .unwrap();
        assert!(front.x.abs() < 1.0 && (front.y - NOSE_Y).abs() < 2.0);
    }

    #[test]
    fn landmarks_are_paired() {
        let t = FaceTemplate::new(512).unwrap();
        let l = t.landmark_indices(32).unwrap();
        assert_eq!(l.len(), 32);
        let set: HashSet<_> = l.iter().collect();
        assert_eq!(set.len(), 32);
        let pts = t.shape().points();
        for k in 0..16 {
            assert!(pts[l[k]].x > 0.0);
            assert_eq!(pts[l[k]].x, -pts[l[k + 16]].x);
        }
        assert!(t.landmark_indices(3).is_err());
    }

    #[test]
    fn synthetic_model_has_requested_rank() {
        let (_, m) = synthetic_model(128, 40, 20, 1).unwrap();
        assert_eq!(m.n_components(), 20);
        assert!(m.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        assert!(m.eigenvalues()[0] > 0.0);
    }
}
