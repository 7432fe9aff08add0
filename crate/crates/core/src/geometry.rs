//! Point clouds and the affine, projective and deformable transformer maps.
//!
//! Every transform matrix is divided by its Frobenius norm before use: k-NN
//! graphs are invariant to uniform scaling, so only the direction of the
//! matrix matters. Translation is never learned.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Norms below this are rejected as degenerate transforms.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Minimum magnitude of the homogeneous divisor.
pub const HOMOGENEOUS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<[T; 3]>,
    part_labels: Option<Vec<usize>>,
    category: Option<usize>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<[T; 3]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegenerateCloud(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(Self {
            points,
            part_labels: None,
            category: None,
        })
    }

    /// Attaches per-point part labels, each in `[0, num_parts)`.
    pub fn with_labels(mut self, labels: Vec<usize>, num_parts: usize) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::WidthMismatch {
                context: "part labels".into(),
                expected: self.points.len(),
                actual: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_parts) {
            return Err(Error::LabelOutOfRange { label, num_parts });
        }
        self.part_labels = Some(labels);
        Ok(self)
    }

    pub fn with_category(mut self, category: usize) -> Self {
        self.category = Some(category);
        self
    }

    pub fn points(&self) -> &[[T; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn part_labels(&self) -> Option<&[usize]> {
        self.part_labels.as_deref()
    }

    pub fn category(&self) -> Option<usize> {
        self.category
    }

    /// Coordinates as a `3 × N` tensor (rows x, y, z).
    pub fn coords(&self) -> Tensor<T> {
        let n = self.points.len();
        let mut data = vec![T::zero(); 3 * n];
        for (i, p) in self.points.iter().enumerate() {
            for d in 0..3 {
                data[d * n + i] = p[d];
            }
        }
        Tensor::new(vec![3, n], data).expect("3 x N")
    }

    /// Rebuilds a cloud from `3 × N` coordinates, keeping labels and category.
    pub fn with_coords(&self, coords: &[T]) -> Result<Self> {
        let n = self.points.len();
        if coords.len() != 3 * n {
            return Err(Error::WidthMismatch {
                context: "coordinate buffer".into(),
                expected: 3 * n,
                actual: coords.len(),
            });
        }
        let points = (0..n)
            .map(|i| [coords[i], coords[n + i], coords[2 * n + i]])
            .collect();
        let mut out = Self::new(points)?;
        out.part_labels = self.part_labels.clone();
        out.category = self.category;
        Ok(out)
    }

    pub fn map_points(&self, f: impl Fn([T; 3]) -> [T; 3]) -> Result<Self> {
        let mut out = Self::new(self.points.iter().map(|&p| f(p)).collect())?;
        out.part_labels = self.part_labels.clone();
        out.category = self.category;
        Ok(out)
    }

    /// Applies `p -> R p + t`.
    pub fn transformed(&self, rot: &[[T; 3]; 3], t: [T; 3]) -> Result<Self> {
        self.map_points(|p| {
            let mut q = t;
            for r in 0..3 {
                for c in 0..3 {
                    q[r] = q[r] + rot[r][c] * p[c];
                }
            }
            q
        })
    }
}

/// Centers the cloud at the origin and scales its farthest point to radius 1.
pub fn normalize_cloud<T: Scalar>(cloud: &PointCloud<T>) -> Result<PointCloud<T>> {
    let n = T::lit(cloud.len() as f64);
    let mut centroid = [T::zero(); 3];
    for p in cloud.points() {
        for d in 0..3 {
            centroid[d] = centroid[d] + p[d];
        }
    }
    centroid.iter_mut().for_each(|c| *c = *c / n);
    let radius = cloud
        .points()
        .iter()
        .map(|p| (0..3).map(|d| (p[d] - centroid[d]).powi(2)).sum::<T>().sqrt())
        .fold(T::zero(), T::max);
    if radius <= T::lit(DEGENERATE_NORM) {
        return Err(Error::DegenerateCloud("all points coincide".into()));
    }
    cloud.map_points(|p| {
        [
            (p[0] - centroid[0]) / radius,
            (p[1] - centroid[1]) / radius,
            (p[2] - centroid[2]) / radius,
        ]
    })
}

/// Seeded random rotation (uniform over SO(3)) and a standard-normal translation.
pub fn random_rigid(seed: u64) -> ([[f64; 3]; 3], [f64; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = [0.0f64; 4];
    let mut norm = 0.0;
    while norm < 1e-6 {
        q.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let [w, x, y, z] = q.map(|v| v / norm);
    let rot = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let t = [0; 3].map(|_| StandardNormal.sample(&mut rng));
    (rot, t)
}

fn normalized_matrix<T: Scalar>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    let norm = tape.frobenius_norm(m);
    let v = tape.scalar(norm);
    if !(v >= T::lit(DEGENERATE_NORM)) {
        return Err(Error::DegenerateTransform(v.as_f64()));
    }
    tape.div_scalar(m, norm)
}

fn expect_shape<T: Scalar>(tape: &Tape<T>, v: Var, rows: usize, what: &str) -> Result<usize> {
    let s = tape.shape(v);
    if s.len() != 2 || s[0] != rows {
        return Err(Error::WidthMismatch {
            context: what.into(),
            expected: rows,
            actual: s[0],
        });
    }
    Ok(s[1])
}

/// `G = (A / ||A||_F) P` for a 3×3 `a` and 3×N `points`.
pub fn apply_affine<T: Scalar>(tape: &mut Tape<T>, a: Var, points: Var) -> Result<Var> {
    if tape.shape(a) != [3, 3] {
        return Err(Error::ShapeMismatch {
            op: "apply_affine",
            left: tape.shape(a).to_vec(),
            right: vec![3, 3],
        });
    }
    expect_shape(tape, points, 3, "affine input coordinates")?;
    let an = normalized_matrix(tape, a)?;
    tape.matmul(an, points)
}

/// Lifts `points` to homogeneous coordinates, applies `B / ||B||_F` and
/// divides by the (sign-preserving, clamped) last coordinate.
pub fn apply_projective<T: Scalar>(tape: &mut Tape<T>, b: Var, points: Var) -> Result<Var> {
    if tape.shape(b) != [4, 4] {
        return Err(Error::ShapeMismatch {
            op: "apply_projective",
            left: tape.shape(b).to_vec(),
            right: vec![4, 4],
        });
    }
    let n = expect_shape(tape, points, 3, "projective input coordinates")?;
    let ones = tape.constant(&Tensor::new(vec![1, n], vec![T::one(); n])?);
    let lifted = tape.concat(&[points, ones], 0)?;
    let bn = normalized_matrix(tape, b)?;
    let q = tape.matmul(bn, lifted)?;
    tape.homogeneous_divide(q, T::lit(HOMOGENEOUS_EPS))
}

/// `G = (C / ||C||_F) [P; F]` for a 3×(3+f) `c`, 3×N `points` and f×N `features`.
pub fn apply_deformable<T: Scalar>(
    tape: &mut Tape<T>,
    c: Var,
    points: Var,
    features: Var,
) -> Result<Var> {
    let n = expect_shape(tape, points, 3, "deformable input coordinates")?;
    let fs = tape.shape(features).to_vec();
    if fs.len() != 2 || fs[1] != n {
        return Err(Error::ShapeMismatch {
            op: "apply_deformable",
            left: vec![3, n],
            right: fs,
        });
    }
    let cs = tape.shape(c).to_vec();
    if cs.len() != 2 || cs[0] != 3 || cs[1] != 3 + fs[0] {
        return Err(Error::WidthMismatch {
            context: "deformable matrix columns".into(),
            expected: 3 + fs[0],
            actual: cs.get(1).copied().unwrap_or(0),
        });
    }
    let stacked = tape.concat(&[points, features], 0)?;
    let cn = normalized_matrix(tape, c)?;
    tape.matmul(cn, stacked)
}
