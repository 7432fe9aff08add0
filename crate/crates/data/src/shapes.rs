//! Parametric part-labelled shapes.
//!
//! Every kind is built from a few surface primitives. Each part first draws
//! its share of the points from a configured fraction range, then spreads
//! them over its primitives in proportion to their areas. Thin parts sit
//! right against bulky ones (legs under a tabletop, fins on a body), so
//! Euclidean neighborhoods straddle part boundaries.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use stn_core::geometry::{normalize_cloud, random_rigid};
use stn_core::PointCloud;

use crate::error::{DataError, Result};

pub const MIN_POINTS: usize = 32;
pub const JITTER_STD: f64 = 0.01;
pub const JITTER_CLIP: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Table,
    Rocket,
    Earphone,
    Lamp,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Table, Self::Rocket, Self::Earphone, Self::Lamp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Table => "table",
            Self::Rocket => "rocket",
            Self::Earphone => "earphone",
            Self::Lamp => "lamp",
        }
    }

    /// Category id stored in cloud files.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn parts(self) -> usize {
        match self {
            Self::Rocket => 3,
            _ => 2,
        }
    }

    pub fn part_names(self) -> &'static [&'static str] {
        match self {
            Self::Table => &["top", "legs"],
            Self::Rocket => &["body", "nose", "fins"],
            Self::Earphone => &["cups", "band"],
            Self::Lamp => &["pole", "shade"],
        }
    }

    /// First label of this kind in the shared label space of all kinds.
    pub fn label_offset(self) -> usize {
        Self::ALL[..self.index()].iter().map(|k| k.parts()).sum()
    }

    /// Allowed fraction of points for each part except part 0, which takes the rest.
    pub fn fraction_ranges(self) -> &'static [(f64, f64)] {
        match self {
            Self::Table => &[(0.25, 0.5)],
            Self::Rocket => &[(0.1, 0.25), (0.15, 0.3)],
            Self::Earphone => &[(0.45, 0.7)],
            Self::Lamp => &[(0.35, 0.65)],
        }
    }
}

/// Size of the shared label space across every kind.
pub fn total_parts() -> usize {
    ShapeKind::ALL.iter().map(|k| k.parts()).sum()
}

impl FromStr for ShapeKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Augment {
    #[default]
    #[serde(rename = "none")]
    None,
    /// Random rotation about the centroid.
    #[serde(rename = "rigid")]
    Rigid,
    /// Rotation, then clipped Gaussian jitter and renormalization.
    #[serde(rename = "rigid+jitter")]
    RigidJitter,
}

impl Augment {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Rigid => "rigid",
            Self::RigidJitter => "rigid+jitter",
        }
    }
}

impl FromStr for Augment {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "rigid" => Ok(Self::Rigid),
            "rigid+jitter" => Ok(Self::RigidJitter),
            other => Err(DataError::InvalidArgument(format!(
                "unknown augmentation '{other}' (expected none, rigid or rigid+jitter)"
            ))),
        }
    }
}

type P3 = [f64; 3];

enum Primitive {
    /// Axis-aligned box surface.
    Box { min: P3, max: P3 },
    /// Lateral surface of a vertical frustum around (x, z); radius varies linearly with height.
    Frustum { x: f64, z: f64, y0: f64, y1: f64, r0: f64, r1: f64 },
    /// Flat disc facing up or down at height y.
    Disc { x: f64, z: f64, y: f64, r: f64 },
    /// Flat triangle.
    Triangle([P3; 3]),
    /// Tube of radius `tube` along a circular arc of radius `radius` in the
    /// x-y plane centred at `center`, spanning angles `a0..a1`.
    Arc { center: P3, radius: f64, tube: f64, a0: f64, a1: f64 },
    /// Cylinder with horizontal axis along x, centred at `c`, with caps.
    Puck { c: P3, r: f64, half_len: f64 },
}

fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: P3) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn cross(a: P3, b: P3) -> P3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Self::Box { min, max } => {
                let d = sub(max, min);
                2.0 * (d[0] * d[1] + d[1] * d[2] + d[0] * d[2])
            }
            Self::Frustum { y0, y1, r0, r1, .. } => {
                let slant = ((y1 - y0).powi(2) + (r1 - r0).powi(2)).sqrt();
                PI * (r0 + r1) * slant
            }
            Self::Disc { r, .. } => PI * r * r,
            Self::Triangle([a, b, c]) => 0.5 * norm(cross(sub(b, a), sub(c, a))),
            Self::Arc { radius, tube, a0, a1, .. } => 2.0 * PI * tube * radius * (a1 - a0),
            Self::Puck { r, half_len, .. } => 2.0 * PI * r * 2.0 * half_len + 2.0 * PI * r * r,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> P3 {
        match *self {
            Self::Box { min, max } => {
                let d = sub(max, min);
                let faces = [d[1] * d[2], d[0] * d[2], d[0] * d[1]];
                let mut u = rng.random::<f64>() * faces.iter().sum::<f64>();
                let mut axis = 0;
                while axis < 2 && u >= faces[axis] {
                    u -= faces[axis];
                    axis += 1;
                }
                let mut p = [0.0; 3];
                for (k, v) in p.iter_mut().enumerate() {
                    *v = min[k] + rng.random::<f64>() * d[k];
                }
                p[axis] = if rng.random::<bool>() { max[axis] } else { min[axis] };
                p
            }
            Self::Frustum { x, z, y0, y1, r0, r1 } => {
                // rejection on the radius keeps the density area-uniform
                let rmax = r0.max(r1);
                let t = loop {
                    let t: f64 = rng.random();
                    if rng.random::<f64>() * rmax <= r0 + (r1 - r0) * t {
                        break t;
                    }
                };
                let r = r0 + (r1 - r0) * t;
                let theta = rng.random::<f64>() * 2.0 * PI;
                [x + r * theta.cos(), y0 + (y1 - y0) * t, z + r * theta.sin()]
            }
            Self::Disc { x, z, y, r } => {
                let rr = r * rng.random::<f64>().sqrt();
                let theta = rng.random::<f64>() * 2.0 * PI;
                [x + rr * theta.cos(), y, z + rr * theta.sin()]
            }
            Self::Triangle([a, b, c]) => {
                let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                [0, 1, 2].map(|k| a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k]))
            }
            Self::Arc { center, radius, tube, a0, a1 } => {
                let (phi, theta) = loop {
                    let phi = a0 + rng.random::<f64>() * (a1 - a0);
                    let theta = rng.random::<f64>() * 2.0 * PI;
                    if rng.random::<f64>() * (radius + tube) <= radius + tube * theta.cos() {
                        break (phi, theta);
                    }
                };
                let ring = radius + tube * theta.cos();
                [
                    center[0] + ring * phi.cos(),
                    center[1] + ring * phi.sin(),
                    center[2] + tube * theta.sin(),
                ]
            }
            Self::Puck { c, r, half_len } => {
                let side = 2.0 * PI * r * 2.0 * half_len;
                let caps = 2.0 * PI * r * r;
                let theta = rng.random::<f64>() * 2.0 * PI;
                if rng.random::<f64>() * (side + caps) < side {
                    let x = c[0] + (2.0 * rng.random::<f64>() - 1.0) * half_len;
                    [x, c[1] + r * theta.cos(), c[2] + r * theta.sin()]
                } else {
                    let rr = r * rng.random::<f64>().sqrt();
                    let x = c[0] + if rng.random::<bool>() { half_len } else { -half_len };
                    [x, c[1] + rr * theta.cos(), c[2] + rr * theta.sin()]
                }
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn table(rng: &mut ChaCha8Rng) -> Vec<Vec<Primitive>> {
    let (w, d) = (uniform(rng, 1.2, 2.0), uniform(rng, 0.8, 1.4));
    let (h, t) = (uniform(rng, 0.7, 1.1), uniform(rng, 0.04, 0.1));
    let r = uniform(rng, 0.03, 0.07);
    let inset = uniform(rng, 0.05, 0.2);
    let top = vec![Primitive::Box {
        min: [-w / 2.0, h - t, -d / 2.0],
        max: [w / 2.0, h, d / 2.0],
    }];
    let legs = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
        .map(|(sx, sz)| Primitive::Frustum {
            x: sx * (w / 2.0 - inset),
            z: sz * (d / 2.0 - inset),
            y0: 0.0,
            y1: h - t,
            r0: r,
            r1: r,
        })
        .into();
    vec![top, legs]
}

fn rocket(rng: &mut ChaCha8Rng) -> Vec<Vec<Primitive>> {
    let r = uniform(rng, 0.15, 0.3);
    let len = uniform(rng, 1.5, 2.5);
    let nose = uniform(rng, 0.3, 0.7);
    let fin_h = uniform(rng, 0.3, 0.6);
    let fin_w = uniform(rng, 0.2, 0.45);
    let fins = if rng.random::<bool>() { 3 } else { 4 };
    let body = vec![
        Primitive::Frustum { x: 0.0, z: 0.0, y0: 0.0, y1: len, r0: r, r1: r },
        Primitive::Disc { x: 0.0, z: 0.0, y: 0.0, r },
    ];
    let nose = vec![Primitive::Frustum {
        x: 0.0,
        z: 0.0,
        y0: len,
        y1: len + nose,
        r0: r,
        r1: 0.0,
    }];
    let fins = (0..fins)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / fins as f64;
            let (c, s) = (a.cos(), a.sin());
            Primitive::Triangle([
                [r * c, 0.0, r * s],
                [r * c, fin_h, r * s],
                [(r + fin_w) * c, -0.1 * fin_h, (r + fin_w) * s],
            ])
        })
        .collect();
    vec![body, nose, fins]
}

fn earphone(rng: &mut ChaCha8Rng) -> Vec<Vec<Primitive>> {
    let radius = uniform(rng, 0.6, 1.0);
    let tube = uniform(rng, 0.03, 0.07);
    let cup_r = uniform(rng, 0.2, 0.35);
    let cup_half = uniform(rng, 0.05, 0.1);
    let droop = uniform(rng, 0.0, 0.25);
    let band = vec![Primitive::Arc {
        center: [0.0, 0.0, 0.0],
        radius,
        tube,
        a0: -droop,
        a1: PI + droop,
    }];
    let cup_y = -droop.sin() * radius - 0.5 * cup_r;
    let cup_x = radius * droop.cos() - cup_half;
    let cups = vec![
        Primitive::Puck { c: [cup_x, cup_y, 0.0], r: cup_r, half_len: cup_half },
        Primitive::Puck { c: [-cup_x, cup_y, 0.0], r: cup_r, half_len: cup_half },
    ];
    vec![cups, band]
}

fn lamp(rng: &mut ChaCha8Rng) -> Vec<Vec<Primitive>> {
    let h = uniform(rng, 1.0, 1.8);
    let r = uniform(rng, 0.02, 0.05);
    let base = uniform(rng, 0.15, 0.3);
    let shade_h = uniform(rng, 0.3, 0.5);
    let (bottom, top) = (uniform(rng, 0.3, 0.6), uniform(rng, 0.1, 0.25));
    let drop = uniform(rng, 0.3, 0.8) * shade_h;
    let pole = vec![
        Primitive::Frustum { x: 0.0, z: 0.0, y0: 0.0, y1: h, r0: r, r1: r },
        Primitive::Disc { x: 0.0, z: 0.0, y: 0.0, r: base },
    ];
    // the pole tip pokes up inside the shade
    let shade = vec![Primitive::Frustum {
        x: 0.0,
        z: 0.0,
        y0: h - drop,
        y1: h - drop + shade_h,
        r0: bottom,
        r1: top,
    }];
    vec![pole, shade]
}

fn part_counts(kind: ShapeKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut counts = vec![0; kind.parts()];
    for (p, &(lo, hi)) in kind.fraction_ranges().iter().enumerate() {
        counts[p + 1] = (uniform(rng, lo, hi) * n as f64).round() as usize;
    }
    counts[0] = n - counts[1..].iter().sum::<usize>();
    counts
}

fn sample_parts(parts: &[Vec<Primitive>], counts: &[usize], rng: &mut ChaCha8Rng) -> Vec<(P3, usize)> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (label, (prims, &count)) in parts.iter().zip(counts).enumerate() {
        let areas: Vec<f64> = prims.iter().map(Primitive::area).collect();
        let total: f64 = areas.iter().sum();
        for _ in 0..count {
            let mut u = rng.random::<f64>() * total;
            let mut i = 0;
            while i + 1 < prims.len() && u >= areas[i] {
                u -= areas[i];
                i += 1;
            }
            out.push((prims[i].sample(rng), label));
        }
    }
    out
}

fn rotate(cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
    let (rot, _) = random_rigid(seed);
    Ok(cloud.transformed(&rot, [0.0; 3])?)
}

/// Samples one labelled, normalized shape. Deterministic per `(kind, n_points, seed, augment)`.
pub fn gen_shape(kind: ShapeKind, n_points: usize, seed: u64, augment: Augment) -> Result<PointCloud> {
    if n_points < MIN_POINTS {
        return Err(DataError::InvalidArgument(format!(
            "shapes need at least {MIN_POINTS} points, got {n_points}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = match kind {
        ShapeKind::Table => table(&mut rng),
        ShapeKind::Rocket => rocket(&mut rng),
        ShapeKind::Earphone => earphone(&mut rng),
        ShapeKind::Lamp => lamp(&mut rng),
    };
    let counts = part_counts(kind, n_points, &mut rng);
    let mut labelled = sample_parts(&parts, &counts, &mut rng);
    labelled.shuffle(&mut rng);
    let (points, labels): (Vec<P3>, Vec<usize>) = labelled.into_iter().unzip();
    let cloud = PointCloud::new(points)?
        .with_labels(labels, kind.parts())?
        .with_category(kind.index());
    let mut cloud = normalize_cloud(&cloud)?;
    if augment != Augment::None {
        cloud = rotate(&cloud, rng.random())?;
    }
    if augment == Augment::RigidJitter {
        let noise = Normal::new(0.0, JITTER_STD).expect("valid std");
        let mut coords = cloud.coords().into_data();
        coords
            .iter_mut()
            .for_each(|v| *v += noise.sample(&mut rng).clamp(-JITTER_CLIP, JITTER_CLIP));
        let shaken = cloud.with_coords(&coords);
        cloud = normalize_cloud(&shaken?)?;
    }
    Ok(cloud)
}
