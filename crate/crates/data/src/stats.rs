//! Neighborhood spread statistics and Welch's t-test.

use serde::Serialize;
use stn_core::geometry::normalize_cloud;
use stn_core::neighborhood::knn_graph;
use stn_core::PointCloud;

use crate::error::{DataError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StdStats {
    /// Mean over points of the std of distances to the k neighbors.
    pub std_before: f64,
    pub std_after: f64,
    /// `(before - after) / before`.
    pub reduction: f64,
    /// Std of all coordinates around the centroid.
    pub cloud_std_before: f64,
    pub cloud_std_after: f64,
    pub cloud_reduction: f64,
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean per-point std of k-NN distances of an already normalized cloud.
pub fn neighborhood_std(cloud: &PointCloud, k: usize) -> Result<f64> {
    let coords = cloud.coords();
    let graph = knn_graph(coords.data(), k)?;
    let pts = cloud.points();
    let dist = |i: usize, j: usize| (0..3).map(|d| (pts[i][d] - pts[j][d]).powi(2)).sum::<f64>().sqrt();
    let total: f64 = (0..pts.len())
        .map(|i| population_std(graph.row(i).iter().map(|&j| dist(i, j))))
        .sum();
    Ok(total / pts.len() as f64)
}

fn cloud_std(cloud: &PointCloud) -> f64 {
    // centroid is at the origin after normalization
    let n = cloud.len() as f64;
    (cloud.points().iter().flat_map(|p| p.iter()).map(|v| v * v).sum::<f64>() / (3.0 * n)).sqrt()
}

fn reduction(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        (before - after) / before
    }
}

/// Compares neighborhood spread before and after a transform. Both clouds
/// are renormalized first so a uniform scale changes nothing.
pub fn neighborhood_std_stats(before: &PointCloud, after: &PointCloud, k: usize) -> Result<StdStats> {
    if before.len() != after.len() {
        return Err(DataError::InvalidArgument(format!(
            "clouds differ in size: {} vs {}",
            before.len(),
            after.len()
        )));
    }
    let (b, a) = (normalize_cloud(before)?, normalize_cloud(after)?);
    let (sb, sa) = (neighborhood_std(&b, k)?, neighborhood_std(&a, k)?);
    let (cb, ca) = (cloud_std(&b), cloud_std(&a));
    Ok(StdStats {
        std_before: sb,
        std_after: sa,
        reduction: reduction(sb, sa),
        cloud_std_before: cb,
        cloud_std_after: ca,
        cloud_reduction: reduction(cb, ca),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t statistic and Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(DataError::InvalidArgument(format!(
            "t-test needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(DataError::InvalidArgument("t-test samples must be finite".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    if sa + sb == 0.0 {
        return Err(DataError::InvalidArgument("both samples have zero variance".into()));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let dof = (sa + sb).powi(2) / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    Ok(WelchResult { t, dof })
}
