//! Exact k-nearest-neighbor affinity graphs over `3 × N` coordinates.
//!
//! Rows are ordered by ascending squared distance, ties broken by ascending
//! index, and a point is never its own neighbor.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AffinityGraph {
    idx: Vec<usize>,
    n: usize,
    k: usize,
}

impl AffinityGraph {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if n == 0 || k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument {
                op: "affinity_graph",
                msg: "rows must be non-empty and of equal length".into(),
            });
        }
        if let Some(&bad) = rows.iter().flatten().find(|&&j| j >= n) {
            return Err(Error::IndexOutOfRange {
                op: "affinity_graph",
                index: bad,
                extent: n,
            });
        }
        Ok(Self {
            idx: rows.concat(),
            n,
            k,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Row-major `N × k` index table.
    pub fn indices(&self) -> &[usize] {
        &self.idx
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    /// The graph restricted to each row's first `k` neighbors.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.k);
        let idx = (0..self.n).flat_map(|i| self.row(i)[..k].iter().copied()).collect();
        Self { idx, n: self.n, k }
    }

    /// One line per point, space-separated neighbor indices.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.idx.len() * 4);
        for i in 0..self.n {
            let row = self.row(i);
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    s.push(' ');
                }
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn point_count<T: Scalar>(coords: &[T]) -> Result<usize> {
    if coords.is_empty() || !coords.len().is_multiple_of(3) {
        return Err(Error::InvalidArgument {
            op: "neighborhood",
            msg: format!("expected 3 x N coordinates, got {} values", coords.len()),
        });
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("neighborhood coordinates".into()));
    }
    Ok(coords.len() / 3)
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument {
            op: "knn_graph",
            msg: "k must be at least 1".into(),
        });
    }
    if k >= n {
        return Err(Error::InsufficientPoints { k, n });
    }
    Ok(())
}

/// Full `N × N` squared-distance matrix, row-major.
pub fn pairwise_sq_dist<T: Scalar>(coords: &[T]) -> Result<Vec<T>> {
    let n = point_count(coords)?;
    let (xs, ys, zs) = (&coords[..n], &coords[n..2 * n], &coords[2 * n..]);
    let mut d = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = (xs[i] - xs[j]).powi(2) + (ys[i] - ys[j]).powi(2) + (zs[i] - zs[j]).powi(2);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(d)
}

/// k-NN graph by bounded insertion: each row keeps a sorted buffer of the
/// `k` best `(distance, index)` pairs seen so far. Candidates arrive in
/// ascending index order, so a strict comparison keeps the lower index on ties.
pub fn knn_graph<T: Scalar>(coords: &[T], k: usize) -> Result<AffinityGraph> {
    let n = point_count(coords)?;
    check_k(k, n)?;
    let (xs, ys, zs) = (&coords[..n], &coords[n..2 * n], &coords[2 * n..]);
    let mut idx = Vec::with_capacity(n * k);
    let mut dist = vec![T::zero(); n];
    let mut best: Vec<(T, usize)> = vec![(T::infinity(), usize::MAX); k];
    for i in 0..n {
        let (xi, yi, zi) = (xs[i], ys[i], zs[i]);
        for (d, ((&x, &y), &z)) in dist.iter_mut().zip(xs.iter().zip(ys).zip(zs)) {
            let (dx, dy, dz) = (x - xi, y - yi, z - zi);
            *d = dx * dx + dy * dy + dz * dz;
        }
        best.fill((T::infinity(), usize::MAX));
        let mut filled = 0;
        for (j, &d) in dist.iter().enumerate() {
            if j == i || (filled == k && !(d < best[k - 1].0)) {
                continue;
            }
            let mut pos = filled.min(k - 1);
            while pos > 0 && d < best[pos - 1].0 {
                best[pos] = best[pos - 1];
                pos -= 1;
            }
            best[pos] = (d, j);
            filled = (filled + 1).min(k);
        }
        idx.extend(best.iter().map(|&(_, j)| j));
    }
    Ok(AffinityGraph { idx, n, k })
}

/// Reference k-NN: full stable sort of every row of [`pairwise_sq_dist`].
pub fn knn_oracle<T: Scalar>(coords: &[T], k: usize) -> Result<AffinityGraph> {
    let d = pairwise_sq_dist(coords)?;
    let n = coords.len() / 3;
    check_k(k, n)?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        // stable sort keeps ascending index among equal distances
        order.sort_by(|&a, &b| d[i * n + a].partial_cmp(&d[i * n + b]).unwrap_or(Ordering::Equal));
        order.truncate(k);
        rows.push(order);
    }
    AffinityGraph::from_rows(rows)
}
