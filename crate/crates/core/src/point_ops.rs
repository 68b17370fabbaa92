//! Order-independent point-set primitives: sampling, neighborhoods, grouping
//! and inverse-distance interpolation.
//!
//! Distances are computed by brute force. All tie-breaks go to the lowest
//! index, so every function is a deterministic function of its inputs.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Validated `N×3` coordinates in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet<T: Real = f32> {
    coords: Tensor<T>,
}

impl<T: Real> PointSet<T> {
    pub fn new(coords: Tensor<T>) -> Result<Self> {
        check_points("PointSet", &coords)?;
        if !coords.all_finite() {
            return Err(Error::Invalid("point coordinates must be finite".into()));
        }
        Ok(PointSet { coords })
    }

    pub fn from_points(points: &[[T; 3]]) -> Result<Self> {
        let data = points.iter().flatten().copied().collect();
        Self::new(Tensor::from_vec(&[points.len(), 3], data)?)
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> [T; 3] {
        let r = self.coords.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.coords
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.coords
    }
}

fn check_points<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<usize> {
    if t.rank() != 2 || t.shape()[1] != 3 {
        return shape_err(op, format!("expected [N, 3] coordinates, got {:?}", t.shape()));
    }
    Ok(t.rows())
}

#[inline]
pub fn dist2<T: Real>(a: &[T], b: &[T]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min sampling of `m` indices starting from `start`.
pub fn farthest_point_sample_from<T: Real>(points: &Tensor<T>, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = check_points("farthest_point_sample", points)?;
    if m == 0 || m > n {
        return Err(Error::Invalid(format!("cannot sample {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::Invalid(format!("start index {start} out of range for {n} points")));
    }
    let mut picked = Vec::with_capacity(m);
    let mut min_d = vec![T::infinity(); n];
    let mut current = start;
    picked.push(current);
    while picked.len() < m {
        let c = points.row(current);
        let mut best = 0;
        let mut best_d = T::neg_infinity();
        for (i, md) in min_d.iter_mut().enumerate() {
            let d = dist2(points.row(i), c);
            if d < *md {
                *md = d;
            }
            if *md > best_d {
                best_d = *md;
                best = i;
            }
        }
        current = best;
        picked.push(current);
    }
    Ok(picked)
}

/// Greedy max-min sampling of `m` indices; the first pick is index 0.
pub fn farthest_point_sample<T: Real>(points: &Tensor<T>, m: usize) -> Result<Vec<usize>> {
    farthest_point_sample_from(points, m, 0)
}

/// Max-min sampling with a random first pick.
pub fn farthest_point_sample_seeded<T: Real, R: Rng>(points: &Tensor<T>, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = check_points("farthest_point_sample", points)?;
    farthest_point_sample_from(points, m, rng.random_range(0..n))
}

/// Fixed fan-out neighbor lists, one row of `k` source indices per query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
    /// Number of genuine (non-repeated) neighbors per query.
    valid: Vec<usize>,
    /// Set when nothing fell inside the radius and the nearest point was substituted.
    fallback: Vec<bool>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn queries(&self) -> usize {
        self.valid.len()
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    pub fn valid(&self, q: usize) -> usize {
        self.valid[q]
    }

    pub fn is_fallback(&self, q: usize) -> bool {
        self.fallback[q]
    }

    /// True when the row was padded by repeating its first entry.
    pub fn is_padded(&self, q: usize) -> bool {
        self.valid[q] < self.k
    }

    /// The genuine neighbors of query `q`.
    pub fn neighbors(&self, q: usize) -> &[usize] {
        &self.row(q)[..self.valid[q]]
    }
}

/// Up to `k` sources within `radius` of each center, in source order, padded
/// by repeating the first hit. Empty balls fall back to the nearest source.
pub fn ball_query<T: Real>(centers: &Tensor<T>, points: &Tensor<T>, radius: T, k: usize) -> Result<NeighborIndex> {
    let m = check_points("ball_query", centers)?;
    let n = check_points("ball_query", points)?;
    if radius <= T::zero() || k == 0 {
        return Err(Error::Invalid(format!("ball query needs radius > 0 and k >= 1 (k = {k})")));
    }
    let r2 = radius * radius;
    let mut indices = Vec::with_capacity(m * k);
    let mut valid = Vec::with_capacity(m);
    let mut fallback = Vec::with_capacity(m);
    for q in 0..m {
        let c = centers.row(q);
        let start = indices.len();
        for i in 0..n {
            if dist2(points.row(i), c) < r2 {
                indices.push(i);
                if indices.len() - start == k {
                    break;
                }
            }
        }
        let mut found = indices.len() - start;
        let empty = found == 0;
        if empty {
            indices.push(nearest(points, c));
            found = 1;
        }
        let first = indices[start];
        indices.resize(start + k, first);
        valid.push(found);
        fallback.push(empty);
    }
    Ok(NeighborIndex { k, indices, valid, fallback })
}

fn nearest<T: Real>(points: &Tensor<T>, c: &[T]) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for i in 0..points.rows() {
        let d = dist2(points.row(i), c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn by_distance<T: Real>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// The `k` nearest sources of each query, sorted by distance then index.
pub fn knn<T: Real>(queries: &Tensor<T>, points: &Tensor<T>, k: usize) -> Result<NeighborIndex> {
    let m = check_points("knn", queries)?;
    let n = check_points("knn", points)?;
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("knn needs 1 <= k <= N (k = {k}, N = {n})")));
    }
    let mut indices = Vec::with_capacity(m * k);
    let mut scratch = Vec::with_capacity(n);
    for q in 0..m {
        let c = queries.row(q);
        scratch.clear();
        scratch.extend((0..n).map(|i| (dist2(points.row(i), c), i)));
        if k < n {
            scratch.select_nth_unstable_by(k - 1, by_distance);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(by_distance);
        indices.extend(head.iter().map(|&(_, i)| i));
    }
    Ok(NeighborIndex { k, indices, valid: vec![k; m], fallback: vec![false; m] })
}

/// Relative coordinates (neighbor minus center) concatenated with neighbor
/// features, flattened to `[M·K, 3 + C]`. `rel_scale` multiplies the
/// relative coordinates.
pub fn group_features<T: Real>(
    g: &Graph<'_, T>,
    neighbors: &NeighborIndex,
    features: Option<&Var<T>>,
    coords: &Var<T>,
    centers: &Var<T>,
    rel_scale: T,
) -> Result<Var<T>> {
    let (m, k) = (neighbors.queries(), neighbors.k());
    if centers.shape() != [m, 3] {
        return shape_err("group_features", format!("{m} queries but centers {:?}", centers.shape()));
    }
    let grouped_xyz = g.gather_rows(coords, neighbors.flat())?;
    let center_rep = g.reshape(&g.expand(&g.reshape(centers, &[m, 1, 3])?, 1, k)?, &[m * k, 3])?;
    let rel = g.scale(&g.sub(&grouped_xyz, &center_rep)?, rel_scale);
    match features {
        None => Ok(rel),
        Some(f) => {
            if f.shape()[0] != coords.shape()[0] {
                return shape_err(
                    "group_features",
                    format!("{} points but features {:?}", coords.shape()[0], f.shape()),
                );
            }
            let gf = g.gather_rows(f, neighbors.flat())?;
            g.concat(&[&rel, &gf], 1)
        }
    }
}

/// Interpolation stencil: up to three nearest sources per target with
/// weights `∝ 1/(d + 1e-8)` normalized to sum to one.
#[derive(Clone, Debug)]
pub struct Interpolation<T: Real = f32> {
    pub k: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
}

pub fn three_nn_weights<T: Real>(targets: &Tensor<T>, sources: &Tensor<T>) -> Result<Interpolation<T>> {
    let n = check_points("three_nn", sources)?;
    let k = n.min(3);
    let nn = knn(targets, sources, k)?;
    let mut weights = Vec::with_capacity(nn.flat().len());
    for q in 0..nn.queries() {
        let t = targets.row(q);
        let inv: Vec<T> = nn
            .row(q)
            .iter()
            .map(|&i| T::one() / (dist2(sources.row(i), t).sqrt() + T::lit(1e-8)))
            .collect();
        let total: T = inv.iter().copied().sum();
        weights.extend(inv.into_iter().map(|w| w / total));
    }
    Ok(Interpolation { k, indices: nn.indices, weights })
}

/// Inverse-distance interpolation of source features onto targets.
pub fn three_nn_interpolate<T: Real>(targets: &Tensor<T>, sources: &Tensor<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    if features.rank() != 2 || features.rows() != sources.rows() {
        return shape_err("three_nn_interpolate", format!("{} sources, features {:?}", sources.rows(), features.shape()));
    }
    let interp = three_nn_weights(targets, sources)?;
    let c = features.cols();
    let mut out = vec![T::zero(); targets.rows() * c];
    for q in 0..targets.rows() {
        for j in 0..interp.k {
            let (s, w) = (interp.indices[q * interp.k + j], interp.weights[q * interp.k + j]);
            for (o, &v) in out[q * c..(q + 1) * c].iter_mut().zip(features.row(s)) {
                *o += w * v;
            }
        }
    }
    Tensor::from_vec(&[targets.rows(), c], out)
}
