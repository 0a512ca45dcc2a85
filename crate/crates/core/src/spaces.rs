//! Construction of input mm-spaces and reference spaces.
//!
//! Reference grids (Euclidean, sphere, torus, circle, Gaussians) always
//! recompute their distance matrices from the point descriptors. Input
//! spaces come from graphs: triangle meshes or k-NN feature graphs, with
//! geodesics approximated by all-pairs Dijkstra.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DistanceMatrix, Geometry, Points, ReferenceSpace, SimplexWeights};

/// Arc-length distance between two angles on the unit circle.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Great-circle distance between chart points (polar, azimuth) on the unit sphere.
///
/// Evaluated as `atan2(|p x q|, p . q)`, which equals the arccosine of the
/// clamped dot product but keeps full precision for nearby points.
pub fn sphere_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let p = sphere_embed(a);
    let q = sphere_embed(b);
    let dot = p[0] * q[0] + p[1] * q[1] + p[2] * q[2];
    let cross = [
        p[1] * q[2] - p[2] * q[1],
        p[2] * q[0] - p[0] * q[2],
        p[0] * q[1] - p[1] * q[0],
    ];
    let cn = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    cn.atan2(dot.clamp(-1.0, 1.0))
}

fn sphere_embed((theta, phi): (f64, f64)) -> [f64; 3] {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

/// Flat-torus distance between angle pairs on S^1 x S^1.
pub fn torus_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let d1 = circular_distance(a.0, b.0);
    let d2 = circular_distance(a.1, b.1);
    (d1 * d1 + d2 * d2).sqrt()
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn coords_of(points: &Points, geometry: Geometry, width: Option<usize>) -> Result<&Array2<f64>> {
    match points {
        Points::Coordinates(c) => {
            if let Some(w) = width {
                if c.ncols() != w {
                    return Err(Error::SizeMismatch {
                        expected: w,
                        found: c.ncols(),
                        context: "point coordinate width",
                    });
                }
            }
            Ok(c)
        }
        _ => Err(Error::UnsupportedGeometry(format!(
            "{geometry} requires coordinate points"
        ))),
    }
}

/// Distance matrix implied by a geometry and its point descriptors.
pub fn geometry_distances(points: &Points, geometry: Geometry) -> Result<DistanceMatrix> {
    match geometry {
        Geometry::EuclideanGrid => {
            let c = coords_of(points, geometry, None)?;
            DistanceMatrix::from_fn(c.nrows(), |i, j| euclidean(c.row(i), c.row(j)))
        }
        Geometry::SphereGrid => {
            let c = coords_of(points, geometry, Some(2))?;
            DistanceMatrix::from_fn(c.nrows(), |i, j| {
                sphere_distance((c[[i, 0]], c[[i, 1]]), (c[[j, 0]], c[[j, 1]]))
            })
        }
        Geometry::TorusGrid => {
            let c = coords_of(points, geometry, Some(2))?;
            DistanceMatrix::from_fn(c.nrows(), |i, j| {
                torus_distance((c[[i, 0]], c[[i, 1]]), (c[[j, 0]], c[[j, 1]]))
            })
        }
        Geometry::Circle => {
            let c = coords_of(points, geometry, Some(1))?;
            DistanceMatrix::from_fn(c.nrows(), |i, j| circular_distance(c[[i, 0]], c[[j, 0]]))
        }
        Geometry::GaussianW2 => match points {
            Points::Gaussians(g) => gaussian_distances(g),
            _ => Err(Error::UnsupportedGeometry(
                "gaussian_w2 requires Gaussian points".into(),
            )),
        },
        Geometry::Custom => Err(Error::UnsupportedGeometry(
            "custom spaces carry their distances explicitly".into(),
        )),
    }
}

fn check_resolution(resolution: &[usize]) -> Result<()> {
    if resolution.is_empty() {
        return Err(Error::DegenerateExtent("no axes given".into()));
    }
    if let Some((axis, r)) = resolution.iter().enumerate().find(|(_, r)| **r < 2) {
        return Err(Error::DegenerateExtent(format!(
            "axis {axis} has resolution {r} (need at least 2)"
        )));
    }
    Ok(())
}

/// Equispaced grid on a box `[lo, hi]` per axis, Euclidean metric.
///
/// Points are ordered with the last axis varying fastest.
pub fn euclidean_grid(extent: &[(f64, f64)], resolution: &[usize]) -> Result<ReferenceSpace> {
    if extent.len() != resolution.len() {
        return Err(Error::SizeMismatch {
            expected: extent.len(),
            found: resolution.len(),
            context: "grid extent vs resolution axes",
        });
    }
    check_resolution(resolution)?;
    if let Some((axis, (lo, hi))) = extent
        .iter()
        .enumerate()
        .find(|(_, (lo, hi))| !(hi > lo) || !lo.is_finite() || !hi.is_finite())
    {
        return Err(Error::DegenerateExtent(format!("axis {axis} has extent [{lo}, {hi}]")));
    }
    let axes: Vec<Vec<f64>> = extent
        .iter()
        .zip(resolution)
        .map(|(&(lo, hi), &r)| (0..r).map(|i| lo + (hi - lo) * i as f64 / (r - 1) as f64).collect())
        .collect();
    let coords = product_grid(&axes);
    ReferenceSpace::from_points(Points::Coordinates(coords), Geometry::EuclideanGrid)
}

fn product_grid(axes: &[Vec<f64>]) -> Array2<f64> {
    let total: usize = axes.iter().map(Vec::len).product();
    let dim = axes.len();
    let mut coords = Array2::zeros((total, dim));
    for p in 0..total {
        let mut rem = p;
        for a in (0..dim).rev() {
            let len = axes[a].len();
            coords[[p, a]] = axes[a][rem % len];
            rem /= len;
        }
    }
    coords
}

/// Grid on the canonical (polar, azimuth) parametrization of the unit sphere.
///
/// Polar angles sit at cell centres `pi (i + 1/2) / n_theta`, so the poles are
/// not duplicated across azimuths; azimuths are `2 pi j / n_phi`.
pub fn sphere_grid(n_theta: usize, n_phi: usize) -> Result<ReferenceSpace> {
    check_resolution(&[n_theta, n_phi])?;
    let theta: Vec<f64> = (0..n_theta).map(|i| PI * (i as f64 + 0.5) / n_theta as f64).collect();
    let phi: Vec<f64> = (0..n_phi).map(|j| 2.0 * PI * j as f64 / n_phi as f64).collect();
    let coords = product_grid(&[theta, phi]);
    ReferenceSpace::from_points(Points::Coordinates(coords), Geometry::SphereGrid)
}

/// Grid on the flat torus of two unit circles.
pub fn torus_grid(n_a: usize, n_b: usize) -> Result<ReferenceSpace> {
    check_resolution(&[n_a, n_b])?;
    let a: Vec<f64> = (0..n_a).map(|i| 2.0 * PI * i as f64 / n_a as f64).collect();
    let b: Vec<f64> = (0..n_b).map(|i| 2.0 * PI * i as f64 / n_b as f64).collect();
    let coords = product_grid(&[a, b]);
    ReferenceSpace::from_points(Points::Coordinates(coords), Geometry::TorusGrid)
}

/// Equiangular bins on the unit circle with arc-length distance.
pub fn circle_space(bins: usize) -> Result<ReferenceSpace> {
    check_resolution(&[bins])?;
    let coords = Array2::from_shape_fn((bins, 1), |(i, _)| 2.0 * PI * i as f64 / bins as f64);
    ReferenceSpace::from_points(Points::Coordinates(coords), Geometry::Circle)
}

/// Weights of a discretized von Mises density `exp(kappa cos(theta - location))`.
pub fn von_mises_weights(bins: usize, kappa: f64, location: f64) -> Result<SimplexWeights> {
    check_resolution(&[bins])?;
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!("kappa = {kappa}")));
    }
    // Shifted by -kappa so large concentrations do not overflow.
    let w: Vec<f64> = (0..bins)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / bins as f64;
            (kappa * ((theta - location).cos() - 1.0)).exp()
        })
        .collect();
    SimplexWeights::normalized(w)
}

/// Undirected weighted graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl Graph {
    pub fn new(n: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, w) in &edges {
            for v in [i, j] {
                if v >= n {
                    return Err(Error::IndexOutOfRange {
                        index: v,
                        len: n,
                        context: "graph edge endpoint",
                    });
                }
            }
            if i == j {
                return Err(Error::InvalidParameter(format!("self-loop at node {i}")));
            }
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::NegativeEntry { i, j, value: w });
            }
        }
        Ok(Self { n, edges })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j, w) in &self.edges {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        adj
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        let mut comps = Vec::new();
        for s in 0..self.n {
            if seen[s] {
                continue;
            }
            seen[s] = true;
            let mut stack = vec![s];
            let mut comp = Vec::new();
            while let Some(v) = stack.pop() {
                comp.push(v);
                for &(w, _) in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }
}

#[derive(Copy, Clone, PartialEq)]
struct HeapItem {
    dist: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra_from(adj: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapItem {
        dist: 0.0,
        node: source,
    });
    while let Some(HeapItem { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, w) in &adj[node] {
            let nd = d + w;
            if nd < dist[next] {
                dist[next] = nd;
                heap.push(HeapItem { dist: nd, node: next });
            }
        }
    }
    dist
}

/// All-pairs shortest path distances, one Dijkstra run per source node.
pub fn dijkstra_all_pairs(g: &Graph) -> Result<DistanceMatrix> {
    let comps = g.components();
    if comps.len() > 1 {
        return Err(Error::DisconnectedGraph { components: comps });
    }
    let adj = g.adjacency();
    let rows: Vec<Vec<f64>> = (0..g.n).into_par_iter().map(|s| dijkstra_from(&adj, s)).collect();
    let n = g.n;
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            // Path sums accumulated from opposite ends can differ in the last bit.
            let v = rows[i][j].min(rows[j][i]);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    DistanceMatrix::new(d)
}

/// Dissimilarity used to build k-NN graphs from feature rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMetric {
    Euclidean,
    /// One minus the Pearson correlation of two feature rows.
    #[default]
    Correlation,
}

/// Pairwise feature dissimilarities (rows are samples).
pub fn feature_distances(features: ArrayView2<f64>, metric: FeatureMetric) -> Result<Array2<f64>> {
    let n = features.nrows();
    match metric {
        FeatureMetric::Euclidean => Ok(Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                0.0
            } else {
                euclidean(features.row(i), features.row(j))
            }
        })),
        FeatureMetric::Correlation => {
            let d = features.ncols() as f64;
            let mut centred = features.to_owned();
            for (i, mut row) in centred.rows_mut().into_iter().enumerate() {
                let mean = row.sum() / d;
                row.mapv_inplace(|v| v - mean);
                let norm = row.dot(&row).sqrt();
                if !(norm > 0.0) {
                    return Err(Error::ConstantFeatureRow(i));
                }
                row.mapv_inplace(|v| v / norm);
            }
            let corr = centred.dot(&centred.t());
            Ok(Array2::from_shape_fn((n, n), |(i, j)| {
                if i == j {
                    0.0
                } else {
                    (1.0 - corr[[i.min(j), i.max(j)]]).max(0.0)
                }
            }))
        }
    }
}

/// Symmetrized k-nearest-neighbour graph: an edge joins `i` and `j` when
/// either selects the other; weights are the metric dissimilarity.
pub fn knn_graph(features: ArrayView2<f64>, k: usize, metric: FeatureMetric) -> Result<Graph> {
    let n = features.nrows();
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    let d = feature_distances(features, metric)?;
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| d[[i, a]].total_cmp(&d[[i, b]]).then(a.cmp(&b)));
        for &j in &others[..k] {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    let edges = edges.into_iter().map(|(i, j)| (i, j, d[[i, j]])).collect();
    Graph::new(n, edges)
}

/// Edge graph of a triangle mesh weighted by Euclidean edge length.
pub fn mesh_to_graph(vertices: ArrayView2<f64>, faces: &[[usize; 3]]) -> Result<Graph> {
    let n = vertices.nrows();
    let mut edges = BTreeSet::new();
    for face in faces {
        for &v in face {
            if v >= n {
                return Err(Error::IndexOutOfRange {
                    index: v,
                    len: n,
                    context: "mesh face vertex",
                });
            }
        }
        for (a, b) in [(face[0], face[1]), (face[1], face[2]), (face[2], face[0])] {
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
    }
    let edges = edges
        .into_iter()
        .map(|(i, j)| (i, j, euclidean(vertices.row(i), vertices.row(j))))
        .collect();
    Graph::new(n, edges)
}

/// A 2d Gaussian with symmetric positive-definite covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Gaussian2 {
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
}

impl Gaussian2 {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        if (cov[0][1] - cov[1][0]).abs() > 1e-12 {
            return Err(Error::NotPositiveDefinite(format!(
                "covariance is not symmetric: {cov:?}"
            )));
        }
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let tr = cov[0][0] + cov[1][1];
        // Both eigenvalues of a symmetric 2x2 are positive iff det > 0 and tr > 0.
        if !(det > 0.0 && tr > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "covariance {cov:?} has determinant {det}"
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter(format!("mean {mean:?}")));
        }
        Ok(Self { mean, cov })
    }

    pub fn mean(&self) -> [f64; 2] {
        self.mean
    }

    pub fn cov(&self) -> [[f64; 2]; 2] {
        self.cov
    }
}

impl<'de> Deserialize<'de> for Gaussian2 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            mean: [f64; 2],
            cov: [[f64; 2]; 2],
        }
        let raw = Raw::deserialize(d)?;
        Gaussian2::new(raw.mean, raw.cov).map_err(serde::de::Error::custom)
    }
}

type Mat2 = [[f64; 2]; 2];

fn mat2_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// Square root of a 2x2 SPD matrix: with `s = sqrt(det)` and
/// `t = sqrt(tr + 2s)`, `sqrt(A) = (A + s I) / t`.
pub fn spd_sqrt2(a: &Mat2) -> Mat2 {
    let det = (a[0][0] * a[1][1] - a[0][1] * a[1][0]).max(0.0);
    let s = det.sqrt();
    let t = (a[0][0] + a[1][1] + 2.0 * s).sqrt();
    [[(a[0][0] + s) / t, a[0][1] / t], [a[1][0] / t, (a[1][1] + s) / t]]
}

/// Wasserstein-2 distance between two 2d Gaussians (Bures-Wasserstein).
pub fn bures_wasserstein(a: &Gaussian2, b: &Gaussian2) -> f64 {
    let dm = [a.mean[0] - b.mean[0], a.mean[1] - b.mean[1]];
    let mean_term = dm[0] * dm[0] + dm[1] * dm[1];
    let ra = spd_sqrt2(&a.cov);
    let inner = mat2_mul(&mat2_mul(&ra, &b.cov), &ra);
    // trace of the square root of an SPD 2x2 is sqrt(tr + 2 sqrt(det))
    let inner_det = (inner[0][0] * inner[1][1] - inner[0][1] * inner[1][0]).max(0.0);
    let tr_sqrt = (inner[0][0] + inner[1][1] + 2.0 * inner_det.sqrt()).sqrt();
    let cov_term = a.cov[0][0] + a.cov[1][1] + b.cov[0][0] + b.cov[1][1] - 2.0 * tr_sqrt;
    (mean_term + cov_term).max(0.0).sqrt()
}

fn gaussian_distances(g: &[Gaussian2]) -> Result<DistanceMatrix> {
    let n = g.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| bures_wasserstein(&g[i], &g[j])).collect())
        .collect();
    let mut d = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    DistanceMatrix::new(d)
}

/// Covariance template and mean grid for a Gaussian reference space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianGridSpec {
    pub mean_extent: [(f64, f64); 2],
    pub mean_resolution: [usize; 2],
    /// Overall variance scale `r^2`.
    pub variance_scale: f64,
    /// Choices for each diagonal entry before scaling.
    pub sigma_sq_choices: Vec<f64>,
    /// Choices for the off-diagonal entry before scaling.
    pub offdiag_choices: Vec<f64>,
}

/// Product grid of means and covariances `r^2 [[s1, s12], [s12, s2]]`, with
/// Bures-Wasserstein distances.
///
/// An axis with resolution 1 places its single mean at the centre of its extent.
pub fn gaussian_grid(spec: &GaussianGridSpec) -> Result<ReferenceSpace> {
    let mut axes = Vec::with_capacity(2);
    for (axis, (&(lo, hi), &r)) in spec.mean_extent.iter().zip(spec.mean_resolution.iter()).enumerate() {
        if r == 0 || hi < lo || (r > 1 && hi <= lo) {
            return Err(Error::DegenerateExtent(format!(
                "mean axis {axis}: extent [{lo}, {hi}] with resolution {r}"
            )));
        }
        axes.push(if r == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..r).map(|i| lo + (hi - lo) * i as f64 / (r - 1) as f64).collect()
        });
    }
    if !(spec.variance_scale > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "variance scale {}",
            spec.variance_scale
        )));
    }
    let mut covs = Vec::new();
    for &s1 in &spec.sigma_sq_choices {
        for &s2 in &spec.sigma_sq_choices {
            for &s12 in &spec.offdiag_choices {
                let r2 = spec.variance_scale;
                covs.push([[r2 * s1, r2 * s12], [r2 * s12, r2 * s2]]);
            }
        }
    }
    if covs.is_empty() {
        return Err(Error::DegenerateExtent("no covariance choices".into()));
    }
    let means = product_grid(&axes);
    let mut gaussians = Vec::with_capacity(means.nrows() * covs.len());
    for row in means.rows() {
        for cov in &covs {
            gaussians.push(Gaussian2::new([row[0], row[1]], *cov)?);
        }
    }
    ReferenceSpace::from_points(Points::Gaussians(gaussians), Geometry::GaussianW2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn unit_square_corners() {
        let z = euclidean_grid(&[(0.0, 1.0), (0.0, 1.0)], &[2, 2]).unwrap();
        assert_eq!(z.len(), 4);
        assert!((z.diameter() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn paper_sized_euclidean_grid() {
        let z = euclidean_grid(&[(0.0, 1.3), (0.0, 1.3)], &[50, 50]).unwrap();
        assert_eq!(z.len(), 2500);
    }

    #[test]
    fn single_point_axis_is_degenerate() {
        assert!(matches!(
            euclidean_grid(&[(0.0, 1.0), (0.0, 1.0)], &[1, 2]),
            Err(Error::DegenerateExtent(_))
        ));
        assert!(matches!(sphere_grid(1, 4), Err(Error::DegenerateExtent(_))));
        assert!(matches!(torus_grid(3, 1), Err(Error::DegenerateExtent(_))));
        assert!(matches!(circle_space(1), Err(Error::DegenerateExtent(_))));
    }

    #[test]
    fn sphere_distances() {
        let north = (0.0, 0.0);
        let south = (PI, 0.0);
        let equator = (PI / 2.0, 1.3);
        assert!((sphere_distance(north, south) - PI).abs() < 1e-15);
        assert!((sphere_distance(north, equator) - PI / 2.0).abs() < 1e-15);
        assert_eq!(sphere_distance(equator, equator), 0.0);
        let a = (PI / 3.0, 0.2);
        let b = (PI - PI / 3.0, 0.2 + PI);
        assert!((sphere_distance(a, b) - PI).abs() < 1e-12);
    }

    #[test]
    fn torus_distances() {
        assert_eq!(torus_distance((0.3, 1.0), (0.3, 1.0)), 0.0);
        assert!((torus_distance((0.0, 0.5), (PI, 0.5)) - PI).abs() < 1e-15);
        // quarter turn on both factors: sqrt((pi/2)^2 + (pi/2)^2)
        let expected = ((PI / 2.0).powi(2) * 2.0).sqrt();
        assert!((torus_distance((0.0, 0.0), (PI / 2.0, PI / 2.0)) - expected).abs() < 1e-15);
        assert!((expected - (PI * PI / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn circle_distances() {
        let z = circle_space(4).unwrap();
        let d = z.dist.matrix();
        assert!((d[[0, 1]] - PI / 2.0).abs() < 1e-15);
        assert!((d[[0, 2]] - PI).abs() < 1e-15);
        assert!((d[[0, 3]] - PI / 2.0).abs() < 1e-15);
        assert_eq!(circle_space(360).unwrap().len(), 360);
    }

    #[test]
    fn grid_geometries_are_metrics() {
        for z in [
            sphere_grid(5, 6).unwrap(),
            torus_grid(5, 4).unwrap(),
            circle_space(17).unwrap(),
            euclidean_grid(&[(0.0, 1.0), (-1.0, 2.0)], &[4, 3]).unwrap(),
        ] {
            z.dist.check_triangle().unwrap();
        }
    }

    #[test]
    fn stored_distances_are_checked_against_geometry() {
        let z = circle_space(6).unwrap();
        let ok = ReferenceSpace::from_parts(z.dist.clone(), z.points.clone(), Geometry::Circle);
        assert!(ok.is_ok());
        let bad = ReferenceSpace::from_parts(z.dist.scaled(2.0), z.points.clone(), Geometry::Circle);
        assert!(bad.is_err());
    }

    #[test]
    fn dijkstra_path_and_shortcut() {
        let g = Graph::new(3, vec![(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let d = dijkstra_all_pairs(&g).unwrap();
        assert_eq!(d.matrix()[[0, 2]], 2.0);

        let g = Graph::new(3, vec![(0, 1, 1.0), (1, 2, 1.0), (0, 2, 3.0)]).unwrap();
        let d = dijkstra_all_pairs(&g).unwrap();
        assert_eq!(d.matrix()[[0, 2]], 2.0);
    }

    /// Shortest path by exhaustive enumeration of simple paths.
    fn brute_force_shortest(n: usize, edges: &[(usize, usize, f64)], s: usize, t: usize) -> f64 {
        fn walk(v: usize, t: usize, acc: f64, visited: &mut Vec<bool>, adj: &[Vec<(usize, f64)>], best: &mut f64) {
            if v == t {
                *best = best.min(acc);
                return;
            }
            for &(w, c) in &adj[v] {
                if !visited[w] {
                    visited[w] = true;
                    walk(w, t, acc + c, visited, adj, best);
                    visited[w] = false;
                }
            }
        }
        let mut adj = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
        let mut visited = vec![false; n];
        visited[s] = true;
        let mut best = f64::INFINITY;
        walk(s, t, 0.0, &mut visited, &adj, &mut best);
        best
    }

    #[test]
    fn four_cycle_matches_path_enumeration() {
        let edges = vec![(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 0, 1.0)];
        let g = Graph::new(4, edges.clone()).unwrap();
        let d = dijkstra_all_pairs(&g).unwrap();
        for s in 0..4 {
            for t in 0..4 {
                let expected = if s == t {
                    0.0
                } else {
                    brute_force_shortest(4, &edges, s, t)
                };
                assert_eq!(d.matrix()[[s, t]], expected);
            }
        }
        assert_eq!(d.matrix()[[0, 2]], 2.0);
    }

    #[test]
    fn disconnected_graph_reports_components() {
        let g = Graph::new(4, vec![(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        match dijkstra_all_pairs(&g) {
            Err(Error::DisconnectedGraph { components }) => {
                assert_eq!(components, vec![vec![0, 1], vec![2, 3]]);
            }
            other => panic!("expected DisconnectedGraph, got {other:?}"),
        }
    }

    #[test]
    fn knn_on_collinear_points() {
        let f = array![[0.0], [1.0], [10.0]];
        let g = knn_graph(f.view(), 1, FeatureMetric::Euclidean).unwrap();
        let pairs: Vec<(usize, usize)> = g.edges().iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 2)]);
        assert_eq!(g.edges()[1].2, 9.0);
    }

    #[test]
    fn knn_correlation_rules() {
        let f = array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [3.0, 1.0, 2.0]];
        let d = feature_distances(f.view(), FeatureMetric::Correlation).unwrap();
        assert!(d[[0, 1]].abs() < 1e-12);
        let constant = array![[1.0, 1.0, 1.0], [1.0, 2.0, 3.0], [0.0, 2.0, 1.0]];
        assert!(matches!(
            knn_graph(constant.view(), 1, FeatureMetric::Correlation),
            Err(Error::ConstantFeatureRow(0))
        ));
        assert!(matches!(
            knn_graph(f.view(), 3, FeatureMetric::Euclidean),
            Err(Error::KTooLarge { k: 3, n: 3 })
        ));
    }

    #[test]
    fn mesh_edges() {
        let v = array![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.5, 3f64.sqrt() / 2.0, 0.0],
            [0.5, -(3f64.sqrt()) / 2.0, 0.0]
        ];
        let g = mesh_to_graph(v.view(), &[[0, 1, 2]]).unwrap();
        assert_eq!(g.edges().len(), 3);
        assert!(g.edges().iter().all(|e| (e.2 - 1.0).abs() < 1e-15));

        let g = mesh_to_graph(v.view(), &[[0, 1, 2], [1, 0, 3]]).unwrap();
        assert_eq!(g.edges().len(), 5);

        let g = mesh_to_graph(v.view(), &[[0, 0, 1]]).unwrap();
        assert_eq!(g.edges().len(), 1);

        assert!(matches!(
            mesh_to_graph(v.view(), &[[0, 1, 7]]),
            Err(Error::IndexOutOfRange { index: 7, .. })
        ));
    }

    #[test]
    fn bures_wasserstein_closed_forms() {
        let a = Gaussian2::new([0.0, 0.0], [[1.0, 0.2], [0.2, 0.5]]).unwrap();
        assert!(bures_wasserstein(&a, &a) < 1e-7);
        for (x, y) in [(2.0, 3.0), (0.5, 4.0), (1.0, 1.0), (0.01, 7.0)] {
            let ga = Gaussian2::new([0.0, 0.0], [[x, 0.0], [0.0, x]]).unwrap();
            let gb = Gaussian2::new([0.0, 0.0], [[y, 0.0], [0.0, y]]).unwrap();
            let expected = 2f64.sqrt() * (f64::sqrt(x) - f64::sqrt(y)).abs();
            assert!((bures_wasserstein(&ga, &gb) - expected).abs() < 1e-12);
        }
        let c = Gaussian2::new([3.0, 4.0], [[1.0, 0.2], [0.2, 0.5]]).unwrap();
        assert!((bures_wasserstein(&a, &c) - 5.0).abs() < 1e-7);
    }

    #[test]
    fn spd_sqrt_squares_back() {
        let a = [[2.0, 0.3], [0.3, 0.7]];
        let r = spd_sqrt2(&a);
        let back = mat2_mul(&r, &r);
        for i in 0..2 {
            for j in 0..2 {
                assert!((back[i][j] - a[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gaussian_grid_sizes_and_errors() {
        let spec = GaussianGridSpec {
            mean_extent: [(0.0, 1.0), (0.0, 1.0)],
            mean_resolution: [15, 15],
            variance_scale: 0.01,
            sigma_sq_choices: vec![0.8, 1.0],
            offdiag_choices: vec![-0.2, 0.0, 0.2],
        };
        let z = gaussian_grid(&spec).unwrap();
        assert_eq!(z.len(), 2700);

        let single = GaussianGridSpec {
            mean_extent: [(0.0, 0.0), (0.0, 0.0)],
            mean_resolution: [1, 1],
            variance_scale: 1.0,
            sigma_sq_choices: vec![1.0],
            offdiag_choices: vec![0.0],
        };
        let z = gaussian_grid(&single).unwrap();
        assert_eq!(z.len(), 1);
        assert_eq!(z.dist.matrix()[[0, 0]], 0.0);

        let bad = GaussianGridSpec {
            sigma_sq_choices: vec![0.8],
            offdiag_choices: vec![1.0],
            ..single
        };
        assert!(matches!(gaussian_grid(&bad), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn von_mises_cases() {
        let w = von_mises_weights(8, 0.0, 0.3).unwrap();
        assert!(w.as_slice().iter().all(|v| (v - 0.125).abs() < 1e-15));

        let w = von_mises_weights(4, 1.0, 0.0).unwrap();
        let e = 1f64.exp();
        let raw = [e, 1.0, 1.0 / e, 1.0];
        let s: f64 = raw.iter().sum();
        for (got, r) in w.as_slice().iter().zip(raw) {
            assert!((got - r / s).abs() < 1e-15);
        }

        let w = von_mises_weights(36, 500.0, 2.0 * PI * 7.0 / 36.0 + 0.01).unwrap();
        let argmax = (0..36)
            .max_by(|&a, &b| w.as_slice()[a].total_cmp(&w.as_slice()[b]))
            .unwrap();
        assert_eq!(argmax, 7);
        assert!(w.as_slice()[7] > 0.99);
    }

    fn spd() -> impl Strategy<Value = Gaussian2> {
        (-2.0..2.0f64, -2.0..2.0f64, 0.1..3.0f64, 0.1..3.0f64, -0.9..0.9f64).prop_map(|(mx, my, a, b, rho)| {
            let c = rho * (a * b).sqrt();
            Gaussian2::new([mx, my], [[a, c], [c, b]]).unwrap()
        })
    }

    proptest! {
        #[test]
        fn bures_wasserstein_is_symmetric_and_triangular(a in spd(), b in spd(), c in spd()) {
            let ab = bures_wasserstein(&a, &b);
            let ba = bures_wasserstein(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-9);
            let ac = bures_wasserstein(&a, &c);
            let bc = bures_wasserstein(&b, &c);
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn knn_graph_is_undirected(seed in 0u64..500, k in 1usize..4) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = Array2::from_shape_fn((8, 3), |_| rng.random_range(-1.0..1.0));
            let g = knn_graph(f.view(), k, FeatureMetric::Euclidean).unwrap();
            let d = feature_distances(f.view(), FeatureMetric::Euclidean).unwrap();
            // every node selected its k nearest, and edges are stored once
            for &(i, j, w) in g.edges() {
                prop_assert!(i < j);
                prop_assert_eq!(w, d[[i, j]]);
            }
            for i in 0..8 {
                let deg = g.edges().iter().filter(|e| e.0 == i || e.1 == i).count();
                prop_assert!(deg >= k);
            }
        }

        #[test]
        fn dijkstra_reproduces_metric_on_complete_graphs(seed in 0u64..500, n in 2usize..7) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
            let z = ReferenceSpace::from_points(Points::Coordinates(pts), Geometry::EuclideanGrid).unwrap();
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    edges.push((i, j, z.dist.matrix()[[i, j]]));
                }
            }
            let d = dijkstra_all_pairs(&Graph::new(n, edges).unwrap()).unwrap();
            for (a, b) in d.matrix().iter().zip(z.dist.matrix().iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
