//! Validated domain types shared by every solver.

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spaces::Gaussian2;

/// Tolerance on the total mass of probability vectors and couplings.
pub const MASS_TOL: f64 = 1e-9;
/// Tolerance on matrix symmetry and the zero diagonal.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Slack used by the optional triangle-inequality check.
pub const TRIANGLE_TOL: f64 = 1e-9;
/// Tolerance when a stored distance matrix is checked against its geometry.
pub const GEOMETRY_TOL: f64 = 1e-9;
/// Largest `n1 * m * m * n2` for which [`dense_tensor`] will materialize a plan.
pub const DENSE_TENSOR_BOUND: usize = 1_000_000;

pub(crate) mod matrix_serde {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((flat.len() / ncols.max(1), ncols), flat).map_err(serde::de::Error::custom)
    }
}

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::WeightsNotSimplex {
                reason: "empty weight vector".into(),
            });
        }
        if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::WeightsNotSimplex {
                reason: format!("entry {i} is {v}"),
            });
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(Error::WeightsNotSimplex {
                reason: format!("entries sum to {sum}"),
            });
        }
        Ok(Self(w))
    }

    /// Rescales non-negative masses to unit total.
    pub fn normalized(w: Vec<f64>) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) || w.iter().any(|v| *v < 0.0) {
            return Err(Error::WeightsNotSimplex {
                reason: format!("cannot normalize masses with total {sum}"),
            });
        }
        Self::new(w.into_iter().map(|v| v / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform weights need at least one point");
        Self(vec![1.0 / n as f64; n])
    }

    pub fn dirac(n: usize, at: usize) -> Self {
        assert!(at < n);
        let mut w = vec![0.0; n];
        w[at] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_array(&self) -> Array1<f64> {
        Array1::from(self.0.clone())
    }

    /// Indices carrying positive mass.
    pub fn support(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i] > 0.0).collect()
    }
}

impl<'de> Deserialize<'de> for SimplexWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = Vec::<f64>::deserialize(d)?;
        SimplexWeights::new(w).map_err(serde::de::Error::custom)
    }
}

/// Dense symmetric matrix of pairwise dissimilarities with zero diagonal.
///
/// The triangle inequality is not enforced at construction; k-NN geodesics
/// estimated from noisy features may violate it slightly. Call
/// [`DistanceMatrix::check_triangle`] when a true metric is required.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct DistanceMatrix(#[serde(with = "matrix_serde")] Array2<f64>);

impl DistanceMatrix {
    pub fn new(d: Array2<f64>) -> Result<Self> {
        let (rows, cols) = d.dim();
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        for ((i, j), &v) in d.indexed_iter() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::NegativeEntry { i, j, value: v });
            }
        }
        for i in 0..rows {
            if d[[i, i]].abs() > SYMMETRY_TOL {
                return Err(Error::NonzeroDiagonal { i, value: d[[i, i]] });
            }
            for j in (i + 1)..rows {
                let diff = (d[[i, j]] - d[[j, i]]).abs();
                if diff > SYMMETRY_TOL {
                    return Err(Error::AsymmetricMatrix { i, j, diff });
                }
            }
        }
        Ok(Self(d))
    }

    /// Builds a matrix from a symmetric distance function evaluated once per
    /// unordered pair.
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut d = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let v = f(i, j);
                d[[i, j]] = v;
                d[[j, i]] = v;
            }
        }
        Self::new(d)
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn squared(&self) -> Array2<f64> {
        self.0.mapv(|v| v * v)
    }

    /// Divides every entry by the largest one; returns the matrix and the scale.
    pub fn normalized(&self) -> (Self, f64) {
        let scale = self.max();
        if scale > 0.0 {
            (Self(self.0.mapv(|v| v / scale)), scale)
        } else {
            (self.clone(), 1.0)
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        assert!(factor >= 0.0 && factor.is_finite());
        Self(self.0.mapv(|v| v * factor))
    }

    /// Restriction to the given indices, in order.
    pub fn submatrix(&self, idx: &[usize]) -> Self {
        let n = idx.len();
        let mut d = Array2::zeros((n, n));
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                d[[a, b]] = self.0[[i, j]];
            }
        }
        Self(d)
    }

    /// O(n^3) check of `d_ik <= d_ij + d_jk` with slack [`TRIANGLE_TOL`].
    pub fn check_triangle(&self) -> Result<()> {
        let d = &self.0;
        let n = d.nrows();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let excess = d[[i, k]] - d[[i, j]] - d[[j, k]];
                    if excess > TRIANGLE_TOL {
                        return Err(Error::TriangleInequality { i, j, k, excess });
                    }
                }
            }
        }
        Ok(())
    }
}

/// A finite metric measure space.
#[derive(Debug, Clone, Serialize)]
pub struct MmSpace {
    pub dist: DistanceMatrix,
    pub weights: SimplexWeights,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

impl MmSpace {
    pub fn new(dist: DistanceMatrix, weights: SimplexWeights) -> Result<Self> {
        if dist.len() != weights.len() {
            return Err(Error::SizeMismatch {
                expected: dist.len(),
                found: weights.len(),
                context: "mm-space weights",
            });
        }
        Ok(Self {
            dist,
            weights,
            labels: None,
        })
    }

    pub fn uniform(dist: DistanceMatrix) -> Self {
        let n = dist.len();
        Self {
            dist,
            weights: SimplexWeights::uniform(n),
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::SizeMismatch {
                expected: self.len(),
                found: labels.len(),
                context: "mm-space labels",
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.is_empty()
    }

    /// Restriction to points carrying positive mass, with the kept indices.
    pub fn restrict_to_support(&self) -> (MmSpace, Vec<usize>) {
        let idx = self.weights.support();
        let w: Vec<f64> = idx.iter().map(|&i| self.weights.as_slice()[i]).collect();
        let space = MmSpace {
            dist: self.dist.submatrix(&idx),
            weights: SimplexWeights::normalized(w).expect("support carries all mass"),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        };
        (space, idx)
    }
}

/// Validates a raw matrix and weight vector as an mm-space.
pub fn validate_mm_space(dist: Array2<f64>, weights: Vec<f64>) -> Result<MmSpace> {
    let dist = DistanceMatrix::new(dist)?;
    if dist.len() != weights.len() {
        return Err(Error::SizeMismatch {
            expected: dist.len(),
            found: weights.len(),
            context: "mm-space weights",
        });
    }
    MmSpace::new(dist, SimplexWeights::new(weights)?)
}

/// Geometry of a reference space; determines how `dist` follows from the points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// Points in R^d with the Euclidean metric.
    EuclideanGrid,
    /// Unit 2-sphere; points are chart angles (polar, azimuth).
    SphereGrid,
    /// Flat torus S^1 x S^1 of unit circles; points are the two angles.
    TorusGrid,
    /// Unit circle with arc-length distance; points are angles.
    Circle,
    /// 2d Gaussians with the Bures-Wasserstein metric.
    GaussianW2,
    /// Distances given directly, no point coordinates.
    Custom,
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Geometry::EuclideanGrid => "euclidean_grid",
            Geometry::SphereGrid => "sphere_grid",
            Geometry::TorusGrid => "torus_grid",
            Geometry::Circle => "circle",
            Geometry::GaussianW2 => "gaussian_w2",
            Geometry::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Point descriptors of a reference space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Points {
    Coordinates(#[serde(with = "matrix_serde")] Array2<f64>),
    Gaussians(Vec<Gaussian2>),
    None,
}

impl Points {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> Option<usize> {
        match self {
            Points::Coordinates(c) => Some(c.nrows()),
            Points::Gaussians(g) => Some(g.len()),
            Points::None => None,
        }
    }
}

/// The fixed target space Z.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceSpace {
    pub dist: DistanceMatrix,
    pub points: Points,
    pub geometry: Geometry,
}

impl ReferenceSpace {
    /// Builds a space whose distance matrix is computed from the points.
    pub fn from_points(points: Points, geometry: Geometry) -> Result<Self> {
        let dist = crate::spaces::geometry_distances(&points, geometry)?;
        Ok(Self { dist, points, geometry })
    }

    /// Accepts a stored distance matrix after checking it against the geometry.
    pub fn from_parts(dist: DistanceMatrix, points: Points, geometry: Geometry) -> Result<Self> {
        if geometry != Geometry::Custom {
            let recomputed = crate::spaces::geometry_distances(&points, geometry)?;
            if recomputed.len() != dist.len() {
                return Err(Error::SizeMismatch {
                    expected: recomputed.len(),
                    found: dist.len(),
                    context: "reference space distances",
                });
            }
            for ((i, j), v) in dist.matrix().indexed_iter() {
                if (v - recomputed.matrix()[[i, j]]).abs() > GEOMETRY_TOL {
                    return Err(Error::InvalidParameter(format!(
                        "stored distance ({i}, {j}) = {v} disagrees with {geometry} geometry"
                    )));
                }
            }
        } else if let Some(n) = points.len() {
            if n != dist.len() {
                return Err(Error::SizeMismatch {
                    expected: dist.len(),
                    found: n,
                    context: "reference space points",
                });
            }
        }
        Ok(Self { dist, points, geometry })
    }

    pub fn custom(dist: DistanceMatrix) -> Self {
        Self {
            dist,
            points: Points::None,
            geometry: Geometry::Custom,
        }
    }

    pub fn len(&self) -> usize {
        self.dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.is_empty()
    }

    pub fn diameter(&self) -> f64 {
        self.dist.max()
    }

    /// Same points with all distances multiplied by `factor`; the space
    /// becomes `Custom` since the geometry no longer matches.
    pub fn rescaled(&self, factor: f64) -> Self {
        Self {
            dist: self.dist.scaled(factor),
            points: self.points.clone(),
            geometry: if factor == 1.0 { self.geometry } else { Geometry::Custom },
        }
    }
}

/// A two-marginal transport plan.
#[derive(Debug, Clone, Serialize)]
pub struct Coupling {
    #[serde(with = "matrix_serde")]
    p: Array2<f64>,
    row_marginal: SimplexWeights,
    col_marginal: SimplexWeights,
}

impl Coupling {
    /// Wraps a non-negative matrix of unit mass; marginals are its row and
    /// column sums.
    pub fn from_matrix(p: Array2<f64>) -> Result<Self> {
        for ((i, j), &v) in p.indexed_iter() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::NegativeEntry { i, j, value: v });
            }
        }
        let total = p.sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::WeightsNotSimplex {
                reason: format!("coupling has total mass {total}"),
            });
        }
        let rows = p.sum_axis(Axis(1)).to_vec();
        let cols = p.sum_axis(Axis(0)).to_vec();
        Ok(Self {
            row_marginal: SimplexWeights::normalized(rows)?,
            col_marginal: SimplexWeights::normalized(cols)?,
            p,
        })
    }

    /// Wraps a matrix whose row and column sums must match the given
    /// marginals within `tol` (L-infinity).
    pub fn with_marginals(
        p: Array2<f64>,
        row_marginal: SimplexWeights,
        col_marginal: SimplexWeights,
        tol: f64,
    ) -> Result<Self> {
        if p.nrows() != row_marginal.len() {
            return Err(Error::SizeMismatch {
                expected: row_marginal.len(),
                found: p.nrows(),
                context: "coupling rows",
            });
        }
        if p.ncols() != col_marginal.len() {
            return Err(Error::SizeMismatch {
                expected: col_marginal.len(),
                found: p.ncols(),
                context: "coupling columns",
            });
        }
        let c = Self::from_matrix(p)?;
        let rv = c.row_violation_against(&row_marginal);
        let cv = c.col_violation_against(&col_marginal);
        if rv > tol || cv > tol {
            return Err(Error::MarginalMismatch {
                violation: rv.max(cv),
                context: "coupling and its prescribed marginals",
            });
        }
        Ok(Self {
            p: c.p,
            row_marginal,
            col_marginal,
        })
    }

    /// Solver output whose sums may deviate from the declared marginals by
    /// the solver tolerance; [`Coupling::marginal_violation`] reports by how much.
    pub(crate) fn from_solver(p: Array2<f64>, row_marginal: SimplexWeights, col_marginal: SimplexWeights) -> Self {
        debug_assert_eq!(p.dim(), (row_marginal.len(), col_marginal.len()));
        Self {
            p,
            row_marginal,
            col_marginal,
        }
    }

    pub fn product(a: &SimplexWeights, b: &SimplexWeights) -> Self {
        let p = Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a.as_slice()[i] * b.as_slice()[j]);
        Self {
            p,
            row_marginal: a.clone(),
            col_marginal: b.clone(),
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.p
    }

    pub fn row_marginal(&self) -> &SimplexWeights {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &SimplexWeights {
        &self.col_marginal
    }

    pub fn dim(&self) -> (usize, usize) {
        self.p.dim()
    }

    pub fn transpose(&self) -> Self {
        Self {
            p: self.p.t().to_owned(),
            row_marginal: self.col_marginal.clone(),
            col_marginal: self.row_marginal.clone(),
        }
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.p.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.p.sum_axis(Axis(0))
    }

    fn row_violation_against(&self, w: &SimplexWeights) -> f64 {
        self.row_sums()
            .iter()
            .zip(w.as_slice())
            .map(|(s, t)| (s - t).abs())
            .fold(0.0, f64::max)
    }

    fn col_violation_against(&self, w: &SimplexWeights) -> f64 {
        self.col_sums()
            .iter()
            .zip(w.as_slice())
            .map(|(s, t)| (s - t).abs())
            .fold(0.0, f64::max)
    }

    /// L-infinity deviation of the row and column sums from the declared marginals.
    pub fn marginal_violation(&self) -> f64 {
        self.row_violation_against(&self.row_marginal)
            .max(self.col_violation_against(&self.col_marginal))
    }

    /// `<p, cost>`.
    pub fn cost(&self, cost: &Array2<f64>) -> f64 {
        crate::numeric::frobenius(self.p.view(), cost.view())
    }
}

/// Factored 4-plan on X1 x Z1 x Z2 x X2.
///
/// `alpha(i, j, k, l) = u1(i) k1(i, j) k2(j, k) k3(k, l) u2(l)`, stored in log
/// form because Gibbs kernels at small epsilon underflow. Scalings may be
/// `-inf` (zero) on points that carry no mass; every kernel entry is finite.
#[derive(Debug, Clone)]
pub struct ChainPlan {
    pub(crate) log_k1: Array2<f64>,
    pub(crate) log_k2: Array2<f64>,
    pub(crate) log_k3: Array2<f64>,
    pub(crate) log_u1: Array1<f64>,
    pub(crate) log_u2: Array1<f64>,
    pub(crate) epsilon: f64,
}

impl ChainPlan {
    pub fn from_log_parts(
        log_k1: Array2<f64>,
        log_k2: Array2<f64>,
        log_k3: Array2<f64>,
        log_u1: Array1<f64>,
        log_u2: Array1<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        let (n1, m) = log_k1.dim();
        let n2 = log_k3.ncols();
        if log_k2.dim() != (m, m) {
            return Err(Error::SizeMismatch {
                expected: m,
                found: log_k2.nrows(),
                context: "chain kernel Z1 x Z2",
            });
        }
        if log_k3.nrows() != m {
            return Err(Error::SizeMismatch {
                expected: m,
                found: log_k3.nrows(),
                context: "chain kernel Z2 x X2",
            });
        }
        if log_u1.len() != n1 || log_u2.len() != n2 {
            return Err(Error::SizeMismatch {
                expected: n1,
                found: log_u1.len(),
                context: "chain scalings",
            });
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("epsilon = {epsilon}")));
        }
        for k in [&log_k1, &log_k2, &log_k3] {
            if k.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalOverflow("chain kernel"));
            }
        }
        for u in [&log_u1, &log_u2] {
            if u.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::NumericalOverflow("chain scaling"));
            }
        }
        Ok(Self {
            log_k1,
            log_k2,
            log_k3,
            log_u1,
            log_u2,
            epsilon,
        })
    }

    /// Builds a plan from kernels and scalings given in the linear domain.
    pub fn from_kernels(
        k1: &Array2<f64>,
        k2: &Array2<f64>,
        k3: &Array2<f64>,
        u1: &Array1<f64>,
        u2: &Array1<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        let positive = |x: &f64| *x > 0.0 && x.is_finite();
        if !(k1.iter().all(positive) && k2.iter().all(positive) && k3.iter().all(positive)) {
            return Err(Error::InvalidParameter(
                "chain kernels must be strictly positive".into(),
            ));
        }
        if !(u1.iter().all(positive) && u2.iter().all(positive)) {
            return Err(Error::InvalidParameter(
                "chain scalings must be strictly positive".into(),
            ));
        }
        Self::from_log_parts(
            k1.mapv(f64::ln),
            k2.mapv(f64::ln),
            k3.mapv(f64::ln),
            u1.mapv(f64::ln),
            u2.mapv(f64::ln),
            epsilon,
        )
    }

    /// `(n1, m, n2)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.log_k1.nrows(), self.log_k1.ncols(), self.log_k3.ncols())
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn log_kernels(&self) -> (&Array2<f64>, &Array2<f64>, &Array2<f64>) {
        (&self.log_k1, &self.log_k2, &self.log_k3)
    }

    pub fn log_scalings(&self) -> (&Array1<f64>, &Array1<f64>) {
        (&self.log_u1, &self.log_u2)
    }
}

/// Materializes the 4-tensor of a chain plan (test oracle; bounded size).
pub fn dense_tensor(plan: &ChainPlan) -> Result<Array4<f64>> {
    let (n1, m, n2) = plan.dims();
    let size = n1.saturating_mul(m).saturating_mul(m).saturating_mul(n2);
    if size > DENSE_TENSOR_BOUND {
        return Err(Error::SizeBoundExceeded {
            size,
            bound: DENSE_TENSOR_BOUND,
            context: "dense 4-plan",
        });
    }
    Ok(Array4::from_shape_fn((n1, m, m, n2), |(i, j, k, l)| {
        (plan.log_u1[i] + plan.log_k1[[i, j]] + plan.log_k2[[j, k]] + plan.log_k3[[k, l]] + plan.log_u2[l]).exp()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn smallest_symmetric_space_is_valid() {
        let s = validate_mm_space(array![[0.0, 1.0], [1.0, 0.0]], vec![0.5, 0.5]).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn weights_not_summing_to_one_are_rejected() {
        let e = validate_mm_space(array![[0.0, 1.0], [1.0, 0.0]], vec![0.7, 0.4]).unwrap_err();
        assert!(matches!(e, Error::WeightsNotSimplex { .. }));
    }

    #[test]
    fn asymmetric_matrix_is_rejected() {
        let e = validate_mm_space(array![[0.0, 1.0], [2.0, 0.0]], vec![0.5, 0.5]).unwrap_err();
        assert!(matches!(e, Error::AsymmetricMatrix { i: 0, j: 1, .. }));
    }

    #[test]
    fn negative_and_diagonal_violations() {
        let e = DistanceMatrix::new(array![[0.0, -1.0], [-1.0, 0.0]]).unwrap_err();
        assert!(matches!(e, Error::NegativeEntry { .. }));
        let e = DistanceMatrix::new(array![[0.5, 1.0], [1.0, 0.0]]).unwrap_err();
        assert!(matches!(e, Error::NonzeroDiagonal { i: 0, .. }));
        let e = DistanceMatrix::new(Array2::zeros((2, 3))).unwrap_err();
        assert!(matches!(e, Error::NotSquare { .. }));
    }

    #[test]
    fn triangle_check_is_opt_in() {
        // 0-1 and 1-2 are close but 0-2 is far: not a metric, still accepted.
        let d = DistanceMatrix::new(array![[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]]).unwrap();
        assert!(matches!(d.check_triangle(), Err(Error::TriangleInequality { .. })));
    }

    #[test]
    fn coupling_marginal_checks() {
        let a = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let b = SimplexWeights::new(vec![0.25, 0.75]).unwrap();
        let c = Coupling::product(&a, &b);
        assert!(c.marginal_violation() < 1e-15);
        let ok = Coupling::with_marginals(c.matrix().clone(), a.clone(), b.clone(), 1e-9);
        assert!(ok.is_ok());
        let e = Coupling::with_marginals(c.matrix().clone(), b.clone(), a.clone(), 1e-9);
        assert!(matches!(e, Err(Error::MarginalMismatch { .. })));
        let e = Coupling::from_matrix(array![[0.5, 0.0], [0.0, 0.0]]);
        assert!(e.is_err());
    }

    #[test]
    fn dense_tensor_of_all_ones_is_constant() {
        let ones2 = Array2::ones((2, 2));
        let ones1 = Array1::ones(2);
        let plan = ChainPlan::from_kernels(&ones2, &ones2, &ones2, &ones1, &ones1, 1.0).unwrap();
        let t = dense_tensor(&plan).unwrap();
        assert_eq!(t.len(), 16);
        assert!(t.iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn dense_tensor_refuses_large_plans() {
        let n = 200;
        let plan = ChainPlan::from_log_parts(
            Array2::zeros((n, n)),
            Array2::zeros((n, n)),
            Array2::zeros((n, n)),
            Array1::zeros(n),
            Array1::zeros(n),
            1.0,
        )
        .unwrap();
        assert!(matches!(dense_tensor(&plan), Err(Error::SizeBoundExceeded { .. })));
    }

    #[test]
    fn chain_plan_rejects_non_positive_kernels() {
        let mut k = Array2::ones((2, 2));
        k[[0, 1]] = 0.0;
        let ones = Array2::ones((2, 2));
        let u = Array1::ones(2);
        assert!(ChainPlan::from_kernels(&k, &ones, &ones, &u, &u, 1.0).is_err());
    }

    #[test]
    fn simplex_weights_serde_validates() {
        let w: SimplexWeights = serde_json::from_str("[0.25, 0.75]").unwrap();
        assert_eq!(w.len(), 2);
        assert!(serde_json::from_str::<SimplexWeights>("[0.5, 0.75]").is_err());
    }
}
