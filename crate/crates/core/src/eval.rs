//! Downstream evaluation: barycentric projection into Z, FOSCTTM, k-NN label
//! transfer, and pairwise distance matrices over a corpus.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ew::{solve_ew_lambda, EwConfig};
use crate::gw::{gw_entropic, GwOptions};
use crate::ot::{circular_w2_squared, wasserstein2, W2Method};
use crate::spaces::{circle_space, von_mises_weights};
use crate::types::{Coupling, Geometry, MmSpace, Points, ReferenceSpace, SimplexWeights};

/// Rows whose coupling mass falls below this are excluded from scores.
pub const LOW_MASS_THRESHOLD: f64 = 1e-12;

/// Barycentric projections of the points of a source space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedPoints {
    /// One row per source point, in the coordinates of the reference space.
    #[serde(with = "crate::types::matrix_serde")]
    pub points: Array2<f64>,
    /// Coupling mass of each row.
    pub mass: Vec<f64>,
    /// `false` for rows below [`LOW_MASS_THRESHOLD`].
    pub valid: Vec<bool>,
    /// Period of each coordinate axis, `None` for linear axes.
    pub periods: Vec<Option<f64>>,
}

impl ProjectedPoints {
    /// Points in Euclidean coordinates, all valid with unit mass.
    pub fn euclidean(points: Array2<f64>) -> Self {
        let (n, d) = points.dim();
        Self {
            points,
            mass: vec![1.0; n],
            valid: vec![true; n],
            periods: vec![None; d],
        }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// Distance between row `i` of `self` and row `j` of `other`; periodic
    /// axes use the shorter way around.
    fn distance(&self, i: usize, other: &ProjectedPoints, j: usize) -> f64 {
        self.points
            .row(i)
            .iter()
            .zip(other.points.row(j))
            .zip(&self.periods)
            .map(|((a, b), period)| {
                let mut d = (a - b).abs();
                if let Some(p) = period {
                    d %= p;
                    d = d.min(p - d);
                }
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn axis_periods(geometry: Geometry, dims: usize) -> Result<Vec<Option<f64>>> {
    Ok(match geometry {
        Geometry::EuclideanGrid | Geometry::Custom => vec![None; dims],
        Geometry::Circle => vec![Some(TAU); dims],
        Geometry::TorusGrid => vec![Some(TAU); dims],
        // polar angle is linear, azimuth wraps
        Geometry::SphereGrid => vec![None, Some(TAU)],
        Geometry::GaussianW2 => return Err(Error::UnsupportedGeometry(geometry.to_string())),
    })
}

/// Mass-weighted average location in Z of each source point under `gamma`.
///
/// Periodic axes (circle, torus, sphere azimuth) use the circular mean.
/// On the sphere this averages chart coordinates, which only approximates
/// the intrinsic mean.
pub fn barycentric_projection(gamma: &Coupling, z: &ReferenceSpace) -> Result<ProjectedPoints> {
    let coords = match (&z.points, z.geometry) {
        (_, Geometry::GaussianW2) | (Points::Gaussians(_), _) => {
            return Err(Error::UnsupportedGeometry(z.geometry.to_string()))
        }
        (Points::Coordinates(c), _) => c,
        (Points::None, _) => {
            return Err(Error::UnsupportedGeometry(format!(
                "{} without point coordinates",
                z.geometry
            )))
        }
    };
    let (n, m) = gamma.dim();
    if m != coords.nrows() {
        return Err(Error::SizeMismatch {
            expected: coords.nrows(),
            found: m,
            context: "coupling columns vs reference points",
        });
    }
    let dims = coords.ncols();
    let periods = axis_periods(z.geometry, dims)?;
    let g = gamma.matrix();
    let mass: Vec<f64> = g.rows().into_iter().map(|r| r.sum()).collect();
    let valid: Vec<bool> = mass.iter().map(|&w| w >= LOW_MASS_THRESHOLD).collect();
    if !valid.iter().any(|&v| v) {
        return Err(Error::AllMassZero);
    }
    let mut points = Array2::<f64>::zeros((n, dims));
    for i in (0..n).filter(|&i| valid[i]) {
        for (d, period) in periods.iter().enumerate() {
            let col = coords.column(d);
            points[[i, d]] = match period {
                None => g.row(i).dot(&col) / mass[i],
                Some(p) => {
                    let (s, c) = g.row(i).iter().zip(col).fold((0.0, 0.0), |(s, c), (w, x)| {
                        let t = x * TAU / p;
                        (s + w * t.sin(), c + w * t.cos())
                    });
                    s.atan2(c).rem_euclid(TAU) * p / TAU
                }
            };
        }
    }
    Ok(ProjectedPoints {
        points,
        mass,
        valid,
        periods,
    })
}

fn common_valid(p1: &ProjectedPoints, p2: &ProjectedPoints) -> Result<Vec<usize>> {
    if p1.len() != p2.len() {
        return Err(Error::CountMismatch {
            left: p1.len(),
            right: p2.len(),
            context: "paired projections",
        });
    }
    if p1.points.ncols() != p2.points.ncols() {
        return Err(Error::CountMismatch {
            left: p1.points.ncols(),
            right: p2.points.ncols(),
            context: "projection dimensions",
        });
    }
    Ok((0..p1.len()).filter(|&j| p1.valid[j] && p2.valid[j]).collect())
}

/// Fraction of samples closer than the true match, from `p1` toward `p2`:
/// `(1/n^2) sum_j #{k : |x1_j - x2_k| < |x1_j - x2_j|}`.
///
/// Rows excluded in either projection are dropped before counting.
pub fn foscttm(p1: &ProjectedPoints, p2: &ProjectedPoints) -> Result<f64> {
    let idx = common_valid(p1, p2)?;
    if idx.is_empty() {
        return Ok(0.0);
    }
    let n = idx.len() as f64;
    let closer: usize = idx
        .par_iter()
        .map(|&j| {
            let own = p1.distance(j, p2, j);
            idx.iter().filter(|&&k| p1.distance(j, p2, k) < own).count()
        })
        .sum();
    Ok(closer as f64 / (n * n))
}

/// Mean of [`foscttm`] in both directions.
pub fn foscttm_symmetric(p1: &ProjectedPoints, p2: &ProjectedPoints) -> Result<f64> {
    Ok(0.5 * (foscttm(p1, p2)? + foscttm(p2, p1)?))
}

/// Accuracy of k-NN label transfer from `train` to `test`.
///
/// Each test point takes the majority label of its `k` nearest train points
/// (nearest first, index order on equal distance). Vote ties go to the label
/// with the smallest summed neighbour distance, then to the lowest label.
pub fn knn_transfer_accuracy(
    train: &ProjectedPoints,
    train_labels: &[usize],
    test: &ProjectedPoints,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if train_labels.len() != train.len() {
        return Err(Error::CountMismatch {
            left: train.len(),
            right: train_labels.len(),
            context: "train points vs labels",
        });
    }
    if test_labels.len() != test.len() {
        return Err(Error::CountMismatch {
            left: test.len(),
            right: test_labels.len(),
            context: "test points vs labels",
        });
    }
    if train.points.ncols() != test.points.ncols() {
        return Err(Error::CountMismatch {
            left: train.points.ncols(),
            right: test.points.ncols(),
            context: "projection dimensions",
        });
    }
    let pool: Vec<usize> = (0..train.len()).filter(|&i| train.valid[i]).collect();
    let queries: Vec<usize> = (0..test.len()).filter(|&i| test.valid[i]).collect();
    if pool.is_empty() || queries.is_empty() {
        return Err(Error::AllMassZero);
    }
    let correct = queries
        .par_iter()
        .filter(|&&q| {
            let mut near: Vec<(f64, usize)> = pool.iter().map(|&i| (test.distance(q, train, i), i)).collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
            for &(d, i) in near.iter().take(k) {
                let e = votes.entry(train_labels[i]).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += d;
            }
            // BTreeMap iterates labels in increasing order, so the first best wins ties
            let predicted = votes
                .iter()
                .fold(
                    None::<(usize, usize, f64)>,
                    |best, (&label, &(count, dist))| match best {
                        Some((_, bc, bd)) if bc > count || (bc == count && bd <= dist) => best,
                        _ => Some((label, count, dist)),
                    },
                )
                .map(|(label, _, _)| label)
                .expect("at least one neighbour");
            predicted == test_labels[q]
        })
        .count();
    Ok(correct as f64 / queries.len() as f64)
}

/// Distance used by [`pairwise_distance_matrix`].
#[derive(Debug, Clone, PartialEq)]
pub enum DistanceKind {
    /// W2 between the weights, all given on the points of Z.
    W2SharedSupport(W2Method),
    /// `sqrt` of the entropic GW objective.
    Gw(GwOptions),
    /// `sqrt` of the `EW_lambda` objective.
    EwLambda(EwConfig),
}

/// Symmetric matrix of pairwise distances with a zero diagonal; each
/// unordered pair is computed once, in parallel.
pub fn pairwise_distance_matrix(corpus: &[MmSpace], z: &ReferenceSpace, kind: &DistanceKind) -> Result<Array2<f64>> {
    let n = corpus.len();
    if let DistanceKind::W2SharedSupport(_) = kind {
        if let Some((i, x)) = corpus.iter().enumerate().find(|(_, x)| x.len() != z.len()) {
            return Err(Error::IncompatibleCorpus(format!(
                "element {i} has {} points but the shared support has {}",
                x.len(),
                z.len()
            )));
        }
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (&corpus[i], &corpus[j]);
            match kind {
                DistanceKind::W2SharedSupport(method) => wasserstein2(z, &a.weights, &b.weights, *method),
                DistanceKind::Gw(opts) => {
                    gw_entropic(a, &b.dist, &b.weights, opts).map(|r| r.objective.max(0.0).sqrt())
                }
                DistanceKind::EwLambda(cfg) => solve_ew_lambda(a, b, z, cfg).map(|r| r.ew_lambda()),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut out = Array2::zeros((n, n));
    for (&(i, j), v) in pairs.iter().zip(values) {
        out[[i, j]] = v;
        out[[j, i]] = v;
    }
    Ok(out)
}

/// One point of the circle benchmark.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CircleBenchPoint {
    pub kappa: f64,
    pub lambda: f64,
    /// Solver estimate of `EW_lambda^2`.
    pub ew_lambda_sq: f64,
    /// Exact `EW^2`, equal to circular `W2^2` between the two weights.
    pub ew_sq: f64,
    pub sinkhorn_converged: bool,
}

/// Compares `EW_lambda^2` with the exact `EW^2` between the uniform measure
/// and a von Mises measure of concentration `kappa`, both on a circle of
/// `bins` equiangular points that is also the reference space.
///
/// The uniform measure is rotation invariant, so the infimum over isometric
/// embeddings is attained by the identity and `EW^2 = W2^2`.
pub fn circle_benchmark(bins: usize, kappa: f64, cfg: &EwConfig) -> Result<CircleBenchPoint> {
    let z = circle_space(bins)?;
    let angles: Vec<f64> = match &z.points {
        Points::Coordinates(c) => c.column(0).to_vec(),
        _ => unreachable!("circle_space stores angles"),
    };
    let uniform = SimplexWeights::uniform(bins);
    let vm = von_mises_weights(bins, kappa, 0.0)?;
    let ew_sq = circular_w2_squared(&angles, uniform.as_slice(), vm.as_slice())?;
    let x1 = MmSpace::new(z.dist.clone(), uniform)?;
    let x2 = MmSpace::new(z.dist.clone(), vm)?;
    let r = solve_ew_lambda(&x1, &x2, &z, cfg)?;
    Ok(CircleBenchPoint {
        kappa,
        lambda: cfg.lambda,
        ew_lambda_sq: r.objective,
        ew_sq,
        sinkhorn_converged: r.sinkhorn_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::{circle_space, euclidean_grid};
    use crate::types::{DistanceMatrix, SimplexWeights};
    use ndarray::array;
    use proptest::prelude::*;

    fn line_grid() -> ReferenceSpace {
        euclidean_grid(&[(0.0, 3.0)], &[4]).unwrap()
    }

    #[test]
    fn permutation_coupling_projects_onto_grid_points() {
        let z = line_grid();
        let g = Coupling::from_matrix(array![
            [0.0, 0.0, 0.25, 0.0],
            [0.25, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.25],
            [0.0, 0.25, 0.0, 0.0]
        ])
        .unwrap();
        let p = barycentric_projection(&g, &z).unwrap();
        assert_eq!(p.points.column(0).to_vec(), vec![2.0, 0.0, 3.0, 1.0]);
    }

    #[test]
    fn split_row_projects_to_midpoint_and_empty_row_is_flagged() {
        let z = line_grid();
        let g = Coupling::from_matrix(array![
            [0.25, 0.0, 0.0, 0.25],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.5, 0.0, 0.0]
        ])
        .unwrap();
        let p = barycentric_projection(&g, &z).unwrap();
        assert!((p.points[[0, 0]] - 1.5).abs() < 1e-15);
        assert_eq!(p.valid, vec![true, false, true]);
    }

    #[test]
    fn all_zero_rows_are_rejected() {
        let z = line_grid();
        let g = Coupling::from_solver(
            Array2::zeros((2, 4)),
            SimplexWeights::uniform(2),
            SimplexWeights::uniform(4),
        );
        assert_eq!(barycentric_projection(&g, &z).unwrap_err().kind(), "AllMassZero");
    }

    #[test]
    fn circular_mean_wraps_around() {
        let z = circle_space(8).unwrap();
        let mut m = Array2::zeros((1, 8));
        m[[0, 7]] = 0.5;
        m[[0, 1]] = 0.5;
        let g = Coupling::from_matrix(m).unwrap();
        let p = barycentric_projection(&g, &z).unwrap();
        let t = p.points[[0, 0]];
        assert!(t.min(TAU - t) < 1e-12, "mean angle {t}");
    }

    #[test]
    fn gaussian_reference_is_unsupported() {
        let z = crate::spaces::gaussian_grid(&crate::spaces::GaussianGridSpec {
            mean_extent: [(0.0, 1.0), (0.0, 1.0)],
            mean_resolution: [1, 1],
            variance_scale: 1.0,
            sigma_sq_choices: vec![1.0],
            offdiag_choices: vec![0.0],
        })
        .unwrap();
        let g = Coupling::from_matrix(Array2::from_elem((1, z.len()), 1.0 / z.len() as f64)).unwrap();
        assert_eq!(
            barycentric_projection(&g, &z).unwrap_err().kind(),
            "UnsupportedGeometry"
        );
    }

    #[test]
    fn foscttm_examples() {
        let p = ProjectedPoints::euclidean(array![[0.0], [1.0], [2.0]]);
        assert_eq!(foscttm(&p, &p).unwrap(), 0.0);
        let one = ProjectedPoints::euclidean(array![[4.0]]);
        assert_eq!(foscttm(&one, &one).unwrap(), 0.0);
        assert_eq!(foscttm(&p, &one).unwrap_err().kind(), "CountMismatch");
    }

    #[test]
    fn foscttm_farthest_match_gives_n_minus_one_over_n() {
        // swapped collinear pair: each true match is the farther point
        let a = ProjectedPoints::euclidean(array![[0.0], [1.0]]);
        let b = ProjectedPoints::euclidean(array![[1.0], [0.0]]);
        assert_eq!(foscttm(&a, &b).unwrap(), 0.5);
        // n points on a circle of radius 1, matches placed antipodally
        let n = 7;
        let ring = |off: f64| {
            Array2::from_shape_fn((n, 2), |(j, d)| {
                let t = TAU * j as f64 / n as f64 + off;
                if d == 0 {
                    t.cos()
                } else {
                    t.sin()
                }
            })
        };
        let a = ProjectedPoints::euclidean(ring(0.0));
        let b = ProjectedPoints::euclidean(ring(std::f64::consts::PI / n as f64 * n as f64));
        assert!((foscttm(&a, &b).unwrap() - (n - 1) as f64 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn excluded_rows_are_dropped() {
        let mut a = ProjectedPoints::euclidean(array![[0.0], [1.0], [9.0]]);
        let b = ProjectedPoints::euclidean(array![[0.0], [1.0], [-50.0]]);
        a.valid[2] = false;
        assert_eq!(foscttm(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn knn_examples() {
        let train = ProjectedPoints::euclidean(array![[0.0], [0.1], [0.2], [5.0], [5.1], [5.2]]);
        let labels = [0, 0, 0, 1, 1, 1];
        assert_eq!(knn_transfer_accuracy(&train, &labels, &train, &labels, 1).unwrap(), 1.0);
        for k in 1..=3 {
            assert_eq!(knn_transfer_accuracy(&train, &labels, &train, &labels, k).unwrap(), 1.0);
        }
        let single = ProjectedPoints::euclidean(array![[3.0]]);
        let test = ProjectedPoints::euclidean(array![[0.0], [10.0]]);
        assert_eq!(knn_transfer_accuracy(&single, &[7], &test, &[7, 7], 5).unwrap(), 1.0);
        assert_eq!(
            knn_transfer_accuracy(&train, &labels[..2], &train, &labels, 1)
                .unwrap_err()
                .kind(),
            "CountMismatch"
        );
    }

    #[test]
    fn knn_vote_ties_use_distance_then_label() {
        let train = ProjectedPoints::euclidean(array![[-1.0], [2.0]]);
        let test = ProjectedPoints::euclidean(array![[0.0]]);
        // one vote each; label 5 is nearer
        assert_eq!(knn_transfer_accuracy(&train, &[5, 3], &test, &[5], 2).unwrap(), 1.0);
        let even = ProjectedPoints::euclidean(array![[-1.0], [1.0]]);
        // equal counts and distances: lowest label wins
        assert_eq!(knn_transfer_accuracy(&even, &[5, 3], &test, &[3], 2).unwrap(), 1.0);
    }

    #[test]
    fn pairwise_matrix_small_cases() {
        let z = line_grid();
        let x = MmSpace::new(z.dist.clone(), SimplexWeights::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let one = pairwise_distance_matrix(
            std::slice::from_ref(&x),
            &z,
            &DistanceKind::W2SharedSupport(W2Method::Exact),
        )
        .unwrap();
        assert_eq!(one, array![[0.0]]);
        let dup = [x.clone(), x.clone()];
        let mut cfg = EwConfig::new(20.0, 1e-2).unwrap();
        cfg.bcd_iters = 10;
        cfg.init = crate::ew::EwInit::GwApproximation;
        let m = pairwise_distance_matrix(&dup, &z, &DistanceKind::EwLambda(cfg)).unwrap();
        assert!(m[[0, 1]] < 1e-2 && m[[0, 1]] == m[[1, 0]], "{m}");
        let g = pairwise_distance_matrix(&dup, &z, &DistanceKind::Gw(GwOptions::new(1e-2))).unwrap();
        assert!(g[[0, 1]] < 1e-2, "{g}");
        let small = MmSpace::uniform(DistanceMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap());
        let err =
            pairwise_distance_matrix(&[x, small], &z, &DistanceKind::W2SharedSupport(W2Method::Exact)).unwrap_err();
        assert_eq!(err.kind(), "IncompatibleCorpus");
    }

    proptest! {
        #[test]
        fn foscttm_is_rigid_motion_invariant(
            pts in proptest::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 2..12),
            angle in 0.0..TAU, shift in (-3.0..3.0f64, -3.0..3.0f64),
        ) {
            let n = pts.len();
            let a = Array2::from_shape_fn((n, 2), |(i, d)| if d == 0 { pts[i].0 } else { pts[i].1 });
            let b = Array2::from_shape_fn((n, 2), |(i, d)| if d == 0 { pts[i].2 } else { pts[i].3 });
            let (s, c) = angle.sin_cos();
            let move_pts = |p: &Array2<f64>| Array2::from_shape_fn((n, 2), |(i, d)| {
                let (x, y) = (p[[i, 0]], p[[i, 1]]);
                if d == 0 { c * x - s * y + shift.0 } else { s * x + c * y + shift.1 }
            });
            let before = foscttm(&ProjectedPoints::euclidean(a.clone()), &ProjectedPoints::euclidean(b.clone())).unwrap();
            let after = foscttm(&ProjectedPoints::euclidean(move_pts(&a)), &ProjectedPoints::euclidean(move_pts(&b))).unwrap();
            // rotations perturb distances by rounding; random points have no near-ties at this scale
            prop_assert!((before - after).abs() <= 1.0 / (n * n) as f64 + 1e-12);
            prop_assert!((0.0..=1.0).contains(&before));
        }
    }
}
