//! Gromov-Wasserstein objective, linearized costs and entropic solvers.
//!
//! All solvers run block-coordinate descent on the bilinear relaxation
//! `Phi(g1, g2) = <L(g1), g2> + eps (KL(g1) + KL(g2))`, where `L` is the
//! linearized cost. Each half-step minimizes `Phi` exactly in one argument,
//! so the trace of `Phi` is non-increasing up to the inner solver tolerance.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{frobenius, logsumexp, lse_matmul, lse_matvec, lse_matvec_t};
use crate::ot::{exact_ot, scale_log_kernel, DEFAULT_SINKHORN_MAX_ITER, DEFAULT_SINKHORN_TOL, EXACT_OT_BOUND};
use crate::types::{Coupling, DistanceMatrix, MmSpace, ReferenceSpace, SimplexWeights};

/// Default number of outer BCD iterations for the GW solvers.
pub const DEFAULT_GW_ITERS: usize = 100;

/// Parameters shared by the GW solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct GwOptions {
    pub epsilon: f64,
    /// Multiply `epsilon` by the squared largest distance of the two spaces.
    pub relative_epsilon: bool,
    /// Sinkhorn tolerance; also the relative objective change at which the
    /// outer loop stops.
    pub tol: f64,
    /// Outer BCD iterations.
    pub max_iter: usize,
    pub sinkhorn_max_iter: usize,
}

impl GwOptions {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            relative_epsilon: false,
            tol: DEFAULT_SINKHORN_TOL,
            max_iter: DEFAULT_GW_ITERS,
            sinkhorn_max_iter: DEFAULT_SINKHORN_MAX_ITER,
        }
    }

    fn effective_epsilon(&self, scales: &[f64]) -> Result<f64> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("epsilon = {}", self.epsilon)));
        }
        if self.relative_epsilon {
            let s = scales.iter().copied().fold(0.0, f64::max);
            if s > 0.0 {
                return Ok(self.epsilon * s * s);
            }
        }
        Ok(self.epsilon)
    }
}

/// Output of [`gw_entropic`].
#[derive(Debug, Clone, Serialize)]
pub struct GwResult {
    pub coupling: Coupling,
    /// Unregularized GW objective of `coupling`.
    pub objective: f64,
    pub iterations: usize,
    /// Regularized bilinear objective after every half-step.
    pub regularized_trace: Vec<f64>,
    pub converged: bool,
}

/// Output of [`gw_approximation`] and [`gw_barycenter_fixed_support`].
#[derive(Debug, Clone, Serialize)]
pub struct GwWeights {
    pub weights: SimplexWeights,
    /// Unregularized objective (sum of GW terms for the barycenter).
    pub objective: f64,
    /// Couplings of each input with the reference space, `n_i x m`.
    pub couplings: Vec<Coupling>,
    pub iterations: usize,
    pub regularized_trace: Vec<f64>,
    pub converged: bool,
}

fn check_sizes(dx: &Array2<f64>, dz: &Array2<f64>, gamma: ArrayView2<f64>) -> Result<()> {
    if gamma.nrows() != dx.nrows() {
        return Err(Error::SizeMismatch {
            expected: dx.nrows(),
            found: gamma.nrows(),
            context: "coupling rows vs source space",
        });
    }
    if gamma.ncols() != dz.nrows() {
        return Err(Error::SizeMismatch {
            expected: dz.nrows(),
            found: gamma.ncols(),
            context: "coupling columns vs target space",
        });
    }
    Ok(())
}

/// `L(i', j') = sum_ij (dx_ii' - dz_jj')^2 gamma_ij` on raw matrices.
pub(crate) fn linearized_cost(dx: &Array2<f64>, dz: &Array2<f64>, gamma: ArrayView2<f64>) -> Array2<f64> {
    let p = gamma.sum_axis(Axis(1));
    let q = gamma.sum_axis(Axis(0));
    let dx2p = dx.mapv(|v| v * v).dot(&p);
    let dz2q = dz.mapv(|v| v * v).dot(&q);
    let mut cost = dx.dot(&gamma).dot(dz);
    cost.mapv_inplace(|v| -2.0 * v);
    for ((i, j), v) in cost.indexed_iter_mut() {
        *v += dx2p[i] + dz2q[j];
    }
    cost
}

/// Unregularized GW objective of a raw plan.
pub(crate) fn objective_raw(dx: &Array2<f64>, dz: &Array2<f64>, gamma: ArrayView2<f64>) -> f64 {
    frobenius(gamma, linearized_cost(dx, dz, gamma).view()).max(0.0)
}

/// `sum (dx(x, x') - dz(z, z'))^2 dgamma dgamma`, through the three-term
/// expansion.
pub fn gw_objective(dx: &DistanceMatrix, dz: &DistanceMatrix, gamma: &Coupling) -> Result<f64> {
    check_sizes(dx.matrix(), dz.matrix(), gamma.matrix().view())?;
    Ok(objective_raw(dx.matrix(), dz.matrix(), gamma.matrix().view()))
}

/// Linearized GW cost against a fixed coupling (`n x m`).
pub fn gw_linearized_cost(dx: &DistanceMatrix, dz: &DistanceMatrix, gamma: &Coupling) -> Result<Array2<f64>> {
    check_sizes(dx.matrix(), dz.matrix(), gamma.matrix().view())?;
    Ok(linearized_cost(dx.matrix(), dz.matrix(), gamma.matrix().view()))
}

/// `sum p (log p - log_ref)` with `0 log 0 = 0`.
pub(crate) fn kl_against(p: ArrayView2<f64>, log_ref: impl Fn(usize, usize) -> f64) -> f64 {
    p.indexed_iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|((i, j), v)| v * (v.ln() - log_ref(i, j)))
        .sum()
}

/// Squared W2 between two weighted samples on the real line.
fn w2_sq_1d(p: &[(f64, f64)], q: &[(f64, f64)]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut rp, mut rq) = (p[0].1, q[0].1);
    let mut total = 0.0;
    while i < p.len() && j < q.len() {
        let mass = rp.min(rq);
        let d = p[i].0 - q[j].0;
        total += mass * d * d;
        rp -= mass;
        rq -= mass;
        if rp <= rq {
            i += 1;
            if i < p.len() {
                rp = p[i].1;
            }
        } else {
            j += 1;
            if j < q.len() {
                rq = q[j].1;
            }
        }
    }
    total
}

fn distance_profile(row: ArrayView1<f64>, w: &[f64]) -> Vec<(f64, f64)> {
    let mut prof: Vec<(f64, f64)> = row
        .iter()
        .zip(w)
        .filter(|(_, w)| **w > 0.0)
        .map(|(d, w)| (*d, *w))
        .collect();
    prof.sort_by(|x, y| x.0.total_cmp(&y.0));
    prof
}

/// Work bound for the profile lower bound; larger problems compare
/// eccentricities only.
const PROFILE_BOUND: usize = 50_000_000;

/// Initialization cost comparing the distance distributions seen from each
/// point (a lower bound on the GW cost of matching `i` with `j`). Above
/// [`PROFILE_BOUND`] it falls back to squared differences of eccentricities.
pub(crate) fn profile_cost(dx: &Array2<f64>, a: &[f64], dz: &Array2<f64>, b: &[f64]) -> Array2<f64> {
    let (n, m) = (dx.nrows(), dz.nrows());
    if n * m * (n + m) > PROFILE_BOUND {
        let ecc = |d: &Array2<f64>, w: &[f64]| -> Vec<f64> {
            d.rows()
                .into_iter()
                .map(|r| r.iter().zip(w).map(|(v, w)| w * v * v).sum::<f64>().sqrt())
                .collect()
        };
        let (ex, ez) = (ecc(dx, a), ecc(dz, b));
        return Array2::from_shape_fn((n, m), |(i, j)| (ex[i] - ez[j]).powi(2));
    }
    let px: Vec<_> = dx.rows().into_iter().map(|r| distance_profile(r, a)).collect();
    let pz: Vec<_> = dz.rows().into_iter().map(|r| distance_profile(r, b)).collect();
    let rows: Vec<Vec<f64>> = px
        .par_iter()
        .map(|p| pz.iter().map(|q| w2_sq_1d(p, q)).collect())
        .collect();
    Array2::from_shape_fn((n, m), |(i, j)| rows[i][j])
}

/// Hard assignment used to start the free-marginal solvers.
///
/// Rows of points with identical distance profiles stay identical under the
/// row-decoupled updates, so ties must be broken here. Each row takes the
/// column of its largest entry in an optimal vertex of the profile bound
/// against uniform Z weights (lowest index on ties). That vertex spreads
/// isomorphic points over different columns. Past the exact-OT size bound the
/// profile cost is minimized row by row instead.
pub(crate) fn hard_assignment_init(dx: &Array2<f64>, xi: &SimplexWeights, dz: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, m) = (dx.nrows(), dz.nrows());
    let uniform = SimplexWeights::uniform(m);
    let cost = profile_cost(dx, xi.as_slice(), dz, uniform.as_slice());
    let (score, better): (Array2<f64>, fn(f64, f64) -> bool) = if n * m <= EXACT_OT_BOUND {
        (exact_ot(&cost, xi, &uniform)?.plan.into_matrix(), |a, b| a > b)
    } else {
        (cost, |a, b| a < b)
    };
    let mut p = Array2::zeros((n, m));
    for (i, row) in score.rows().into_iter().enumerate() {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if better(*v, row[best]) {
                best = j;
            }
        }
        p[[i, best]] = xi.as_slice()[i];
    }
    Ok(p)
}

fn relative_change(prev: f64, cur: f64) -> f64 {
    (prev - cur).abs() / prev.abs().max(cur.abs()).max(1e-300)
}

/// Entropic GW between `x` and a weighted reference space.
///
/// Alternates balanced Sinkhorn solves on the linearized cost, starting
/// from the product coupling. Non-convergence of the outer loop or of a
/// Sinkhorn solve is reported through `converged`.
pub fn gw_entropic(
    x: &MmSpace,
    z_dist: &DistanceMatrix,
    z_weights: &SimplexWeights,
    opts: &GwOptions,
) -> Result<GwResult> {
    if z_dist.len() != z_weights.len() {
        return Err(Error::SizeMismatch {
            expected: z_dist.len(),
            found: z_weights.len(),
            context: "reference weights",
        });
    }
    let eps = opts.effective_epsilon(&[x.dist.max(), z_dist.max()])?;
    let dx = x.dist.matrix();
    let dz = z_dist.matrix();
    let a = x.weights.as_slice();
    let b = z_weights.as_slice();
    let log_ref = |i: usize, j: usize| a[i].ln() + b[j].ln();

    // The product coupling is a stationary point whenever the spaces are
    // homogeneous; start from an optimal vertex of the profile bound instead.
    let mut prev = if x.len() * z_dist.len() <= EXACT_OT_BOUND {
        exact_ot(&profile_cost(dx, a, dz, b), &x.weights, z_weights)?
            .plan
            .into_matrix()
    } else {
        Coupling::product(&x.weights, z_weights).into_matrix()
    };
    let mut prev_kl = kl_against(prev.view(), log_ref);
    let mut warm: Option<Array1<f64>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut inner_ok = true;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let cost = linearized_cost(dx, dz, prev.view());
        let log_m = cost.mapv(|c| -c / eps);
        let out = scale_log_kernel(log_m.view(), a, b, warm.as_ref(), opts.tol, opts.sinkhorn_max_iter)?;
        inner_ok &= out.converged;
        let next = out.plan(log_m.view());
        let next_kl = kl_against(next.view(), log_ref);
        let phi = frobenius(next.view(), cost.view()) + eps * (prev_kl + next_kl);
        let stop = trace.last().is_some_and(|&last| relative_change(last, phi) <= opts.tol);
        trace.push(phi);
        warm = Some(out.g);
        prev = next;
        prev_kl = next_kl;
        if stop {
            converged = true;
            break;
        }
    }
    let objective = objective_raw(dx, dz, prev.view());
    Ok(GwResult {
        coupling: Coupling::from_solver(prev, x.weights.clone(), z_weights.clone()),
        objective,
        iterations,
        regularized_trace: trace,
        converged: converged && inner_ok,
    })
}

/// Plan with fixed row marginal `xi` minimizing `<cost, gamma> + eps KL(gamma | xi x uniform)`:
/// each row is `xi_i` times a softmax of `-cost / eps`.
pub(crate) fn row_softmax_plan(cost: &Array2<f64>, xi: &[f64], eps: f64) -> Array2<f64> {
    let mut p = cost.mapv(|c| -c / eps);
    for (mut row, &w) in p.rows_mut().into_iter().zip(xi) {
        if w == 0.0 {
            row.fill(0.0);
            continue;
        }
        let lse = logsumexp(row.iter().copied());
        row.mapv_inplace(|v| w * (v - lse).exp());
    }
    p
}

/// Weights on Z minimizing `GW^2(x, (Z, d_Z, zeta))`.
///
/// BCD on the bilinear relaxation with only the X-marginal constrained; the
/// Z-marginal of the final coupling is returned as `zeta`.
pub fn gw_approximation(x: &MmSpace, z: &ReferenceSpace, opts: &GwOptions) -> Result<GwWeights> {
    let eps = opts.effective_epsilon(&[x.dist.max(), z.diameter()])?;
    let dx = x.dist.matrix();
    let dz = z.dist.matrix();
    let xi = x.weights.as_slice();
    let m = z.len();
    let log_ref = |i: usize, _j: usize| xi[i].ln() - (m as f64).ln();

    let mut prev = hard_assignment_init(dx, &x.weights, dz)?;
    let mut prev_kl = kl_against(prev.view(), log_ref);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let cost = linearized_cost(dx, dz, prev.view());
        let next = row_softmax_plan(&cost, xi, eps);
        let next_kl = kl_against(next.view(), log_ref);
        let phi = frobenius(next.view(), cost.view()) + eps * (prev_kl + next_kl);
        let stop = trace.last().is_some_and(|&last| relative_change(last, phi) <= opts.tol);
        trace.push(phi);
        prev = next;
        prev_kl = next_kl;
        if stop {
            converged = true;
            break;
        }
    }
    let objective = objective_raw(dx, dz, prev.view());
    let zeta = SimplexWeights::normalized(prev.sum_axis(Axis(0)).to_vec())?;
    Ok(GwWeights {
        couplings: vec![Coupling::from_solver(prev, x.weights.clone(), zeta.clone())],
        weights: zeta,
        objective,
        iterations,
        regularized_trace: trace,
        converged,
    })
}

/// Weights on Z approximately minimizing `sum_i GW^2(x_i, (Z, d_Z, zeta))`.
///
/// The two couplings are the projections of one plan on `X1 x Z x X2`, so
/// they share their Z-marginal. Each half-step is a Sinkhorn solve for that
/// plan against the linearized costs of the other iterate.
pub fn gw_barycenter_fixed_support(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    opts: &GwOptions,
) -> Result<GwWeights> {
    let eps = opts.effective_epsilon(&[x1.dist.max(), x2.dist.max(), z.diameter()])?;
    let dz = z.dist.matrix();
    let (n1, m, n2) = (x1.len(), z.len(), x2.len());
    let log_size = ((n1 * m * n2) as f64).ln();

    let mut g1 = hard_assignment_init(x1.dist.matrix(), &x1.weights, dz)?;
    let mut g2 = hard_assignment_init(x2.dist.matrix(), &x2.weights, dz)?;
    // The initial pair need not share a Z-marginal, so it is not a 3-plan
    // and the trace starts after the first half-step.
    let mut prev_kl = f64::NAN;
    let mut warm: Option<Array1<f64>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut inner_ok = true;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let c1 = linearized_cost(x1.dist.matrix(), dz, g1.view());
        let c2 = linearized_cost(x2.dist.matrix(), dz, g2.view());
        let la = c1.mapv(|c| -c / eps);
        let lc = c2.t().mapv(|c| -c / eps);
        let log_m = lse_matmul(la.view(), lc.view());
        let out = scale_log_kernel(
            log_m.view(),
            x1.weights.as_slice(),
            x2.weights.as_slice(),
            warm.as_ref(),
            opts.tol,
            opts.sinkhorn_max_iter,
        )?;
        inner_ok &= out.converged;
        // gamma1(i, z) = exp(f_i + la_iz + LSE_l(lc_zl + g_l)), likewise gamma2.
        let right = lse_matvec(lc.view(), out.g.view());
        let left = lse_matvec_t(la.view(), out.f.view());
        let n1_plan = Array2::from_shape_fn((n1, m), |(i, k)| {
            let e = out.f[i] + la[[i, k]] + right[k];
            if e == f64::NEG_INFINITY {
                0.0
            } else {
                e.exp()
            }
        });
        let n2_plan = Array2::from_shape_fn((n2, m), |(l, k)| {
            let e = left[k] + lc[[k, l]] + out.g[l];
            if e == f64::NEG_INFINITY {
                0.0
            } else {
                e.exp()
            }
        });
        // sum beta log beta = <gamma1, f + la> + <gamma2, lc + g>
        let ent = plan_dot(&n1_plan, |i, k| out.f[i] + la[[i, k]]) + plan_dot(&n2_plan, |l, k| lc[[k, l]] + out.g[l]);
        let next_kl = ent + log_size;
        let phi =
            frobenius(n1_plan.view(), c1.view()) + frobenius(n2_plan.view(), c2.view()) + eps * (prev_kl + next_kl);
        let stop = trace.last().is_some_and(|&last| relative_change(last, phi) <= opts.tol);
        if phi.is_finite() {
            trace.push(phi);
        }
        warm = Some(out.g);
        g1 = n1_plan;
        g2 = n2_plan;
        prev_kl = next_kl;
        if stop {
            converged = true;
            break;
        }
    }
    let objective = objective_raw(x1.dist.matrix(), dz, g1.view()) + objective_raw(x2.dist.matrix(), dz, g2.view());
    let zeta = SimplexWeights::normalized(g1.sum_axis(Axis(0)).to_vec())?;
    let zeta2 = SimplexWeights::normalized(g2.sum_axis(Axis(0)).to_vec())?;
    Ok(GwWeights {
        couplings: vec![
            Coupling::from_solver(g1, x1.weights.clone(), zeta.clone()),
            Coupling::from_solver(g2, x2.weights.clone(), zeta2),
        ],
        weights: zeta,
        objective,
        iterations,
        regularized_trace: trace,
        converged: converged && inner_ok,
    })
}

/// `sum_ij p_ij * f(i, j)` over the cells carrying mass.
fn plan_dot(p: &Array2<f64>, f: impl Fn(usize, usize) -> f64) -> f64 {
    p.indexed_iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|((i, j), v)| v * f(i, j))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::euclidean_grid;
    use crate::types::Geometry;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Quadruple-loop evaluation of the GW objective.
    fn gw_loop(dx: &Array2<f64>, dz: &Array2<f64>, g: &Array2<f64>) -> f64 {
        let (n, m) = g.dim();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..m {
                for k in 0..n {
                    for l in 0..m {
                        let d = dx[[i, k]] - dz[[j, l]];
                        s += d * d * g[[i, j]] * g[[k, l]];
                    }
                }
            }
        }
        s
    }

    fn random_space(rng: &mut ChaCha8Rng, n: usize) -> MmSpace {
        let pts = Array2::from_shape_fn((n, 2), |_| rng.random_range(0.0..1.0));
        let z = ReferenceSpace::from_points(crate::types::Points::Coordinates(pts), Geometry::EuclideanGrid).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        MmSpace::new(z.dist, SimplexWeights::normalized(w).unwrap()).unwrap()
    }

    fn random_coupling(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Coupling {
        let p = Array2::from_shape_fn((n, m), |_| rng.random_range(0.0..1.0));
        let s = p.sum();
        Coupling::from_matrix(p / s).unwrap()
    }

    #[test]
    fn isometric_self_coupling_is_zero() {
        let d = DistanceMatrix::new(array![[0.0, 1.0, 2.0], [1.0, 0.0, 1.5], [2.0, 1.5, 0.0]]).unwrap();
        let g = Coupling::from_matrix(Array2::eye(3) / 3.0).unwrap();
        assert!(gw_objective(&d, &d, &g).unwrap().abs() < 1e-15);
        let zero = DistanceMatrix::new(Array2::zeros((3, 3))).unwrap();
        assert_eq!(gw_objective(&zero, &zero, &g).unwrap(), 0.0);
    }

    #[test]
    fn two_point_hand_value() {
        let dx = DistanceMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let dz = DistanceMatrix::new(array![[0.0, 2.0], [2.0, 0.0]]).unwrap();
        let g = Coupling::product(&SimplexWeights::uniform(2), &SimplexWeights::uniform(2));
        // 16 terms of weight 1/16: four pairs with dx = 0, dz = 2 contribute 4,
        // the eight pairs with dx = 1 contribute 1 each.
        let expected = gw_loop(dx.matrix(), dz.matrix(), g.matrix());
        assert!((expected - 24.0 / 16.0).abs() < 1e-15);
        assert!((gw_objective(&dx, &dz, &g).unwrap() - expected).abs() < 1e-15);
        let lin = gw_linearized_cost(&dx, &dz, &g).unwrap();
        for ((i, j), v) in lin.indexed_iter() {
            let mut s = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    let d = dx.matrix()[[k, i]] - dz.matrix()[[l, j]];
                    s += d * d * g.matrix()[[k, l]];
                }
            }
            assert!((v - s).abs() < 1e-15);
        }
    }

    #[test]
    fn linearized_cost_of_zero_spaces() {
        let z = DistanceMatrix::new(Array2::zeros((3, 3))).unwrap();
        let x = DistanceMatrix::new(Array2::zeros((2, 2))).unwrap();
        let g = Coupling::product(&SimplexWeights::uniform(2), &SimplexWeights::uniform(3));
        assert!(gw_linearized_cost(&x, &z, &g).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn size_mismatch_is_reported() {
        let d = DistanceMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let g = Coupling::product(&SimplexWeights::uniform(3), &SimplexWeights::uniform(2));
        assert!(matches!(gw_objective(&d, &d, &g), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn entropic_gw_single_points() {
        let x = MmSpace::uniform(DistanceMatrix::new(array![[0.0]]).unwrap());
        let r = gw_entropic(&x, &x.dist, &x.weights, &GwOptions::new(0.1)).unwrap();
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.coupling.matrix()[[0, 0]], 1.0);
    }

    #[test]
    fn entropic_gw_two_points_matches_grid_search() {
        let x = MmSpace::uniform(DistanceMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap());
        let z = DistanceMatrix::new(array![[0.0, 3.0], [3.0, 0.0]]).unwrap();
        let w = SimplexWeights::uniform(2);
        let mut opts = GwOptions::new(1e-3);
        opts.tol = 1e-10;
        let r = gw_entropic(&x, &z, &w, &opts).unwrap();
        // couplings in Pi(1/2, 1/2): [[t, 1/2 - t], [1/2 - t, t]]
        let best = (0..=500)
            .map(|k| {
                let t = 0.5 * k as f64 / 500.0;
                let g = array![[t, 0.5 - t], [0.5 - t, t]];
                gw_loop(x.dist.matrix(), z.matrix(), &g)
            })
            .fold(f64::INFINITY, f64::min);
        assert!((r.objective - best).abs() < 1e-6, "{} vs {}", r.objective, best);
    }

    #[test]
    fn entropic_gw_recovers_relabeled_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_space(&mut rng, 5);
        let perm = [3, 0, 4, 1, 2];
        let zd = DistanceMatrix::from_fn(5, |i, j| x.dist.matrix()[[perm[i], perm[j]]]).unwrap();
        let zw = SimplexWeights::new(perm.iter().map(|&p| x.weights.as_slice()[p]).collect()).unwrap();
        let mut opts = GwOptions::new(2e-3);
        opts.max_iter = 200;
        let r = gw_entropic(&x, &zd, &zw, &opts).unwrap();
        assert!(r.objective < 1e-3, "objective {}", r.objective);
        for w in r.regularized_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn approximation_of_single_point() {
        let x = MmSpace::uniform(DistanceMatrix::new(array![[0.0]]).unwrap());
        let z = euclidean_grid(&[(0.0, 1.0)], &[4]).unwrap();
        let r = gw_approximation(&x, &z, &GwOptions::new(1e-3)).unwrap();
        assert!(r.objective < 1e-6);
    }

    #[test]
    fn approximation_recovers_planted_subset() {
        let z = euclidean_grid(&[(0.0, 1.0)], &[5]).unwrap();
        // x: grid points 0, 1, 4 with weights 0.2, 0.3, 0.5
        let idx = [0, 1, 4];
        let x = MmSpace::new(
            z.dist.submatrix(&idx),
            SimplexWeights::new(vec![0.2, 0.3, 0.5]).unwrap(),
        )
        .unwrap();
        let mut opts = GwOptions::new(1e-3);
        opts.max_iter = 300;
        let r = gw_approximation(&x, &z, &opts).unwrap();
        assert!(r.objective < 1e-3, "objective {}", r.objective);
        // the weight pattern reappears on the image or its mirror
        let w = r.weights.as_slice();
        let direct = [w[0], w[1], w[4]];
        let mirror = [w[4], w[3], w[0]];
        let close = |v: [f64; 3]| v.iter().zip([0.2, 0.3, 0.5]).all(|(a, b)| (a - b).abs() < 0.02);
        assert!(close(direct) || close(mirror), "weights {w:?}");
    }

    #[test]
    fn approximation_lower_bound_for_oversized_pair() {
        // x: two points at distance 3; Z: 3 points on [0, 1].
        let x = MmSpace::uniform(DistanceMatrix::new(array![[0.0, 3.0], [3.0, 0.0]]).unwrap());
        let z = euclidean_grid(&[(0.0, 1.0)], &[3]).unwrap();
        let r = gw_approximation(&x, &z, &GwOptions::new(1e-3)).unwrap();
        let bound = (3.0f64 - z.diameter()).powi(2) * (2.0 * 0.5 * 0.5f64).powi(2);
        assert!(r.objective >= bound - 1e-9);
        // exhaustive weight grid with the exact GW for each zeta
        let mut best = f64::INFINITY;
        let steps = 20;
        for a in 0..=steps {
            for b in 0..=(steps - a) {
                let zeta = [a, b, steps - a - b].map(|k| k as f64 / steps as f64);
                best = best.min(two_point_gw_exact(3.0, z.dist.matrix(), &zeta));
            }
        }
        assert!(r.objective <= best * 1.02 + 1e-9, "{} vs grid {}", r.objective, best);
    }

    /// Exact GW between a uniform two-point space with distance `d` and
    /// (Z, zeta): every coupling splits zeta into two halves; enumerate on a fine grid.
    fn two_point_gw_exact(d: f64, dz: &Array2<f64>, zeta: &[f64; 3]) -> f64 {
        let dx = array![[0.0, d], [d, 0.0]];
        let res = 40;
        let mut best = f64::INFINITY;
        for a in 0..=res {
            for b in 0..=res {
                let row0 = [zeta[0] * a as f64 / res as f64, zeta[1] * b as f64 / res as f64, 0.0];
                let rest = 0.5 - row0[0] - row0[1];
                if rest < -1e-12 || rest > zeta[2] + 1e-12 {
                    continue;
                }
                let r0 = [row0[0], row0[1], rest.max(0.0)];
                let g = array![
                    [r0[0], r0[1], r0[2]],
                    [zeta[0] - r0[0], zeta[1] - r0[1], zeta[2] - r0[2]]
                ];
                if g.iter().any(|v| *v < -1e-12) {
                    continue;
                }
                best = best.min(gw_loop(&dx, dz, &g));
            }
        }
        best
    }

    #[test]
    fn barycenter_of_duplicates_is_approximation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_space(&mut rng, 4);
        let z = euclidean_grid(&[(0.0, 1.0), (0.0, 1.0)], &[3, 3]).unwrap();
        let mut opts = GwOptions::new(1e-3);
        opts.tol = 1e-12;
        opts.max_iter = 2000;
        let bary = gw_barycenter_fixed_support(&x, &x, &z, &opts).unwrap();
        let approx = gw_approximation(&x, &z, &opts).unwrap();
        assert!(
            (bary.objective - 2.0 * approx.objective).abs() < 1e-6,
            "{} vs 2 x {}",
            bary.objective,
            approx.objective
        );
    }

    #[test]
    fn barycenter_of_single_points() {
        let x = MmSpace::uniform(DistanceMatrix::new(array![[0.0]]).unwrap());
        let z = euclidean_grid(&[(0.0, 1.0)], &[3]).unwrap();
        let r = gw_barycenter_fixed_support(&x, &x, &z, &GwOptions::new(1e-3)).unwrap();
        assert!(r.objective < 1e-9);
    }

    #[test]
    fn solver_traces_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = euclidean_grid(&[(0.0, 1.0), (0.0, 1.0)], &[3, 2]).unwrap();
        for _ in 0..5 {
            let x1 = random_space(&mut rng, 4);
            let x2 = random_space(&mut rng, 3);
            let mut opts = GwOptions::new(rng.random_range(0.01..0.1));
            opts.tol = 1e-12;
            opts.max_iter = 30;
            for trace in [
                gw_entropic(&x1, &z.dist, &SimplexWeights::uniform(6), &opts)
                    .unwrap()
                    .regularized_trace,
                gw_approximation(&x1, &z, &opts).unwrap().regularized_trace,
                gw_barycenter_fixed_support(&x1, &x2, &z, &opts)
                    .unwrap()
                    .regularized_trace,
            ] {
                for w in trace.windows(2) {
                    assert!(w[1] <= w[0] + 1e-9, "trace {trace:?}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn fast_expansion_matches_loop(seed in 0u64..10_000, n in 1usize..6, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_space(&mut rng, n);
            let z = random_space(&mut rng, m);
            let g = random_coupling(&mut rng, n, m);
            let fast = gw_objective(&x.dist, &z.dist, &g).unwrap();
            let slow = gw_loop(x.dist.matrix(), z.dist.matrix(), g.matrix());
            prop_assert!((fast - slow).abs() < 1e-10);
            let swapped = gw_objective(&z.dist, &x.dist, &g.transpose()).unwrap();
            prop_assert!((fast - swapped).abs() < 1e-14);
            let lin = gw_linearized_cost(&x.dist, &z.dist, &g).unwrap();
            prop_assert!((g.cost(&lin) - fast).abs() < 1e-10);
        }
    }
}
