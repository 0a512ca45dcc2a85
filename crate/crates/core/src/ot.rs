//! Two-marginal optimal transport.
//!
//! * [`exact_ot`]: transportation network simplex, used for small exact
//!   problems and as an oracle.
//! * [`sinkhorn`]: entropic OT in a stabilized kernel domain (potentials are
//!   absorbed into the kernel whenever the scalings grow, with a log-domain
//!   fallback when a kernel row underflows).
//! * [`circular_w2`]: exact W2 on the circle through the cyclic monotone
//!   rearrangement, an independent check for the circle benchmark.

use std::collections::VecDeque;
use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{frobenius, lse_matvec, lse_matvec_t};
use crate::types::{Coupling, ReferenceSpace, SimplexWeights, MASS_TOL};

/// Largest `n * m` accepted by [`exact_ot`].
pub const EXACT_OT_BOUND: usize = 250_000;
/// Default Sinkhorn tolerance on the L-infinity marginal violation.
pub const DEFAULT_SINKHORN_TOL: f64 = 1e-7;
/// Default Sinkhorn iteration budget.
pub const DEFAULT_SINKHORN_MAX_ITER: usize = 10_000;

/// Scalings beyond `exp(+-ABSORB_LOG)` are folded into the potentials.
const ABSORB_LOG: f64 = 30.0;

/// Result of a two-marginal transport solve.
#[derive(Debug, Clone, Serialize)]
pub struct OtResult {
    pub plan: Coupling,
    /// `<plan, cost_matrix>`.
    pub cost: f64,
    /// Sinkhorn iterations; 0 for the exact solver.
    pub iterations: usize,
    /// L-infinity deviation of the plan's sums from the prescribed marginals.
    pub marginal_violation: f64,
    pub converged: bool,
}

/// Outcome of a balanced scaling solve on a log-kernel.
///
/// The plan is `exp(f_i + log_m_ij + g_j)`; `f` and `g` are `-inf` outside
/// the supports of the marginals.
#[derive(Debug, Clone)]
pub(crate) struct ScalingOutcome {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    /// Scaling updates after the initial exact log-domain step.
    pub iterations: usize,
    /// L-infinity row-marginal error at exit.
    pub violation: f64,
    /// L1 row-marginal error per iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl ScalingOutcome {
    pub fn plan(&self, log_m: ArrayView2<f64>) -> Array2<f64> {
        let mut p = log_m.to_owned();
        for ((i, j), v) in p.indexed_iter_mut() {
            let e = self.f[i] + *v + self.g[j];
            *v = if e == f64::NEG_INFINITY { 0.0 } else { e.exp() };
        }
        p
    }
}

fn stabilized_kernel(log_m: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>) -> Array2<f64> {
    let mut k = log_m.clone();
    for ((i, j), v) in k.indexed_iter_mut() {
        *v = (*v + f[i] + g[j]).exp();
    }
    k
}

/// Balanced Sinkhorn on a log-kernel with marginals `a`, `b`.
///
/// Iterates `u = a / (K v)`, `v = b / (K^T u)` on the kernel
/// `K = exp(log_m + f (+) g)`. Warm potentials, if given, seed `g`.
pub(crate) fn scale_log_kernel(
    log_m: ArrayView2<f64>,
    a: &[f64],
    b: &[f64],
    warm_g: Option<&Array1<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<ScalingOutcome> {
    let (n, m) = log_m.dim();
    assert_eq!(a.len(), n);
    assert_eq!(b.len(), m);
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > MASS_TOL {
        return Err(Error::InfeasibleMarginals { a: sa, b: sb });
    }
    let rows: Vec<usize> = (0..n).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..m).filter(|&j| b[j] > 0.0).collect();
    let lm = log_m.select(Axis(0), &rows).select(Axis(1), &cols);
    if lm.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NumericalOverflow("log-kernel"));
    }
    let ra: Array1<f64> = rows.iter().map(|&i| a[i]).collect();
    let rb: Array1<f64> = cols.iter().map(|&j| b[j]).collect();
    let log_a = ra.mapv(f64::ln);
    let log_b = rb.mapv(f64::ln);

    let mut g: Array1<f64> = match warm_g {
        Some(w) if cols.iter().all(|&j| w[j].is_finite()) => cols.iter().map(|&j| w[j]).collect(),
        _ => Array1::zeros(cols.len()),
    };
    let log_step = |g: &Array1<f64>| {
        let f = &log_a - &lse_matvec(lm.view(), g.view());
        let g = &log_b - &lse_matvec_t(lm.view(), f.view());
        (f, g)
    };
    let (mut f, g0) = log_step(&g);
    g = g0;
    if f.iter().chain(g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow("Sinkhorn potentials"));
    }

    let mut k = stabilized_kernel(&lm, &f, &g);
    let mut u = Array1::<f64>::ones(rows.len());
    let mut v = Array1::<f64>::ones(cols.len());
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut violation;
    loop {
        let kv = k.dot(&v);
        let errors = u
            .iter()
            .zip(kv.iter())
            .zip(ra.iter())
            .map(|((ui, kvi), ai)| (ui * kvi - ai).abs());
        // L1 error is non-increasing under Sinkhorn updates; L-inf need not be
        let (l1, linf) = errors.fold((0.0, 0.0f64), |(s, m), e| (s + e, m.max(e)));
        violation = linf;
        history.push(l1);
        if violation <= tol || iterations >= max_iter {
            break;
        }
        iterations += 1;
        let u_new = &ra / &kv;
        let ktu = k.t().dot(&u_new);
        let v_new = &rb / &ktu;
        let healthy = |x: &f64| x.is_finite() && *x > 0.0;
        if !(u_new.iter().all(healthy) && v_new.iter().all(healthy)) {
            // A kernel row or column underflowed: fold the last good
            // scalings in and take an exact log-domain step.
            g = &g + &v.mapv(f64::ln);
            let (f1, g1) = log_step(&g);
            f = f1;
            g = g1;
            k = stabilized_kernel(&lm, &f, &g);
            u.fill(1.0);
            v.fill(1.0);
            continue;
        }
        u = u_new;
        v = v_new;
        let big = u.iter().chain(v.iter()).any(|x| x.ln().abs() > ABSORB_LOG);
        if big {
            f = &f + &u.mapv(f64::ln);
            g = &g + &v.mapv(f64::ln);
            k = stabilized_kernel(&lm, &f, &g);
            u.fill(1.0);
            v.fill(1.0);
        }
    }
    f = &f + &u.mapv(f64::ln);
    g = &g + &v.mapv(f64::ln);

    let mut full_f = Array1::from_elem(n, f64::NEG_INFINITY);
    let mut full_g = Array1::from_elem(m, f64::NEG_INFINITY);
    for (r, &i) in rows.iter().enumerate() {
        full_f[i] = f[r];
    }
    for (c, &j) in cols.iter().enumerate() {
        full_g[j] = g[c];
    }
    Ok(ScalingOutcome {
        f: full_f,
        g: full_g,
        iterations,
        violation,
        history,
        converged: violation <= tol,
    })
}

/// Options for [`sinkhorn_with`].
#[derive(Debug, Clone)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Disable to iterate on the raw kernel `exp(-C / epsilon)`; only for
    /// cross-checks on benign instances.
    pub stabilized: bool,
}

impl SinkhornOptions {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            tol: DEFAULT_SINKHORN_TOL,
            max_iter: DEFAULT_SINKHORN_MAX_ITER,
            stabilized: true,
        }
    }
}

/// Entropic OT report, including the per-iteration violation history.
#[derive(Debug, Clone)]
pub struct SinkhornReport {
    pub result: OtResult,
    /// L1 row-marginal error before each update; non-increasing.
    pub violation_history: Vec<f64>,
}

fn check_cost(cost: &Array2<f64>, a: &SimplexWeights, b: &SimplexWeights) -> Result<()> {
    if cost.nrows() != a.len() {
        return Err(Error::SizeMismatch {
            expected: a.len(),
            found: cost.nrows(),
            context: "cost rows vs source weights",
        });
    }
    if cost.ncols() != b.len() {
        return Err(Error::SizeMismatch {
            expected: b.len(),
            found: cost.ncols(),
            context: "cost columns vs target weights",
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParameter("cost matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Entropic OT that always returns its final iterate, flagging non-convergence.
pub fn sinkhorn_with(
    cost: &Array2<f64>,
    a: &SimplexWeights,
    b: &SimplexWeights,
    opts: &SinkhornOptions,
) -> Result<SinkhornReport> {
    check_cost(cost, a, b)?;
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon = {}", opts.epsilon)));
    }
    let (p, iterations, violation, history) = if opts.stabilized {
        let log_m = cost.mapv(|c| -c / opts.epsilon);
        let out = scale_log_kernel(log_m.view(), a.as_slice(), b.as_slice(), None, opts.tol, opts.max_iter)?;
        (out.plan(log_m.view()), out.iterations, out.violation, out.history)
    } else {
        raw_sinkhorn(cost, a, b, opts)?
    };
    let cost_value = frobenius(p.view(), cost.view());
    Ok(SinkhornReport {
        result: OtResult {
            plan: Coupling::from_solver(p, a.clone(), b.clone()),
            cost: cost_value,
            iterations,
            marginal_violation: violation,
            converged: violation <= opts.tol,
        },
        violation_history: history,
    })
}

fn raw_sinkhorn(
    cost: &Array2<f64>,
    a: &SimplexWeights,
    b: &SimplexWeights,
    opts: &SinkhornOptions,
) -> Result<(Array2<f64>, usize, f64, Vec<f64>)> {
    let k = cost.mapv(|c| (-c / opts.epsilon).exp());
    let ra = a.to_array();
    let rb = b.to_array();
    let mut u = Array1::<f64>::ones(a.len());
    let mut v = Array1::<f64>::ones(b.len());
    let mut history = Vec::new();
    let mut iterations = 0;
    let overflow = |x: &Array1<f64>| x.iter().any(|t| !t.is_finite());
    loop {
        let kv = k.dot(&v);
        let errors = u
            .iter()
            .zip(kv.iter())
            .zip(ra.iter())
            .map(|((ui, kvi), ai)| (ui * kvi - ai).abs());
        let (l1, violation) = errors.fold((0.0, 0.0f64), |(s, m), e| (s + e, m.max(e)));
        if !violation.is_finite() {
            return Err(Error::NumericalOverflow("raw Sinkhorn kernel"));
        }
        history.push(l1);
        if violation <= opts.tol || iterations >= opts.max_iter {
            let p = Array2::from_shape_fn(k.dim(), |(i, j)| u[i] * k[[i, j]] * v[j]);
            return Ok((p, iterations, violation, history));
        }
        iterations += 1;
        u = Array1::from_shape_fn(a.len(), |i| if ra[i] > 0.0 { ra[i] / kv[i] } else { 0.0 });
        let ktu = k.t().dot(&u);
        v = Array1::from_shape_fn(b.len(), |j| if rb[j] > 0.0 { rb[j] / ktu[j] } else { 0.0 });
        if overflow(&u) || overflow(&v) {
            return Err(Error::NumericalOverflow("raw Sinkhorn kernel"));
        }
    }
}

/// Entropic OT; fails with `NotConverged` when `tol` is not reached within
/// `max_iter`. Use [`sinkhorn_with`] to keep the final iterate in that case.
pub fn sinkhorn(
    cost: &Array2<f64>,
    a: &SimplexWeights,
    b: &SimplexWeights,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<OtResult> {
    let opts = SinkhornOptions {
        epsilon,
        tol,
        max_iter,
        stabilized: true,
    };
    let report = sinkhorn_with(cost, a, b, &opts)?;
    if !report.result.converged {
        return Err(Error::NotConverged {
            iterations: report.result.iterations,
            violation: report.result.marginal_violation,
        });
    }
    Ok(report.result)
}

/// Exact OT by the transportation network simplex.
pub fn exact_ot(cost: &Array2<f64>, a: &SimplexWeights, b: &SimplexWeights) -> Result<OtResult> {
    check_cost(cost, a, b)?;
    let (n, m) = cost.dim();
    let size = n.saturating_mul(m);
    if size > EXACT_OT_BOUND {
        return Err(Error::SizeBoundExceeded {
            size,
            bound: EXACT_OT_BOUND,
            context: "exact OT",
        });
    }
    let (sa, sb): (f64, f64) = (a.as_slice().iter().sum(), b.as_slice().iter().sum());
    if (sa - sb).abs() > MASS_TOL {
        return Err(Error::InfeasibleMarginals { a: sa, b: sb });
    }
    let p = NetworkSimplex::new(cost.view(), a.as_slice(), b.as_slice()).solve();
    let value = frobenius(p.view(), cost.view());
    let plan = Coupling::from_solver(p, a.clone(), b.clone());
    let violation = plan.marginal_violation();
    Ok(OtResult {
        plan,
        cost: value,
        iterations: 0,
        marginal_violation: violation,
        converged: true,
    })
}

/// Transportation simplex on a spanning-tree basis of `n + m - 1` cells.
///
/// Tree nodes are rows `0..n` and columns `n..n + m`.
struct NetworkSimplex<'a> {
    cost: ArrayView2<'a, f64>,
    n: usize,
    m: usize,
    basis: Vec<(usize, usize)>,
    flow: Vec<f64>,
}

impl<'a> NetworkSimplex<'a> {
    fn new(cost: ArrayView2<'a, f64>, a: &[f64], b: &[f64]) -> Self {
        let (n, m) = cost.dim();
        // Northwest-corner rule: a staircase path, hence a spanning tree.
        let mut supply = a.to_vec();
        let mut demand = b.to_vec();
        let (mut i, mut j) = (0, 0);
        let mut basis = Vec::with_capacity(n + m - 1);
        let mut flow = Vec::with_capacity(n + m - 1);
        loop {
            let x = supply[i].min(demand[j]).max(0.0);
            basis.push((i, j));
            flow.push(x);
            supply[i] -= x;
            demand[j] -= x;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if j == m - 1 || (i < n - 1 && supply[i] <= demand[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self {
            cost,
            n,
            m,
            basis,
            flow,
        }
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n + self.m];
        for (e, &(i, j)) in self.basis.iter().enumerate() {
            adj[i].push((self.n + j, e));
            adj[self.n + j].push((i, e));
        }
        adj
    }

    /// Potentials with `u_i + v_j = c_ij` on every basic cell.
    fn potentials(&self, adj: &[Vec<(usize, usize)>]) -> (Vec<f64>, Vec<f64>) {
        let mut pot = vec![f64::NAN; self.n + self.m];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &(next, e) in &adj[node] {
                if pot[next].is_nan() {
                    let (i, j) = self.basis[e];
                    pot[next] = self.cost[[i, j]] - pot[node];
                    queue.push_back(next);
                }
            }
        }
        let v = pot.split_off(self.n);
        (pot, v)
    }

    /// Basic cells on the tree path from column node `n + q` to row node `p`.
    fn tree_path(&self, adj: &[Vec<(usize, usize)>], p: usize, q: usize) -> Vec<usize> {
        let total = self.n + self.m;
        let mut parent = vec![usize::MAX; total];
        let mut parent_edge = vec![usize::MAX; total];
        parent[p] = p;
        let mut queue = VecDeque::from([p]);
        while let Some(node) = queue.pop_front() {
            if node == self.n + q {
                break;
            }
            for &(next, e) in &adj[node] {
                if parent[next] == usize::MAX {
                    parent[next] = node;
                    parent_edge[next] = e;
                    queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = self.n + q;
        while node != p {
            path.push(parent_edge[node]);
            node = parent[node];
        }
        path
    }

    fn solve(mut self) -> Array2<f64> {
        let scale = self.cost.iter().fold(0.0f64, |s, c| s.max(c.abs())).max(1.0);
        let opt_tol = 1e-12 * scale;
        let max_pivots = 50 * (self.n + self.m) * (self.n + self.m) + 1000;
        let mut degenerate_run = 0usize;
        for _ in 0..max_pivots {
            let adj = self.adjacency();
            let (u, v) = self.potentials(&adj);
            // Dantzig pricing, switching to first-improving after long runs
            // of degenerate pivots to avoid cycling.
            let bland = degenerate_run > self.n + self.m;
            let mut entering = None;
            let mut best = -opt_tol;
            'scan: for i in 0..self.n {
                for j in 0..self.m {
                    let r = self.cost[[i, j]] - u[i] - v[j];
                    if r < best {
                        best = r;
                        entering = Some((i, j));
                        if bland {
                            break 'scan;
                        }
                    }
                }
            }
            let Some((p, q)) = entering else { break };
            let path = self.tree_path(&adj, p, q);
            // Path edges alternate -, +, -, ... starting next to column q.
            let mut theta = f64::INFINITY;
            let mut leave = usize::MAX;
            for (k, &e) in path.iter().enumerate() {
                if k % 2 == 0 && (self.flow[e] < theta || (self.flow[e] == theta && e < leave)) {
                    theta = self.flow[e];
                    leave = e;
                }
            }
            for (k, &e) in path.iter().enumerate() {
                if k % 2 == 0 {
                    self.flow[e] -= theta;
                } else {
                    self.flow[e] += theta;
                }
            }
            degenerate_run = if theta > 0.0 { 0 } else { degenerate_run + 1 };
            self.basis[leave] = (p, q);
            self.flow[leave] = theta;
        }
        let mut plan = Array2::zeros((self.n, self.m));
        for (&(i, j), &x) in self.basis.iter().zip(&self.flow) {
            plan[[i, j]] += x.max(0.0);
        }
        plan
    }
}

/// Solver used by [`wasserstein2`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum W2Method {
    Exact,
    Entropic { epsilon: f64 },
}

/// Wasserstein-2 distance between two weightings of a reference space.
pub fn wasserstein2(
    space: &ReferenceSpace,
    mu1: &SimplexWeights,
    mu2: &SimplexWeights,
    method: W2Method,
) -> Result<f64> {
    for mu in [mu1, mu2] {
        if mu.len() != space.len() {
            return Err(Error::SizeMismatch {
                expected: space.len(),
                found: mu.len(),
                context: "weights vs reference space",
            });
        }
    }
    let cost = space.dist.squared();
    let value = match method {
        W2Method::Exact => exact_ot(&cost, mu1, mu2)?.cost,
        W2Method::Entropic { epsilon } => {
            sinkhorn(
                &cost,
                mu1,
                mu2,
                epsilon,
                DEFAULT_SINKHORN_TOL,
                DEFAULT_SINKHORN_MAX_ITER,
            )?
            .cost
        }
    };
    Ok(value.max(0.0).sqrt())
}

/// Quantile function of a discrete measure on `[0, 1)` extended to the
/// real line by `Q(t + 1) = Q(t) + 1`.
struct PeriodicQuantile<'a> {
    pos: &'a [f64],
    cum: Vec<f64>,
}

impl<'a> PeriodicQuantile<'a> {
    fn new(pos: &'a [f64], w: &[f64]) -> Self {
        let mut acc = 0.0;
        let cum = w
            .iter()
            .map(|x| {
                acc += x;
                acc
            })
            .collect();
        Self { pos, cum }
    }

    fn eval(&self, t: f64) -> f64 {
        let k = t.floor();
        let s = t - k;
        let idx = self.cum.partition_point(|&c| c <= s).min(self.pos.len() - 1);
        self.pos[idx] + k
    }
}

/// Squared W2 on a circle of circumference `2 pi` between weightings of
/// the given angles.
///
/// Transport on the circle is a monotone rearrangement on the lifted line
/// after the best cyclic shift `theta` of the target quantile function.
/// The lifted cost is piecewise linear in `theta`, so it is enough to
/// evaluate every breakpoint `F_b(y_l) - F_a(x_k)` (and its integer shifts).
pub fn circular_w2_squared(angles: &[f64], a: &[f64], b: &[f64]) -> Result<f64> {
    let n = angles.len();
    if a.len() != n || b.len() != n {
        return Err(Error::SizeMismatch {
            expected: n,
            found: a.len().min(b.len()),
            context: "circular weights",
        });
    }
    let two_pi = 2.0 * PI;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| angles[i].rem_euclid(two_pi).total_cmp(&angles[j].rem_euclid(two_pi)));
    let pos: Vec<f64> = order.iter().map(|&i| angles[i].rem_euclid(two_pi) / two_pi).collect();
    let wa: Vec<f64> = order.iter().map(|&i| a[i]).collect();
    let wb: Vec<f64> = order.iter().map(|&i| b[i]).collect();
    let qa = PeriodicQuantile::new(&pos, &wa);
    let qb = PeriodicQuantile::new(&pos, &wb);

    let mut cuts_a: Vec<f64> = qa.cum.iter().copied().filter(|c| *c < 1.0).collect();
    cuts_a.insert(0, 0.0);
    let cost_at = |theta: f64| -> f64 {
        let mut cuts = cuts_a.clone();
        cuts.extend(qb.cum.iter().map(|c| (c - theta).rem_euclid(1.0)));
        cuts.push(1.0);
        cuts.sort_by(f64::total_cmp);
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let len = w[1] - w[0];
            if len <= 0.0 {
                continue;
            }
            let s = 0.5 * (w[0] + w[1]);
            let d = qa.eval(s) - qb.eval(s + theta);
            total += len * d * d;
        }
        total
    };
    let mut candidates: Vec<f64> = Vec::with_capacity(3 * n * n + 1);
    for &ca in std::iter::once(&0.0).chain(qa.cum.iter()) {
        for &cb in std::iter::once(&0.0).chain(qb.cum.iter()) {
            for shift in [-1.0, 0.0, 1.0] {
                candidates.push(cb - ca + shift);
            }
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let best = candidates
        .par_iter()
        .map(|&t| cost_at(t))
        .reduce(|| f64::INFINITY, f64::min);
    Ok(best * two_pi * two_pi)
}

/// W2 on the circle; see [`circular_w2_squared`].
pub fn circular_w2(angles: &[f64], a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(circular_w2_squared(angles, a, b)?.sqrt())
}
