//! Relaxed embedded Wasserstein distance `EW_lambda`.
//!
//! The problem is posed over 4-plans `alpha` on `X1 x Z1 x Z2 x X2` whose X
//! marginals are the input weights. With `pi` the `Z1 x Z2` projection and
//! `gamma_i` the `Xi x Zi` projections, the objective is
//!
//! ```text
//! F(alpha) = <d_Z^2, pi> + lambda (G(gamma_1) + G(gamma_2)).
//! ```
//!
//! `F` is quadratic in `alpha`. The solver alternates between two copies
//! `alpha_1`, `alpha_2` of the bilinear relaxation with an entropic penalty
//! `eps KL(alpha | uniform)`. With one copy fixed, the cost of the other splits
//! along the chain `X1 - Z1 - Z2 - X2`:
//!
//! ```text
//! c(x1, z1, z2, x2) = 1/2 d_Z^2(z1, z2) + lambda L1(x1, z1) + lambda L2(z2, x2),
//! ```
//!
//! where `L_i` are linearized GW costs against the fixed plan. The optimal plan
//! therefore factors as `u1 K1 K2 K3 u2` (a [`ChainPlan`]) and is never
//! materialized. Only its two X marginals are constrained. Collapsing the
//! chain once per half-step leaves an `n1 x n2` log-kernel, scaled with the
//! same stabilized Sinkhorn as two-marginal OT.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gw::{gw_approximation, linearized_cost, objective_raw, GwOptions};
use crate::numeric::{frobenius, lse_matmul, lse_matvec, lse_matvec_t};
use crate::ot::{exact_ot, scale_log_kernel, ScalingOutcome, DEFAULT_SINKHORN_MAX_ITER, DEFAULT_SINKHORN_TOL};
use crate::types::{ChainPlan, Coupling, DistanceMatrix, MmSpace, ReferenceSpace, SimplexWeights};

/// Default number of outer BCD iterations.
pub const DEFAULT_BCD_ITERS: usize = 40;
/// Default entropic regularization (on normalized distances).
pub const DEFAULT_EPSILON: f64 = 1e-3;
/// Relative change of the objective below which the BCD is flagged converged.
pub const BCD_CONVERGENCE_TOL: f64 = 1e-8;
/// Allowed mismatch between the Z-marginals of `pi` and `gamma_i`.
pub const CONSISTENCY_TOL: f64 = 1e-8;
/// Cap on isometric embeddings (per input) and embedding pairs in [`ew_exact_small`].
pub const EMBEDDING_ENUMERATION_BOUND: usize = 1_000_000;

/// Starting plan of the block-coordinate descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EwInit {
    /// `xi1 x mu x mu x xi2` with `mu` uniform on Z.
    #[default]
    Product,
    /// Random log-kernels on `X1 x Z1` and `Z2 x X2` (uniform in
    /// `[-scale, scale]`), rescaled to the input weights. On inputs with a
    /// transitive symmetry (e.g. uniform circles) the product plan is a
    /// stationary point of the descent; this start leaves it.
    Perturbed { seed: u64, scale: f64 },
    /// Seeds the first fixed copy with the couplings of each input to its GW
    /// approximation on Z, the large-`lambda` limit. Avoids the collapsed
    /// local minima that the product start can reach when Z and the inputs
    /// have few symmetries.
    GwApproximation,
}

/// Solver configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwConfig {
    pub lambda: f64,
    pub epsilon: f64,
    #[serde(default = "default_bcd_iters")]
    pub bcd_iters: usize,
    #[serde(default = "default_sinkhorn_tol")]
    pub sinkhorn_tol: f64,
    #[serde(default = "default_sinkhorn_max_iter")]
    pub sinkhorn_max_iter: usize,
    #[serde(default)]
    pub init: EwInit,
}

fn default_bcd_iters() -> usize {
    DEFAULT_BCD_ITERS
}
fn default_sinkhorn_tol() -> f64 {
    DEFAULT_SINKHORN_TOL
}
fn default_sinkhorn_max_iter() -> usize {
    DEFAULT_SINKHORN_MAX_ITER
}

impl EwConfig {
    pub fn new(lambda: f64, epsilon: f64) -> Result<Self> {
        let cfg = Self {
            lambda,
            epsilon,
            bcd_iters: DEFAULT_BCD_ITERS,
            sinkhorn_tol: DEFAULT_SINKHORN_TOL,
            sinkhorn_max_iter: DEFAULT_SINKHORN_MAX_ITER,
            init: EwInit::Product,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lambda", self.lambda)?;
        positive("epsilon", self.epsilon)?;
        positive("sinkhorn_tol", self.sinkhorn_tol)?;
        if self.bcd_iters == 0 {
            return Err(Error::InvalidParameter("bcd_iters must be at least 1".into()));
        }
        if self.sinkhorn_max_iter == 0 {
            return Err(Error::InvalidParameter("sinkhorn_max_iter must be at least 1".into()));
        }
        if let EwInit::Perturbed { scale, .. } = self.init {
            positive("init scale", scale)?;
        }
        Ok(())
    }
}

/// The three partial costs of a chain-separable cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainCosts {
    /// `n1 x m`, on `X1 x Z1`.
    pub a: Array2<f64>,
    /// `m x m`, on `Z1 x Z2`.
    pub b: Array2<f64>,
    /// `m x n2`, on `Z2 x X2`.
    pub c: Array2<f64>,
}

impl ChainCosts {
    pub fn new(a: Array2<f64>, b: Array2<f64>, c: Array2<f64>) -> Result<Self> {
        let m = a.ncols();
        if b.dim() != (m, m) {
            return Err(Error::SizeMismatch {
                expected: m,
                found: b.nrows(),
                context: "chain cost Z1 x Z2",
            });
        }
        if c.nrows() != m {
            return Err(Error::SizeMismatch {
                expected: m,
                found: c.nrows(),
                context: "chain cost Z2 x X2",
            });
        }
        if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("chain costs must be finite".into()));
        }
        Ok(Self { a, b, c })
    }

    /// `(n1, m, n2)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.nrows(), self.a.ncols(), self.c.ncols())
    }
}

/// Pairwise and single projections of a chain plan, as raw arrays.
#[derive(Debug, Clone)]
pub struct ChainMarginals {
    /// `n1 x m`.
    pub gamma1: Array2<f64>,
    /// `m x m`.
    pub pi: Array2<f64>,
    /// `n2 x m`.
    pub gamma2: Array2<f64>,
    pub mu1: Array1<f64>,
    pub mu2: Array1<f64>,
    pub xi1: Array1<f64>,
    pub xi2: Array1<f64>,
}

fn exp_or_zero(e: f64) -> f64 {
    if e == f64::NEG_INFINITY {
        0.0
    } else {
        e.exp()
    }
}

/// Projections of a chain plan by log-domain contraction along the chain.
pub fn chain_marginals(plan: &ChainPlan) -> ChainMarginals {
    let (la, lb, lc) = plan.log_kernels();
    let (f, g) = plan.log_scalings();
    let (n1, m, n2) = plan.dims();
    // right messages: r3_k = LSE_l(lc_kl + g_l), r2_j = LSE_k(lb_jk + r3_k)
    let r3 = lse_matvec(lc.view(), g.view());
    let r2 = lse_matvec(lb.view(), r3.view());
    // left messages: l1_j = LSE_i(f_i + la_ij), l2_k = LSE_j(l1_j + lb_jk)
    let l1 = lse_matvec_t(la.view(), f.view());
    let l2 = lse_matvec_t(lb.view(), l1.view());
    let gamma1 = Array2::from_shape_fn((n1, m), |(i, j)| exp_or_zero(f[i] + la[[i, j]] + r2[j]));
    let pi = Array2::from_shape_fn((m, m), |(j, k)| exp_or_zero(l1[j] + lb[[j, k]] + r3[k]));
    let gamma2 = Array2::from_shape_fn((n2, m), |(l, k)| exp_or_zero(g[l] + lc[[k, l]] + l2[k]));
    let mu1 = Array1::from_shape_fn(m, |j| exp_or_zero(l1[j] + r2[j]));
    let mu2 = Array1::from_shape_fn(m, |k| exp_or_zero(l2[k] + r3[k]));
    let xi1 = gamma1.sum_axis(Axis(1));
    let xi2 = gamma2.sum_axis(Axis(1));
    ChainMarginals {
        gamma1,
        pi,
        gamma2,
        mu1,
        mu2,
        xi1,
        xi2,
    }
}

/// Projections of a plan as validated couplings and weights.
#[derive(Debug, Clone, Serialize)]
pub struct Extracted {
    pub pi: Coupling,
    pub gamma1: Coupling,
    pub gamma2: Coupling,
    pub mu1: SimplexWeights,
    pub mu2: SimplexWeights,
}

/// `pi` (`m x m`), `gamma1` (`n1 x m`), `gamma2` (`n2 x m`) and the Z-marginals.
pub fn extract(plan: &ChainPlan) -> Result<Extracted> {
    let cm = chain_marginals(plan);
    let mu1 = SimplexWeights::normalized(cm.mu1.to_vec())?;
    let mu2 = SimplexWeights::normalized(cm.mu2.to_vec())?;
    let xi1 = SimplexWeights::normalized(cm.xi1.to_vec())?;
    let xi2 = SimplexWeights::normalized(cm.xi2.to_vec())?;
    Ok(Extracted {
        pi: Coupling::from_solver(cm.pi, mu1.clone(), mu2.clone()),
        gamma1: Coupling::from_solver(cm.gamma1, xi1, mu1.clone()),
        gamma2: Coupling::from_solver(cm.gamma2, xi2, mu2.clone()),
        mu1,
        mu2,
    })
}

/// `KL(alpha | uniform)` of a chain plan of unit mass.
///
/// `log alpha = f_i + la_ij + lb_jk + lc_kl + g_l`, so the entropy is a sum
/// of pairings of the projections with the log-factors.
pub fn chain_kl(plan: &ChainPlan) -> f64 {
    let cm = chain_marginals(plan);
    chain_kl_from(plan, &cm)
}

fn chain_kl_from(plan: &ChainPlan, cm: &ChainMarginals) -> f64 {
    let (la, lb, lc) = plan.log_kernels();
    let (f, g) = plan.log_scalings();
    let (n1, m, n2) = plan.dims();
    let dot1 = |w: &Array1<f64>, l: &Array1<f64>| -> f64 {
        w.iter().zip(l).filter(|(w, _)| **w > 0.0).map(|(w, l)| w * l).sum()
    };
    let neg_entropy = dot1(&cm.xi1, f)
        + frobenius(cm.gamma1.view(), la.view())
        + frobenius(cm.pi.view(), lb.view())
        + frobenius(cm.gamma2.view(), lc.t())
        + dot1(&cm.xi2, g);
    neg_entropy + ((n1 * m * m * n2) as f64).ln()
}

fn check_space_sizes(x1: &MmSpace, x2: &MmSpace, z: &ReferenceSpace, dims: (usize, usize, usize)) -> Result<()> {
    let (n1, m, n2) = dims;
    for (expected, found, context) in [
        (x1.len(), n1, "plan rows vs first input"),
        (z.len(), m, "plan vs reference space"),
        (x2.len(), n2, "plan columns vs second input"),
    ] {
        if expected != found {
            return Err(Error::SizeMismatch {
                expected,
                found,
                context,
            });
        }
    }
    Ok(())
}

fn costs_from_marginals(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    cm: &ChainMarginals,
    lambda: f64,
) -> ChainCosts {
    let dz = z.dist.matrix();
    let mut a = linearized_cost(x1.dist.matrix(), dz, cm.gamma1.view());
    a.mapv_inplace(|v| lambda * v);
    let mut c = linearized_cost(x2.dist.matrix(), dz, cm.gamma2.view())
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    c.mapv_inplace(|v| lambda * v);
    let b = dz.mapv(|d| 0.5 * d * d);
    ChainCosts { a, b, c }
}

/// Chain costs of the half-step that keeps `fixed` frozen.
pub fn effective_costs(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    fixed: &ChainPlan,
    lambda: f64,
) -> Result<ChainCosts> {
    check_space_sizes(x1, x2, z, fixed.dims())?;
    Ok(costs_from_marginals(x1, x2, z, &chain_marginals(fixed), lambda))
}

/// `log M(i, l) = LSE_jk(la_ij + lb_jk + lc_kl)`, contracting in the cheaper order.
fn collapse(la: &Array2<f64>, lb: &Array2<f64>, lc: &Array2<f64>) -> Array2<f64> {
    if la.nrows() <= lc.ncols() {
        lse_matmul(lse_matmul(la.view(), lb.view()).view(), lc.view())
    } else {
        lse_matmul(la.view(), lse_matmul(lb.view(), lc.view()).view())
    }
}

/// Chain Sinkhorn that returns its final iterate with diagnostics.
pub(crate) fn chain_sinkhorn(
    costs: &ChainCosts,
    xi1: &SimplexWeights,
    xi2: &SimplexWeights,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
    warm_g: Option<&Array1<f64>>,
) -> Result<(ChainPlan, ScalingOutcome)> {
    let (n1, _, n2) = costs.dims();
    if xi1.len() != n1 || xi2.len() != n2 {
        return Err(Error::SizeMismatch {
            expected: n1,
            found: xi1.len(),
            context: "chain weights vs costs",
        });
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon = {epsilon}")));
    }
    let la = costs.a.mapv(|v| -v / epsilon);
    let lb = costs.b.mapv(|v| -v / epsilon);
    let lc = costs.c.mapv(|v| -v / epsilon);
    let log_m = collapse(&la, &lb, &lc);
    let out = scale_log_kernel(log_m.view(), xi1.as_slice(), xi2.as_slice(), warm_g, tol, max_iter)?;
    let plan = ChainPlan::from_log_parts(la, lb, lc, out.f.clone(), out.g.clone(), epsilon)?;
    Ok((plan, out))
}

/// Multi-marginal Sinkhorn for a chain-separable cost with only the X1 and
/// X2 marginals constrained.
///
/// Equivalent to alternating `u1 = xi1 / (K1 K2 K3 u2)` and
/// `u2 = xi2 / (K3^T K2^T K1^T u1)`; fails with `NotConverged` when the
/// marginal violation stays above `tol`.
pub fn mm_sinkhorn_chain(
    costs: &ChainCosts,
    xi1: &SimplexWeights,
    xi2: &SimplexWeights,
    epsilon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ChainPlan> {
    let (plan, out) = chain_sinkhorn(costs, xi1, xi2, epsilon, tol, max_iter, None)?;
    if !out.converged {
        return Err(Error::NotConverged {
            iterations: out.iterations,
            violation: out.violation,
        });
    }
    Ok(plan)
}

/// Terms of the unregularized objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveTerms {
    /// `<d_Z^2, pi>`.
    pub transport: f64,
    pub gw1: f64,
    pub gw2: f64,
    /// `transport + lambda (gw1 + gw2)`.
    pub total: f64,
}

fn terms_from_marginals(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    cm: &ChainMarginals,
    lambda: f64,
) -> ObjectiveTerms {
    let dz = z.dist.matrix();
    let transport = frobenius(cm.pi.view(), z.dist.squared().view());
    let gw1 = objective_raw(x1.dist.matrix(), dz, cm.gamma1.view());
    let gw2 = objective_raw(x2.dist.matrix(), dz, cm.gamma2.view());
    ObjectiveTerms {
        transport,
        gw1,
        gw2,
        total: transport + lambda * (gw1 + gw2),
    }
}

fn max_dev(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Unregularized objective split into its terms; see [`objective_f`].
pub fn objective_terms(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    pi: &Coupling,
    gamma1: &Coupling,
    gamma2: &Coupling,
    lambda: f64,
) -> Result<ObjectiveTerms> {
    let m = z.len();
    if pi.dim() != (m, m) {
        return Err(Error::SizeMismatch {
            expected: m,
            found: pi.dim().0,
            context: "pi vs reference space",
        });
    }
    if gamma1.dim() != (x1.len(), m) {
        return Err(Error::SizeMismatch {
            expected: x1.len(),
            found: gamma1.dim().0,
            context: "gamma1 vs first input",
        });
    }
    if gamma2.dim() != (x2.len(), m) {
        return Err(Error::SizeMismatch {
            expected: x2.len(),
            found: gamma2.dim().0,
            context: "gamma2 vs second input",
        });
    }
    let v1 = max_dev(&pi.row_sums(), &gamma1.col_sums());
    if v1 > CONSISTENCY_TOL {
        return Err(Error::MarginalMismatch {
            violation: v1,
            context: "pi and gamma1 on Z1",
        });
    }
    let v2 = max_dev(&pi.col_sums(), &gamma2.col_sums());
    if v2 > CONSISTENCY_TOL {
        return Err(Error::MarginalMismatch {
            violation: v2,
            context: "pi and gamma2 on Z2",
        });
    }
    let cm = ChainMarginals {
        gamma1: gamma1.matrix().clone(),
        pi: pi.matrix().clone(),
        gamma2: gamma2.matrix().clone(),
        mu1: pi.row_sums(),
        mu2: pi.col_sums(),
        xi1: gamma1.row_sums(),
        xi2: gamma2.row_sums(),
    };
    Ok(terms_from_marginals(x1, x2, z, &cm, lambda))
}

/// `<d_Z^2, pi> + lambda (G(gamma1) + G(gamma2))`.
pub fn objective_f(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    pi: &Coupling,
    gamma1: &Coupling,
    gamma2: &Coupling,
    lambda: f64,
) -> Result<f64> {
    Ok(objective_terms(x1, x2, z, pi, gamma1, gamma2, lambda)?.total)
}

/// Bilinear relaxation `F(alpha1, alpha2)`; equals [`objective_f`] on the diagonal.
pub fn bilinear_objective(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    alpha1: &ChainPlan,
    alpha2: &ChainPlan,
    lambda: f64,
) -> Result<f64> {
    check_space_sizes(x1, x2, z, alpha1.dims())?;
    check_space_sizes(x1, x2, z, alpha2.dims())?;
    let m1 = chain_marginals(alpha1);
    let m2 = chain_marginals(alpha2);
    Ok(bilinear_from(x1, x2, z, &m1, &m2, lambda))
}

fn bilinear_from(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    m1: &ChainMarginals,
    m2: &ChainMarginals,
    lambda: f64,
) -> f64 {
    let costs = costs_from_marginals(x1, x2, z, m1, lambda);
    let half_d2 = &costs.b;
    frobenius(m1.pi.view(), half_d2.view())
        + frobenius(m2.pi.view(), half_d2.view())
        + frobenius(m2.gamma1.view(), costs.a.view())
        + frobenius(m2.gamma2.view(), costs.c.t())
}

/// `F(alpha1, alpha2) + eps (KL(alpha1) + KL(alpha2))`, the quantity each
/// half-step of the descent minimizes.
pub fn regularized_objective(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    alpha1: &ChainPlan,
    alpha2: &ChainPlan,
    lambda: f64,
    epsilon: f64,
) -> Result<f64> {
    check_space_sizes(x1, x2, z, alpha1.dims())?;
    check_space_sizes(x1, x2, z, alpha2.dims())?;
    let m1 = chain_marginals(alpha1);
    let m2 = chain_marginals(alpha2);
    Ok(
        bilinear_from(x1, x2, z, &m1, &m2, lambda)
            + epsilon * (chain_kl_from(alpha1, &m1) + chain_kl_from(alpha2, &m2)),
    )
}

/// The product plan `xi1 x mu x mu x xi2`, `mu` uniform.
pub fn product_plan(xi1: &SimplexWeights, xi2: &SimplexWeights, m: usize, epsilon: f64) -> Result<ChainPlan> {
    let log_m = (m as f64).ln();
    let f = xi1.to_array().mapv(|w| w.ln() - 2.0 * log_m);
    let g = xi2.to_array().mapv(f64::ln);
    ChainPlan::from_log_parts(
        Array2::zeros((xi1.len(), m)),
        Array2::zeros((m, m)),
        Array2::zeros((m, xi2.len())),
        f,
        g,
        epsilon,
    )
}

fn perturbed_plan(
    xi1: &SimplexWeights,
    xi2: &SimplexWeights,
    m: usize,
    epsilon: f64,
    seed: u64,
    scale: f64,
) -> Result<ChainPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let la = Array2::from_shape_fn((xi1.len(), m), |_| rng.random_range(-scale..=scale));
    let lc = Array2::from_shape_fn((m, xi2.len()), |_| rng.random_range(-scale..=scale));
    let lb = Array2::zeros((m, m));
    let log_m = collapse(&la, &lb, &lc);
    let out = scale_log_kernel(log_m.view(), xi1.as_slice(), xi2.as_slice(), None, 1e-12, 100_000)?;
    ChainPlan::from_log_parts(la, lb, lc, out.f, out.g, epsilon)
}

/// Output of [`solve_ew_lambda`].
#[derive(Debug, Clone, Serialize)]
pub struct EmbedResult {
    /// `F_lambda` of the returned plan; the estimate of `EW_lambda^2`.
    pub objective: f64,
    pub terms: ObjectiveTerms,
    /// Which copy was returned: 1 or 2.
    pub selected: u8,
    pub mu1: SimplexWeights,
    pub mu2: SimplexWeights,
    pub gamma1: Coupling,
    pub gamma2: Coupling,
    pub pi: Coupling,
    /// `F_lambda(alpha_1)` after each update of `alpha_1`.
    pub trace_alpha1: Vec<f64>,
    /// `F_lambda(alpha_2)` after each update of `alpha_2`.
    pub trace_alpha2: Vec<f64>,
    /// `F_lambda` of the updated copy after every half-step.
    pub objective_trace: Vec<f64>,
    /// Regularized bilinear objective after every half-step (from the second
    /// one when the seed is not a plan).
    pub regularized_trace: Vec<f64>,
    pub bcd_iterations: usize,
    /// Relative change of the last two half-step objectives below 1e-8.
    pub converged: bool,
    /// Every inner Sinkhorn solve reached its tolerance.
    pub sinkhorn_converged: bool,
    pub max_sinkhorn_violation: f64,
    /// Scaling updates summed over half-steps, not counting the exact
    /// log-domain step each solve starts with.
    pub sinkhorn_iterations: usize,
    #[serde(skip)]
    pub plan: ChainPlan,
}

impl EmbedResult {
    /// `sqrt(objective)`.
    pub fn ew_lambda(&self) -> f64 {
        self.objective.max(0.0).sqrt()
    }
}

struct HalfStep {
    /// `None` only for a seed given by projections alone.
    plan: Option<ChainPlan>,
    marginals: ChainMarginals,
    kl: Option<f64>,
    objective: ObjectiveTerms,
}

/// Projections `gamma1`, `gamma2` from GW approximations, with `pi` the
/// product of their Z-marginals.
fn gw_approximation_seed(x1: &MmSpace, x2: &MmSpace, z: &ReferenceSpace, epsilon: f64) -> Result<ChainMarginals> {
    let opts = GwOptions::new(epsilon);
    let g1 = gw_approximation(x1, z, &opts)?.couplings.swap_remove(0).into_matrix();
    let g2 = gw_approximation(x2, z, &opts)?.couplings.swap_remove(0).into_matrix();
    let mu1 = g1.sum_axis(Axis(0));
    let mu2 = g2.sum_axis(Axis(0));
    let pi = Array2::from_shape_fn((mu1.len(), mu2.len()), |(j, k)| mu1[j] * mu2[k]);
    Ok(ChainMarginals {
        xi1: g1.sum_axis(Axis(1)),
        xi2: g2.sum_axis(Axis(1)),
        gamma1: g1,
        pi,
        gamma2: g2,
        mu1,
        mu2,
    })
}

/// `EW_lambda` by block-coordinate descent on the bilinear relaxation.
///
/// Runs `cfg.bcd_iters` outer iterations, each updating `alpha_2` then
/// `alpha_1`. Sinkhorn non-convergence does not abort the solve; it is
/// reported in the result.
pub fn solve_ew_lambda(x1: &MmSpace, x2: &MmSpace, z: &ReferenceSpace, cfg: &EwConfig) -> Result<EmbedResult> {
    cfg.validate()?;
    let m = z.len();
    let eps = cfg.epsilon;
    check_space_sizes(x1, x2, z, (x1.len(), m, x2.len()))?;
    let seed = match cfg.init {
        EwInit::Product => Some(product_plan(&x1.weights, &x2.weights, m, eps)?),
        EwInit::Perturbed { seed, scale } => Some(perturbed_plan(&x1.weights, &x2.weights, m, eps, seed, scale)?),
        EwInit::GwApproximation => None,
    };
    let seed_marginals = match &seed {
        Some(plan) => chain_marginals(plan),
        None => gw_approximation_seed(x1, x2, z, eps)?,
    };
    run_bcd(x1, x2, z, cfg, seed, seed_marginals)
}

/// Like [`solve_ew_lambda`], but both copies start from `start` instead of
/// the configured initialization. Useful for continuation in `lambda` or
/// `epsilon`, seeding each solve with the previous plan.
pub fn solve_ew_lambda_from(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    cfg: &EwConfig,
    start: &ChainPlan,
) -> Result<EmbedResult> {
    cfg.validate()?;
    check_space_sizes(x1, x2, z, start.dims())?;
    let marginals = chain_marginals(start);
    run_bcd(x1, x2, z, cfg, Some(start.clone()), marginals)
}

/// Solves once per entry of `inits` (plus once from `warm`, if given) and
/// returns the run with the smallest objective.
///
/// For large `lambda` and small `epsilon` the block updates become nearly
/// hard assignments and a single start can stall in a poor local minimum;
/// restarts are the cheap remedy. Runs are independent and execute in
/// parallel; ties go to the earliest start, so the result is deterministic.
pub fn solve_ew_lambda_multistart(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    cfg: &EwConfig,
    inits: &[EwInit],
    warm: Option<&ChainPlan>,
) -> Result<EmbedResult> {
    if inits.is_empty() && warm.is_none() {
        return Err(Error::InvalidParameter("multistart needs at least one start".into()));
    }
    let from_inits = inits.par_iter().map(|&init| {
        let mut c = cfg.clone();
        c.init = init;
        solve_ew_lambda(x1, x2, z, &c)
    });
    let mut runs: Vec<Result<EmbedResult>> = match warm {
        Some(plan) => vec![solve_ew_lambda_from(x1, x2, z, cfg, plan)],
        None => Vec::new(),
    };
    runs.par_extend(from_inits);
    let mut best: Option<EmbedResult> = None;
    for run in runs {
        let r = run?;
        if best.as_ref().is_none_or(|b| r.objective < b.objective) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one start"))
}

fn run_bcd(
    x1: &MmSpace,
    x2: &MmSpace,
    z: &ReferenceSpace,
    cfg: &EwConfig,
    seed: Option<ChainPlan>,
    seed_marginals: ChainMarginals,
) -> Result<EmbedResult> {
    let eps = cfg.epsilon;
    let make = |plan: Option<ChainPlan>, marginals: ChainMarginals| {
        let kl = plan.as_ref().map(|p| chain_kl_from(p, &marginals));
        let objective = terms_from_marginals(x1, x2, z, &marginals, cfg.lambda);
        HalfStep {
            plan,
            marginals,
            kl,
            objective,
        }
    };
    let mut copies = [make(seed.clone(), seed_marginals.clone()), make(seed, seed_marginals)];

    let mut trace_alpha = [Vec::new(), Vec::new()];
    let mut objective_trace = Vec::new();
    let mut regularized_trace = Vec::new();
    let mut warm: Option<Array1<f64>> = None;
    let mut sinkhorn_converged = true;
    let mut max_violation: f64 = 0.0;
    let mut sinkhorn_iterations = 0;
    for _ in 0..cfg.bcd_iters {
        // alpha_2 first, then alpha_1
        for target in [1usize, 0] {
            let fixed = &copies[1 - target];
            let costs = costs_from_marginals(x1, x2, z, &fixed.marginals, cfg.lambda);
            let (plan, out) = chain_sinkhorn(
                &costs,
                &x1.weights,
                &x2.weights,
                eps,
                cfg.sinkhorn_tol,
                cfg.sinkhorn_max_iter,
                warm.as_ref(),
            )?;
            sinkhorn_converged &= out.converged;
            max_violation = max_violation.max(out.violation);
            sinkhorn_iterations += out.iterations;
            warm = Some(out.g);
            let marginals = chain_marginals(&plan);
            let step = make(Some(plan), marginals);
            // <c, alpha_new> contains 1/2 <d^2, pi_new> and the lambda-weighted GW pairings.
            let linear = frobenius(step.marginals.gamma1.view(), costs.a.view())
                + frobenius(step.marginals.pi.view(), costs.b.view())
                + frobenius(step.marginals.gamma2.view(), costs.c.t());
            let fixed_half = frobenius(fixed.marginals.pi.view(), costs.b.view());
            if let (Some(fixed_kl), Some(step_kl)) = (fixed.kl, step.kl) {
                regularized_trace.push(linear + fixed_half + eps * (fixed_kl + step_kl));
            }
            objective_trace.push(step.objective.total);
            trace_alpha[target].push(step.objective.total);
            copies[target] = step;
        }
    }
    let converged = match objective_trace.as_slice() {
        [.., a, b] => (a - b).abs() <= BCD_CONVERGENCE_TOL * a.abs().max(b.abs()).max(f64::MIN_POSITIVE),
        _ => false,
    };
    let [c1, c2] = copies;
    let (selected, best) = if c1.objective.total <= c2.objective.total {
        (1, c1)
    } else {
        (2, c2)
    };
    let plan = best.plan.expect("every copy is updated at least once");
    let ex = extract(&plan)?;
    let [trace_alpha1, trace_alpha2] = trace_alpha;
    Ok(EmbedResult {
        objective: best.objective.total,
        terms: best.objective,
        selected,
        mu1: ex.mu1,
        mu2: ex.mu2,
        gamma1: ex.gamma1,
        gamma2: ex.gamma2,
        pi: ex.pi,
        trace_alpha1,
        trace_alpha2,
        objective_trace,
        regularized_trace,
        bcd_iterations: cfg.bcd_iters,
        converged,
        sinkhorn_converged,
        max_sinkhorn_violation: max_violation,
        sinkhorn_iterations,
        plan,
    })
}

/// Rescales all three spaces by one common factor so the largest distance
/// among them is 1; returns the factor that was divided out.
///
/// A common factor keeps isometric embeddings isometric. `EW` values scale
/// linearly with it and objectives quadratically.
pub fn normalize_spaces(x1: &MmSpace, x2: &MmSpace, z: &ReferenceSpace) -> (MmSpace, MmSpace, ReferenceSpace, f64) {
    let scale = x1.dist.max().max(x2.dist.max()).max(z.diameter());
    if !(scale > 0.0) {
        return (x1.clone(), x2.clone(), z.clone(), 1.0);
    }
    let shrink = |x: &MmSpace| MmSpace {
        dist: x.dist.scaled(1.0 / scale),
        weights: x.weights.clone(),
        labels: x.labels.clone(),
    };
    (shrink(x1), shrink(x2), z.rescaled(1.0 / scale), scale)
}

/// All maps of the points of `dx` into `dz` preserving distances within `tol`.
fn isometric_embeddings(dx: &Array2<f64>, dz: &Array2<f64>, tol: f64, bound: usize) -> Result<Vec<Vec<usize>>> {
    fn extend(
        cur: &mut Vec<usize>,
        dx: &Array2<f64>,
        dz: &Array2<f64>,
        tol: f64,
        bound: usize,
        out: &mut Vec<Vec<usize>>,
    ) -> Result<()> {
        let k = cur.len();
        if k == dx.nrows() {
            if out.len() == bound {
                return Err(Error::EnumerationBoundExceeded { bound });
            }
            out.push(cur.clone());
            return Ok(());
        }
        for cand in 0..dz.nrows() {
            if cur
                .iter()
                .enumerate()
                .all(|(p, &img)| (dz[[img, cand]] - dx[[p, k]]).abs() <= tol)
            {
                cur.push(cand);
                extend(cur, dx, dz, tol, bound, out)?;
                cur.pop();
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), dx, dz, tol, bound, &mut out)?;
    Ok(out)
}

fn pushforwards(x: &MmSpace, z: &ReferenceSpace, input: usize, tol: f64) -> Result<Vec<SimplexWeights>> {
    let (support, idx) = x.restrict_to_support();
    let maps = isometric_embeddings(support.dist.matrix(), z.dist.matrix(), tol, EMBEDDING_ENUMERATION_BOUND)?;
    if maps.is_empty() {
        return Err(Error::NoIsometricEmbedding { input });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for map in maps {
        let mut mu = vec![0.0; z.len()];
        for (p, &img) in map.iter().enumerate() {
            mu[img] += x.weights.as_slice()[idx[p]];
        }
        let key: Vec<u64> = mu.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            out.push(SimplexWeights::normalized(mu)?);
        }
    }
    Ok(out)
}

/// Exact `EW` for inputs whose supports embed isometrically into Z: the
/// smallest W2 between pushforwards over all pairs of isometric embeddings.
pub fn ew_exact_small(x1: &MmSpace, x2: &MmSpace, z: &ReferenceSpace) -> Result<f64> {
    let tol = 1e-9 * z.diameter().max(1.0);
    let p1 = pushforwards(x1, z, 1, tol)?;
    let p2 = pushforwards(x2, z, 2, tol)?;
    let pairs = p1.len().saturating_mul(p2.len());
    if pairs > EMBEDDING_ENUMERATION_BOUND {
        return Err(Error::EnumerationBoundExceeded {
            bound: EMBEDDING_ENUMERATION_BOUND,
        });
    }
    let cost = z.dist.squared();
    let best = (0..pairs)
        .into_par_iter()
        .map(|k| exact_ot(&cost, &p1[k / p2.len()], &p2[k % p2.len()]).map(|r| r.cost))
        .try_reduce(|| f64::INFINITY, |a, b| Ok(a.min(b)))?;
    Ok(best.max(0.0).sqrt())
}

/// Dense `F_lambda` of two raw projections, used by tests and diagnostics.
#[doc(hidden)]
pub fn objective_from_projections(
    x1: &DistanceMatrix,
    x2: &DistanceMatrix,
    z: &DistanceMatrix,
    pi: ArrayView2<f64>,
    gamma1: ArrayView2<f64>,
    gamma2: ArrayView2<f64>,
    lambda: f64,
) -> f64 {
    frobenius(pi, z.squared().view())
        + lambda * (objective_raw(x1.matrix(), z.matrix(), gamma1) + objective_raw(x2.matrix(), z.matrix(), gamma2))
}
