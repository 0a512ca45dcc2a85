//! Log-domain linear algebra helpers.
//!
//! Gibbs kernels at small regularization have entries far below the smallest
//! representable `f64`, so every contraction that touches a kernel is done
//! with log-sum-exp reductions.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;

/// `exp` arguments below this underflow to exactly zero.
const EXP_UNDERFLOW: f64 = -745.0;

/// `log(sum(exp(values)))`, returning `-inf` for an empty or all `-inf` input.
pub fn logsumexp<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64> + Clone,
{
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values
        .into_iter()
        .map(|v| {
            let d = v - max;
            if d < EXP_UNDERFLOW {
                0.0
            } else {
                d.exp()
            }
        })
        .sum();
    max + sum.ln()
}

fn lse_two(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (x, y) in a.iter().zip(b.iter()) {
        let s = x + y;
        if s > max {
            max = s;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x + y - max;
        if d > EXP_UNDERFLOW {
            sum += d.exp();
        }
    }
    max + sum.ln()
}

/// `out_i = LSE_j(k_ij + v_j)`.
pub fn lse_matvec(k: ArrayView2<f64>, v: ArrayView1<f64>) -> Array1<f64> {
    assert_eq!(k.ncols(), v.len());
    let mut out = Array1::zeros(k.nrows());
    Zip::from(&mut out)
        .and(k.rows())
        .par_for_each(|o, row| *o = lse_two(row, v));
    out
}

/// `out_j = LSE_i(k_ij + v_i)`.
pub fn lse_matvec_t(k: ArrayView2<f64>, v: ArrayView1<f64>) -> Array1<f64> {
    assert_eq!(k.nrows(), v.len());
    let mut out = Array1::zeros(k.ncols());
    Zip::from(&mut out)
        .and(k.columns())
        .par_for_each(|o, col| *o = lse_two(col, v));
    out
}

/// Below this, a shifted exp-domain product entry may have lost terms to
/// underflow and is recomputed exactly.
const FAST_PRODUCT_FLOOR: f64 = 1e-250;

/// Log-domain matrix product: `out_il = LSE_j(a_ij + b_jl)`.
///
/// Computed as a shifted exp-domain product
/// `exp(a - max_row) . exp(b - max_col)`; entries whose shifted sum is tiny
/// (underflow may have dropped terms) are redone with [`lse_matmul_exact`].
pub fn lse_matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows());
    let row_max: Array1<f64> = a
        .rows()
        .into_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let col_max: Array1<f64> = b
        .columns()
        .into_iter()
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    if row_max.iter().chain(col_max.iter()).any(|v| !v.is_finite()) {
        return lse_matmul_exact(a, b);
    }
    let mut ea = a.to_owned();
    Zip::from(ea.rows_mut())
        .and(&row_max)
        .par_for_each(|mut r, &mx| r.mapv_inplace(|v| (v - mx).exp()));
    let mut eb = b.to_owned();
    Zip::from(eb.columns_mut())
        .and(&col_max)
        .for_each(|mut c, &mx| c.mapv_inplace(|v| (v - mx).exp()));
    let prod = ea.dot(&eb);
    let bt = b.t().as_standard_layout().into_owned();
    let mut out = Array2::zeros(prod.dim());
    Zip::indexed(&mut out).and(&prod).par_for_each(|(i, l), o, &p| {
        *o = if p > FAST_PRODUCT_FLOOR {
            p.ln() + row_max[i] + col_max[l]
        } else {
            lse_two(a.row(i), bt.row(l))
        };
    });
    out
}

/// Log-domain matrix product evaluated entry by entry with log-sum-exp.
pub fn lse_matmul_exact(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows());
    let bt = b.t().as_standard_layout().into_owned();
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(a.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut orow, arow)| {
            for (o, bcol) in orow.iter_mut().zip(bt.rows()) {
                *o = lse_two(arow, bcol);
            }
        });
    out
}

/// `sum_ij p_ij * c_ij`, skipping zero-mass cells so that infinite costs on
/// unused cells do not poison the result.
pub fn frobenius(p: ArrayView2<f64>, c: ArrayView2<f64>) -> f64 {
    assert_eq!(p.dim(), c.dim());
    p.iter()
        .zip(c.iter())
        .filter(|(pv, _)| **pv != 0.0)
        .map(|(pv, cv)| pv * cv)
        .sum()
}

/// Largest absolute entry of the difference of two equally sized vectors.
pub fn max_abs_diff(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn fast_product_matches_exact_on_wide_ranges(
            seed in 0u64..1000,
            spread in prop::sample::select(vec![1.0, 100.0, 1e4, 1e6]),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((5, 7), |_| -spread * rng.random_range(0.0..1.0));
            let b = Array2::from_shape_fn((7, 4), |_| -spread * rng.random_range(0.0..1.0));
            let fast = lse_matmul(a.view(), b.view());
            let exact = lse_matmul_exact(a.view(), b.view());
            for (f, e) in fast.iter().zip(exact.iter()) {
                prop_assert!((f - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn logsumexp_matches_naive_on_moderate_values() {
        let v = [0.1, -2.0, 3.5];
        let naive = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(v) - naive).abs() < 1e-14);
    }

    #[test]
    fn logsumexp_survives_huge_negative_values() {
        let v = [-1e6, -1e6 - 1.0];
        let expected = -1e6 + (1.0 + (-1.0f64).exp()).ln();
        assert!((logsumexp(v) - expected).abs() < 1e-9);
        assert_eq!(logsumexp([f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn lse_matmul_matches_exp_domain_product() {
        let a = array![[0.1, -0.3, 0.2], [1.0, 0.0, -1.0]];
        let b = array![[0.5, -0.5], [0.0, 0.3], [-0.2, 0.1]];
        let got = lse_matmul(a.view(), b.view());
        let exact = lse_matmul_exact(a.view(), b.view());
        let expected = a.mapv(f64::exp).dot(&b.mapv(f64::exp)).mapv(f64::ln);
        for ((g, x), e) in got.iter().zip(exact.iter()).zip(expected.iter()) {
            assert!((g - e).abs() < 1e-13);
            assert!((x - e).abs() < 1e-13);
        }
        let v = array![0.3, -0.1];
        let mv = lse_matvec(b.view(), v.view());
        let mv_expected = b.mapv(f64::exp).dot(&v.mapv(f64::exp)).mapv(f64::ln);
        for (g, e) in mv.iter().zip(mv_expected.iter()) {
            assert!((g - e).abs() < 1e-13);
        }
        let w = array![0.3, -0.1, 0.7];
        let mt = lse_matvec_t(b.view(), w.view());
        let mt_expected = b.t().mapv(f64::exp).dot(&w.mapv(f64::exp)).mapv(f64::ln);
        for (g, e) in mt.iter().zip(mt_expected.iter()) {
            assert!((g - e).abs() < 1e-13);
        }
    }
}
