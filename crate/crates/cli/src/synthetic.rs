//! Synthetic point clouds for demos and planted-correspondence checks.

use std::f64::consts::PI;

use ew_core::Error;
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn check_n(n: usize) -> Result<(), Error> {
    if n == 0 {
        return Err(Error::InvalidParameter("synthetic input needs n > 0".into()));
    }
    Ok(())
}

fn add_noise(points: &mut Array2<f64>, noise: f64, rng: &mut impl Rng) -> Result<(), Error> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise = {noise}")));
    }
    if noise > 0.0 {
        points.mapv_inplace(|v| {
            v + {
                let g: f64 = StandardNormal.sample(rng);
                noise * g
            }
        });
    }
    Ok(())
}

/// S-shaped sheet in R^3: an S-curve in the (x, z) plane extruded along y.
pub fn s_curve(n: usize, noise: f64, rng: &mut impl Rng) -> Result<Array2<f64>, Error> {
    check_n(n)?;
    let mut pts = Array2::zeros((n, 3));
    for mut row in pts.axis_iter_mut(Axis(0)) {
        let t = 3.0 * PI * (rng.random::<f64>() - 0.5);
        row[0] = t.sin();
        row[1] = 2.0 * rng.random::<f64>();
        row[2] = t.signum() * (t.cos() - 1.0);
    }
    add_noise(&mut pts, noise, rng)?;
    Ok(pts)
}

/// Swiss roll in R^3. With `hole`, a rectangle in the middle of the unrolled
/// sheet is left empty.
pub fn swiss_roll(n: usize, hole: bool, noise: f64, rng: &mut impl Rng) -> Result<Array2<f64>, Error> {
    check_n(n)?;
    let mut pts = Array2::zeros((n, 3));
    let mut i = 0;
    while i < n {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        if hole && (0.4..0.6).contains(&u) && (0.4..0.6).contains(&v) {
            continue;
        }
        let t = 1.5 * PI * (1.0 + 2.0 * u);
        pts[[i, 0]] = t * t.cos();
        pts[[i, 1]] = 21.0 * v;
        pts[[i, 2]] = t * t.sin();
        i += 1;
    }
    add_noise(&mut pts, noise, rng)?;
    Ok(pts)
}

/// Latent points on the rectangle [0, 2] x [0, 1] with a density increasing
/// in the first coordinate and decreasing in the second, so the cloud has no
/// non-trivial isometry.
pub fn planted_latent(n: usize, rng: &mut impl Rng) -> Result<Array2<f64>, Error> {
    check_n(n)?;
    let mut pts = Array2::zeros((n, 2));
    for mut row in pts.axis_iter_mut(Axis(0)) {
        row[0] = 2.0 * rng.random::<f64>().sqrt();
        row[1] = rng.random::<f64>().powf(1.5);
    }
    Ok(pts)
}

/// Maps latent rows into R^dim by a random matrix with orthonormal rows
/// (an isometry onto its image) and adds Gaussian noise.
pub fn planted_view(latent: &Array2<f64>, dim: usize, noise: f64, rng: &mut impl Rng) -> Result<Array2<f64>, Error> {
    let k = latent.ncols();
    if dim < k {
        return Err(Error::InvalidParameter(format!(
            "planted view dimension {dim} is below the latent dimension {k}"
        )));
    }
    // Gram-Schmidt on Gaussian rows.
    let mut q = Array2::<f64>::zeros((k, dim));
    for r in 0..k {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            for p in 0..r {
                let dot: f64 = (0..dim).map(|c| v[c] * q[[p, c]]).sum();
                for c in 0..dim {
                    v[c] -= dot * q[[p, c]];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for c in 0..dim {
                    q[[r, c]] = v[c] / norm;
                }
                break;
            }
        }
    }
    let mut out = latent.dot(&q);
    add_noise(&mut out, noise, rng)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn planted_view_preserves_distances_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let latent = planted_latent(30, &mut rng).unwrap();
        let view = planted_view(&latent, 5, 0.0, &mut rng).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let d0 = (&latent.row(i) - &latent.row(j)).mapv(|v| v * v).sum().sqrt();
                let d1 = (&view.row(i) - &view.row(j)).mapv(|v| v * v).sum().sqrt();
                assert!((d0 - d1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swiss_roll_hole_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = swiss_roll(400, true, 0.0, &mut rng).unwrap();
        for row in pts.rows() {
            let t = (row[0] * row[0] + row[2] * row[2]).sqrt();
            let u = (t / (1.5 * PI) - 1.0) / 2.0;
            let v = row[1] / 21.0;
            assert!(!((0.4 + 1e-9..0.6 - 1e-9).contains(&u) && (0.4 + 1e-9..0.6 - 1e-9).contains(&v)));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = s_curve(50, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = s_curve(50, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }
}
