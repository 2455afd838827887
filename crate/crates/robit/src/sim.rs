//! Forward simulation of kernel errors and choices, shared by the data
//! generator, the posterior-predictive simulator and validation harnesses.

use nalgebra::DMatrix;

use crate::distributions::{sample_scaled_chi2, sample_std_normal};
use crate::error::{Error, Result};
use crate::model::{choice_from_latent, Kernel};
use crate::rng::RngStream;

/// Lower Cholesky factor of a covariance, flattened row-major for
/// allocation-free error draws.
pub fn chol_flat(cov: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = cov.nrows();
    let chol = nalgebra::Cholesky::new(cov.clone())
        .ok_or_else(|| Error::numerical("covariance is not positive definite"))?;
    let l = chol.l();
    let mut flat = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..=r {
            flat[r * d + c] = l[(r, c)];
        }
    }
    Ok(flat)
}

/// Draws the latent scales of one observation into `scales`
/// (`scales.len()` = 0 for MNP, 1 for MNR, S for Gen-MNR).
pub fn draw_scales_into(
    kernel: Kernel,
    nu: &[f64],
    rng: &mut RngStream,
    scales: &mut [f64],
) -> Result<()> {
    match kernel {
        Kernel::Mnp => {}
        Kernel::Mnr => scales[0] = sample_scaled_chi2(nu[0], rng)?,
        Kernel::GenMnr => {
            for (s, out) in scales.iter_mut().enumerate() {
                *out = sample_scaled_chi2(nu[s], rng)?;
            }
        }
    }
    Ok(())
}

/// Draws one kernel error `eps = Q^{-1/2} L z` into `eps`, given the
/// flattened lower Cholesky factor `l_flat` of Sigma and the latent scales
/// drawn by [`draw_scales_into`]. `group_of_dim` maps each dimension to its
/// scale index (all zeros outside Gen-MNR).
pub fn draw_error_into(
    kernel: Kernel,
    l_flat: &[f64],
    d: usize,
    scales: &[f64],
    group_of_dim: &[usize],
    rng: &mut RngStream,
    z: &mut [f64],
    eps: &mut [f64],
) {
    for zi in z.iter_mut().take(d) {
        *zi = sample_std_normal(rng);
    }
    for r in 0..d {
        let mut acc = 0.0;
        for m in 0..=r {
            acc += l_flat[r * d + m] * z[m];
        }
        eps[r] = acc;
    }
    match kernel {
        Kernel::Mnp => {}
        Kernel::Mnr => {
            let s = scales[0].sqrt();
            for e in eps.iter_mut().take(d) {
                *e /= s;
            }
        }
        Kernel::GenMnr => {
            for r in 0..d {
                eps[r] /= scales[group_of_dim[r]].sqrt();
            }
        }
    }
}

/// Simulates `(q, w, y)` for every observation of a fixed design, given the
/// parameters. Returns choices in row space.
pub struct ForwardDraw {
    pub w: Vec<f64>,
    /// Latent scales, laid out `[obs][scale]` (empty for MNP).
    pub q: Vec<f64>,
    pub y: Vec<u32>,
}

/// Forward-simulates latents and choices on the design of `xb`
/// (`xb[i*d + r] = X_i beta`, precomputed by the caller).
pub fn forward_from_linear_predictor(
    kernel: Kernel,
    xb: &[f64],
    n: usize,
    d: usize,
    sigma: &DMatrix<f64>,
    nu: &[f64],
    group_of_dim: &[usize],
    rng: &mut RngStream,
) -> Result<ForwardDraw> {
    let l_flat = chol_flat(sigma)?;
    let n_scales = match kernel {
        Kernel::Mnp => 0,
        Kernel::Mnr => 1,
        Kernel::GenMnr => nu.len(),
    };
    let mut w = vec![0.0; n * d];
    let mut q = vec![1.0; n * n_scales];
    let mut y = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    let mut eps = vec![0.0; d];
    let mut scales = vec![1.0; n_scales];
    for i in 0..n {
        draw_scales_into(kernel, nu, rng, &mut scales)?;
        draw_error_into(kernel, &l_flat, d, &scales, group_of_dim, rng, &mut z, &mut eps);
        for r in 0..d {
            w[i * d + r] = xb[i * d + r] + eps[r];
        }
        q[i * n_scales..(i + 1) * n_scales].copy_from_slice(&scales);
        y.push(choice_from_latent(&w[i * d..(i + 1) * d]));
    }
    Ok(ForwardDraw { w, q, y })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnr_error_covariance_matches_sigma_at_large_nu() {
        // At nu = 1e6 the scale mixture degenerates to the Gaussian, so the
        // empirical covariance of errors approaches Sigma.
        let d = 2;
        let sigma = DMatrix::from_row_slice(d, d, &[1.4, 0.5, 0.5, 0.9]);
        let l = chol_flat(&sigma).unwrap();
        let mut rng = RngStream::new(3, 0);
        let mut z = vec![0.0; d];
        let mut eps = vec![0.0; d];
        let mut scales = vec![1.0; 1];
        let group = vec![0usize; d];
        let n = 1_000_000;
        let mut acc = [0.0f64; 3];
        for _ in 0..n {
            draw_scales_into(Kernel::Mnr, &[1e6], &mut rng, &mut scales).unwrap();
            draw_error_into(Kernel::Mnr, &l, d, &scales, &group, &mut rng, &mut z, &mut eps);
            acc[0] += eps[0] * eps[0];
            acc[1] += eps[0] * eps[1];
            acc[2] += eps[1] * eps[1];
        }
        let scale = n as f64;
        assert!((acc[0] / scale - 1.4).abs() < 0.02 * 1.4);
        assert!((acc[1] / scale - 0.5).abs() < 0.02 * 1.4);
        assert!((acc[2] / scale - 0.9).abs() < 0.02 * 0.9);
    }

    #[test]
    fn genmnr_marginals_scale_like_univariate_t() {
        // Each marginal of the NECT error is t with its block's DOF; at
        // nu = 6 the variance is nu/(nu-2) * Sigma_jj = 1.5 * Sigma_jj.
        let d = 2;
        let sigma = DMatrix::from_row_slice(d, d, &[1.0, 0.3, 0.3, 1.0]);
        let l = chol_flat(&sigma).unwrap();
        let mut rng = RngStream::new(4, 0);
        let mut z = vec![0.0; d];
        let mut eps = vec![0.0; d];
        let mut scales = vec![1.0; 2];
        let group = vec![0usize, 1];
        let nu = [6.0, 1e6];
        let n = 2_000_000;
        let mut var = [0.0f64; 2];
        for _ in 0..n {
            draw_scales_into(Kernel::GenMnr, &nu, &mut rng, &mut scales).unwrap();
            draw_error_into(Kernel::GenMnr, &l, d, &scales, &group, &mut rng, &mut z, &mut eps);
            var[0] += eps[0] * eps[0];
            var[1] += eps[1] * eps[1];
        }
        assert!((var[0] / n as f64 - 1.5).abs() < 0.03);
        assert!((var[1] / n as f64 - 1.0).abs() < 0.01);
    }
}
