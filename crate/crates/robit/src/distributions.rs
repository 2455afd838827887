//! Random-variate generation and the SPD matrix container used throughout
//! the samplers.
//!
//! The truncated normal uses inverse-CDF sampling whenever the truncation
//! region keeps at least `1e-10` probability mass under the untruncated law,
//! and a tail-robust exponential-proposal rejection sampler otherwise; draws
//! never leave the requested interval. The inverse Wishart is drawn through
//! the Bartlett decomposition of the Wishart for the inverted scale.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::special::{norm_cdf, norm_quantile, norm_sf};

/// Mass threshold below which the truncated normal switches to rejection
/// sampling in the tail.
const TN_INVERSE_CDF_MIN_MASS: f64 = 1e-10;

/// A symmetric positive-definite matrix, validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    m: DMatrix<f64>,
}

impl SpdMatrix {
    /// Wraps a matrix after checking symmetry (1e-12 relative) and positive
    /// definiteness (Cholesky succeeds).
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::invalid(format!(
                "SPD matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::invalid(format!(
                        "matrix is not symmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        if Cholesky::new(m.clone()).is_none() {
            return Err(Error::invalid("matrix is not positive definite"));
        }
        Ok(SpdMatrix { m })
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix {
            m: DMatrix::identity(dim, dim),
        }
    }

    /// `c * I` for `c > 0`.
    pub fn scaled_identity(dim: usize, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::invalid(format!("scale must be positive, got {c}")));
        }
        Ok(SpdMatrix {
            m: DMatrix::identity(dim, dim) * c,
        })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn cholesky(&self) -> Cholesky<f64, Dyn> {
        // Validated at construction; failure here means the entries were
        // mutated through unsafe means, so a panic is acceptable.
        Cholesky::new(self.m.clone()).expect("SPD invariant violated")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.cholesky().inverse()
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite, got {v}")))
    }
}

/// One draw from N(mu, sigma2) restricted to `[lower, upper]`.
///
/// `lower` / `upper` may be infinite. The returned value always lies inside
/// the interval.
pub fn sample_truncated_normal(
    mu: f64,
    sigma2: f64,
    lower: f64,
    upper: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    check_finite("mu", mu)?;
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!(
            "sigma2 must be positive and finite, got {sigma2}"
        )));
    }
    if !(lower < upper) {
        return Err(Error::invalid(format!(
            "truncation bounds must satisfy lower < upper, got [{lower}, {upper}]"
        )));
    }
    let sigma = sigma2.sqrt();
    let a = (lower - mu) / sigma;
    let b = (upper - mu) / sigma;
    let z = sample_truncated_std_normal(a, b, rng);
    Ok((mu + sigma * z).clamp(lower, upper))
}

/// Standardized truncated normal on `[a, b]`.
fn sample_truncated_std_normal(a: f64, b: f64, rng: &mut RngStream) -> f64 {
    // Reflect so the interval with the larger mass sits on the right of 0;
    // the tail machinery below only handles a >= 0.
    if b <= 0.0 {
        return -sample_truncated_std_normal(-b, -a, rng);
    }
    let mass = if a >= 0.0 {
        norm_sf(a) - if b.is_finite() { norm_sf(b) } else { 0.0 }
    } else {
        let pa = if a.is_finite() { norm_cdf(a) } else { 0.0 };
        norm_cdf(b.min(f64::INFINITY)) - pa
    };

    if mass >= TN_INVERSE_CDF_MIN_MASS {
        let u = rng.uniform();
        let z = if a >= 0.0 {
            // Work on the survival scale so the upper tail keeps precision.
            let sa = norm_sf(a);
            let sb = if b.is_finite() { norm_sf(b) } else { 0.0 };
            let s = (sb + u * (sa - sb)).clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
            -norm_quantile(s)
        } else {
            let pa = if a.is_finite() { norm_cdf(a) } else { 0.0 };
            let p = (pa + u * mass).clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
            norm_quantile(p)
        };
        return clamp_interval(z, a, b);
    }

    // Deep-tail regime: the whole interval sits far out in the upper tail
    // (a >= 0 after reflection, since a central interval always keeps mass).
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    let cap = if b.is_finite() {
        1.0 - (-lambda * (b - a)).exp()
    } else {
        1.0
    };
    loop {
        // Exponential proposal truncated to [a, b]; accepted draws follow the
        // normal law restricted there (Robert-style bound, valid on any
        // subinterval of [a, inf)).
        let u = rng.uniform();
        let z = a - (1.0 - u * cap).ln() / lambda;
        let d = z - lambda;
        if rng.uniform() < (-0.5 * d * d).exp() {
            return clamp_interval(z, a, b);
        }
    }
}

fn clamp_interval(z: f64, a: f64, b: f64) -> f64 {
    let lo = if a.is_finite() { a } else { f64::MIN };
    let hi = if b.is_finite() { b } else { f64::MAX };
    z.clamp(lo, hi)
}

/// One draw from chi^2_nu / nu, i.e. Gamma(nu/2, rate nu/2).
pub fn sample_scaled_chi2(nu: f64, rng: &mut RngStream) -> Result<f64> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::invalid(format!("nu must be positive, got {nu}")));
    }
    sample_gamma(0.5 * nu, 0.5 * nu, rng)
}

/// One draw from Gamma(shape, rate), strictly positive.
pub fn sample_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> Result<f64> {
    if !(shape > 0.0) || !shape.is_finite() || !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::invalid(format!(
            "gamma parameters must be positive, got shape {shape}, rate {rate}"
        )));
    }
    let dist = GammaDist::new(shape, 1.0 / rate)
        .map_err(|e| Error::invalid(format!("gamma parameters rejected: {e}")))?;
    loop {
        let x = dist.sample(rng);
        // The Marsaglia-Tsang boost can underflow to 0 for tiny shapes.
        if x > 0.0 {
            return Ok(x);
        }
    }
}

/// One standard normal draw.
pub fn sample_std_normal(rng: &mut RngStream) -> f64 {
    rng.sample(StandardNormal)
}

/// One draw from N(mean, cov).
pub fn sample_mvn(mean: &DVector<f64>, cov: &SpdMatrix, rng: &mut RngStream) -> Result<DVector<f64>> {
    if mean.len() != cov.dim() {
        return Err(Error::invalid(format!(
            "mean has length {} but covariance is {}x{}",
            mean.len(),
            cov.dim(),
            cov.dim()
        )));
    }
    let l = cov.cholesky().l();
    let z = DVector::from_fn(mean.len(), |_, _| sample_std_normal(rng));
    Ok(mean + l * z)
}

/// One draw from the inverse Wishart IW(df, scale).
///
/// Sampled through the Bartlett decomposition of the Wishart distribution for
/// the inverted scale: the Monte-Carlo mean approaches `scale / (df - dim - 1)`
/// when `df > dim + 1`.
pub fn sample_inverse_wishart(df: f64, scale: &SpdMatrix, rng: &mut RngStream) -> Result<SpdMatrix> {
    let dim = scale.dim();
    if !(df > dim as f64 - 1.0) || !df.is_finite() {
        return Err(Error::invalid(format!(
            "inverse Wishart needs df > dim - 1, got df {df} with dim {dim}"
        )));
    }
    let scale_inv = SpdMatrix::new(symmetrize(scale.inverse()))
        .map_err(|e| Error::numerical(format!("scale inverse is not SPD: {e}")))?;
    let l = scale_inv.cholesky().l();

    // Bartlett factor: lower triangular, chi draws on the diagonal.
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let chi2 = sample_gamma(0.5 * (df - i as f64), 0.5, rng)?;
        a[(i, i)] = chi2.sqrt();
        for j in 0..i {
            a[(i, j)] = sample_std_normal(rng);
        }
    }
    let la = l * a;
    let w = &la * la.transpose();
    let w_chol = Cholesky::new(w)
        .ok_or_else(|| Error::numerical("Wishart draw lost positive definiteness"))?;
    SpdMatrix::new(symmetrize(w_chol.inverse()))
        .map_err(|e| Error::numerical(format!("inverse Wishart draw rejected: {e}")))
}

/// Averages a nearly-symmetric matrix onto the symmetric manifold.
pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}
