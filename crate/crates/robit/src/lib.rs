//! Bayesian estimation of multinomial probit (MNP) and robit (MNR, Gen-MNR)
//! discrete choice models.
//!
//! The three models share a latent-utility representation: agent `i` chooses
//! among `J` alternatives, and a `(J-1)`-vector of utility differences `w_i`
//! against a base alternative determines the observed choice. MNP gives the
//! kernel error a Gaussian law, MNR a multivariate t with a single degrees of
//! freedom parameter, and Gen-MNR a non-elliptical contoured t in which blocks
//! of utility-difference dimensions carry their own degrees of freedom.
//!
//! Estimation is by Gibbs sampling with data augmentation: latent utilities
//! are updated one coordinate at a time from univariate truncated normals,
//! latent scale variables reduce the robit kernels to conditionally Gaussian
//! form, and the nonstandard full conditionals of the degrees of freedom (and
//! of the latent scales in Gen-MNR) are handled by Metropolised Independence
//! steps with mode/curvature-matched Gamma proposals.
//!
//! The crate also ships the surrounding tooling: synthetic data generators,
//! posterior summaries and split-R̂ diagnostics, posterior predictive choice
//! probabilities, quadratic loss / Brier scores, aggregate arc elasticities
//! under attribute-perturbation scenarios, and willingness-to-pay ratios.

pub mod distributions;
pub mod error;
pub mod gibbs;
pub mod model;
pub mod posterior;
pub mod proposals;
pub mod rng;
pub mod sim;
pub mod special;

pub use error::{Error, Result};
