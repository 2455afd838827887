//! Posterior summaries, convergence diagnostics and willingness-to-pay
//! reporting over retained draws.

use crate::error::{Error, Result};

/// Retained post-warm-up, thinned draws of the named parameters, per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    names: Vec<String>,
    /// `[chain][draw][parameter]`.
    chains: Vec<Vec<Vec<f64>>>,
}

impl PosteriorDraws {
    pub fn new(names: Vec<String>, chains: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if names.is_empty() || chains.is_empty() {
            return Err(Error::invalid("posterior draws need names and chains"));
        }
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != names.len() {
            return Err(Error::invalid("parameter names must be unique"));
        }
        let retained = chains[0].len();
        for (c, chain) in chains.iter().enumerate() {
            if chain.len() != retained {
                return Err(Error::invalid(format!(
                    "chain {c} has {} draws, chain 0 has {retained}",
                    chain.len()
                )));
            }
            for draw in chain {
                if draw.len() != names.len() {
                    return Err(Error::invalid("draw length does not match names"));
                }
            }
        }
        Ok(PosteriorDraws { names, chains })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn retained_per_chain(&self) -> usize {
        self.chains[0].len()
    }

    pub fn chains(&self) -> &[Vec<Vec<f64>>] {
        &self.chains
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown parameter '{name}'; available: {}",
                    self.names.join(", ")
                ))
            })
    }

    /// One parameter's draws for one chain, in retention order.
    pub fn chain_series(&self, chain: usize, param: usize) -> Vec<f64> {
        self.chains[chain].iter().map(|d| d[param]).collect()
    }

    /// One parameter's draws pooled across chains in chain order.
    pub fn pooled_series(&self, param: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_chains() * self.retained_per_chain());
        for chain in &self.chains {
            out.extend(chain.iter().map(|d| d[param]));
        }
        out
    }
}

/// Per-parameter posterior summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Posterior summary table mirroring the usual
/// mean / sd / 2.5% / 97.5% column layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn row(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Empirical quantile with linear interpolation of order statistics
/// (Hyndman-Fan type 7), over an already-sorted slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Mean / sd / quantiles of one pooled series. Statistics are computed over
/// the sorted values, so the result is exactly invariant to the order in
/// which chains were concatenated.
fn summarize_series(name: &str, series: &[f64]) -> Result<SummaryRow> {
    if series.len() < 2 {
        return Err(Error::invalid("summaries need at least 2 retained draws"));
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("draws must not contain NaN"));
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let ss = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    let sd = (ss / (n - 1.0)).sqrt();
    Ok(SummaryRow {
        name: name.to_string(),
        mean,
        sd,
        q025: quantile_sorted(&sorted, 0.025),
        q975: quantile_sorted(&sorted, 0.975),
    })
}

/// Posterior mean, standard deviation and central 95% interval per
/// parameter, pooled across chains.
pub fn summarize(draws: &PosteriorDraws) -> Result<SummaryTable> {
    if draws.retained_per_chain() * draws.n_chains() < 2 {
        return Err(Error::invalid("summaries need at least 2 retained draws"));
    }
    let mut rows = Vec::with_capacity(draws.names().len());
    for (p, name) in draws.names().iter().enumerate() {
        rows.push(summarize_series(name, &draws.pooled_series(p))?);
    }
    Ok(SummaryTable { rows })
}

/// Split potential scale reduction factor per parameter.
///
/// Every chain is split in half (the middle draw of an odd-length chain is
/// dropped), and `Rhat = sqrt(((n-1)/n W + B/n) / W)` is computed over the
/// splits. The between-split variance uses the population (1/m) convention,
/// which makes the diagnostic exactly invariant under duplicating a chain.
/// Zero-variance edge case: identical constant chains report 1.0 by
/// convention.
pub fn psrf(draws: &PosteriorDraws) -> Result<Vec<(String, f64)>> {
    if draws.retained_per_chain() < 4 {
        return Err(Error::invalid(
            "split R-hat needs at least 4 retained draws per chain",
        ));
    }
    let half = draws.retained_per_chain() / 2;
    let mut out = Vec::with_capacity(draws.names().len());
    for (p, name) in draws.names().iter().enumerate() {
        let mut split_means = Vec::with_capacity(2 * draws.n_chains());
        let mut split_vars = Vec::with_capacity(2 * draws.n_chains());
        for c in 0..draws.n_chains() {
            let series = draws.chain_series(c, p);
            let first = &series[..half];
            let second = &series[series.len() - half..];
            for part in [first, second] {
                let n = part.len() as f64;
                let mean = part.iter().sum::<f64>() / n;
                let var = part.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
                split_means.push(mean);
                split_vars.push(var);
            }
        }
        let m = split_means.len() as f64;
        let n = half as f64;
        let w = split_vars.iter().sum::<f64>() / m;
        let grand = split_means.iter().sum::<f64>() / m;
        let b_over_n = split_means
            .iter()
            .map(|v| (v - grand) * (v - grand))
            .sum::<f64>()
            / m;
        let rhat = if w == 0.0 {
            if b_over_n == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            (((n - 1.0) / n * w + b_over_n) / w).sqrt()
        };
        out.push((name.clone(), rhat));
    }
    Ok(out)
}

/// Willingness-to-pay report for a coefficient ratio.
#[derive(Debug, Clone)]
pub struct WtpSummary {
    pub numerator: String,
    pub cost: String,
    /// Variant (a): ratio of posterior means. This is what tables report.
    pub ratio_of_means: f64,
    /// Variant (b): posterior summary of the per-draw ratios.
    pub per_draw: SummaryRow,
    /// Set when the cost draws are not bounded away from zero in sign.
    pub sign_mixed_cost: bool,
}

/// Willingness to pay: the ratio of a non-price coefficient and the price
/// coefficient, reported both as ratio-of-means and as the posterior of the
/// per-draw ratio.
pub fn wtp(draws: &PosteriorDraws, numerator_name: &str, cost_name: &str) -> Result<WtpSummary> {
    let num_idx = draws.param_index(numerator_name)?;
    let cost_idx = draws.param_index(cost_name)?;
    let num = draws.pooled_series(num_idx);
    let cost = draws.pooled_series(cost_idx);
    let sign_mixed_cost = {
        let pos = cost.iter().any(|v| *v >= 0.0);
        let neg = cost.iter().any(|v| *v <= 0.0);
        pos && neg
    };
    let mean_num = num.iter().sum::<f64>() / num.len() as f64;
    let mean_cost = cost.iter().sum::<f64>() / cost.len() as f64;
    let ratios: Vec<f64> = num.iter().zip(&cost).map(|(a, b)| a / b).collect();
    Ok(WtpSummary {
        numerator: numerator_name.to_string(),
        cost: cost_name.to_string(),
        ratio_of_means: mean_num / mean_cost,
        per_draw: summarize_series(&format!("{numerator_name}/{cost_name}"), &ratios)?,
        sign_mixed_cost,
    })
}
