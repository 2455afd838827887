//! Shared helpers for the integration and acceptance suites: the Geweke
//! joint-distribution harness and two-sample Kolmogorov-Smirnov machinery.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use robit::distributions::{sample_gamma, sample_inverse_wishart, sample_mvn, SpdMatrix};
use robit::gibbs::{GibbsSampler, SamplerOptions};
use robit::model::{ChoiceDataset, Kernel, ModelSpec, PriorSpec};
use robit::rng::RngStream;
use robit::sim;

/// One compared moment in a Geweke run.
#[derive(Debug, Clone)]
pub struct GewekeRow {
    pub name: String,
    pub marginal_mean: f64,
    pub successive_mean: f64,
    pub z: f64,
}

#[derive(Debug, Clone)]
pub struct GewekeReport {
    pub rows: Vec<GewekeRow>,
}

impl GewekeReport {
    pub fn max_abs_z(&self) -> f64 {
        self.rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max)
    }

    pub fn print(&self, label: &str) {
        println!("geweke [{label}]");
        for r in &self.rows {
            println!(
                "  {:<12} marginal {:>9.5} successive {:>9.5} z {:>6.2}",
                r.name, r.marginal_mean, r.successive_mean, r.z
            );
        }
    }
}

/// Tiny-model fixture shared by the Geweke runs: N = 8, J = 3, K = 2,
/// priors proper and light-tailed enough for finite second moments of every
/// compared function.
pub struct GewekeFixture {
    pub spec: ModelSpec,
    pub data: ChoiceDataset,
    pub group_of_dim: Vec<usize>,
}

pub fn geweke_fixture(kernel: Kernel, dof_groups: Option<Vec<usize>>) -> GewekeFixture {
    let n = 8;
    let j = 3;
    let k = 2;
    let d = j - 1;
    let mut rng = RngStream::derive(900, 1, 0);
    let x: Vec<f64> = (0..n * d * k).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let y = vec![1u32; n];
    let data =
        ChoiceDataset::from_differenced(x, y, j, vec!["x1".into(), "x2".into()]).unwrap();
    let priors = PriorSpec {
        beta_mean: DVector::zeros(k),
        beta_prec: SpdMatrix::identity(k),
        rho: 12.0,
        iw_scale: SpdMatrix::identity(d),
        alpha0: 2.0,
        beta0: 0.5,
    };
    let mut spec = ModelSpec::new(kernel, priors);
    spec.dof_groups = dof_groups;
    let group_of_dim = spec.group_of_dim(j);
    GewekeFixture { spec, data, group_of_dim }
}

fn prior_draw(
    fixture: &GewekeFixture,
    rng: &mut RngStream,
) -> (DVector<f64>, DMatrix<f64>, Vec<f64>) {
    let k = fixture.data.n_coefficients();
    let priors = &fixture.spec.priors;
    let beta_cov = SpdMatrix::new(priors.beta_prec.inverse()).unwrap();
    let beta = sample_mvn(&DVector::zeros(k), &beta_cov, rng).unwrap();
    let sigma = sample_inverse_wishart(priors.rho, &priors.iw_scale, rng)
        .unwrap()
        .into_matrix();
    let n_dof = fixture.spec.n_dof(fixture.data.n_alternatives());
    let nu: Vec<f64> = (0..n_dof)
        .map(|_| sample_gamma(priors.alpha0, priors.beta0, rng).unwrap())
        .collect();
    (beta, sigma, nu)
}

fn moment_names(k: usize, d: usize, n_dof: usize) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..k {
        names.push(format!("beta{}", i + 1));
        names.push(format!("beta{}^2", i + 1));
    }
    for r in 0..d {
        for c in 0..=r {
            names.push(format!("sigma{}{}", r + 1, c + 1));
            names.push(format!("sigma{}{}^2", r + 1, c + 1));
        }
    }
    for s in 0..n_dof {
        names.push(format!("nu{}", s + 1));
        names.push(format!("nu{}^2", s + 1));
    }
    names
}

fn moments(beta: &DVector<f64>, sigma: &DMatrix<f64>, nu: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for v in beta.iter() {
        out.push(*v);
        out.push(v * v);
    }
    for r in 0..sigma.nrows() {
        for c in 0..=r {
            let v = sigma[(r, c)];
            out.push(v);
            out.push(v * v);
        }
    }
    for v in nu {
        out.push(*v);
        out.push(v * v);
    }
}

fn xb_for(data: &ChoiceDataset, beta: &DVector<f64>) -> Vec<f64> {
    let d = data.n_rows();
    let k = data.n_coefficients();
    let mut xb = vec![0.0; data.n() * d];
    for i in 0..data.n() {
        for r in 0..d {
            let row = data.x_row(i, r);
            let mut acc = 0.0;
            for c in 0..k {
                acc += row[c] * beta[c];
            }
            xb[i * d + r] = acc;
        }
    }
    xb
}

/// Runs the marginal-conditional (iid prior) and successive-conditional
/// (Gibbs sweep + data regeneration) simulators and compares first and
/// second moments of every parameter, in Monte-Carlo standard errors.
pub fn geweke_compare(
    kernel: Kernel,
    dof_groups: Option<Vec<usize>>,
    trace_rescale: bool,
    iterations: usize,
    seed: u64,
) -> GewekeReport {
    let fixture = geweke_fixture(kernel, dof_groups);
    let mut data = fixture.data.clone();
    let n = data.n();
    let d = data.n_rows();
    let k = data.n_coefficients();
    let n_dof = fixture.spec.n_dof(data.n_alternatives());
    let names = moment_names(k, d, n_dof);
    let n_fn = names.len();

    // Marginal-conditional simulator: iid prior draws.
    let mut rng_m = RngStream::derive(seed, 2, 0);
    let mut marginal = vec![Vec::with_capacity(iterations); n_fn];
    let mut buf = Vec::new();
    for _ in 0..iterations {
        let (beta, sigma, nu) = prior_draw(&fixture, &mut rng_m);
        moments(&beta, &sigma, &nu, &mut buf);
        for (f, v) in buf.iter().enumerate() {
            marginal[f].push(*v);
        }
    }

    // Successive-conditional simulator: start at a prior draw, alternate one
    // Gibbs sweep with a full regeneration of (q, w, y) given the state.
    let mut rng_s = RngStream::derive(seed, 3, 0);
    let options = SamplerOptions {
        trace_rescale,
        ..Default::default()
    };
    let (beta0, sigma0, nu0) = prior_draw(&fixture, &mut rng_s);
    let xb0 = xb_for(&data, &beta0);
    let fwd = sim::forward_from_linear_predictor(
        kernel,
        &xb0,
        n,
        d,
        &sigma0,
        &nu0,
        &fixture.group_of_dim,
        &mut rng_s,
    )
    .unwrap();
    data.set_choices(fwd.y).unwrap();
    let mut sampler = GibbsSampler::new(&fixture.spec, &data, seed, 77, options).unwrap();
    {
        let state = sampler.state_mut();
        state.beta = beta0;
        state.sigma = sigma0;
        if !nu0.is_empty() {
            state.nu = nu0;
        }
        state.w = fwd.w;
        if !fwd.q.is_empty() {
            state.q = fwd.q;
        }
    }
    sampler.refresh_caches(&data).unwrap();

    let mut successive = vec![Vec::with_capacity(iterations); n_fn];
    for _ in 0..iterations {
        sampler.sweep(&data).unwrap();
        moments(
            &sampler.state().beta,
            &sampler.state().sigma,
            &sampler.state().nu,
            &mut buf,
        );
        for (f, v) in buf.iter().enumerate() {
            successive[f].push(*v);
        }
        // Regenerate the data and latents from the current parameters.
        let xb = xb_for(&data, &sampler.state().beta);
        let sigma = sampler.state().sigma.clone();
        let nu = sampler.state().nu.clone();
        let fwd = sim::forward_from_linear_predictor(
            kernel,
            &xb,
            n,
            d,
            &sigma,
            &nu,
            &fixture.group_of_dim,
            sampler.rng_mut(),
        )
        .unwrap();
        data.set_choices(fwd.y).unwrap();
        let state = sampler.state_mut();
        state.w = fwd.w;
        if !fwd.q.is_empty() {
            state.q = fwd.q;
        }
        sampler.refresh_caches(&data).unwrap();
    }

    let rows = names
        .into_iter()
        .enumerate()
        .map(|(f, name)| {
            let (m_mean, m_se) = iid_mean_se(&marginal[f]);
            let (s_mean, s_se) = batch_mean_se(&successive[f], 100);
            let se = (m_se * m_se + s_se * s_se).sqrt();
            GewekeRow {
                name,
                marginal_mean: m_mean,
                successive_mean: s_mean,
                z: (m_mean - s_mean) / se,
            }
        })
        .collect();
    GewekeReport { rows }
}

pub fn iid_mean_se(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean and batch-means standard error for an autocorrelated series.
pub fn batch_mean_se(series: &[f64], n_batches: usize) -> (f64, f64) {
    let len = series.len() / n_batches * n_batches;
    let batch = len / n_batches;
    let mut means = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let chunk = &series[b * batch..(b + 1) * batch];
        means.push(chunk.iter().sum::<f64>() / batch as f64);
    }
    let grand = means.iter().sum::<f64>() / n_batches as f64;
    let var = means
        .iter()
        .map(|v| (v - grand) * (v - grand))
        .sum::<f64>()
        / (n_batches as f64 - 1.0);
    (grand, (var / n_batches as f64).sqrt())
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (a.len(), b.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// Critical value of the two-sample KS statistic at level `alpha`.
pub fn ks_critical(alpha: f64, n: usize, m: usize) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}
