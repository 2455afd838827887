//! Choice datasets, model specifications and priors.
//!
//! A dataset holds, for every observation, the `(J-1) x K` matrix of
//! predictors differenced against a base alternative, plus the observed
//! choice. Internally choices live in "row space": values `1..J-1` name the
//! differenced rows (non-base alternatives in ascending id order) and `J`
//! names the base alternative. The latent-utility choice rule, samplers and
//! predictive simulators all work in that space; conversion back to the
//! original alternative ids goes through [`ChoiceDataset::alternative_id`].

use nalgebra::{DMatrix, DVector};

use crate::distributions::SpdMatrix;
use crate::error::{Error, Result};

/// Which kernel error law the model assumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// Gaussian kernel errors (multinomial probit).
    Mnp,
    /// Multivariate t kernel errors with one generic DOF (multinomial robit).
    Mnr,
    /// Non-elliptical contoured t kernel with per-block DOF (generalised MNR).
    GenMnr,
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Mnp => "mnp",
            Kernel::Mnr => "mnr",
            Kernel::GenMnr => "gen-mnr",
        }
    }

    pub fn parse(s: &str) -> Result<Kernel> {
        match s.to_ascii_lowercase().as_str() {
            "mnp" => Ok(Kernel::Mnp),
            "mnr" => Ok(Kernel::Mnr),
            "gen-mnr" | "genmnr" | "gen_mnr" => Ok(Kernel::GenMnr),
            other => Err(Error::invalid(format!(
                "unknown kernel '{other}'; valid kernels are mnp, mnr, gen-mnr"
            ))),
        }
    }
}

/// Prior hyperparameters shared by all three models.
///
/// `beta_prec` is the prior *precision* of the taste parameters, so the
/// conditional posterior of beta is `N(Bhat * sum_i psi_i, Bhat)` with
/// `Bhat = (sum_i omega_i + B0)^{-1}`. The prior mean of beta is fixed at
/// zero; that is what makes the closed-form update exact.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    /// Prior mean of beta; must be identically zero.
    pub beta_mean: DVector<f64>,
    /// B0, K x K prior precision of beta.
    pub beta_prec: SpdMatrix,
    /// Inverse-Wishart degrees of freedom rho.
    pub rho: f64,
    /// Inverse-Wishart scale S, (J-1) x (J-1).
    pub iw_scale: SpdMatrix,
    /// Gamma prior shape for each degrees-of-freedom parameter.
    pub alpha0: f64,
    /// Gamma prior rate for each degrees-of-freedom parameter.
    pub beta0: f64,
}

impl PriorSpec {
    /// Diffuse defaults: `B0 = 1e-2 I`, `rho = J + 1`, `S = I`,
    /// `nu ~ Gamma(2, 0.1)` (prior mean 20, covering heavy and near-normal
    /// tails). The paper does not report its hyperparameter values; these are
    /// artifact defaults and every one of them can be overridden in config.
    pub fn default_for(n_alternatives: usize, n_coefficients: usize) -> Self {
        let d = n_alternatives - 1;
        PriorSpec {
            beta_mean: DVector::zeros(n_coefficients),
            beta_prec: SpdMatrix::scaled_identity(n_coefficients, 1e-2)
                .expect("positive scale"),
            rho: (n_alternatives + 1) as f64,
            iw_scale: SpdMatrix::identity(d),
            alpha0: 2.0,
            beta0: 0.1,
        }
    }

    pub fn validate(&self, n_alternatives: usize, n_coefficients: usize) -> Result<()> {
        let d = n_alternatives - 1;
        if self.beta_mean.len() != n_coefficients || self.beta_mean.iter().any(|v| *v != 0.0) {
            return Err(Error::invalid(
                "prior beta mean must be identically zero (the closed-form beta update assumes it)",
            ));
        }
        if self.beta_prec.dim() != n_coefficients {
            return Err(Error::invalid(format!(
                "beta precision is {}x{} but K = {n_coefficients}",
                self.beta_prec.dim(),
                self.beta_prec.dim()
            )));
        }
        if self.iw_scale.dim() != d {
            return Err(Error::invalid(format!(
                "IW scale is {}x{} but J - 1 = {d}",
                self.iw_scale.dim(),
                self.iw_scale.dim()
            )));
        }
        if !(self.rho > n_alternatives as f64 - 2.0) {
            return Err(Error::invalid(format!(
                "IW degrees of freedom must exceed J - 2, got {}",
                self.rho
            )));
        }
        if !(self.alpha0 > 0.0 && self.beta0 > 0.0) {
            return Err(Error::invalid("Gamma prior on nu needs alpha0, beta0 > 0"));
        }
        Ok(())
    }
}

/// Full model specification: kernel, DOF grouping and priors.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kernel: Kernel,
    /// Gen-MNR only: sizes `p_s` of the dimension blocks sharing one DOF.
    /// `None` selects the default grouping `p = (1, ..., 1)`.
    pub dof_groups: Option<Vec<usize>>,
    pub priors: PriorSpec,
}

impl ModelSpec {
    pub fn new(kernel: Kernel, priors: PriorSpec) -> Self {
        ModelSpec {
            kernel,
            dof_groups: None,
            priors,
        }
    }

    /// Block sizes of the DOF grouping, resolved to the default when absent.
    pub fn groups(&self, n_alternatives: usize) -> Vec<usize> {
        match (&self.kernel, &self.dof_groups) {
            (Kernel::GenMnr, Some(p)) => p.clone(),
            (Kernel::GenMnr, None) => vec![1; n_alternatives - 1],
            _ => Vec::new(),
        }
    }

    /// Number of degrees-of-freedom parameters the kernel carries.
    pub fn n_dof(&self, n_alternatives: usize) -> usize {
        match self.kernel {
            Kernel::Mnp => 0,
            Kernel::Mnr => 1,
            Kernel::GenMnr => self.groups(n_alternatives).len(),
        }
    }

    /// Map from latent dimension `0..J-1` to its DOF group index.
    pub fn group_of_dim(&self, n_alternatives: usize) -> Vec<usize> {
        let d = n_alternatives - 1;
        match self.kernel {
            Kernel::GenMnr => {
                let mut map = Vec::with_capacity(d);
                for (s, p) in self.groups(n_alternatives).iter().enumerate() {
                    map.extend(std::iter::repeat(s).take(*p));
                }
                map
            }
            _ => vec![0; d],
        }
    }

    pub fn validate(&self, n_alternatives: usize, n_coefficients: usize) -> Result<()> {
        self.priors.validate(n_alternatives, n_coefficients)?;
        let d = n_alternatives - 1;
        match self.kernel {
            Kernel::GenMnr => {
                let p = self.groups(n_alternatives);
                let s = p.len();
                if !(s > 1 && s <= d) {
                    return Err(Error::invalid(format!(
                        "Gen-MNR needs 1 < S <= J - 1 DOF groups, got S = {s} with J - 1 = {d}"
                    )));
                }
                if p.iter().any(|v| *v == 0) || p.iter().sum::<usize>() != d {
                    return Err(Error::invalid(format!(
                        "DOF group sizes must be positive and sum to J - 1 = {d}, got {p:?}"
                    )));
                }
            }
            _ => {
                if self.dof_groups.is_some() {
                    return Err(Error::invalid(
                        "dof_groups is only meaningful for the gen-mnr kernel",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// How a design column was built; drives scenario resolution and reporting.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnKind {
    /// Alternative-specific constant for the given alternative id.
    Asc { alternative: u32 },
    /// Observed attribute; `alternatives` lists the alternative ids whose
    /// utilities the source column enters (all of them for generic datagen
    /// columns).
    Attribute { source: String, alternatives: Vec<u32> },
}

/// Observed (undifferenced) design values, kept so attribute-perturbation
/// scenarios can be applied and the differencing round-trip stays checkable.
#[derive(Debug, Clone)]
pub struct ObservedDesign {
    /// `n * j * k` design values in row-major `[obs][alternative][column]`
    /// order, in the design-column space (ASC indicators included).
    pub values: Vec<f64>,
}

/// A choice dataset with differenced predictors.
#[derive(Debug, Clone)]
pub struct ChoiceDataset {
    n: usize,
    j: usize,
    k: usize,
    /// Differenced design, `n * (j-1) * k` row-major `[obs][row][column]`.
    x: Vec<f64>,
    /// Choices in row space (`1..=J`, `J` = base alternative).
    y: Vec<u32>,
    base_alternative: u32,
    /// Non-base alternative ids in row order, then the base id last.
    row_alternatives: Vec<u32>,
    alternative_names: Vec<String>,
    coefficient_names: Vec<String>,
    column_kinds: Vec<ColumnKind>,
    observed: Option<ObservedDesign>,
}

impl ChoiceDataset {
    /// Builds a dataset from observed per-alternative attributes.
    ///
    /// `observed` is `n * j * k_obs` row-major `[obs][alternative][column]`.
    /// `asc_alternatives` lists the alternative ids that get an
    /// alternative-specific constant; the constants come first in the
    /// coefficient vector, then the attribute columns. All rows are
    /// differenced against `base_alternative`.
    pub fn build(
        observed: &[f64],
        attribute_names: &[String],
        choices: &[u32],
        n_alternatives: usize,
        base_alternative: u32,
        asc_alternatives: &[u32],
        alternative_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let j = n_alternatives;
        if j < 2 {
            return Err(Error::invalid("need at least two alternatives"));
        }
        let n = choices.len();
        let k_obs = attribute_names.len();
        if observed.len() != n * j * k_obs {
            return Err(Error::invalid(format!(
                "observed attributes have {} values, expected n*j*k_obs = {}",
                observed.len(),
                n * j * k_obs
            )));
        }
        if base_alternative == 0 || base_alternative as usize > j {
            return Err(Error::invalid(format!(
                "base alternative {base_alternative} outside 1..={j}"
            )));
        }
        let mut seen = vec![false; j];
        for &a in asc_alternatives {
            if a == 0 || a as usize > j {
                return Err(Error::invalid(format!("ASC alternative {a} outside 1..={j}")));
            }
            if seen[a as usize - 1] {
                return Err(Error::invalid(format!("duplicate ASC alternative {a}")));
            }
            seen[a as usize - 1] = true;
        }
        for (i, &c) in choices.iter().enumerate() {
            if c == 0 || c as usize > j {
                return Err(Error::Data {
                    row: i,
                    message: format!("choice {c} outside 1..={j}"),
                });
            }
        }

        let k = asc_alternatives.len() + k_obs;
        let mut kinds: Vec<ColumnKind> = asc_alternatives
            .iter()
            .map(|&a| ColumnKind::Asc { alternative: a })
            .collect();
        for name in attribute_names {
            kinds.push(ColumnKind::Attribute {
                source: name.clone(),
                alternatives: (1..=j as u32).collect(),
            });
        }

        // Observed design in column space: ASC indicators, then attributes.
        let mut values = vec![0.0; n * j * k];
        for i in 0..n {
            for a in 0..j {
                let dst = (i * j + a) * k;
                for (m, &asc) in asc_alternatives.iter().enumerate() {
                    values[dst + m] = if asc as usize == a + 1 { 1.0 } else { 0.0 };
                }
                let src = (i * j + a) * k_obs;
                values[dst + asc_alternatives.len()..dst + k]
                    .copy_from_slice(&observed[src..src + k_obs]);
            }
        }

        let mut coefficient_names: Vec<String> = asc_alternatives
            .iter()
            .map(|a| format!("asc_{a}"))
            .collect();
        coefficient_names.extend(attribute_names.iter().cloned());

        let alternative_names = alternative_names
            .unwrap_or_else(|| (1..=j).map(|a| format!("alt_{a}")).collect());
        if alternative_names.len() != j {
            return Err(Error::invalid("alternative_names length must equal J"));
        }

        Self::from_observed_design(
            values,
            kinds,
            coefficient_names,
            choices,
            j,
            base_alternative,
            alternative_names,
        )
    }

    /// Builds a dataset from an already-mapped observed design tensor
    /// (`n * j * k` in design-column space).
    pub fn from_observed_design(
        values: Vec<f64>,
        column_kinds: Vec<ColumnKind>,
        coefficient_names: Vec<String>,
        choices: &[u32],
        n_alternatives: usize,
        base_alternative: u32,
        alternative_names: Vec<String>,
    ) -> Result<Self> {
        let j = n_alternatives;
        let k = column_kinds.len();
        let n = choices.len();
        if coefficient_names.len() != k || values.len() != n * j * k {
            return Err(Error::invalid("design tensor dimensions are inconsistent"));
        }
        let row_alternatives: Vec<u32> = (1..=j as u32)
            .filter(|&a| a != base_alternative)
            .chain(std::iter::once(base_alternative))
            .collect();

        let d = j - 1;
        let mut x = vec![0.0; n * d * k];
        for i in 0..n {
            let base = (i * j + (base_alternative as usize - 1)) * k;
            for (r, &alt) in row_alternatives[..d].iter().enumerate() {
                let src = (i * j + (alt as usize - 1)) * k;
                let dst = (i * d + r) * k;
                for c in 0..k {
                    x[dst + c] = values[src + c] - values[base + c];
                }
            }
        }

        let y: Vec<u32> = choices
            .iter()
            .map(|&c| {
                row_alternatives
                    .iter()
                    .position(|&a| a == c)
                    .expect("choice validated") as u32
                    + 1
            })
            .collect();

        Ok(ChoiceDataset {
            n,
            j,
            k,
            x,
            y,
            base_alternative,
            row_alternatives,
            alternative_names,
            coefficient_names,
            column_kinds,
            observed: Some(ObservedDesign { values }),
        })
    }

    /// Assembles a dataset directly from differenced predictors, for callers
    /// that never need scenario perturbation (validation harnesses).
    pub fn from_differenced(
        x: Vec<f64>,
        y_rows: Vec<u32>,
        n_alternatives: usize,
        coefficient_names: Vec<String>,
    ) -> Result<Self> {
        let j = n_alternatives;
        let k = coefficient_names.len();
        let n = y_rows.len();
        if x.len() != n * (j - 1) * k {
            return Err(Error::invalid("differenced design has wrong length"));
        }
        if y_rows.iter().any(|&c| c == 0 || c as usize > j) {
            return Err(Error::invalid("row-space choices must lie in 1..=J"));
        }
        let column_kinds = coefficient_names
            .iter()
            .map(|name| ColumnKind::Attribute {
                source: name.clone(),
                alternatives: (1..=j as u32).collect(),
            })
            .collect();
        Ok(ChoiceDataset {
            n,
            j,
            k,
            x,
            y: y_rows,
            base_alternative: j as u32,
            row_alternatives: (1..=j as u32).collect(),
            alternative_names: (1..=j).map(|a| format!("alt_{a}")).collect(),
            coefficient_names,
            column_kinds,
            observed: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_alternatives(&self) -> usize {
        self.j
    }

    pub fn n_coefficients(&self) -> usize {
        self.k
    }

    pub fn n_rows(&self) -> usize {
        self.j - 1
    }

    pub fn base_alternative(&self) -> u32 {
        self.base_alternative
    }

    pub fn coefficient_names(&self) -> &[String] {
        &self.coefficient_names
    }

    pub fn alternative_names(&self) -> &[String] {
        &self.alternative_names
    }

    pub fn column_kinds(&self) -> &[ColumnKind] {
        &self.column_kinds
    }

    pub fn observed(&self) -> Option<&ObservedDesign> {
        self.observed.as_ref()
    }

    /// The differenced design, `n * (J-1) * k` row-major.
    pub fn design(&self) -> &[f64] {
        &self.x
    }

    /// Row `r` of observation `i`'s differenced design (length `k`).
    pub fn x_row(&self, i: usize, r: usize) -> &[f64] {
        let start = (i * (self.j - 1) + r) * self.k;
        &self.x[start..start + self.k]
    }

    /// Choice of observation `i` in row space (`1..=J`, `J` = base).
    pub fn choice(&self, i: usize) -> u32 {
        self.y[i]
    }

    pub fn choices(&self) -> &[u32] {
        &self.y
    }

    /// Replaces all choices (row space). Used by simulation harnesses that
    /// regenerate data against fixed predictors.
    pub fn set_choices(&mut self, y_rows: Vec<u32>) -> Result<()> {
        if y_rows.len() != self.n {
            return Err(Error::invalid("choice vector length mismatch"));
        }
        if y_rows.iter().any(|&c| c == 0 || c as usize > self.j) {
            return Err(Error::invalid("row-space choices must lie in 1..=J"));
        }
        self.y = y_rows;
        Ok(())
    }

    /// Alternative id of row-space index (`1..=J`).
    pub fn alternative_id(&self, internal: u32) -> u32 {
        self.row_alternatives[internal as usize - 1]
    }

    /// Row-space index of an alternative id.
    pub fn internal_choice(&self, alternative: u32) -> Option<u32> {
        self.row_alternatives
            .iter()
            .position(|&a| a == alternative)
            .map(|p| p as u32 + 1)
    }

    /// Restricts the dataset to the given observation indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.j - 1;
        let mut x = Vec::with_capacity(indices.len() * d * self.k);
        let mut y = Vec::with_capacity(indices.len());
        let mut values = self
            .observed
            .as_ref()
            .map(|_| Vec::with_capacity(indices.len() * self.j * self.k));
        for &i in indices {
            if i >= self.n {
                return Err(Error::invalid(format!("subset index {i} out of range")));
            }
            x.extend_from_slice(&self.x[i * d * self.k..(i + 1) * d * self.k]);
            y.push(self.y[i]);
            if let (Some(buf), Some(obs)) = (values.as_mut(), self.observed.as_ref()) {
                buf.extend_from_slice(&obs.values[i * self.j * self.k..(i + 1) * self.j * self.k]);
            }
        }
        Ok(ChoiceDataset {
            n: indices.len(),
            j: self.j,
            k: self.k,
            x,
            y,
            base_alternative: self.base_alternative,
            row_alternatives: self.row_alternatives.clone(),
            alternative_names: self.alternative_names.clone(),
            coefficient_names: self.coefficient_names.clone(),
            column_kinds: self.column_kinds.clone(),
            observed: values.map(|v| ObservedDesign { values: v }),
        })
    }

    /// Differenced design after multiplying observed attribute values of
    /// `alternative` in the columns sourced from `attribute` by `factor`.
    pub fn perturbed_design(&self, alternative: u32, attribute: &str, factor: f64) -> Result<Vec<f64>> {
        let observed = self.observed.as_ref().ok_or_else(|| {
            Error::invalid("dataset carries no observed attributes; scenarios need them")
        })?;
        if alternative == 0 || alternative as usize > self.j {
            return Err(Error::invalid(format!(
                "scenario alternative {alternative} outside 1..={}",
                self.j
            )));
        }
        let cols: Vec<usize> = self
            .column_kinds
            .iter()
            .enumerate()
            .filter_map(|(c, kind)| match kind {
                ColumnKind::Attribute { source, alternatives }
                    if source == attribute && alternatives.contains(&alternative) =>
                {
                    Some(c)
                }
                _ => None,
            })
            .collect();
        if cols.is_empty() {
            return Err(Error::invalid(format!(
                "no design column sources attribute '{attribute}' for alternative {alternative}"
            )));
        }
        let mut values = observed.values.clone();
        let a = alternative as usize - 1;
        for i in 0..self.n {
            let dst = (i * self.j + a) * self.k;
            for &c in &cols {
                values[dst + c] *= factor;
            }
        }
        // Re-difference.
        let d = self.j - 1;
        let mut x = vec![0.0; self.n * d * self.k];
        for i in 0..self.n {
            let base = (i * self.j + (self.base_alternative as usize - 1)) * self.k;
            for (r, &alt) in self.row_alternatives[..d].iter().enumerate() {
                let src = (i * self.j + (alt as usize - 1)) * self.k;
                let dst = (i * d + r) * self.k;
                for c in 0..self.k {
                    x[dst + c] = values[src + c] - values[base + c];
                }
            }
        }
        Ok(x)
    }
}

/// The latent-utility choice rule.
///
/// Returns `j` (1-based row index) when the maximum of `w` is non-negative
/// and attained first at row `j - 1`, and `J = w.len() + 1` (the base
/// alternative) when every entry is negative. Exact ties resolve to the
/// lowest index and an exact zero maximum counts as choosing the maximizing
/// non-base alternative, so replay is deterministic.
pub fn choice_from_latent(w: &[f64]) -> u32 {
    debug_assert!(!w.is_empty());
    let mut best = 0usize;
    let mut best_val = w[0];
    for (idx, &v) in w.iter().enumerate().skip(1) {
        if v > best_val {
            best = idx;
            best_val = v;
        }
    }
    if best_val >= 0.0 {
        best as u32 + 1
    } else {
        w.len() as u32 + 1
    }
}

/// Severity of a dataset diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Warning,
    Error,
}

/// One dataset diagnostic with severity.
#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

/// Dataset validation report.
#[derive(Debug, Clone)]
pub struct DatasetDiagnostics {
    /// Observed class shares indexed by alternative id order `1..=J`.
    pub shares: Vec<f64>,
    pub issues: Vec<Diagnostic>,
}

impl DatasetDiagnostics {
    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|d| d.severity == Severity::Error)
    }
}

/// Structural checks and descriptive statistics for a dataset/spec pair.
pub fn validate(data: &ChoiceDataset, spec: &ModelSpec) -> DatasetDiagnostics {
    let mut issues = Vec::new();
    if let Err(e) = spec.validate(data.n_alternatives(), data.n_coefficients()) {
        issues.push(Diagnostic {
            severity: Severity::Error,
            message: e.to_string(),
        });
    }

    let j = data.n_alternatives();
    let d = data.n_rows();
    let k = data.n_coefficients();
    let mut counts = vec![0usize; j];
    for i in 0..data.n() {
        counts[data.alternative_id(data.choice(i)) as usize - 1] += 1;
    }
    let shares: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / data.n().max(1) as f64)
        .collect();
    if counts.iter().filter(|&&c| c > 0).count() <= 1 {
        issues.push(Diagnostic {
            severity: Severity::Warning,
            message: "degenerate: single observed class".to_string(),
        });
    }

    for i in 0..data.n() {
        for r in 0..d {
            for (c, v) in data.x_row(i, r).iter().enumerate() {
                if !v.is_finite() {
                    issues.push(Diagnostic {
                        severity: Severity::Error,
                        message: format!(
                            "non-finite design value at observation {i}, row {r}, column {c} ({})",
                            data.coefficient_names()[c]
                        ),
                    });
                }
            }
        }
    }

    // Zero-variance columns cannot be identified.
    for c in 0..k {
        let first = data.x_row(0, 0)[c];
        let mut constant = true;
        'outer: for i in 0..data.n() {
            for r in 0..d {
                if data.x_row(i, r)[c] != first {
                    constant = false;
                    break 'outer;
                }
            }
        }
        if constant && data.n() * d > 1 {
            issues.push(Diagnostic {
                severity: Severity::Warning,
                message: format!(
                    "degenerate design column {c} ({}): constant value {first}",
                    data.coefficient_names()[c]
                ),
            });
        }
    }

    DatasetDiagnostics { shares, issues }
}

/// Latent state of one Gibbs chain.
#[derive(Debug, Clone)]
pub struct ParameterState {
    pub beta: DVector<f64>,
    /// (J-1) x (J-1) kernel covariance, trace-restricted after every update.
    pub sigma: DMatrix<f64>,
    /// DOF parameters: empty for MNP, one entry for MNR, S entries for Gen-MNR.
    pub nu: Vec<f64>,
    /// Latent utilities, `n * (J-1)` row-major.
    pub w: Vec<f64>,
    /// Latent scales: empty for MNP, `n` for MNR, `n * S` for Gen-MNR.
    pub q: Vec<f64>,
}
