//! Joint GMM estimation of the substitution parameters and the
//! country-specific technology-trend coefficients from the differenced
//! two-equation system, with country-clustered covariance and a J-test.
//!
//! The two estimating equations difference the relative-price conditions
//! over `horizon` years. Equation 1 explains the change in the log skill
//! premium; equation 2 explains the change in the log wage-rental ratio.
//! Time-invariant country effects and the lambda intercept difference out;
//! the mu intercept survives through the nonlinear terms of equation 1 and
//! is estimated.
//!
//! Moment conditions interact each equation's residual with exogenous
//! variables: country dummies and country-specific trend terms instrument
//! themselves, and the instrumented input ratios get either the differenced
//! shift-share instruments (just-identified) or lagged input-ratio levels
//! (over-identified, estimated in two steps).

mod optimizer;

pub use optimizer::{BfgsOptions, BfgsOutcome};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::instruments::{InstrumentKind, InstrumentSeries};
use crate::numeric::{log1p_exp, log_sum_exp, logistic};
use crate::panel::Panel;

/// Upper clip for sigma and rho.
pub const PARAM_UPPER: f64 = 1.0 - 1e-4;
/// rho is kept at least this far from zero so sigma/rho stays finite.
pub const RHO_GUARD: f64 = 1e-6;
/// Relative step of the central finite differences.
const FD_RELATIVE_STEP: f64 = 1e-6;
/// Ridge added to a singular weighting matrix.
pub const WEIGHT_RIDGE: f64 = 1e-10;

/// Per-country polynomial trend orders for the two share parameters.
#[derive(Debug, Clone)]
pub struct TrendSpec {
    orders: BTreeMap<String, (usize, usize)>,
}

impl TrendSpec {
    pub fn new(orders: BTreeMap<String, (usize, usize)>) -> Result<Self> {
        for (country, (s_lambda, s_mu)) in &orders {
            if *s_lambda > 3 || *s_mu > 3 {
                return Err(Error::Config(format!(
                    "trend orders for {country} exceed the cubic cap: ({s_lambda}, {s_mu})"
                )));
            }
        }
        Ok(Self { orders })
    }

    /// The same orders for every listed country.
    pub fn uniform(countries: &[String], s_lambda: usize, s_mu: usize) -> Result<Self> {
        Self::new(
            countries
                .iter()
                .map(|c| (c.clone(), (s_lambda, s_mu)))
                .collect(),
        )
    }

    pub fn lambda_order(&self, country: &str) -> usize {
        self.orders.get(country).map(|(s, _)| *s).unwrap_or(0)
    }

    pub fn mu_order(&self, country: &str) -> usize {
        self.orders.get(country).map(|(_, s)| *s).unwrap_or(0)
    }

    pub fn countries(&self) -> impl Iterator<Item = &String> {
        self.orders.keys()
    }
}

/// The stacked parameter vector: substitution parameters plus per-country
/// trend coefficients. The lambda intercept is excluded (it differences
/// out); the mu intercept is included.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub sigma: f64,
    pub rho: f64,
    /// Per country: lambda_1 .. lambda_S.
    pub lambda: BTreeMap<String, Vec<f64>>,
    /// Per country: mu_0 .. mu_S.
    pub mu: BTreeMap<String, Vec<f64>>,
}

impl ThetaVector {
    /// All-zero trend coefficients at the given substitution parameters.
    pub fn with_trends_zero(sigma: f64, rho: f64, spec: &TrendSpec, countries: &[String]) -> Self {
        let lambda = countries
            .iter()
            .map(|c| (c.clone(), vec![0.0; spec.lambda_order(c)]))
            .collect();
        let mu = countries
            .iter()
            .map(|c| (c.clone(), vec![0.0; spec.mu_order(c) + 1]))
            .collect();
        Self {
            sigma,
            rho,
            lambda,
            mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma < 1.0 && self.rho < 1.0) {
            return Err(Error::Domain(format!(
                "sigma and rho must be < 1, got ({}, {})",
                self.sigma, self.rho
            )));
        }
        let all_finite = self
            .lambda
            .values()
            .chain(self.mu.values())
            .flatten()
            .all(|v| v.is_finite());
        if !all_finite || !self.sigma.is_finite() || !self.rho.is_finite() {
            return Err(Error::Domain("theta contains non-finite coefficients".into()));
        }
        Ok(())
    }

    /// Flatten in the canonical order: sigma, rho, then per sorted country
    /// the lambda coefficients, then per sorted country the mu coefficients.
    pub fn pack(&self, countries: &[String]) -> Vec<f64> {
        let mut out = vec![self.sigma, self.rho];
        for c in countries {
            if let Some(v) = self.lambda.get(c) {
                out.extend_from_slice(v);
            }
        }
        for c in countries {
            if let Some(v) = self.mu.get(c) {
                out.extend_from_slice(v);
            }
        }
        out
    }

    pub fn unpack(flat: &[f64], spec: &TrendSpec, countries: &[String]) -> Self {
        let mut lambda = BTreeMap::new();
        let mut mu = BTreeMap::new();
        let mut k = 2;
        for c in countries {
            let n = spec.lambda_order(c);
            lambda.insert(c.clone(), flat[k..k + n].to_vec());
            k += n;
        }
        for c in countries {
            let n = spec.mu_order(c) + 1;
            mu.insert(c.clone(), flat[k..k + n].to_vec());
            k += n;
        }
        Self {
            sigma: flat[0],
            rho: flat[1],
            lambda,
            mu,
        }
    }

    /// Names aligned with [`ThetaVector::pack`].
    pub fn names(spec: &TrendSpec, countries: &[String]) -> Vec<String> {
        let mut out = vec!["sigma".to_string(), "rho".to_string()];
        for c in countries {
            for k in 1..=spec.lambda_order(c) {
                out.push(format!("lambda_{k}_{c}"));
            }
        }
        for c in countries {
            for k in 0..=spec.mu_order(c) {
                out.push(format!("mu_{k}_{c}"));
            }
        }
        out
    }
}

/// Share parameters at normalized time `t` for one country: the logistic
/// of the trend polynomials. Both lie strictly inside (0,1).
pub fn eval_share_params(theta: &ThetaVector, country: &str, t: f64) -> Result<(f64, f64)> {
    let lam_coefs = theta
        .lambda
        .get(country)
        .ok_or_else(|| Error::Missing(format!("no lambda coefficients for {country}")))?;
    let mu_coefs = theta
        .mu
        .get(country)
        .ok_or_else(|| Error::Missing(format!("no mu coefficients for {country}")))?;
    let lam_score: f64 = lam_coefs
        .iter()
        .enumerate()
        .map(|(k, c)| c * t.powi(k as i32 + 1))
        .sum();
    let mu_score: f64 = mu_coefs
        .iter()
        .enumerate()
        .map(|(k, c)| c * t.powi(k as i32))
        .sum();
    Ok((logistic(lam_score), logistic(mu_score)))
}

/// One residual pair of the differenced system.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualObs {
    pub country: String,
    pub year: i32,
    pub v1: f64,
    pub v2: f64,
}

/// Precomputed data for one estimation observation.
#[derive(Debug, Clone)]
struct ObsRow {
    year: i32,
    t_now: f64,
    t_prev: f64,
    d_ln_whu: f64,
    d_ln_whri: f64,
    d_ln_lhlu: f64,
    d_ln_lhki: f64,
    ln_kl_now: f64,
    ln_kl_prev: f64,
    /// external instrument values for equation 1 (skilled/unskilled ratio)
    z1_ext: Vec<f64>,
    /// external instrument values for equation 2 (ICT/skilled ratio)
    z2_ext: Vec<f64>,
}

/// Moment-layout bookkeeping for one country.
#[derive(Debug, Clone)]
struct CountryLayout {
    name: String,
    s_lambda: usize,
    s_mu: usize,
    /// offset of this country's lambda trend columns inside equation 1
    lambda_col: usize,
    /// offset of this country's mu trend columns inside equation 2
    mu_col: usize,
    /// offset of this country's lambda coefficients in theta
    lambda_par: usize,
    /// offset of this country's mu coefficients in theta
    mu_par: usize,
}

/// Workspace binding a panel, instruments, and a trend specification into
/// flat arrays ready for repeated residual evaluation.
struct Workspace {
    countries: Vec<CountryLayout>,
    obs: Vec<Vec<ObsRow>>,
    horizon: i32,
    n_obs: usize,
    n_params: usize,
    m1: usize,
    m2: usize,
    n_ext1: usize,
    n_ext2: usize,
}

impl Workspace {
    fn n_moments(&self) -> usize {
        self.m1 + self.m2
    }

    fn build(
        panel: &Panel,
        instruments: Option<&InstrumentSeries>,
        spec: &TrendSpec,
        horizon: i32,
    ) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::Config(format!("horizon must be >= 1, got {horizon}")));
        }
        let country_names = panel.countries();
        if country_names.is_empty() {
            return Err(Error::Missing("empty panel".into()));
        }
        let (ext1_cols, ext2_cols) = match instruments {
            Some(series) => (series.lh_lu_columns(), series.ki_lh_columns()),
            None => (Vec::new(), Vec::new()),
        };
        let n_ext1 = ext1_cols.len();
        let n_ext2 = ext2_cols.len();

        let mut countries = Vec::new();
        let mut obs = Vec::new();
        let mut lambda_col = country_names.len(); // constants come first
        let mut mu_col = 0usize;
        let mut lambda_par = 2usize;
        let mut mu_par = 2 + country_names
            .iter()
            .map(|c| spec.lambda_order(c))
            .sum::<usize>();
        let mut n_obs = 0usize;
        for name in &country_names {
            let records = panel.country_records(name);
            let t0 = records.first().expect("country has records").year;
            let mut rows = Vec::new();
            for rec in records.iter().skip(horizon as usize) {
                let prev = panel
                    .get(name, rec.year - horizon)
                    .expect("contiguous years");
                let z_row = match instruments {
                    Some(series) => match series.get(name, rec.year) {
                        Some(z) => Some(z.to_vec()),
                        None => None, // outside the instrument window
                    },
                    None => Some(Vec::new()),
                };
                let Some(z_row) = z_row else { continue };
                let t_now = f64::from(rec.year - t0) / 10.0;
                let t_prev = f64::from(rec.year - horizon - t0) / 10.0;
                rows.push(ObsRow {
                    year: rec.year,
                    t_now,
                    t_prev,
                    d_ln_whu: (rec.w_h / rec.w_u).ln() - (prev.w_h / prev.w_u).ln(),
                    d_ln_whri: (rec.w_h / rec.r_i).ln() - (prev.w_h / prev.r_i).ln(),
                    d_ln_lhlu: (rec.l_h / rec.l_u).ln() - (prev.l_h / prev.l_u).ln(),
                    d_ln_lhki: (rec.l_h / rec.k_i).ln() - (prev.l_h / prev.k_i).ln(),
                    ln_kl_now: (rec.k_i / rec.l_h).ln(),
                    ln_kl_prev: (prev.k_i / prev.l_h).ln(),
                    z1_ext: ext1_cols.iter().map(|i| z_row[*i]).collect(),
                    z2_ext: ext2_cols.iter().map(|i| z_row[*i]).collect(),
                });
            }
            if instruments.is_some() && rows.is_empty() {
                return Err(Error::Alignment(format!(
                    "no overlap between panel residuals and instruments for country {name}"
                )));
            }
            n_obs += rows.len();
            let s_lambda = spec.lambda_order(name);
            let s_mu = spec.mu_order(name);
            countries.push(CountryLayout {
                name: name.clone(),
                s_lambda,
                s_mu,
                lambda_col,
                mu_col,
                lambda_par,
                mu_par,
            });
            obs.push(rows);
            lambda_col += s_lambda;
            mu_col += s_mu;
            lambda_par += s_lambda;
            mu_par += s_mu + 1;
        }
        let trend1_end = lambda_col;
        let trend2_end = mu_col;
        let n_params = mu_par;
        Ok(Self {
            countries,
            obs,
            horizon,
            n_obs,
            n_params,
            m1: trend1_end + n_ext1,
            m2: trend2_end + n_ext2,
            n_ext1,
            n_ext2,
        })
    }

    /// Residuals for one country at a flat parameter point.
    fn residuals_for(&self, ci: usize, flat: &[f64], out: &mut Vec<(f64, f64)>) {
        let layout = &self.countries[ci];
        let sigma = flat[0];
        let rho = flat[1];
        let lam = &flat[layout.lambda_par..layout.lambda_par + layout.s_lambda];
        let mu = &flat[layout.mu_par..layout.mu_par + layout.s_mu + 1];
        out.clear();
        for row in &self.obs[ci] {
            let mut d_trend_lam = 0.0;
            for (k, coef) in lam.iter().enumerate() {
                let p = (k + 1) as i32;
                d_trend_lam += coef * (row.t_now.powi(p) - row.t_prev.powi(p));
            }
            let mut m_now = mu[0];
            let mut m_prev = mu[0];
            let mut d_trend_mu = 0.0;
            for (k, coef) in mu.iter().enumerate().skip(1) {
                let p = k as i32;
                m_now += coef * row.t_now.powi(p);
                m_prev += coef * row.t_prev.powi(p);
                d_trend_mu += coef * (row.t_now.powi(p) - row.t_prev.powi(p));
            }
            let d_softplus = log1p_exp(m_now) - log1p_exp(m_prev);
            let d_csc = log_sum_exp(m_now + rho * row.ln_kl_now, 0.0)
                - log_sum_exp(m_prev + rho * row.ln_kl_prev, 0.0);
            let rhs1 = d_trend_lam - (sigma / rho) * d_softplus + ((sigma - rho) / rho) * d_csc
                - (1.0 - sigma) * row.d_ln_lhlu;
            let rhs2 = -d_trend_mu - (1.0 - rho) * row.d_ln_lhki;
            out.push((row.d_ln_whu - rhs1, row.d_ln_whri - rhs2));
        }
    }

    /// Unnormalized moment contribution of one country, assembled into the
    /// full moment layout.
    fn country_moments(&self, ci: usize, flat: &[f64], scratch: &mut Vec<(f64, f64)>) -> DVector<f64> {
        let layout = &self.countries[ci];
        let mut m = DVector::zeros(self.n_moments());
        self.residuals_for(ci, flat, scratch);
        let const_col = ci;
        let trend1_base = layout.lambda_col;
        let ext1_base = self.m1 - self.n_ext1;
        let trend2_base = self.m1 + layout.mu_col;
        let ext2_base = self.m1 + self.m2 - self.n_ext2;
        for (row, (v1, v2)) in self.obs[ci].iter().zip(scratch.iter()) {
            m[const_col] += v1;
            for k in 0..layout.s_lambda {
                let p = (k + 1) as i32;
                m[trend1_base + k] += (row.t_now.powi(p) - row.t_prev.powi(p)) * v1;
            }
            for (j, z) in row.z1_ext.iter().enumerate() {
                m[ext1_base + j] += z * v1;
            }
            for k in 0..layout.s_mu {
                let p = (k + 1) as i32;
                m[trend2_base + k] += (row.t_now.powi(p) - row.t_prev.powi(p)) * v2;
            }
            for (j, z) in row.z2_ext.iter().enumerate() {
                m[ext2_base + j] += z * v2;
            }
        }
        m
    }

    fn all_country_moments(&self, flat: &[f64]) -> Vec<DVector<f64>> {
        let mut scratch = Vec::new();
        (0..self.countries.len())
            .map(|ci| self.country_moments(ci, flat, &mut scratch))
            .collect()
    }

    fn moment_vector(&self, flat: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_moments());
        for m in self.all_country_moments(flat) {
            g += m;
        }
        g / self.n_obs as f64
    }

    /// Which country's parameters does flat index `k` belong to, if any?
    fn param_country(&self, k: usize) -> Option<usize> {
        if k < 2 {
            return None;
        }
        for (ci, layout) in self.countries.iter().enumerate() {
            if (layout.lambda_par..layout.lambda_par + layout.s_lambda).contains(&k)
                || (layout.mu_par..layout.mu_par + layout.s_mu + 1).contains(&k)
            {
                return Some(ci);
            }
        }
        None
    }
}

/// Clip sigma and rho into the admissible region; returns the clipped
/// vector and the squared clipping distance (the penalty).
fn clip_params(flat: &[f64]) -> (Vec<f64>, f64) {
    let mut clipped = flat.to_vec();
    let mut penalty = 0.0;
    for k in 0..2 {
        if clipped[k] > PARAM_UPPER {
            penalty += (clipped[k] - PARAM_UPPER).powi(2);
            clipped[k] = PARAM_UPPER;
        }
    }
    if clipped[1].abs() < RHO_GUARD {
        clipped[1] = if clipped[1] >= 0.0 { RHO_GUARD } else { -RHO_GUARD };
    }
    (clipped, penalty)
}

/// Residuals of the differenced estimating equations at `theta` over the
/// whole panel; no instruments are involved.
pub fn residual_system(
    theta: &ThetaVector,
    panel: &Panel,
    spec: &TrendSpec,
    horizon: i32,
) -> Result<Vec<ResidualObs>> {
    theta.validate()?;
    if theta.rho.abs() < RHO_GUARD {
        return Err(Error::Domain("rho must be bounded away from 0".into()));
    }
    let ws = Workspace::build(panel, None, spec, horizon)?;
    let countries = panel.countries();
    let flat = theta.pack(&countries);
    if flat.len() != ws.n_params {
        return Err(Error::Config(format!(
            "theta has {} entries, trend spec implies {}",
            flat.len(),
            ws.n_params
        )));
    }
    let mut out = Vec::with_capacity(ws.n_obs);
    let mut scratch = Vec::new();
    for ci in 0..ws.countries.len() {
        ws.residuals_for(ci, &flat, &mut scratch);
        for (row, (v1, v2)) in ws.obs[ci].iter().zip(scratch.iter()) {
            out.push(ResidualObs {
                country: ws.countries[ci].name.clone(),
                year: row.year,
                v1: *v1,
                v2: *v2,
            });
        }
    }
    Ok(out)
}

/// One observation of the stacked moment system.
#[derive(Debug, Clone)]
pub struct MomentObs {
    pub country: String,
    pub year: i32,
    pub v1: f64,
    pub v2: f64,
    /// dense equation-1 instrument row (constants, trends, external)
    pub z1: Vec<f64>,
    /// dense equation-2 instrument row (trends, external)
    pub z2: Vec<f64>,
}

/// The stacked moment system at a parameter point.
#[derive(Debug, Clone)]
pub struct MomentSet {
    pub obs: Vec<MomentObs>,
    pub n_moments: usize,
    pub n_params: usize,
}

/// Evaluate the moment conditions at `theta`: returns the per-observation
/// residuals with their instrument rows, and the averaged moment vector.
pub fn moment_vector(
    theta: &ThetaVector,
    panel: &Panel,
    instruments: &InstrumentSeries,
    spec: &TrendSpec,
) -> Result<(MomentSet, Vec<f64>)> {
    theta.validate()?;
    let ws = Workspace::build(panel, Some(instruments), spec, instruments.horizon)?;
    let countries = panel.countries();
    let flat = theta.pack(&countries);
    if flat.len() != ws.n_params {
        return Err(Error::Config(format!(
            "theta has {} entries, trend spec implies {}",
            flat.len(),
            ws.n_params
        )));
    }
    let g = ws.moment_vector(&flat);
    let mut obs_out = Vec::with_capacity(ws.n_obs);
    let mut scratch = Vec::new();
    for (ci, layout) in ws.countries.iter().enumerate() {
        ws.residuals_for(ci, &flat, &mut scratch);
        for (row, (v1, v2)) in ws.obs[ci].iter().zip(scratch.iter()) {
            let mut z1 = vec![0.0; ws.m1];
            z1[ci] = 1.0;
            for k in 0..layout.s_lambda {
                let p = (k + 1) as i32;
                z1[layout.lambda_col + k] = row.t_now.powi(p) - row.t_prev.powi(p);
            }
            for (j, z) in row.z1_ext.iter().enumerate() {
                z1[ws.m1 - ws.n_ext1 + j] = *z;
            }
            let mut z2 = vec![0.0; ws.m2];
            for k in 0..layout.s_mu {
                let p = (k + 1) as i32;
                z2[layout.mu_col + k] = row.t_now.powi(p) - row.t_prev.powi(p);
            }
            for (j, z) in row.z2_ext.iter().enumerate() {
                z2[ws.m2 - ws.n_ext2 + j] = *z;
            }
            obs_out.push(MomentObs {
                country: layout.name.clone(),
                year: row.year,
                v1: *v1,
                v2: *v2,
                z1,
                z2,
            });
        }
    }
    Ok((
        MomentSet {
            obs: obs_out,
            n_moments: ws.n_moments(),
            n_params: ws.n_params,
        },
        g.as_slice().to_vec(),
    ))
}

/// Options controlling the GMM search.
#[derive(Debug, Clone)]
pub struct GmmOptions {
    /// Differencing horizon used when the caller also builds instruments.
    pub horizon: i32,
    /// Deterministic (sigma, rho) starting points; trend coefficients start
    /// at zero. Best final objective wins, ties broken by lowest index.
    pub multistart: Vec<(f64, f64)>,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            horizon: 5,
            multistart: default_multistart(),
            max_iterations: 600,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-12,
        }
    }
}

/// The full deterministic starting grid over sigma and rho.
pub fn default_multistart() -> Vec<(f64, f64)> {
    let sigmas = [-0.5, 0.3, 0.6, 0.9];
    let rhos = [-1.0, -0.2, 0.3, 0.7];
    let mut grid = Vec::with_capacity(16);
    for s in sigmas {
        for r in rhos {
            grid.push((s, r));
        }
    }
    grid
}

/// A reduced four-point grid for bulk work such as Monte Carlo studies.
pub fn reduced_multistart() -> Vec<(f64, f64)> {
    vec![(0.3, -0.2), (0.3, 0.3), (0.9, -0.2), (0.9, 0.3)]
}

/// Convergence diagnostics of the winning start.
#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub step_norm: f64,
    pub best_start: usize,
    pub start_objectives: Vec<f64>,
}

/// Output of [`gmm_estimate`].
#[derive(Debug, Clone)]
pub struct GmmResult {
    pub theta: ThetaVector,
    /// Country-clustered covariance of the packed parameter vector.
    pub covariance: DMatrix<f64>,
    /// Clustered standard errors, aligned with [`ThetaVector::pack`].
    pub std_errors: Vec<f64>,
    /// Unclustered (per-observation) standard errors, for comparison.
    pub std_errors_unclustered: Vec<f64>,
    pub parameter_names: Vec<String>,
    pub objective: f64,
    pub j_statistic: f64,
    pub j_df: usize,
    pub j_pvalue: Option<f64>,
    pub convergence: ConvergenceReport,
    pub weighting_ridged: bool,
    pub few_clusters_warning: bool,
    pub n_obs: usize,
    pub n_moments: usize,
    pub n_params: usize,
    pub n_clusters: usize,
}

struct GmmProblem<'a> {
    ws: &'a Workspace,
    weight: Option<&'a DMatrix<f64>>,
}

impl GmmProblem<'_> {
    fn objective_of_g(&self, g: &DVector<f64>) -> f64 {
        match self.weight {
            None => g.dot(g),
            Some(w) => (g.transpose() * w * g)[(0, 0)],
        }
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let (flat, penalty) = clip_params(x);
        let g = self.ws.moment_vector(&flat);
        self.objective_of_g(&g) + penalty
    }

    /// Central finite-difference gradient. Country-specific coordinates
    /// only touch that country's residuals, so their probes reuse the
    /// other countries' moment contributions.
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (flat, _) = clip_params(x);
        let contributions = self.ws.all_country_moments(&flat);
        let mut g_base = DVector::zeros(self.ws.n_moments());
        for m in &contributions {
            g_base += m;
        }
        let n = self.ws.n_obs as f64;
        let mut grad = vec![0.0; x.len()];
        let mut scratch = Vec::new();
        for k in 0..x.len() {
            let h = FD_RELATIVE_STEP * x[k].abs().max(1.0);
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[k] += h;
            dn[k] -= h;
            let (f_up, f_dn) = match self.ws.param_country(k) {
                None => {
                    let (flat_up, pen_up) = clip_params(&up);
                    let (flat_dn, pen_dn) = clip_params(&dn);
                    let g_up = self.ws.moment_vector(&flat_up);
                    let g_dn = self.ws.moment_vector(&flat_dn);
                    (
                        self.objective_of_g(&g_up) + pen_up,
                        self.objective_of_g(&g_dn) + pen_dn,
                    )
                }
                Some(ci) => {
                    let (flat_up, pen_up) = clip_params(&up);
                    let (flat_dn, pen_dn) = clip_params(&dn);
                    let m_up = self.ws.country_moments(ci, &flat_up, &mut scratch);
                    let g_up = (&g_base - &contributions[ci] + m_up) / n;
                    let m_dn = self.ws.country_moments(ci, &flat_dn, &mut scratch);
                    let g_dn = (&g_base - &contributions[ci] + m_dn) / n;
                    (
                        self.objective_of_g(&g_up) + pen_up,
                        self.objective_of_g(&g_dn) + pen_dn,
                    )
                }
            };
            grad[k] = (f_up - f_dn) / (2.0 * h);
        }
        grad
    }

    /// Numeric Jacobian of the averaged moment vector, with the same
    /// sparsity shortcut.
    fn moment_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let (flat, _) = clip_params(x);
        let contributions = self.ws.all_country_moments(&flat);
        let mut g_base = DVector::zeros(self.ws.n_moments());
        for m in &contributions {
            g_base += m;
        }
        let n = self.ws.n_obs as f64;
        let mut jac = DMatrix::zeros(self.ws.n_moments(), x.len());
        let mut scratch = Vec::new();
        for k in 0..x.len() {
            let h = FD_RELATIVE_STEP * x[k].abs().max(1.0);
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[k] += h;
            dn[k] -= h;
            let (flat_up, _) = clip_params(&up);
            let (flat_dn, _) = clip_params(&dn);
            let (g_up, g_dn) = match self.ws.param_country(k) {
                None => (self.ws.moment_vector(&flat_up), self.ws.moment_vector(&flat_dn)),
                Some(ci) => {
                    let m_up = self.ws.country_moments(ci, &flat_up, &mut scratch);
                    let m_dn = self.ws.country_moments(ci, &flat_dn, &mut scratch);
                    (
                        (&g_base - &contributions[ci] + m_up) / n,
                        (&g_base - &contributions[ci] + m_dn) / n,
                    )
                }
            };
            let col = (g_up - g_dn) / (2.0 * h);
            jac.set_column(k, &col);
        }
        jac
    }

    /// Clustered second-moment matrix of the per-country contributions:
    /// S = (1/N) sum_c m_c m_c'.
    fn clustered_s(&self, x: &[f64]) -> DMatrix<f64> {
        let (flat, _) = clip_params(x);
        let contributions = self.ws.all_country_moments(&flat);
        let mut s = DMatrix::zeros(self.ws.n_moments(), self.ws.n_moments());
        for m in &contributions {
            s += m * m.transpose();
        }
        s / self.ws.n_obs as f64
    }

    /// Per-observation second-moment matrix (no clustering).
    fn unclustered_s(&self, x: &[f64]) -> DMatrix<f64> {
        let (flat, _) = clip_params(x);
        let mut s = DMatrix::zeros(self.ws.n_moments(), self.ws.n_moments());
        let mut scratch = Vec::new();
        for (ci, layout) in self.ws.countries.iter().enumerate() {
            self.ws.residuals_for(ci, &flat, &mut scratch);
            for (row, (v1, v2)) in self.ws.obs[ci].iter().zip(scratch.iter()) {
                let mut m = DVector::zeros(self.ws.n_moments());
                m[ci] += v1;
                for k in 0..layout.s_lambda {
                    let p = (k + 1) as i32;
                    m[layout.lambda_col + k] = (row.t_now.powi(p) - row.t_prev.powi(p)) * v1;
                }
                for (j, z) in row.z1_ext.iter().enumerate() {
                    m[self.ws.m1 - self.ws.n_ext1 + j] = z * v1;
                }
                for k in 0..layout.s_mu {
                    let p = (k + 1) as i32;
                    m[self.ws.m1 + layout.mu_col + k] = (row.t_now.powi(p) - row.t_prev.powi(p)) * v2;
                }
                for (j, z) in row.z2_ext.iter().enumerate() {
                    m[self.ws.m1 + self.ws.m2 - self.ws.n_ext2 + j] = z * v2;
                }
                s += &m * m.transpose();
            }
        }
        s / self.ws.n_obs as f64
    }
}

fn invert_with_ridge(mat: &DMatrix<f64>, ridge: f64) -> (DMatrix<f64>, bool) {
    if let Some(inv) = mat.clone().try_inverse() {
        if inv.iter().all(|v| v.is_finite()) {
            return (inv, false);
        }
    }
    let n = mat.nrows();
    let ridged = mat + DMatrix::identity(n, n) * ridge;
    let inv = ridged
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::identity(n, n));
    (inv, true)
}

/// Force symmetry and clip tiny negative eigenvalues introduced by
/// round-off.
fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Joint GMM estimation. Just-identified systems use the identity weight;
/// over-identified systems take a second step with the inverse clustered
/// moment covariance from step one.
pub fn gmm_estimate(
    panel: &Panel,
    instruments: &InstrumentSeries,
    spec: &TrendSpec,
    options: &GmmOptions,
) -> Result<GmmResult> {
    let ws = Workspace::build(panel, Some(instruments), spec, instruments.horizon)?;
    let n_clusters = ws.countries.len();
    if ws.n_moments() < ws.n_params {
        return Err(Error::Config(format!(
            "under-identified: {} moments < {} parameters",
            ws.n_moments(),
            ws.n_params
        )));
    }
    if ws.n_obs < ws.n_params + n_clusters {
        return Err(Error::Config(format!(
            "too few observations: {} < {} parameters + {} clusters",
            ws.n_obs,
            ws.n_params,
            n_clusters
        )));
    }
    let over_identified = ws.n_moments() > ws.n_params;
    let countries: Vec<String> = ws.countries.iter().map(|c| c.name.clone()).collect();

    // step 1: identity weight, deterministic multistart
    let bfgs = BfgsOptions {
        max_iterations: options.max_iterations,
        gradient_tolerance: options.gradient_tolerance,
        step_tolerance: options.step_tolerance,
    };
    let problem = GmmProblem {
        ws: &ws,
        weight: None,
    };
    let outcomes: Vec<BfgsOutcome> = options
        .multistart
        .par_iter()
        .map(|(sigma0, rho0)| {
            let mut x0 = vec![0.0; ws.n_params];
            x0[0] = *sigma0;
            x0[1] = *rho0;
            optimizer::minimize(
                &|x| problem.objective(x),
                &|x| problem.gradient(x),
                &x0,
                &bfgs,
            )
        })
        .collect();
    let start_objectives: Vec<f64> = outcomes.iter().map(|o| o.objective).collect();
    let best_start = start_objectives
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal).then(ia.cmp(ib)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Config("empty multistart grid".into()))?;
    let mut winner = outcomes[best_start].clone();

    // step 2 for over-identified systems: reweight and warm-start
    let mut weighting_ridged = false;
    let mut weight = None;
    if over_identified {
        let s1 = problem.clustered_s(&winner.x);
        let (w2, ridged) = invert_with_ridge(&s1, WEIGHT_RIDGE);
        weighting_ridged = ridged;
        let w2 = symmetrize(&w2);
        let problem2 = GmmProblem {
            ws: &ws,
            weight: Some(&w2),
        };
        winner = optimizer::minimize(
            &|x| problem2.objective(x),
            &|x| problem2.gradient(x),
            &winner.x,
            &bfgs,
        );
        weight = Some(w2);
    }

    let (flat_hat, _) = clip_params(&winner.x);
    let problem_final = GmmProblem {
        ws: &ws,
        weight: weight.as_ref(),
    };

    // covariance: sandwich with country-clustered moment covariance
    let g_hat = ws.moment_vector(&flat_hat);
    let jac = problem_final.moment_jacobian(&flat_hat);
    let s_clustered = problem_final.clustered_s(&flat_hat);
    let s_unclustered = problem_final.unclustered_s(&flat_hat);
    let n = ws.n_obs as f64;
    let cluster_adjust = if n_clusters > 1 {
        n_clusters as f64 / (n_clusters as f64 - 1.0)
    } else {
        1.0
    };
    let w_mat = match &weight {
        Some(w) => w.clone(),
        None => DMatrix::identity(ws.n_moments(), ws.n_moments()),
    };
    let bread_inner = jac.transpose() * &w_mat * &jac;
    let (bread, _) = invert_with_ridge(&bread_inner, WEIGHT_RIDGE);
    let make_cov = |s: &DMatrix<f64>, adjust: f64| -> DMatrix<f64> {
        let meat = jac.transpose() * &w_mat * s * &w_mat * &jac;
        symmetrize(&(&bread * meat * &bread * (adjust / n)))
    };
    let covariance = make_cov(&s_clustered, cluster_adjust);
    let cov_unclustered = make_cov(&s_unclustered, 1.0);
    let std_errors: Vec<f64> = (0..ws.n_params)
        .map(|k| covariance[(k, k)].max(0.0).sqrt())
        .collect();
    let std_errors_unclustered: Vec<f64> = (0..ws.n_params)
        .map(|k| cov_unclustered[(k, k)].max(0.0).sqrt())
        .collect();

    // J statistic with the clustered moment covariance
    let j_df = ws.n_moments() - ws.n_params;
    let (s_inv, _) = invert_with_ridge(&s_clustered, WEIGHT_RIDGE);
    let j_statistic = (n * (g_hat.transpose() * s_inv * &g_hat)[(0, 0)]).max(0.0);
    let j_pvalue = if j_df > 0 {
        j_test(j_statistic, j_df)?
    } else {
        None
    };

    let theta = ThetaVector::unpack(&flat_hat, spec, &countries);
    Ok(GmmResult {
        theta,
        covariance,
        std_errors,
        std_errors_unclustered,
        parameter_names: ThetaVector::names(spec, &countries),
        objective: winner.objective,
        j_statistic,
        j_df,
        j_pvalue,
        convergence: ConvergenceReport {
            converged: winner.converged,
            iterations: winner.iterations,
            gradient_norm: winner.gradient_norm,
            step_norm: winner.step_norm,
            best_start,
            start_objectives,
        },
        weighting_ridged,
        few_clusters_warning: n_clusters < ws.n_params,
        n_obs: ws.n_obs,
        n_moments: ws.n_moments(),
        n_params: ws.n_params,
        n_clusters,
    })
}

/// Upper-tail chi-square probability of a J statistic. `None` marks a
/// just-identified system (df = 0), where the test does not apply.
pub fn j_test(j: f64, df: usize) -> Result<Option<f64>> {
    if j < 0.0 {
        return Err(Error::Domain(format!("J statistic must be >= 0, got {j}")));
    }
    if df == 0 {
        return Ok(None);
    }
    let dist = ChiSquared::new(df as f64)
        .map_err(|e| Error::Domain(format!("chi-square setup failed: {e}")))?;
    Ok(Some(dist.sf(j)))
}

/// Elasticities of substitution implied by the substitution parameters,
/// with delta-method standard errors.
#[derive(Debug, Clone, Copy)]
pub struct ElasticityEstimates {
    /// 1/(1-sigma): composite vs unskilled labor.
    pub outer: f64,
    pub outer_se: f64,
    /// 1/(1-rho): ICT capital vs skilled labor.
    pub inner: f64,
    pub inner_se: f64,
}

/// Transform (sigma, rho) and their covariance into elasticities.
pub fn to_elasticities(sigma: f64, rho: f64, covariance: &DMatrix<f64>) -> Result<ElasticityEstimates> {
    if !(sigma < 1.0 && rho < 1.0) {
        return Err(Error::Domain("sigma and rho must be < 1".into()));
    }
    let d_sigma = 1.0 / (1.0 - sigma).powi(2);
    let d_rho = 1.0 / (1.0 - rho).powi(2);
    Ok(ElasticityEstimates {
        outer: 1.0 / (1.0 - sigma),
        outer_se: d_sigma * covariance[(0, 0)].max(0.0).sqrt(),
        inner: 1.0 / (1.0 - rho),
        inner_se: d_rho * covariance[(1, 1)].max(0.0).sqrt(),
    })
}

/// Residual RMSE of fitting each relative-price series with a pure time
/// polynomial, for trend orders 0..=3. A diagnostic to guide the choice of
/// per-country trend orders; nothing is selected automatically.
#[derive(Debug, Clone)]
pub struct TrendFitRow {
    pub country: String,
    /// "skill_premium" or "wage_rental"
    pub target: String,
    pub order: usize,
    pub rmse: f64,
}

pub fn trend_fit_report(panel: &Panel) -> Result<Vec<TrendFitRow>> {
    let mut out = Vec::new();
    for country in panel.countries() {
        let records = panel.country_records(&country);
        let t0 = records.first().expect("non-empty").year;
        let ts: Vec<f64> = records.iter().map(|r| f64::from(r.year - t0) / 10.0).collect();
        for (target, series) in [
            (
                "skill_premium",
                records.iter().map(|r| (r.w_h / r.w_u).ln()).collect::<Vec<f64>>(),
            ),
            (
                "wage_rental",
                records.iter().map(|r| (r.w_h / r.r_i).ln()).collect::<Vec<f64>>(),
            ),
        ] {
            for order in 0..=3usize {
                let cols = order + 1;
                let mut design = DMatrix::zeros(ts.len(), cols);
                for (i, t) in ts.iter().enumerate() {
                    for k in 0..cols {
                        design[(i, k)] = t.powi(k as i32);
                    }
                }
                let y = DVector::from_column_slice(&series);
                let svd = design.clone().svd(true, true);
                let beta = svd
                    .solve(&y, 1e-12)
                    .map_err(|e| Error::Config(format!("trend fit failed: {e}")))?;
                let resid = &y - design * beta;
                let rmse = (resid.dot(&resid) / ts.len() as f64).sqrt();
                out.push(TrendFitRow {
                    country: country.clone(),
                    target: target.to_string(),
                    order,
                    rmse,
                });
            }
        }
    }
    Ok(out)
}
