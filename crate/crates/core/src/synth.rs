//! Synthetic-data generation from known structural parameters, plus a
//! Monte Carlo harness for estimator bias and coverage.
//!
//! # Reproducible streams
//!
//! Every random draw comes from a keyed stream fully determined by
//! `(seed, tag, indices...)`:
//!
//! 1. the key is folded with splitmix64: starting from `seed`, each tag
//!    `t` updates `key = splitmix64_step(key XOR golden*t)` where
//!    `golden = 0x9E3779B97F4A7C15`;
//! 2. successive draws apply splitmix64 to the stream state;
//! 3. uniforms take the top 53 bits: `u = (word >> 11) * 2^-53`;
//! 4. normals use the Box-Muller transform on two consecutive uniforms:
//!    `z = sqrt(-2 ln(1-u1)) * cos(2 pi u2)`.
//!
//! Any language can replay a stream from this description alone.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::{
    gmm_estimate, residual_system, GmmOptions, GmmResult, ThetaVector, TrendSpec,
};
use crate::instruments::{build_instruments, IndustryCell, IndustryPanel, InstrumentKind};
use crate::model::{foc_prices_tech, tech_from_shares, ProductionParams, TechLevels};
use crate::model::{InputBundle, WedgeBundle};
use crate::numeric::splitmix64;
use crate::panel::{CountryYearRecord, Panel};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

// stream tags
const TAG_DRIFT: u64 = 1;
const TAG_BASE: u64 = 2;
const TAG_SHARE: u64 = 3;
const TAG_INDUSTRY_SHOCK: u64 = 4;
const TAG_CELL_NOISE: u64 = 5;
const TAG_WEDGE: u64 = 6;
const TAG_TREND: u64 = 7;
const TAG_REPLICATION: u64 = 8;

/// Deterministic keyed random stream (see module docs for the scheme).
#[derive(Debug, Clone)]
pub struct KeyedRng {
    state: u64,
}

impl KeyedRng {
    pub fn new(seed: u64, tags: &[u64]) -> Self {
        let mut key = seed;
        for &t in tags {
            key ^= t.wrapping_mul(GOLDEN);
            key = splitmix64(&mut key);
        }
        Self { state: key }
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1).
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Uniform in [lo, hi] resampled until at least `guard` away from zero.
    pub fn uniform_nonzero(&mut self, lo: f64, hi: f64, guard: f64) -> f64 {
        loop {
            let v = self.uniform(lo, hi);
            if v.abs() >= guard {
                return v;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform01();
        let u2 = self.uniform01();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.normal()
    }
}

/// Log-linear drift means for the four input paths.
#[derive(Debug, Clone, Copy)]
pub struct DriftConfig {
    pub k_i: f64,
    pub k_o: f64,
    pub l_h: f64,
    pub l_u: f64,
    /// Across-country dispersion of each drift.
    pub sd: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        // ICT grows fast from a small base so its share rises from a few
        // percent to the 10-20% range over 36 years
        Self {
            k_i: 0.07,
            k_o: 0.02,
            l_h: 0.03,
            l_u: 0.005,
            sd: 0.01,
        }
    }
}

/// Configuration of the synthetic data-generating process.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub countries: usize,
    pub industries: usize,
    pub years: usize,
    pub start_year: i32,
    pub alpha: f64,
    pub a: f64,
    pub sigma: f64,
    pub rho: f64,
    /// Order of the lambda trend polynomial (lambda_0 is fixed at 0).
    pub lambda_order: usize,
    /// Order of the mu trend polynomial.
    pub mu_order: usize,
    /// Means of lambda_1..lambda_S across countries.
    pub lambda_coef_mean: Vec<f64>,
    /// Means of mu_0..mu_S across countries.
    pub mu_coef_mean: Vec<f64>,
    /// Across-country dispersion of each trend coefficient.
    pub trend_coef_sd: f64,
    pub drift: DriftConfig,
    /// sd of idiosyncratic industry-cell log growth noise.
    pub cell_noise_sd: f64,
    /// sd of the global industry-year log growth shock.
    pub industry_shock_sd: f64,
    /// sd of the log wedge shock per market (h, u, i, o).
    pub wedge_shock_sd: [f64; 4],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            countries: 14,
            industries: 10,
            years: 36,
            start_year: 1970,
            alpha: 1.0 / 3.0,
            a: 1.0,
            // paper-scale substitution parameters
            sigma: 1.0 - 1.0 / 6.336,
            rho: 1.0 - 1.0 / 0.852,
            lambda_order: 1,
            mu_order: 1,
            lambda_coef_mean: vec![0.3],
            mu_coef_mean: vec![-3.0, 0.5],
            trend_coef_sd: 0.1,
            drift: DriftConfig::default(),
            cell_noise_sd: 0.02,
            industry_shock_sd: 0.03,
            wedge_shock_sd: [0.0; 4],
        }
    }
}

impl SimConfig {
    /// Set all four market wedge-shock sds at once.
    pub fn with_wedge_sd(mut self, sd: f64) -> Self {
        self.wedge_shock_sd = [sd; 4];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.countries < 2 {
            return Err(Error::Config(
                "need at least 2 countries (leave-one-out instruments)".into(),
            ));
        }
        if self.industries == 0 || self.years < 2 {
            return Err(Error::Config("need at least 1 industry and 2 years".into()));
        }
        if self.lambda_coef_mean.len() != self.lambda_order {
            return Err(Error::Config(format!(
                "lambda_coef_mean must have {} entries",
                self.lambda_order
            )));
        }
        if self.mu_coef_mean.len() != self.mu_order + 1 {
            return Err(Error::Config(format!(
                "mu_coef_mean must have {} entries",
                self.mu_order + 1
            )));
        }
        if self.lambda_order > 3 || self.mu_order > 3 {
            return Err(Error::Config("trend orders are capped at 3".into()));
        }
        for sd in self
            .wedge_shock_sd
            .iter()
            .chain([&self.cell_noise_sd, &self.industry_shock_sd, &self.trend_coef_sd])
        {
            if *sd < 0.0 {
                return Err(Error::Config("standard deviations must be >= 0".into()));
            }
        }
        ProductionParams::new(self.alpha, self.sigma, self.rho, self.a, 0.5, 0.5)?;
        Ok(())
    }

    pub fn country_ids(&self) -> Vec<String> {
        (1..=self.countries).map(|i| format!("C{i:02}")).collect()
    }

    pub fn industry_ids(&self) -> Vec<String> {
        (1..=self.industries).map(|i| format!("D{i:02}")).collect()
    }
}

/// Ground truth kept alongside a simulated panel.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub sigma: f64,
    pub rho: f64,
    pub alpha: f64,
    pub a: f64,
    pub trend_spec: TrendSpec,
    pub theta: ThetaVector,
    pub lambda: BTreeMap<(String, i32), f64>,
    pub mu: BTreeMap<(String, i32), f64>,
    pub tech: BTreeMap<(String, i32), TechLevels>,
    pub wedges: BTreeMap<(String, i32), WedgeBundle>,
}

/// A simulated economy: observables plus the truth record.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub panel: Panel,
    pub industry: IndustryPanel,
    pub truth: SimTruth,
}

/// Simulate a country-industry panel whose prices satisfy the first-order
/// conditions at the configured technology path, up to log-normal wedge
/// shocks.
pub fn simulate_panel(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let countries = cfg.country_ids();
    let industries = cfg.industry_ids();
    let years: Vec<i32> = (0..cfg.years).map(|k| cfg.start_year + k as i32).collect();

    // per-country trend coefficients
    let mut lambda_coefs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut mu_coefs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (ci, country) in countries.iter().enumerate() {
        let lam: Vec<f64> = cfg
            .lambda_coef_mean
            .iter()
            .enumerate()
            .map(|(k, mean)| {
                KeyedRng::new(cfg.seed, &[TAG_TREND, ci as u64, 0, k as u64])
                    .normal_scaled(*mean, cfg.trend_coef_sd)
            })
            .collect();
        let mu: Vec<f64> = cfg
            .mu_coef_mean
            .iter()
            .enumerate()
            .map(|(k, mean)| {
                KeyedRng::new(cfg.seed, &[TAG_TREND, ci as u64, 1, k as u64])
                    .normal_scaled(*mean, cfg.trend_coef_sd)
            })
            .collect();
        lambda_coefs.insert(country.clone(), lam);
        mu_coefs.insert(country.clone(), mu);
    }

    // industry cells for the three instrumented inputs (0 = k_i, 1 = l_h, 2 = l_u)
    let base_ln_mean = [0.05_f64.ln(), 0.3_f64.ln(), 0.0];
    let drift_mean = [cfg.drift.k_i, cfg.drift.l_h, cfg.drift.l_u];
    let mut cells: Vec<IndustryCell> = Vec::new();
    let mut totals: BTreeMap<(String, i32), [f64; 3]> = BTreeMap::new();
    for (ci, country) in countries.iter().enumerate() {
        let mut per_input: Vec<Vec<Vec<f64>>> = Vec::with_capacity(3); // input -> industry -> year
        for j in 0..3usize {
            let total0 = KeyedRng::new(cfg.seed, &[TAG_BASE, ci as u64, j as u64])
                .normal_scaled(base_ln_mean[j], 0.2)
                .exp();
            let drift = KeyedRng::new(cfg.seed, &[TAG_DRIFT, ci as u64, j as u64])
                .normal_scaled(drift_mean[j], cfg.drift.sd);
            let weights: Vec<f64> = (0..cfg.industries)
                .map(|d| {
                    KeyedRng::new(cfg.seed, &[TAG_SHARE, ci as u64, j as u64, d as u64])
                        .uniform(0.2, 1.0)
                })
                .collect();
            let wsum: f64 = weights.iter().sum();
            let mut by_industry = Vec::with_capacity(cfg.industries);
            for d in 0..cfg.industries {
                let mut level_ln = (total0 * weights[d] / wsum).ln();
                let mut series = Vec::with_capacity(cfg.years);
                series.push(level_ln.exp());
                for (yi, _) in years.iter().enumerate().skip(1) {
                    let shock = KeyedRng::new(
                        cfg.seed,
                        &[TAG_INDUSTRY_SHOCK, j as u64, d as u64, yi as u64],
                    )
                    .normal_scaled(0.0, cfg.industry_shock_sd);
                    let idio = KeyedRng::new(
                        cfg.seed,
                        &[TAG_CELL_NOISE, ci as u64, d as u64, j as u64, yi as u64],
                    )
                    .normal_scaled(0.0, cfg.cell_noise_sd);
                    level_ln += drift + shock + idio;
                    series.push(level_ln.exp());
                }
                by_industry.push(series);
            }
            per_input.push(by_industry);
        }
        for (yi, year) in years.iter().enumerate() {
            let mut sums = [0.0_f64; 3];
            for j in 0..3 {
                for d in 0..cfg.industries {
                    sums[j] += per_input[j][d][yi];
                }
            }
            totals.insert((country.clone(), *year), sums);
            for d in 0..cfg.industries {
                cells.push(IndustryCell {
                    country: country.clone(),
                    industry: industries[d].clone(),
                    year: *year,
                    k_i: per_input[0][d][yi],
                    l_h: per_input[1][d][yi],
                    l_u: per_input[2][d][yi],
                });
            }
        }
    }

    // country-level non-ICT capital
    let mut ko_paths: BTreeMap<(String, i32), f64> = BTreeMap::new();
    for (ci, country) in countries.iter().enumerate() {
        let total0 = KeyedRng::new(cfg.seed, &[TAG_BASE, ci as u64, 3])
            .normal_scaled(2.0_f64.ln(), 0.2)
            .exp();
        let drift = KeyedRng::new(cfg.seed, &[TAG_DRIFT, ci as u64, 3])
            .normal_scaled(cfg.drift.k_o, cfg.drift.sd);
        let mut level_ln = total0.ln();
        for (yi, year) in years.iter().enumerate() {
            if yi > 0 {
                let idio = KeyedRng::new(cfg.seed, &[TAG_CELL_NOISE, ci as u64, 0, 3, yi as u64])
                    .normal_scaled(0.0, cfg.cell_noise_sd);
                level_ln += drift + idio;
            }
            ko_paths.insert((country.clone(), *year), level_ln.exp());
        }
    }

    // technology paths, wedges, and prices
    let mut records = Vec::new();
    let mut truth_lambda = BTreeMap::new();
    let mut truth_mu = BTreeMap::new();
    let mut truth_tech = BTreeMap::new();
    let mut truth_wedges = BTreeMap::new();
    for (ci, country) in countries.iter().enumerate() {
        let lam_c = &lambda_coefs[country];
        let mu_c = &mu_coefs[country];
        for (yi, year) in years.iter().enumerate() {
            let t = yi as f64 / 10.0;
            let lam_score: f64 = lam_c
                .iter()
                .enumerate()
                .map(|(k, coef)| coef * t.powi(k as i32 + 1))
                .sum();
            let mu_score: f64 = mu_c
                .iter()
                .enumerate()
                .map(|(k, coef)| coef * t.powi(k as i32))
                .sum();
            let lambda = crate::numeric::logistic(lam_score);
            let mu = crate::numeric::logistic(mu_score);
            let params = ProductionParams::new(cfg.alpha, cfg.sigma, cfg.rho, cfg.a, lambda, mu)?;
            let tech = tech_from_shares(&params)?;
            let q = &totals[&(country.clone(), *year)];
            let x = InputBundle {
                k_i: q[0],
                k_o: ko_paths[&(country.clone(), *year)],
                l_h: q[1],
                l_u: q[2],
            };
            let mut wedge_vals = [1.0_f64; 4];
            for (m, w) in wedge_vals.iter_mut().enumerate() {
                if cfg.wedge_shock_sd[m] > 0.0 {
                    *w = KeyedRng::new(cfg.seed, &[TAG_WEDGE, ci as u64, yi as u64, m as u64])
                        .normal_scaled(0.0, cfg.wedge_shock_sd[m])
                        .exp();
                }
            }
            let wedges = WedgeBundle {
                omega_h: wedge_vals[0],
                omega_u: wedge_vals[1],
                omega_i: wedge_vals[2],
                omega_o: wedge_vals[3],
            };
            let prices = foc_prices_tech(cfg.alpha, cfg.sigma, cfg.rho, &tech, &x, &wedges)?;
            records.push(CountryYearRecord {
                country: country.clone(),
                year: *year,
                w_h: prices.w_h,
                w_u: prices.w_u,
                r_i: prices.r_i,
                r_o: prices.r_o,
                k_i: x.k_i,
                k_o: x.k_o,
                l_h: x.l_h,
                l_u: x.l_u,
            });
            truth_lambda.insert((country.clone(), *year), lambda);
            truth_mu.insert((country.clone(), *year), mu);
            truth_tech.insert((country.clone(), *year), tech);
            truth_wedges.insert((country.clone(), *year), wedges);
        }
    }

    let trend_spec = TrendSpec::uniform(&countries, cfg.lambda_order, cfg.mu_order)?;
    let theta = ThetaVector {
        sigma: cfg.sigma,
        rho: cfg.rho,
        lambda: lambda_coefs,
        mu: mu_coefs,
    };
    Ok(SimOutput {
        panel: Panel::from_records(records)?,
        industry: IndustryPanel::from_cells(cells)?,
        truth: SimTruth {
            sigma: cfg.sigma,
            rho: cfg.rho,
            alpha: cfg.alpha,
            a: cfg.a,
            trend_spec,
            theta,
            lambda: truth_lambda,
            mu: truth_mu,
            tech: truth_tech,
            wedges: truth_wedges,
        },
    })
}

/// Summary of a Monte Carlo experiment for one parameter.
#[derive(Debug, Clone, Copy)]
pub struct McParamSummary {
    pub truth: f64,
    pub mean_bias: f64,
    pub rmse: f64,
    /// Share of replications whose 95% CI covers the truth.
    pub coverage95: f64,
}

/// Monte Carlo report for the two substitution parameters.
#[derive(Debug, Clone)]
pub struct McReport {
    pub replications: usize,
    pub successes: usize,
    pub failures: Vec<(usize, String)>,
    pub sigma: McParamSummary,
    pub rho: McParamSummary,
}

/// Run `replications` simulated estimations and summarize bias, RMSE, and
/// CI coverage of the substitution parameters. Per-replication failures
/// are collected, not fatal.
pub fn monte_carlo(cfg: &SimConfig, replications: usize, options: &GmmOptions) -> Result<McReport> {
    if replications == 0 {
        return Err(Error::Config("need at least 1 replication".into()));
    }
    cfg.validate()?;
    let outcomes: Vec<std::result::Result<(f64, f64, f64, f64), String>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let mut rep_cfg = cfg.clone();
            rep_cfg.seed = KeyedRng::new(cfg.seed, &[TAG_REPLICATION, rep as u64]).next_u64();
            run_replication(&rep_cfg, options).map_err(|e| e.to_string())
        })
        .collect();
    let mut sig_est = Vec::new();
    let mut rho_est = Vec::new();
    let mut sig_cover = 0usize;
    let mut rho_cover = 0usize;
    let mut failures = Vec::new();
    for (rep, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok((s, s_se, r, r_se)) => {
                if (s - cfg.sigma).abs() <= 1.96 * s_se {
                    sig_cover += 1;
                }
                if (r - cfg.rho).abs() <= 1.96 * r_se {
                    rho_cover += 1;
                }
                sig_est.push(s);
                rho_est.push(r);
            }
            Err(msg) => failures.push((rep, msg)),
        }
    }
    let successes = sig_est.len();
    if successes == 0 {
        return Err(Error::Config("all Monte Carlo replications failed".into()));
    }
    let summary = |est: &[f64], truth: f64, covered: usize| McParamSummary {
        truth,
        mean_bias: est.iter().map(|v| v - truth).sum::<f64>() / est.len() as f64,
        rmse: (est.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / est.len() as f64).sqrt(),
        coverage95: covered as f64 / est.len() as f64,
    };
    Ok(McReport {
        replications,
        successes,
        failures,
        sigma: summary(&sig_est, cfg.sigma, sig_cover),
        rho: summary(&rho_est, cfg.rho, rho_cover),
    })
}

fn run_replication(cfg: &SimConfig, options: &GmmOptions) -> Result<(f64, f64, f64, f64)> {
    let sim = simulate_panel(cfg)?;
    let instruments = build_instruments(
        &sim.industry,
        options.horizon,
        InstrumentKind::ShiftShare,
        &[],
    )?;
    let result = gmm_estimate(&sim.panel, &instruments, &sim.truth.trend_spec, options)?;
    Ok((
        result.theta.sigma,
        result.std_errors[0],
        result.theta.rho,
        result.std_errors[1],
    ))
}
