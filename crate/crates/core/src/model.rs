//! Four-factor nested CES technology: output, first-order conditions,
//! factor demands, relative-price equations, and Morishima elasticities.
//!
//! The production function combines ICT capital and skilled labor in an
//! inner nest (substitution parameter `rho`), aggregates the nest with
//! unskilled labor (parameter `sigma`), and attaches non-ICT capital
//! Cobb-Douglas style with share `alpha`:
//!
//! ```text
//! y = A k_o^alpha { lambda [mu k_i^rho + (1-mu) l_h^rho]^(sigma/rho)
//!                   + (1-lambda) l_u^sigma }^((1-alpha)/sigma)
//! ```
//!
//! The same technology can be written with factor-augmenting levels
//! (A_i, A_h, A_u); [`tech_from_shares`] maps one parameterization to the
//! other. All internal work happens in logs so that strongly negative
//! substitution parameters do not overflow.

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

/// Guard band around zero for `sigma` and `rho`; the Cobb-Douglas limit is
/// rejected rather than special-cased.
pub const SUBSTITUTION_GUARD: f64 = 1e-10;

/// Structural parameters of the share-form technology.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductionParams {
    /// Non-ICT capital share exponent, in (0,1).
    pub alpha: f64,
    /// Outer-nest substitution parameter, < 1.
    pub sigma: f64,
    /// Inner-nest substitution parameter, < 1.
    pub rho: f64,
    /// Factor-neutral technology level, > 0.
    pub a: f64,
    /// Outer-nest share, in (0,1).
    pub lambda_share: f64,
    /// Inner-nest share, in (0,1).
    pub mu_share: f64,
}

impl ProductionParams {
    pub fn new(
        alpha: f64,
        sigma: f64,
        rho: f64,
        a: f64,
        lambda_share: f64,
        mu_share: f64,
    ) -> Result<Self> {
        let p = Self {
            alpha,
            sigma,
            rho,
            a,
            lambda_share,
            mu_share,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if !(self.sigma < 1.0) || !(self.rho < 1.0) {
            return Err(Error::Domain(format!(
                "sigma and rho must be < 1, got sigma={} rho={}",
                self.sigma, self.rho
            )));
        }
        if self.sigma.abs() < SUBSTITUTION_GUARD || self.rho.abs() < SUBSTITUTION_GUARD {
            return Err(Error::Domain(
                "sigma and rho must be bounded away from 0 (Cobb-Douglas limit unsupported)".into(),
            ));
        }
        if !(self.a > 0.0) {
            return Err(Error::Domain(format!("A must be > 0, got {}", self.a)));
        }
        for (name, v) in [("lambda", self.lambda_share), ("mu", self.mu_share)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!("{name} share must be in (0,1), got {v}")));
            }
        }
        Ok(())
    }

    /// True when the configuration exhibits capital-skill complementarity
    /// (sigma > rho). Violations are legal, merely unusual; callers decide
    /// whether to warn.
    pub fn csc_holds(&self) -> bool {
        self.sigma > self.rho
    }
}

/// Factor-augmenting technology levels of the equivalent representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TechLevels {
    pub a_i: f64,
    pub a_h: f64,
    pub a_u: f64,
}

impl TechLevels {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("A_i", self.a_i), ("A_h", self.a_h), ("A_u", self.a_u)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Input quantities in efficiency units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputBundle {
    pub k_i: f64,
    pub k_o: f64,
    pub l_h: f64,
    pub l_u: f64,
}

impl InputBundle {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.iter() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("input {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, f64)> {
        [
            ("k_i", self.k_i),
            ("k_o", self.k_o),
            ("l_h", self.l_h),
            ("l_u", self.l_u),
        ]
        .into_iter()
    }

    pub fn get(&self, input: Input) -> f64 {
        match input {
            Input::IctCapital => self.k_i,
            Input::NonIctCapital => self.k_o,
            Input::SkilledLabor => self.l_h,
            Input::UnskilledLabor => self.l_u,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            k_i: self.k_i * c,
            k_o: self.k_o * c,
            l_h: self.l_h * c,
            l_u: self.l_u * c,
        }
    }
}

/// Factor prices: wages per efficiency hour and rental prices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceBundle {
    pub w_h: f64,
    pub w_u: f64,
    pub r_i: f64,
    pub r_o: f64,
}

impl PriceBundle {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_h", self.w_h),
            ("w_u", self.w_u),
            ("r_i", self.r_i),
            ("r_o", self.r_o),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("price {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn get(&self, input: Input) -> f64 {
        match input {
            Input::IctCapital => self.r_i,
            Input::NonIctCapital => self.r_o,
            Input::SkilledLabor => self.w_h,
            Input::UnskilledLabor => self.w_u,
        }
    }

    fn with(&self, input: Input, value: f64) -> Self {
        let mut p = *self;
        match input {
            Input::IctCapital => p.r_i = value,
            Input::NonIctCapital => p.r_o = value,
            Input::SkilledLabor => p.w_h = value,
            Input::UnskilledLabor => p.w_u = value,
        }
        p
    }
}

/// Multiplicative deviations of each factor price from its competitive
/// marginal value product. Unity wedges recover the competitive benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WedgeBundle {
    pub omega_h: f64,
    pub omega_u: f64,
    pub omega_i: f64,
    pub omega_o: f64,
}

impl Default for WedgeBundle {
    fn default() -> Self {
        Self {
            omega_h: 1.0,
            omega_u: 1.0,
            omega_i: 1.0,
            omega_o: 1.0,
        }
    }
}

impl WedgeBundle {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("omega_h", self.omega_h),
            ("omega_u", self.omega_u),
            ("omega_i", self.omega_i),
            ("omega_o", self.omega_o),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("wedge {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// The four inputs of the technology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Input {
    IctCapital,
    NonIctCapital,
    SkilledLabor,
    UnskilledLabor,
}

impl Input {
    pub const ALL: [Input; 4] = [
        Input::IctCapital,
        Input::NonIctCapital,
        Input::SkilledLabor,
        Input::UnskilledLabor,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Input::IctCapital => "k_i",
            Input::NonIctCapital => "k_o",
            Input::SkilledLabor => "l_h",
            Input::UnskilledLabor => "l_u",
        }
    }
}

fn finite_or_overflow(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Overflow(format!("{what} is not finite ({v})")))
    }
}

/// Output of the share-form technology.
pub fn produce_output(params: &ProductionParams, x: &InputBundle) -> Result<f64> {
    params.validate()?;
    x.validate()?;
    let p = params;
    // ln of the inner nest mu k_i^rho + (1-mu) l_h^rho
    let ln_inner = log_sum_exp(
        p.mu_share.ln() + p.rho * x.k_i.ln(),
        (1.0 - p.mu_share).ln() + p.rho * x.l_h.ln(),
    );
    let ln_outer = log_sum_exp(
        p.lambda_share.ln() + (p.sigma / p.rho) * ln_inner,
        (1.0 - p.lambda_share).ln() + p.sigma * x.l_u.ln(),
    );
    let ln_y = p.a.ln() + p.alpha * x.k_o.ln() + ((1.0 - p.alpha) / p.sigma) * ln_outer;
    finite_or_overflow(ln_y.exp(), "output")
}

/// Map the share parameterization to factor-augmenting technology levels.
pub fn tech_from_shares(params: &ProductionParams) -> Result<TechLevels> {
    params.validate()?;
    let p = params;
    let ln_base = p.a.ln() / (1.0 - p.alpha);
    let ln_lam_s = p.lambda_share.ln() / p.sigma;
    let tech = TechLevels {
        a_i: (ln_base + ln_lam_s + p.mu_share.ln() / p.rho).exp(),
        a_h: (ln_base + ln_lam_s + (1.0 - p.mu_share).ln() / p.rho).exp(),
        a_u: (ln_base + (1.0 - p.lambda_share).ln() / p.sigma).exp(),
    };
    tech.validate()
        .map_err(|_| Error::Domain("technology levels left the positive range".into()))?;
    Ok(tech)
}

/// Output of the factor-augmenting representation
/// `k_o^alpha {[(A_i k_i)^rho + (A_h l_h)^rho]^(sigma/rho) + (A_u l_u)^sigma}^((1-alpha)/sigma)`.
pub fn produce_output_tech(
    alpha: f64,
    sigma: f64,
    rho: f64,
    tech: &TechLevels,
    x: &InputBundle,
) -> Result<f64> {
    tech.validate()?;
    x.validate()?;
    let (ln_nest, ln_agg) = nest_logs(sigma, rho, tech, x);
    let ln_y = alpha * x.k_o.ln() + ((1.0 - alpha) / sigma) * ln_agg;
    let _ = ln_nest;
    finite_or_overflow(ln_y.exp(), "output")
}

/// ln of the inner nest H = (A_i k_i)^rho + (A_h l_h)^rho and of the outer
/// aggregate G = H^(sigma/rho) + (A_u l_u)^sigma.
fn nest_logs(sigma: f64, rho: f64, tech: &TechLevels, x: &InputBundle) -> (f64, f64) {
    let ln_h = log_sum_exp(
        rho * (tech.a_i.ln() + x.k_i.ln()),
        rho * (tech.a_h.ln() + x.l_h.ln()),
    );
    let ln_g = log_sum_exp((sigma / rho) * ln_h, sigma * (tech.a_u.ln() + x.l_u.ln()));
    (ln_h, ln_g)
}

/// Prices implied by the first-order conditions: each price is the wedge
/// times the analytic marginal product of the factor-augmenting form.
pub fn foc_prices(
    params: &ProductionParams,
    x: &InputBundle,
    wedges: &WedgeBundle,
) -> Result<PriceBundle> {
    let tech = tech_from_shares(params)?;
    foc_prices_tech(params.alpha, params.sigma, params.rho, &tech, x, wedges)
}

/// First-order-condition prices for an explicit technology-level point.
pub fn foc_prices_tech(
    alpha: f64,
    sigma: f64,
    rho: f64,
    tech: &TechLevels,
    x: &InputBundle,
    wedges: &WedgeBundle,
) -> Result<PriceBundle> {
    tech.validate()?;
    x.validate()?;
    wedges.validate()?;
    if sigma.abs() < SUBSTITUTION_GUARD || rho.abs() < SUBSTITUTION_GUARD {
        return Err(Error::Domain("sigma and rho must be bounded away from 0".into()));
    }
    let (ln_h, ln_g) = nest_logs(sigma, rho, tech, x);
    let ln_f = alpha * x.k_o.ln() + ((1.0 - alpha) / sigma) * ln_g;
    // shared factor of the three inner marginal products
    let ln_common = (1.0 - alpha).ln() + alpha * x.k_o.ln() + ((1.0 - alpha - sigma) / sigma) * ln_g;
    let ln_nest = ((sigma - rho) / rho) * ln_h;
    let prices = PriceBundle {
        w_h: (wedges.omega_h.ln()
            + ln_common
            + ln_nest
            + rho * tech.a_h.ln()
            + (rho - 1.0) * x.l_h.ln())
        .exp(),
        w_u: (wedges.omega_u.ln() + ln_common + sigma * tech.a_u.ln() + (sigma - 1.0) * x.l_u.ln())
            .exp(),
        r_i: (wedges.omega_i.ln()
            + ln_common
            + ln_nest
            + rho * tech.a_i.ln()
            + (rho - 1.0) * x.k_i.ln())
        .exp(),
        r_o: (wedges.omega_o.ln() + alpha.ln() + ln_f - x.k_o.ln()).exp(),
    };
    prices
        .validate()
        .map_err(|_| Error::Overflow("a first-order-condition price left the positive range".into()))?;
    Ok(prices)
}

/// Log skill premium ln(w_h/w_u) implied by the technology point:
/// `sigma ln(A_h/A_u) + ((sigma-rho)/rho) ln[(A_i k_i / (A_h l_h))^rho + 1]
///  - (1-sigma) ln(l_h/l_u) + ln(omega_h/omega_u)`.
pub fn skill_premium_log(
    sigma: f64,
    rho: f64,
    tech: &TechLevels,
    x: &InputBundle,
    wedge_ratio_hu: f64,
) -> Result<f64> {
    tech.validate()?;
    x.validate()?;
    if !(sigma < 1.0 && rho < 1.0) {
        return Err(Error::Domain("sigma and rho must be < 1".into()));
    }
    if rho.abs() < SUBSTITUTION_GUARD {
        return Err(Error::Domain("rho must be bounded away from 0".into()));
    }
    if !(wedge_ratio_hu > 0.0) {
        return Err(Error::Domain(format!("wedge ratio must be positive, got {wedge_ratio_hu}")));
    }
    let z = rho * (tech.a_i.ln() + x.k_i.ln() - tech.a_h.ln() - x.l_h.ln());
    Ok(sigma * (tech.a_h.ln() - tech.a_u.ln())
        + ((sigma - rho) / rho) * log_sum_exp(z, 0.0)
        - (1.0 - sigma) * (x.l_h.ln() - x.l_u.ln())
        + wedge_ratio_hu.ln())
}

/// Log wage-rental ratio ln(w_h/r_i):
/// `rho ln(A_h/A_i) - (1-rho) ln(l_h/k_i) + ln(omega_h/omega_i)`.
pub fn wage_rental_log(
    rho: f64,
    tech: &TechLevels,
    x: &InputBundle,
    wedge_ratio_hi: f64,
) -> Result<f64> {
    tech.validate()?;
    x.validate()?;
    if !(rho < 1.0) {
        return Err(Error::Domain("rho must be < 1".into()));
    }
    if !(wedge_ratio_hi > 0.0) {
        return Err(Error::Domain(format!("wedge ratio must be positive, got {wedge_ratio_hi}")));
    }
    Ok(rho * (tech.a_h.ln() - tech.a_i.ln()) - (1.0 - rho) * (x.l_h.ln() - x.k_i.ln())
        + wedge_ratio_hi.ln())
}

/// ln of the price-index composites B and C that appear in the factor
/// demand functions.
fn composite_logs(
    sigma: f64,
    rho: f64,
    tech: &TechLevels,
    prices: &PriceBundle,
    wedges: &WedgeBundle,
) -> Result<(f64, f64)> {
    let e_r = rho / (1.0 - rho);
    let e_s = sigma / (1.0 - sigma);
    let ln_b = -(1.0 / e_r)
        * log_sum_exp(
            e_r * (wedges.omega_i.ln() + tech.a_i.ln() - prices.r_i.ln()),
            e_r * (wedges.omega_h.ln() + tech.a_h.ln() - prices.w_h.ln()),
        );
    let ln_c = -(1.0 / e_s)
        * log_sum_exp(
            -e_s * ln_b,
            e_s * (wedges.omega_u.ln() + tech.a_u.ln() - prices.w_u.ln()),
        );
    if !ln_b.is_finite() || !ln_c.is_finite() {
        return Err(Error::Domain("composite price index B or C is not computable".into()));
    }
    Ok((ln_b, ln_c))
}

/// Factor demands at output level `y` for prices consistent with the
/// technology. Inverse of [`foc_prices_tech`] on the factor-price frontier.
pub fn factor_demands(
    params: &ProductionParams,
    tech: &TechLevels,
    prices: &PriceBundle,
    wedges: &WedgeBundle,
    y: f64,
) -> Result<InputBundle> {
    params.validate()?;
    tech.validate()?;
    prices.validate()?;
    wedges.validate()?;
    if !(y > 0.0 && y.is_finite()) {
        return Err(Error::Domain(format!("output must be positive, got {y}")));
    }
    let (alpha, sigma, rho) = (params.alpha, params.sigma, params.rho);
    let (ln_b, ln_c) = composite_logs(sigma, rho, tech, prices, wedges)?;
    let ln_y = y.ln();
    // [(1-alpha) r_o / (omega_o alpha)] in logs
    let ln_ro_term = (1.0 - alpha).ln() + prices.r_o.ln() - wedges.omega_o.ln() - alpha.ln();
    let b_exp = -(sigma - rho) / ((1.0 - rho) * (1.0 - sigma));
    let c_exp = (1.0 - alpha + alpha * sigma) / (1.0 - sigma);
    let ln_lh = ln_y
        + alpha * ln_ro_term
        + (wedges.omega_h.ln() - prices.w_h.ln()) / (1.0 - rho)
        + (rho / (1.0 - rho)) * tech.a_h.ln()
        + b_exp * ln_b
        + c_exp * ln_c;
    let ln_ki = ln_y
        + alpha * ln_ro_term
        + (wedges.omega_i.ln() - prices.r_i.ln()) / (1.0 - rho)
        + (rho / (1.0 - rho)) * tech.a_i.ln()
        + b_exp * ln_b
        + c_exp * ln_c;
    let ln_lu = ln_y
        + alpha * ln_ro_term
        + (wedges.omega_u.ln() - prices.w_u.ln()) / (1.0 - sigma)
        + (sigma / (1.0 - sigma)) * tech.a_u.ln()
        + c_exp * ln_c;
    let ln_ko = ln_y + (alpha - 1.0) * ln_ro_term + (1.0 - alpha) * ln_c;
    let x = InputBundle {
        k_i: ln_ki.exp(),
        k_o: ln_ko.exp(),
        l_h: ln_lh.exp(),
        l_u: ln_lu.exp(),
    };
    x.validate()
        .map_err(|_| Error::Overflow("a factor demand left the positive range".into()))?;
    Ok(x)
}

/// Log relative demand for skilled vs unskilled labor, written so that both
/// output and the non-ICT block cancel.
pub fn relative_labor_demand_log(
    sigma: f64,
    rho: f64,
    tech: &TechLevels,
    prices: &PriceBundle,
    wedges: &WedgeBundle,
) -> Result<f64> {
    tech.validate()?;
    prices.validate()?;
    wedges.validate()?;
    if sigma.abs() < SUBSTITUTION_GUARD || rho.abs() < SUBSTITUTION_GUARD {
        return Err(Error::Domain("sigma and rho must be bounded away from 0".into()));
    }
    let e_r = rho / (1.0 - rho);
    let ln_whu_wedge = wedges.omega_h.ln() - wedges.omega_u.ln();
    let ln_whi_wedge = wedges.omega_h.ln() - wedges.omega_i.ln();
    let ln_ah_ai = tech.a_h.ln() - tech.a_i.ln();
    let ln_d = -(1.0 / e_r)
        * log_sum_exp(
            -e_r * prices.r_i.ln(),
            e_r * (ln_whi_wedge + ln_ah_ai - prices.w_h.ln()),
        );
    if !ln_d.is_finite() {
        return Err(Error::Domain("composite price index D is not computable".into()));
    }
    let cross = (sigma - rho) / ((1.0 - sigma) * (1.0 - rho));
    Ok(-prices.w_h.ln() / (1.0 - rho) + prices.w_u.ln() / (1.0 - sigma) - cross * ln_d
        + (sigma * (tech.a_h.ln() - tech.a_u.ln()) + ln_whu_wedge) / (1.0 - sigma)
        - cross * (ln_ah_ai + ln_whi_wedge))
}

/// Relative step used by the Morishima finite difference.
const MORISHIMA_STEP: f64 = 1e-6;

/// Morishima elasticity of substitution of input `a` for input `b`:
/// the change in ln(x_a/x_b) when the price of `b` moves, computed by a
/// central finite difference on the factor demand system.
pub fn morishima(
    a: Input,
    b: Input,
    params: &ProductionParams,
    tech: &TechLevels,
    prices: &PriceBundle,
    wedges: &WedgeBundle,
) -> Result<f64> {
    if a == b {
        return Err(Error::Domain("Morishima elasticity requires two distinct inputs".into()));
    }
    let p_b = prices.get(b);
    let h = MORISHIMA_STEP * p_b;
    // demands are linear in y, so the elasticity is invariant to it
    let y = 1.0;
    let up = factor_demands(params, tech, &prices.with(b, p_b + h), wedges, y)?;
    let dn = factor_demands(params, tech, &prices.with(b, p_b - h), wedges, y)?;
    let dln_p = (p_b + h).ln() - (p_b - h).ln();
    let dln_a = up.get(a).ln() - dn.get(a).ln();
    let dln_b = up.get(b).ln() - dn.get(b).ln();
    Ok((dln_a - dln_b) / dln_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::KeyedRng;
    use approx::assert_relative_eq;

    fn params_default() -> ProductionParams {
        ProductionParams::new(0.3, 0.5, -1.0, 2.0, 0.5, 0.5).unwrap()
    }

    /// A random valid evaluation point drawn from a keyed stream.
    fn random_point(key: u64) -> (ProductionParams, InputBundle, WedgeBundle) {
        let mut rng = KeyedRng::new(0xCE5, &[key]);
        let params = ProductionParams::new(
            rng.uniform(0.1, 0.6),
            rng.uniform_nonzero(-0.8, 0.95, 1e-3),
            rng.uniform_nonzero(-2.0, 0.9, 1e-3),
            rng.uniform(0.5, 3.0),
            rng.uniform(0.1, 0.9),
            rng.uniform(0.1, 0.9),
        )
        .unwrap();
        let x = InputBundle {
            k_i: rng.uniform(0.3, 4.0),
            k_o: rng.uniform(0.3, 4.0),
            l_h: rng.uniform(0.3, 4.0),
            l_u: rng.uniform(0.3, 4.0),
        };
        let wedges = WedgeBundle {
            omega_h: rng.uniform(0.5, 2.0),
            omega_u: rng.uniform(0.5, 2.0),
            omega_i: rng.uniform(0.5, 2.0),
            omega_o: rng.uniform(0.5, 2.0),
        };
        (params, x, wedges)
    }

    #[test]
    fn unit_inputs_collapse_to_a() {
        let y = produce_output(
            &params_default(),
            &InputBundle {
                k_i: 1.0,
                k_o: 1.0,
                l_h: 1.0,
                l_u: 1.0,
            },
        )
        .unwrap();
        assert_relative_eq!(y, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_shares_return_single_input() {
        let p = ProductionParams {
            alpha: 1e-12,
            sigma: 0.5,
            rho: -1.0,
            a: 1.0,
            lambda_share: 1.0 - 1e-12,
            mu_share: 1.0 - 1e-12,
        };
        let y = produce_output(
            &p,
            &InputBundle {
                k_i: 3.0,
                k_o: 1.0,
                l_h: 1.0,
                l_u: 1.0,
            },
        )
        .unwrap();
        assert!((y - 3.0).abs() < 1e-6, "y = {y}");
    }

    #[test]
    fn constant_returns_to_scale() {
        for key in 0..10u64 {
            let (params, x, _) = random_point(key);
            let y = produce_output(&params, &x).unwrap();
            let y2 = produce_output(&params, &x.scaled(2.0)).unwrap();
            assert_relative_eq!(y2, 2.0 * y, max_relative = 1e-12);
        }
    }

    #[test]
    fn nonpositive_inputs_are_domain_errors() {
        let mut x = InputBundle {
            k_i: 1.0,
            k_o: 1.0,
            l_h: 1.0,
            l_u: 1.0,
        };
        x.l_u = -1.0;
        assert!(matches!(
            produce_output(&params_default(), &x),
            Err(Error::Domain(_))
        ));
        let p = ProductionParams {
            rho: 0.0,
            ..params_default()
        };
        assert!(matches!(
            produce_output(
                &p,
                &InputBundle {
                    k_i: 1.0,
                    k_o: 1.0,
                    l_h: 1.0,
                    l_u: 1.0
                }
            ),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn tech_from_shares_direct_substitution() {
        // alpha at the guard edge so A^(1/(1-alpha)) = 1 exactly for A = 1
        let p = ProductionParams {
            alpha: 1e-12,
            sigma: 0.5,
            rho: -1.0,
            a: 1.0,
            lambda_share: 0.5,
            mu_share: 0.5,
        };
        let tech = tech_from_shares(&p).unwrap();
        assert_relative_eq!(tech.a_u, 0.25, max_relative = 1e-12);
        assert_relative_eq!(tech.a_i, 0.5, max_relative = 1e-12);
        assert_relative_eq!(tech.a_h, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn tech_ratio_forced_by_formula() {
        let p = ProductionParams::new(0.3, -0.4, -0.4, 1.7, 0.3, 0.3).unwrap();
        let tech = tech_from_shares(&p).unwrap();
        let expected = (p.mu_share / (1.0 - p.mu_share)).powf(1.0 / p.rho);
        assert_relative_eq!(tech.a_i / tech.a_h, expected, max_relative = 1e-12);
    }

    #[test]
    fn share_form_equals_tech_form() {
        for key in 0..10u64 {
            let (params, x, _) = random_point(key);
            let tech = tech_from_shares(&params).unwrap();
            let y1 = produce_output(&params, &x).unwrap();
            let y2 = produce_output_tech(params.alpha, params.sigma, params.rho, &tech, &x).unwrap();
            assert_relative_eq!(y1, y2, max_relative = 1e-10);
        }
    }

    #[test]
    fn foc_prices_match_finite_differences() {
        for key in 0..20u64 {
            let (params, x, wedges) = random_point(key);
            let prices = foc_prices(&params, &x, &wedges).unwrap();
            for input in Input::ALL {
                let x0 = x.get(input);
                let h = 1e-6 * x0;
                let mut up = x;
                let mut dn = x;
                match input {
                    Input::IctCapital => {
                        up.k_i += h;
                        dn.k_i -= h;
                    }
                    Input::NonIctCapital => {
                        up.k_o += h;
                        dn.k_o -= h;
                    }
                    Input::SkilledLabor => {
                        up.l_h += h;
                        dn.l_h -= h;
                    }
                    Input::UnskilledLabor => {
                        up.l_u += h;
                        dn.l_u -= h;
                    }
                }
                let fd = (produce_output(&params, &up).unwrap()
                    - produce_output(&params, &dn).unwrap())
                    / (2.0 * h);
                let wedge = match input {
                    Input::IctCapital => wedges.omega_i,
                    Input::NonIctCapital => wedges.omega_o,
                    Input::SkilledLabor => wedges.omega_h,
                    Input::UnskilledLabor => wedges.omega_u,
                };
                assert_relative_eq!(prices.get(input), wedge * fd, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn euler_identity_holds() {
        for key in 0..10u64 {
            let (params, x, wedges) = random_point(key);
            let y = produce_output(&params, &x).unwrap();
            let prices = foc_prices(&params, &x, &wedges).unwrap();
            let total = prices.w_h / wedges.omega_h * x.l_h
                + prices.w_u / wedges.omega_u * x.l_u
                + prices.r_i / wedges.omega_i * x.k_i
                + prices.r_o / wedges.omega_o * x.k_o;
            assert_relative_eq!(total, y, max_relative = 1e-10);
        }
    }

    #[test]
    fn wedge_scaling_scales_prices() {
        let (params, x, wedges) = random_point(3);
        let c = 1.7;
        let scaled = WedgeBundle {
            omega_h: wedges.omega_h * c,
            omega_u: wedges.omega_u * c,
            omega_i: wedges.omega_i * c,
            omega_o: wedges.omega_o * c,
        };
        let p1 = foc_prices(&params, &x, &wedges).unwrap();
        let p2 = foc_prices(&params, &x, &scaled).unwrap();
        for input in Input::ALL {
            assert_relative_eq!(p2.get(input), c * p1.get(input), max_relative = 1e-12);
        }
    }

    #[test]
    fn skill_premium_vanishing_case() {
        let tech = TechLevels {
            a_i: 2.0,
            a_h: 1.3,
            a_u: 1.3,
        };
        let x = InputBundle {
            k_i: 0.7,
            k_o: 1.0,
            l_h: 1.1,
            l_u: 1.1,
        };
        let v = skill_premium_log(0.5, 0.5, &tech, &x, 1.0).unwrap();
        // sigma = rho kills the bracket term; equal tech and labor kill the rest
        assert!(v.abs() < 1e-12, "v = {v}");
    }

    #[test]
    fn skill_premium_hand_value_ln2() {
        let tech = TechLevels {
            a_i: 1.0,
            a_h: 1.0,
            a_u: 1.0,
        };
        let x = InputBundle {
            k_i: 1.0,
            k_o: 1.0,
            l_h: 1.0,
            l_u: 1.0,
        };
        let v = skill_premium_log(0.8, 0.4, &tech, &x, 1.0).unwrap();
        assert_relative_eq!(v, std::f64::consts::LN_2, max_relative = 1e-12);
    }

    #[test]
    fn skill_premium_equals_foc_ratio() {
        for key in 0..20u64 {
            let (params, x, wedges) = random_point(key);
            let tech = tech_from_shares(&params).unwrap();
            let prices = foc_prices(&params, &x, &wedges).unwrap();
            let direct = skill_premium_log(
                params.sigma,
                params.rho,
                &tech,
                &x,
                wedges.omega_h / wedges.omega_u,
            )
            .unwrap();
            assert_relative_eq!(direct, (prices.w_h / prices.w_u).ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn wage_rental_zero_and_hand_value() {
        let x = InputBundle {
            k_i: 1.4,
            k_o: 1.0,
            l_h: 1.4,
            l_u: 1.0,
        };
        let tech = TechLevels {
            a_i: 2.0,
            a_h: 2.0,
            a_u: 1.0,
        };
        assert!(wage_rental_log(0.5, &tech, &x, 1.0).unwrap().abs() < 1e-12);
        let tech4 = TechLevels {
            a_i: 1.0,
            a_h: 4.0,
            a_u: 1.0,
        };
        let v = wage_rental_log(0.5, &tech4, &x, 1.0).unwrap();
        assert_relative_eq!(v, 0.5 * 4.0_f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn wage_rental_equals_foc_ratio() {
        for key in 0..20u64 {
            let (params, x, wedges) = random_point(key);
            let tech = tech_from_shares(&params).unwrap();
            let prices = foc_prices(&params, &x, &wedges).unwrap();
            let direct =
                wage_rental_log(params.rho, &tech, &x, wedges.omega_h / wedges.omega_i).unwrap();
            assert_relative_eq!(direct, (prices.w_h / prices.r_i).ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn demands_invert_prices() {
        for key in 0..20u64 {
            let (params, x, wedges) = random_point(key);
            let tech = tech_from_shares(&params).unwrap();
            let y = produce_output(&params, &x).unwrap();
            let prices = foc_prices(&params, &x, &wedges).unwrap();
            let back = factor_demands(&params, &tech, &prices, &wedges, y).unwrap();
            for input in Input::ALL {
                assert_relative_eq!(back.get(input), x.get(input), max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn demands_linear_in_output() {
        let (params, x, wedges) = random_point(5);
        let tech = tech_from_shares(&params).unwrap();
        let y = produce_output(&params, &x).unwrap();
        let prices = foc_prices(&params, &x, &wedges).unwrap();
        let d1 = factor_demands(&params, &tech, &prices, &wedges, y).unwrap();
        let d2 = factor_demands(&params, &tech, &prices, &wedges, 2.0 * y).unwrap();
        for input in Input::ALL {
            assert_relative_eq!(d2.get(input), 2.0 * d1.get(input), max_relative = 1e-12);
        }
    }

    #[test]
    fn demands_homogeneous_in_prices_and_wedges() {
        let (params, x, wedges) = random_point(6);
        let tech = tech_from_shares(&params).unwrap();
        let y = produce_output(&params, &x).unwrap();
        let prices = foc_prices(&params, &x, &wedges).unwrap();
        let c = 2.3;
        let prices2 = PriceBundle {
            w_h: c * prices.w_h,
            w_u: c * prices.w_u,
            r_i: c * prices.r_i,
            r_o: c * prices.r_o,
        };
        let wedges2 = WedgeBundle {
            omega_h: c * wedges.omega_h,
            omega_u: c * wedges.omega_u,
            omega_i: c * wedges.omega_i,
            omega_o: c * wedges.omega_o,
        };
        let d1 = factor_demands(&params, &tech, &prices, &wedges, y).unwrap();
        let d2 = factor_demands(&params, &tech, &prices2, &wedges2, y).unwrap();
        for input in Input::ALL {
            assert_relative_eq!(d2.get(input), d1.get(input), max_relative = 1e-12);
        }
    }

    #[test]
    fn relative_demand_matches_demand_ratio() {
        for key in 0..10u64 {
            let (params, x, wedges) = random_point(key);
            let tech = tech_from_shares(&params).unwrap();
            let y = produce_output(&params, &x).unwrap();
            let prices = foc_prices(&params, &x, &wedges).unwrap();
            let direct =
                relative_labor_demand_log(params.sigma, params.rho, &tech, &prices, &wedges)
                    .unwrap();
            let demands = factor_demands(&params, &tech, &prices, &wedges, 3.7 * y).unwrap();
            assert_relative_eq!(direct, (demands.l_h / demands.l_u).ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn relative_demand_ignores_non_ict_block() {
        let (params, x, wedges) = random_point(8);
        let tech = tech_from_shares(&params).unwrap();
        let prices = foc_prices(&params, &x, &wedges).unwrap();
        let v1 = relative_labor_demand_log(params.sigma, params.rho, &tech, &prices, &wedges)
            .unwrap();
        let mut prices2 = prices;
        prices2.r_o *= 11.0;
        let mut wedges2 = wedges;
        wedges2.omega_o *= 0.1;
        let v2 = relative_labor_demand_log(params.sigma, params.rho, &tech, &prices2, &wedges2)
            .unwrap();
        assert_relative_eq!(v1, v2, epsilon = 1e-14);
    }

    /// Analytic log-derivative oracle for the demand system, derived by
    /// differentiating the composite price indices by hand. Test-only; the
    /// production path uses finite differences.
    fn morishima_lu_ki_analytic(
        params: &ProductionParams,
        tech: &TechLevels,
        prices: &PriceBundle,
        wedges: &WedgeBundle,
    ) -> f64 {
        let (sigma, rho) = (params.sigma, params.rho);
        let e_r = rho / (1.0 - rho);
        let b_i = (e_r * (wedges.omega_i * tech.a_i / prices.r_i).ln()).exp();
        let b_h = (e_r * (wedges.omega_h * tech.a_h / prices.w_h).ln()).exp();
        let s_i = b_i / (b_i + b_h);
        let cross = (sigma - rho) / ((1.0 - rho) * (1.0 - sigma));
        // d ln l_u / d ln r_i - d ln k_i / d ln r_i; the shared C terms cancel
        1.0 / (1.0 - rho) + cross * s_i
    }

    #[test]
    fn morishima_within_nest_anchor() {
        // paper-scale parameters: elasticities 6.336 and 0.852
        let sigma = 1.0 - 1.0 / 6.336;
        let rho = 1.0 - 1.0 / 0.852;
        for key in 0..3u64 {
            let (mut params, x, wedges) = random_point(40 + key);
            params.sigma = sigma;
            params.rho = rho;
            let tech = tech_from_shares(&params).unwrap();
            let prices = foc_prices(&params, &x, &wedges).unwrap();
            let e = morishima(
                Input::IctCapital,
                Input::SkilledLabor,
                &params,
                &tech,
                &prices,
                &wedges,
            )
            .unwrap();
            assert!((e - 0.852).abs() < 1e-4, "e = {e}");
            let e_sym = morishima(
                Input::SkilledLabor,
                Input::IctCapital,
                &params,
                &tech,
                &prices,
                &wedges,
            )
            .unwrap();
            assert!((e_sym - 0.852).abs() < 1e-4, "e_sym = {e_sym}");
        }
    }

    #[test]
    fn morishima_across_nest_anchor() {
        let sigma = 1.0 - 1.0 / 6.336;
        let rho = 1.0 - 1.0 / 0.852;
        for key in 0..3u64 {
            let (mut params, x, wedges) = random_point(50 + key);
            params.sigma = sigma;
            params.rho = rho;
            let tech = tech_from_shares(&params).unwrap();
            let prices = foc_prices(&params, &x, &wedges).unwrap();
            let e = morishima(
                Input::IctCapital,
                Input::UnskilledLabor,
                &params,
                &tech,
                &prices,
                &wedges,
            )
            .unwrap();
            assert!((e - 6.336).abs() < 1e-4, "e = {e}");
            let e2 = morishima(
                Input::SkilledLabor,
                Input::UnskilledLabor,
                &params,
                &tech,
                &prices,
                &wedges,
            )
            .unwrap();
            assert!((e2 - 6.336).abs() < 1e-4, "e2 = {e2}");
        }
    }

    #[test]
    fn morishima_asymmetric_entry_matches_analytic_derivative() {
        for key in 0..5u64 {
            let (params, x, wedges) = random_point(60 + key);
            let tech = tech_from_shares(&params).unwrap();
            let prices = foc_prices(&params, &x, &wedges).unwrap();
            let fd = morishima(
                Input::UnskilledLabor,
                Input::IctCapital,
                &params,
                &tech,
                &prices,
                &wedges,
            )
            .unwrap();
            let analytic = morishima_lu_ki_analytic(&params, &tech, &prices, &wedges);
            assert!((fd - analytic).abs() < 1e-4, "fd = {fd}, analytic = {analytic}");
        }
    }

    #[test]
    fn morishima_rejects_equal_inputs() {
        let (params, x, wedges) = random_point(70);
        let tech = tech_from_shares(&params).unwrap();
        let prices = foc_prices(&params, &x, &wedges).unwrap();
        assert!(morishima(
            Input::IctCapital,
            Input::IctCapital,
            &params,
            &tech,
            &prices,
            &wedges
        )
        .is_err());
    }

    #[test]
    fn premium_increases_in_ict_capital_under_csc() {
        let mut rng = KeyedRng::new(0xCE5, &[777]);
        let mut checked = 0;
        while checked < 50 {
            let sigma = rng.uniform(0.05, 0.95);
            let rho = rng.uniform(-2.0, sigma - 0.05);
            if rho.abs() < 1e-3 {
                continue;
            }
            let tech = TechLevels {
                a_i: rng.uniform(0.5, 2.0),
                a_h: rng.uniform(0.5, 2.0),
                a_u: rng.uniform(0.5, 2.0),
            };
            let x = InputBundle {
                k_i: rng.uniform(0.3, 4.0),
                k_o: 1.0,
                l_h: rng.uniform(0.3, 4.0),
                l_u: rng.uniform(0.3, 4.0),
            };
            let mut up = x;
            up.k_i *= 1.0 + 1e-6;
            let v0 = skill_premium_log(sigma, rho, &tech, &x, 1.0).unwrap();
            let v1 = skill_premium_log(sigma, rho, &tech, &up, 1.0).unwrap();
            assert!(v1 > v0, "premium must rise with k_i (sigma={sigma}, rho={rho})");
            checked += 1;
        }
    }
}
