//! Shift-share (leave-one-out) and lagged instruments built from
//! country-industry input panels.
//!
//! The shift-share level for country `c` accumulates, year over year, the
//! growth of each industry aggregated over all other countries, weighted
//! by `c`'s own industry shares in its first observed year. The level is
//! anchored at zero in that base year so that any differencing horizon can
//! be applied downstream.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three instrumented inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InstrumentInput {
    IctCapital,
    SkilledLabor,
    UnskilledLabor,
}

impl InstrumentInput {
    pub const ALL: [InstrumentInput; 3] = [
        InstrumentInput::IctCapital,
        InstrumentInput::SkilledLabor,
        InstrumentInput::UnskilledLabor,
    ];
}

/// One row of industry.csv: input quantities for a country-industry-year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndustryCell {
    pub country: String,
    pub industry: String,
    pub year: i32,
    pub k_i: f64,
    pub l_h: f64,
    pub l_u: f64,
}

impl IndustryCell {
    fn get(&self, input: InstrumentInput) -> f64 {
        match input {
            InstrumentInput::IctCapital => self.k_i,
            InstrumentInput::SkilledLabor => self.l_h,
            InstrumentInput::UnskilledLabor => self.l_u,
        }
    }
}

/// Validated country-industry-year panel of input quantities.
#[derive(Debug, Clone)]
pub struct IndustryPanel {
    cells: BTreeMap<(String, String, i32), IndustryCell>,
    countries: Vec<String>,
    industries: Vec<String>,
}

impl IndustryPanel {
    pub fn from_cells(cells: Vec<IndustryCell>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut countries = BTreeSet::new();
        let mut industries = BTreeSet::new();
        for c in cells {
            for (name, v) in [("k_i", c.k_i), ("l_h", c.l_h), ("l_u", c.l_u)] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Invariant(format!(
                        "nonpositive {name} in industry cell ({}, {}, {})",
                        c.country, c.industry, c.year
                    )));
                }
            }
            countries.insert(c.country.clone());
            industries.insert(c.industry.clone());
            let key = (c.country.clone(), c.industry.clone(), c.year);
            if map.insert(key, c).is_some() {
                let (country, industry, year) = map.keys().last().cloned().expect("non-empty");
                return Err(Error::Invariant(format!(
                    "duplicate industry cell near ({country}, {industry}, {year})"
                )));
            }
        }
        Ok(Self {
            cells: map,
            countries: countries.into_iter().collect(),
            industries: industries.into_iter().collect(),
        })
    }

    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    pub fn industries(&self) -> &[String] {
        &self.industries
    }

    fn quantity(&self, country: &str, industry: &str, year: i32, input: InstrumentInput) -> Option<f64> {
        self.cells
            .get(&(country.to_string(), industry.to_string(), year))
            .map(|c| c.get(input))
    }

    /// First year a country appears (any industry).
    pub fn base_year(&self, country: &str) -> Result<i32> {
        self.cells
            .keys()
            .filter(|(c, _, _)| c == country)
            .map(|(_, _, y)| *y)
            .min()
            .ok_or_else(|| Error::Missing(format!("country {country} absent from industry panel")))
    }

    /// Last year a country appears.
    pub fn last_year(&self, country: &str) -> Result<i32> {
        self.cells
            .keys()
            .filter(|(c, _, _)| c == country)
            .map(|(_, _, y)| *y)
            .max()
            .ok_or_else(|| Error::Missing(format!("country {country} absent from industry panel")))
    }

    /// Country aggregate of one input at one year.
    pub fn country_total(&self, country: &str, year: i32, input: InstrumentInput) -> Option<f64> {
        let mut total = 0.0;
        let mut any = false;
        for industry in &self.industries {
            if let Some(v) = self.quantity(country, industry, year, input) {
                total += v;
                any = true;
            }
        }
        any.then_some(total)
    }

    /// Growth of the leave-one-out aggregate of `industry` from `year-1`
    /// to `year`, using only countries observed in both years.
    fn loo_growth(
        &self,
        excluded: &str,
        industry: &str,
        year: i32,
        input: InstrumentInput,
    ) -> Result<f64> {
        let mut prev = 0.0;
        let mut cur = 0.0;
        let mut any = false;
        for country in &self.countries {
            if country == excluded {
                continue;
            }
            if let (Some(a), Some(b)) = (
                self.quantity(country, industry, year - 1, input),
                self.quantity(country, industry, year, input),
            ) {
                prev += a;
                cur += b;
                any = true;
            }
        }
        if !any {
            return Err(Error::Missing(format!(
                "leave-one-out set for industry {industry} at {year} excluding {excluded} is empty \
                 (need at least 2 countries)"
            )));
        }
        Ok(cur.ln() - prev.ln())
    }
}

/// Load and validate industry.csv.
pub fn load_industry_csv(path: &Path) -> Result<IndustryPanel> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut cells = Vec::new();
    for (idx, row) in reader.deserialize::<IndustryCell>().enumerate() {
        match row {
            Ok(c) => cells.push(c),
            Err(e) => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    row: idx + 2,
                    msg: e.to_string(),
                })
            }
        }
    }
    IndustryPanel::from_cells(cells)
}

/// Write industry.csv.
pub fn save_industry_csv(panel: &IndustryPanel, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for cell in panel.cells.values() {
        writer.serialize(cell)?;
    }
    writer.flush()?;
    Ok(())
}

/// Base-year industry shares for one (country, input). Industries without
/// a base-year cell get share zero and drop out.
fn base_shares(
    panel: &IndustryPanel,
    country: &str,
    input: InstrumentInput,
    base_year: i32,
) -> Result<Vec<(String, f64)>> {
    let mut quantities = Vec::new();
    let mut total = 0.0;
    for industry in panel.industries() {
        if let Some(v) = panel.quantity(country, industry, base_year, input) {
            total += v;
            quantities.push((industry.clone(), v));
        }
    }
    if total <= 0.0 || quantities.is_empty() {
        return Err(Error::Missing(format!(
            "zero base-year total for ({country}, {input:?}) at {base_year}"
        )));
    }
    Ok(quantities
        .into_iter()
        .map(|(industry, v)| (industry, v / total))
        .collect())
}

/// Cumulative shift-share log level of `input` for `country` at `year`,
/// anchored at zero in `base_year`.
pub fn shift_share_level(
    panel: &IndustryPanel,
    input: InstrumentInput,
    country: &str,
    year: i32,
    base_year: i32,
) -> Result<f64> {
    if year < base_year {
        return Err(Error::Window(format!(
            "shift-share level requested at {year}, before base year {base_year}"
        )));
    }
    let shares = base_shares(panel, country, input, base_year)?;
    let mut level = 0.0;
    for t in (base_year + 1)..=year {
        for (industry, share) in &shares {
            if *share > 0.0 {
                level += share * panel.loo_growth(country, industry, t, input)?;
            }
        }
    }
    Ok(level)
}

/// Instrument construction flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstrumentKind {
    /// Differenced shift-share log ratios; pairs with the five-year
    /// differenced system.
    ShiftShare,
    /// Lagged log levels of the input ratios; pairs with the one-year
    /// differenced system.
    Lagged,
}

/// Instrument values per (country, year), with named columns.
#[derive(Debug, Clone)]
pub struct InstrumentSeries {
    pub kind: InstrumentKind,
    pub horizon: i32,
    pub columns: Vec<String>,
    rows: BTreeMap<(String, i32), Vec<f64>>,
}

impl InstrumentSeries {
    pub fn get(&self, country: &str, year: i32) -> Option<&[f64]> {
        self.rows
            .get(&(country.to_string(), year))
            .map(|v| v.as_slice())
    }

    pub fn rows(&self) -> impl Iterator<Item = (&(String, i32), &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Column index of the instrument for the skilled/unskilled ratio.
    pub fn lh_lu_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, name)| name.contains("lh_lu"))
            .map(|(i, _)| i)
            .collect()
    }

    /// Column index of the instrument for the ICT/skilled ratio.
    pub fn ki_lh_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, name)| name.contains("ki_lh"))
            .map(|(i, _)| i)
            .collect()
    }

    /// Write instruments.csv: country, year, then one column per instrument.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec!["country".to_string(), "year".to_string()];
        header.extend(self.columns.iter().cloned());
        writer.write_record(&header)?;
        for ((country, year), values) in &self.rows {
            let mut rec = vec![country.clone(), year.to_string()];
            rec.extend(values.iter().map(|v| format!("{v}")));
            writer.write_record(&rec)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Default lags (in years before the start of the difference window) for
/// the lagged instrument kind.
pub const DEFAULT_LAGS: [i32; 3] = [2, 3, 4];

/// Build instruments for every (country, year) where the construction
/// window is available.
///
/// Shift-share: `d_ln(l_h^b/l_u^b)` and `d_ln(k_i^b/l_h^b)` over `horizon`.
/// Lagged: log input ratios dated `lag` years before the start of the
/// difference window, i.e. at `year - horizon - lag`.
pub fn build_instruments(
    panel: &IndustryPanel,
    horizon: i32,
    kind: InstrumentKind,
    lags: &[i32],
) -> Result<InstrumentSeries> {
    if horizon < 1 {
        return Err(Error::Config(format!("horizon must be >= 1, got {horizon}")));
    }
    let mut rows = BTreeMap::new();
    let columns = match kind {
        InstrumentKind::ShiftShare => {
            vec!["d_ln_lh_lu_b".to_string(), "d_ln_ki_lh_b".to_string()]
        }
        InstrumentKind::Lagged => {
            let mut cols = Vec::new();
            for lag in lags {
                cols.push(format!("ln_lh_lu_lag{lag}"));
            }
            for lag in lags {
                cols.push(format!("ln_ki_lh_lag{lag}"));
            }
            cols
        }
    };
    for country in panel.countries() {
        let t0 = panel.base_year(country)?;
        let t_last = panel.last_year(country)?;
        match kind {
            InstrumentKind::ShiftShare => {
                // levels once per (input); differenced at the horizon
                let mut levels: BTreeMap<InstrumentInput, BTreeMap<i32, f64>> = BTreeMap::new();
                for input in InstrumentInput::ALL {
                    let mut by_year = BTreeMap::new();
                    let mut level = 0.0;
                    by_year.insert(t0, 0.0);
                    let shares = base_shares(panel, country, input, t0)?;
                    for t in (t0 + 1)..=t_last {
                        let mut ok = true;
                        let mut step = 0.0;
                        for (industry, share) in &shares {
                            if *share > 0.0 {
                                match panel.loo_growth(country, industry, t, input) {
                                    Ok(g) => step += share * g,
                                    Err(_) => {
                                        ok = false;
                                        break;
                                    }
                                }
                            }
                        }
                        if !ok {
                            break;
                        }
                        level += step;
                        by_year.insert(t, level);
                    }
                    levels.insert(input, by_year);
                }
                for t in (t0 + horizon)..=t_last {
                    let avail = |input: InstrumentInput, year: i32| -> Option<f64> {
                        levels.get(&input).and_then(|m| m.get(&year)).copied()
                    };
                    let needed = [
                        avail(InstrumentInput::SkilledLabor, t),
                        avail(InstrumentInput::SkilledLabor, t - horizon),
                        avail(InstrumentInput::UnskilledLabor, t),
                        avail(InstrumentInput::UnskilledLabor, t - horizon),
                        avail(InstrumentInput::IctCapital, t),
                        avail(InstrumentInput::IctCapital, t - horizon),
                    ];
                    if needed.iter().any(|v| v.is_none()) {
                        continue;
                    }
                    let v: Vec<f64> = needed.into_iter().map(|v| v.expect("checked")).collect();
                    let d_lh_lu = (v[0] - v[1]) - (v[2] - v[3]);
                    let d_ki_lh = (v[4] - v[5]) - (v[0] - v[1]);
                    rows.insert((country.clone(), t), vec![d_lh_lu, d_ki_lh]);
                }
            }
            InstrumentKind::Lagged => {
                let max_lag = lags.iter().copied().max().unwrap_or(0);
                for t in (t0 + horizon + max_lag)..=t_last {
                    let mut values = Vec::with_capacity(2 * lags.len());
                    let mut ok = true;
                    for (num, den) in [
                        (InstrumentInput::SkilledLabor, InstrumentInput::UnskilledLabor),
                        (InstrumentInput::IctCapital, InstrumentInput::SkilledLabor),
                    ] {
                        for lag in lags {
                            let year = t - horizon - lag;
                            match (
                                panel.country_total(country, year, num),
                                panel.country_total(country, year, den),
                            ) {
                                (Some(a), Some(b)) => values.push(a.ln() - b.ln()),
                                _ => {
                                    ok = false;
                                    break;
                                }
                            }
                        }
                        if !ok {
                            break;
                        }
                    }
                    if ok {
                        rows.insert((country.clone(), t), values);
                    }
                }
            }
        }
    }
    Ok(InstrumentSeries {
        kind,
        horizon,
        columns,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(country: &str, industry: &str, year: i32, v: f64) -> IndustryCell {
        IndustryCell {
            country: country.into(),
            industry: industry.into(),
            year,
            k_i: v,
            l_h: v,
            l_u: v,
        }
    }

    /// Two countries, two industries, two years. Country B's industry 1
    /// grows by ln(1.1) and industry 2 by ln(1.21); country A holds even
    /// shares in the base year.
    fn hand_case() -> IndustryPanel {
        IndustryPanel::from_cells(vec![
            cell("A", "d1", 2000, 5.0),
            cell("A", "d2", 2000, 5.0),
            cell("A", "d1", 2001, 5.5),
            cell("A", "d2", 2001, 5.0),
            cell("B", "d1", 2000, 10.0),
            cell("B", "d2", 2000, 4.0),
            cell("B", "d1", 2001, 11.0),
            cell("B", "d2", 2001, 4.84),
        ])
        .unwrap()
    }

    #[test]
    fn shift_share_hand_value() {
        let panel = hand_case();
        let level =
            shift_share_level(&panel, InstrumentInput::IctCapital, "A", 2001, 2000).unwrap();
        let expected = 0.5 * 1.1_f64.ln() + 0.5 * 1.21_f64.ln();
        assert!((level - expected).abs() < 1e-12, "level = {level}");
        assert!((level - 0.142965).abs() < 1e-6);
    }

    #[test]
    fn level_is_zero_at_base_year() {
        let panel = hand_case();
        for input in InstrumentInput::ALL {
            for country in ["A", "B"] {
                let v = shift_share_level(&panel, input, country, 2000, 2000).unwrap();
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn single_industry_tracks_loo_growth() {
        let panel = IndustryPanel::from_cells(vec![
            cell("A", "d1", 2000, 3.0),
            cell("A", "d1", 2001, 9.0),
            cell("B", "d1", 2000, 2.0),
            cell("B", "d1", 2001, 5.0),
        ])
        .unwrap();
        let level =
            shift_share_level(&panel, InstrumentInput::SkilledLabor, "A", 2001, 2000).unwrap();
        assert!((level - (5.0_f64 / 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn own_country_changes_do_not_move_the_instrument() {
        let mut cells = vec![
            cell("A", "d1", 2000, 5.0),
            cell("A", "d2", 2000, 5.0),
            cell("A", "d1", 2001, 5.5),
            cell("A", "d2", 2001, 5.0),
            cell("B", "d1", 2000, 10.0),
            cell("B", "d2", 2000, 4.0),
            cell("B", "d1", 2001, 11.0),
            cell("B", "d2", 2001, 4.84),
        ];
        let before = shift_share_level(
            &IndustryPanel::from_cells(cells.clone()).unwrap(),
            InstrumentInput::IctCapital,
            "A",
            2001,
            2000,
        )
        .unwrap();
        // triple country A's own post-base quantities
        for c in cells.iter_mut() {
            if c.country == "A" && c.year > 2000 {
                c.k_i *= 3.0;
                c.l_h *= 3.0;
                c.l_u *= 3.0;
            }
        }
        let after = shift_share_level(
            &IndustryPanel::from_cells(cells).unwrap(),
            InstrumentInput::IctCapital,
            "A",
            2001,
            2000,
        )
        .unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn foreign_rescaling_leaves_growth_unchanged() {
        let mut cells = vec![
            cell("A", "d1", 2000, 5.0),
            cell("A", "d1", 2001, 5.5),
            cell("A", "d2", 2000, 5.0),
            cell("A", "d2", 2001, 5.0),
            cell("B", "d1", 2000, 10.0),
            cell("B", "d1", 2001, 11.0),
            cell("B", "d2", 2000, 4.0),
            cell("B", "d2", 2001, 4.84),
        ];
        let before = shift_share_level(
            &IndustryPanel::from_cells(cells.clone()).unwrap(),
            InstrumentInput::IctCapital,
            "A",
            2001,
            2000,
        )
        .unwrap();
        for c in cells.iter_mut() {
            if c.country == "B" {
                c.k_i *= 7.0;
            }
        }
        let after = shift_share_level(
            &IndustryPanel::from_cells(cells).unwrap(),
            InstrumentInput::IctCapital,
            "A",
            2001,
            2000,
        )
        .unwrap();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn base_shares_sum_to_one() {
        let panel = hand_case();
        for country in ["A", "B"] {
            for input in InstrumentInput::ALL {
                let shares = base_shares(&panel, country, input, 2000).unwrap();
                let total: f64 = shares.iter().map(|(_, s)| s).sum();
                assert_eq!(total, 1.0);
            }
        }
    }

    #[test]
    fn single_country_is_an_error() {
        let panel = IndustryPanel::from_cells(vec![
            cell("A", "d1", 2000, 3.0),
            cell("A", "d1", 2001, 9.0),
        ])
        .unwrap();
        let err = shift_share_level(&panel, InstrumentInput::IctCapital, "A", 2001, 2000)
            .unwrap_err();
        assert!(err.to_string().contains("leave-one-out"), "{err}");
    }

    #[test]
    fn identical_growth_zeroes_the_ratio_instrument() {
        // all inputs identical within each cell, so l_h^b and l_u^b move together
        let mut cells = Vec::new();
        for country in ["A", "B", "C"] {
            for year in 2000..2010 {
                let v = 2.0 * 1.05_f64.powi(year - 2000);
                cells.push(cell(country, "d1", year, v));
            }
        }
        let panel = IndustryPanel::from_cells(cells).unwrap();
        let series = build_instruments(&panel, 5, InstrumentKind::ShiftShare, &[]).unwrap();
        for (_, values) in series.rows() {
            assert!(values[0].abs() < 1e-12 && values[1].abs() < 1e-12);
        }
    }

    #[test]
    fn lagged_window_arithmetic() {
        // six-year series: with horizon 1 and max lag 4 only the last year qualifies
        let mut cells = Vec::new();
        for country in ["A", "B"] {
            for year in 2000..2006 {
                cells.push(cell(country, "d1", year, 1.0 + (year - 1999) as f64));
            }
        }
        let panel = IndustryPanel::from_cells(cells).unwrap();
        let series = build_instruments(&panel, 1, InstrumentKind::Lagged, &DEFAULT_LAGS).unwrap();
        let years: Vec<i32> = series.rows().map(|((_, y), _)| *y).collect();
        assert_eq!(years, vec![2005, 2005]);
        assert_eq!(series.columns.len(), 6);
    }

    #[test]
    fn shift_share_rows_start_at_horizon() {
        let mut cells = Vec::new();
        for (ci, country) in ["A", "B", "C"].iter().enumerate() {
            for year in 2000..2010 {
                let v = (1.0 + ci as f64) * (1.03 + 0.01 * ci as f64).powi(year - 2000);
                cells.push(cell(country, "d1", year, v));
            }
        }
        let panel = IndustryPanel::from_cells(cells).unwrap();
        let series = build_instruments(&panel, 5, InstrumentKind::ShiftShare, &[]).unwrap();
        let min_year = series.rows().map(|((_, y), _)| *y).min().unwrap();
        assert_eq!(min_year, 2005);
    }
}
