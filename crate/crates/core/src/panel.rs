//! Country-year panel ingestion and construction: raw labor cells,
//! composition/efficiency adjustment, investment prices, interest rates,
//! and rental prices of capital.
//!
//! All files are UTF-8 CSV with a header row, '.' decimal separators, and
//! long format. Monetary values must already be comparable across
//! countries and years: currency conversion and deflation are explicitly
//! out of scope for this crate and must happen upstream.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Education level of a labor cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Skill {
    High,
    Medium,
    Low,
}

/// Gender of a labor cell. `All` marks panels without a gender breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    All,
}

/// Age bracket of a labor cell. `All` marks panels without an age breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeGroup {
    Young,
    Middle,
    Old,
    All,
}

/// Asset class of an investment cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Asset {
    #[serde(rename = "ict")]
    Ict,
    #[serde(rename = "non_ict")]
    NonIct,
}

/// Skilled/unskilled side of the technology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SkillType {
    Skilled,
    Unskilled,
}

impl fmt::Display for SkillType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkillType::Skilled => write!(f, "skilled"),
            SkillType::Unskilled => write!(f, "unskilled"),
        }
    }
}

/// Maps education levels to the two labor inputs. The default follows the
/// convention that college completion is skilled and everything else is
/// unskilled.
#[derive(Debug, Clone)]
pub struct SkillClassification {
    map: BTreeMap<Skill, SkillType>,
}

impl Default for SkillClassification {
    fn default() -> Self {
        let mut map = BTreeMap::new();
        map.insert(Skill::High, SkillType::Skilled);
        map.insert(Skill::Medium, SkillType::Unskilled);
        map.insert(Skill::Low, SkillType::Unskilled);
        Self { map }
    }
}

impl SkillClassification {
    pub fn new(map: BTreeMap<Skill, SkillType>) -> Self {
        Self { map }
    }

    pub fn class_of(&self, skill: Skill) -> SkillType {
        *self.map.get(&skill).unwrap_or(&SkillType::Unskilled)
    }
}

/// Demographic cell identifier inside a skill type.
pub type GroupKey = (Skill, Gender, AgeGroup);

/// Efficiency-unit base groups, one per skill type.
#[derive(Debug, Clone)]
pub struct BaseGroups {
    pub skilled: GroupKey,
    pub unskilled: GroupKey,
}

impl Default for BaseGroups {
    fn default() -> Self {
        Self {
            skilled: (Skill::High, Gender::Male, AgeGroup::Middle),
            unskilled: (Skill::Medium, Gender::Male, AgeGroup::Middle),
        }
    }
}

impl BaseGroups {
    pub fn for_type(&self, t: SkillType) -> GroupKey {
        match t {
            SkillType::Skilled => self.skilled,
            SkillType::Unskilled => self.unskilled,
        }
    }
}

/// One raw labor observation: wage and hours for a demographic cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawLaborCell {
    pub country: String,
    pub year: i32,
    pub skill: Skill,
    pub gender: Gender,
    pub age: AgeGroup,
    pub wage: f64,
    pub hours: f64,
}

/// One investment observation: price index and depreciation rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvestmentCell {
    pub country: String,
    pub year: i32,
    pub asset: Asset,
    pub q: f64,
    pub delta: f64,
}

/// Consumer price index levels for one country over contiguous years.
#[derive(Debug, Clone, PartialEq)]
pub struct CpiSeries {
    pub country: String,
    pub start_year: i32,
    pub levels: Vec<f64>,
}

impl CpiSeries {
    pub fn level(&self, year: i32) -> Option<f64> {
        let idx = year.checked_sub(self.start_year)?;
        if idx < 0 {
            return None;
        }
        self.levels.get(idx as usize).copied()
    }

    pub fn last_year(&self) -> i32 {
        self.start_year + self.levels.len() as i32 - 1
    }
}

/// One country-year of constructed prices and quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryYearRecord {
    pub country: String,
    pub year: i32,
    pub w_h: f64,
    pub w_u: f64,
    pub r_i: f64,
    pub r_o: f64,
    pub k_i: f64,
    pub k_o: f64,
    pub l_h: f64,
    pub l_u: f64,
}

impl CountryYearRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_h", self.w_h),
            ("w_u", self.w_u),
            ("r_i", self.r_i),
            ("r_o", self.r_o),
            ("k_i", self.k_i),
            ("k_o", self.k_o),
            ("l_h", self.l_h),
            ("l_u", self.l_u),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invariant(format!(
                    "panel value {name} must be positive for ({}, {}), got {v}",
                    self.country, self.year
                )));
            }
        }
        Ok(())
    }
}

/// Validated panel: records sorted by (country, year), years contiguous
/// within each country.
#[derive(Debug, Clone, Default)]
pub struct Panel {
    records: Vec<CountryYearRecord>,
}

impl Panel {
    pub fn from_records(mut records: Vec<CountryYearRecord>) -> Result<Self> {
        records.sort_by(|a, b| (a.country.as_str(), a.year).cmp(&(b.country.as_str(), b.year)));
        let mut seen = BTreeSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert((r.country.clone(), r.year)) {
                return Err(Error::Invariant(format!(
                    "duplicate panel key ({}, {})",
                    r.country, r.year
                )));
            }
        }
        let panel = Self { records };
        for (country, range) in panel.year_ranges() {
            let have: Vec<i32> = panel
                .country_records(&country)
                .iter()
                .map(|r| r.year)
                .collect();
            let expected: Vec<i32> = (range.0..=range.1).collect();
            if have != expected {
                let missing: Vec<i32> = expected.iter().copied().filter(|y| !have.contains(y)).collect();
                return Err(Error::Invariant(format!(
                    "country {country} has gaps in its year range {}..={}: missing {missing:?}",
                    range.0, range.1
                )));
            }
        }
        Ok(panel)
    }

    pub fn records(&self) -> &[CountryYearRecord] {
        &self.records
    }

    pub fn countries(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .records
            .iter()
            .map(|r| r.country.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        out.sort();
        out
    }

    pub fn country_records(&self, country: &str) -> Vec<&CountryYearRecord> {
        self.records.iter().filter(|r| r.country == country).collect()
    }

    pub fn get(&self, country: &str, year: i32) -> Option<&CountryYearRecord> {
        self.records
            .iter()
            .find(|r| r.country == country && r.year == year)
    }

    /// First and last year per country.
    pub fn year_ranges(&self) -> BTreeMap<String, (i32, i32)> {
        let mut out: BTreeMap<String, (i32, i32)> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.country.clone())
                .and_modify(|(lo, hi)| {
                    *lo = (*lo).min(r.year);
                    *hi = (*hi).max(r.year);
                })
                .or_insert((r.year, r.year));
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }
}

/// Input file locations for [`load_panel`]. Absent entries are skipped.
#[derive(Debug, Clone, Default)]
pub struct PanelPaths {
    pub labor: Option<std::path::PathBuf>,
    pub investment: Option<std::path::PathBuf>,
    pub cpi: Option<std::path::PathBuf>,
    pub panel: Option<std::path::PathBuf>,
}

/// Everything [`load_panel`] can produce.
#[derive(Debug, Clone, Default)]
pub struct PanelData {
    pub labor: Vec<RawLaborCell>,
    pub investment: Vec<InvestmentCell>,
    pub cpi: Vec<CpiSeries>,
    pub panel: Panel,
}

impl PanelData {
    /// Per-country year ranges of the constructed panel, for reports.
    pub fn year_ranges(&self) -> BTreeMap<String, (i32, i32)> {
        self.panel.year_ranges()
    }
}

fn parse_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (idx, row) in reader.deserialize::<T>().enumerate() {
        match row {
            Ok(v) => out.push(v),
            Err(e) => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    row: idx + 2, // header is line 1
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Load and validate labor.csv.
pub fn load_labor_csv(path: &Path) -> Result<Vec<RawLaborCell>> {
    let cells: Vec<RawLaborCell> = parse_csv(path)?;
    let mut seen = BTreeSet::new();
    for c in &cells {
        if !(c.wage > 0.0 && c.wage.is_finite()) {
            return Err(Error::Invariant(format!(
                "nonpositive wage in ({}, {}, {:?}/{:?}/{:?})",
                c.country, c.year, c.skill, c.gender, c.age
            )));
        }
        if !(c.hours >= 0.0 && c.hours.is_finite()) {
            return Err(Error::Invariant(format!(
                "negative hours in ({}, {}, {:?}/{:?}/{:?})",
                c.country, c.year, c.skill, c.gender, c.age
            )));
        }
        if !seen.insert((c.country.clone(), c.year, c.skill, c.gender, c.age)) {
            return Err(Error::Invariant(format!(
                "duplicate labor cell ({}, {}, {:?}/{:?}/{:?})",
                c.country, c.year, c.skill, c.gender, c.age
            )));
        }
    }
    Ok(cells)
}

/// Load and validate investment.csv.
pub fn load_investment_csv(path: &Path) -> Result<Vec<InvestmentCell>> {
    let cells: Vec<InvestmentCell> = parse_csv(path)?;
    let mut seen = BTreeSet::new();
    for c in &cells {
        if !(c.q > 0.0 && c.q.is_finite()) {
            return Err(Error::Invariant(format!(
                "nonpositive investment price in ({}, {}, {:?})",
                c.country, c.year, c.asset
            )));
        }
        if !(c.delta > 0.0 && c.delta < 1.0) {
            return Err(Error::Invariant(format!(
                "depreciation rate out of (0,1) in ({}, {}, {:?})",
                c.country, c.year, c.asset
            )));
        }
        if !seen.insert((c.country.clone(), c.year, c.asset)) {
            return Err(Error::Invariant(format!(
                "duplicate investment cell ({}, {}, {:?})",
                c.country, c.year, c.asset
            )));
        }
    }
    Ok(cells)
}

#[derive(Debug, Deserialize, Serialize)]
struct CpiRow {
    country: String,
    year: i32,
    cpi: f64,
}

/// Load and validate cpi.csv into per-country contiguous series.
pub fn load_cpi_csv(path: &Path) -> Result<Vec<CpiSeries>> {
    let rows: Vec<CpiRow> = parse_csv(path)?;
    let mut grouped: BTreeMap<String, BTreeMap<i32, f64>> = BTreeMap::new();
    for r in rows {
        if !(r.cpi > 0.0 && r.cpi.is_finite()) {
            return Err(Error::Invariant(format!(
                "nonpositive cpi in ({}, {})",
                r.country, r.year
            )));
        }
        if grouped
            .entry(r.country.clone())
            .or_default()
            .insert(r.year, r.cpi)
            .is_some()
        {
            return Err(Error::Invariant(format!(
                "duplicate cpi row ({}, {})",
                r.country, r.year
            )));
        }
    }
    let mut out = Vec::new();
    for (country, years) in grouped {
        let start = *years.keys().next().expect("non-empty");
        let end = *years.keys().last().expect("non-empty");
        if years.len() as i32 != end - start + 1 {
            let missing: Vec<i32> = (start..=end).filter(|y| !years.contains_key(y)).collect();
            return Err(Error::Invariant(format!(
                "cpi series for {country} has gaps: missing {missing:?}"
            )));
        }
        out.push(CpiSeries {
            country,
            start_year: start,
            levels: years.into_values().collect(),
        });
    }
    Ok(out)
}

/// Load and validate panel.csv.
pub fn load_panel_csv(path: &Path) -> Result<Panel> {
    let records: Vec<CountryYearRecord> = parse_csv(path)?;
    Panel::from_records(records)
}

/// Load whichever files are present in `paths` and validate each.
pub fn load_panel(paths: &PanelPaths) -> Result<PanelData> {
    let mut data = PanelData::default();
    if let Some(p) = &paths.labor {
        data.labor = load_labor_csv(p)?;
    }
    if let Some(p) = &paths.investment {
        data.investment = load_investment_csv(p)?;
    }
    if let Some(p) = &paths.cpi {
        data.cpi = load_cpi_csv(p)?;
    }
    if let Some(p) = &paths.panel {
        data.panel = load_panel_csv(p)?;
    }
    Ok(data)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Write panel.csv in the canonical column order.
pub fn save_panel(panel: &Panel, path: &Path) -> Result<()> {
    write_csv(path, panel.records())
}

/// Write labor.csv.
pub fn save_labor_csv(cells: &[RawLaborCell], path: &Path) -> Result<()> {
    write_csv(path, cells)
}

/// Write investment.csv.
pub fn save_investment_csv(cells: &[InvestmentCell], path: &Path) -> Result<()> {
    write_csv(path, cells)
}

/// Write cpi.csv.
pub fn save_cpi_csv(series: &[CpiSeries], path: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for s in series {
        for (i, level) in s.levels.iter().enumerate() {
            rows.push(CpiRow {
                country: s.country.clone(),
                year: s.start_year + i as i32,
                cpi: *level,
            });
        }
    }
    write_csv(path, &rows)
}

/// Composition-adjusted wages per (country, year, skill type): group wages
/// weighted by the country-specific mean hours share of each group.
pub fn adjust_wages(
    cells: &[RawLaborCell],
    class: &SkillClassification,
) -> Result<BTreeMap<(String, i32, SkillType), f64>> {
    let mut out = BTreeMap::new();
    for ((country, skill_type), by_year) in group_cells(cells, class)? {
        let groups = group_set(&by_year, &country, skill_type)?;
        // mean hours share per group over the years the country appears
        let mut mean_share: BTreeMap<GroupKey, f64> = groups.iter().map(|g| (*g, 0.0)).collect();
        let n_years = by_year.len() as f64;
        for (year, group_cells) in &by_year {
            let total_hours: f64 = group_cells.values().map(|c| c.hours).sum();
            if total_hours <= 0.0 {
                return Err(Error::Missing(format!(
                    "no hours for ({country}, {year}, {skill_type})"
                )));
            }
            for (g, c) in group_cells {
                *mean_share.get_mut(g).expect("group present") += c.hours / total_hours / n_years;
            }
        }
        for (year, group_cells) in &by_year {
            let wage = group_cells
                .iter()
                .map(|(g, c)| mean_share[g] * c.wage)
                .sum::<f64>();
            out.insert((country.clone(), *year, skill_type), wage);
        }
    }
    Ok(out)
}

/// Composition-adjusted hours per (country, year, skill type): group hours
/// in efficiency units, where each group's unit is its country-mean wage
/// relative to the base group's.
pub fn adjust_hours(
    cells: &[RawLaborCell],
    class: &SkillClassification,
    base: &BaseGroups,
) -> Result<BTreeMap<(String, i32, SkillType), f64>> {
    let mut out = BTreeMap::new();
    for ((country, skill_type), by_year) in group_cells(cells, class)? {
        let groups = group_set(&by_year, &country, skill_type)?;
        let n_years = by_year.len() as f64;
        let mut mean_wage: BTreeMap<GroupKey, f64> = groups.iter().map(|g| (*g, 0.0)).collect();
        for group_cells in by_year.values() {
            for (g, c) in group_cells {
                *mean_wage.get_mut(g).expect("group present") += c.wage / n_years;
            }
        }
        // a single observed group is its own base (degenerate mode)
        let base_key = if groups.len() == 1 {
            *groups.iter().next().expect("non-empty")
        } else {
            base.for_type(skill_type)
        };
        let base_wage = *mean_wage.get(&base_key).ok_or_else(|| {
            Error::Missing(format!(
                "base group {base_key:?} absent for ({country}, {skill_type})"
            ))
        })?;
        for (year, group_cells) in &by_year {
            let hours = group_cells
                .iter()
                .map(|(g, c)| mean_wage[g] / base_wage * c.hours)
                .sum::<f64>();
            out.insert((country.clone(), *year, skill_type), hours);
        }
    }
    Ok(out)
}

type CellsByYear<'a> = BTreeMap<i32, BTreeMap<GroupKey, &'a RawLaborCell>>;

fn group_cells<'a>(
    cells: &'a [RawLaborCell],
    class: &SkillClassification,
) -> Result<BTreeMap<(String, SkillType), CellsByYear<'a>>> {
    let mut out: BTreeMap<(String, SkillType), CellsByYear<'a>> = BTreeMap::new();
    for c in cells {
        let skill_type = class.class_of(c.skill);
        out.entry((c.country.clone(), skill_type))
            .or_default()
            .entry(c.year)
            .or_default()
            .insert((c.skill, c.gender, c.age), c);
    }
    Ok(out)
}

/// The union of groups for a (country, skill type), checking that every
/// year observes every group.
fn group_set(
    by_year: &CellsByYear<'_>,
    country: &str,
    skill_type: SkillType,
) -> Result<BTreeSet<GroupKey>> {
    let mut groups: BTreeSet<GroupKey> = BTreeSet::new();
    for cells in by_year.values() {
        groups.extend(cells.keys().copied());
    }
    if groups.is_empty() {
        return Err(Error::Missing(format!(
            "no labor cells for ({country}, {skill_type})"
        )));
    }
    for (year, cells) in by_year {
        for g in &groups {
            if !cells.contains_key(g) {
                return Err(Error::Missing(format!(
                    "group {g:?} missing for ({country}, {year}, {skill_type})"
                )));
            }
        }
    }
    Ok(groups)
}

/// Interest rate at year `t`: 4% plus the five-year centered average of
/// CPI inflation.
pub fn interest_rate(cpi: &CpiSeries, t: i32) -> Result<f64> {
    let needed: Vec<i32> = ((t - 3)..=(t + 2)).collect();
    let missing: Vec<i32> = needed
        .iter()
        .copied()
        .filter(|y| cpi.level(*y).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Window(format!(
            "interest rate at {t} for {} needs cpi years {missing:?}",
            cpi.country
        )));
    }
    let mut acc = 0.0;
    for tau in -2..=2 {
        let a = cpi.level(t - tau).expect("checked");
        let b = cpi.level(t - tau - 1).expect("checked");
        acc += (a - b) / b;
    }
    Ok(0.04 + acc / 5.0)
}

/// Investment price and depreciation series for one (country, asset).
#[derive(Debug, Clone)]
pub struct AssetSeries {
    pub country: String,
    pub asset: Asset,
    cells: BTreeMap<i32, (f64, f64)>, // year -> (q, delta)
}

impl AssetSeries {
    pub fn from_cells(cells: &[InvestmentCell], country: &str, asset: Asset) -> Self {
        let mut map = BTreeMap::new();
        for c in cells {
            if c.country == country && c.asset == asset {
                map.insert(c.year, (c.q, c.delta));
            }
        }
        Self {
            country: country.to_string(),
            asset,
            cells: map,
        }
    }

    pub fn q(&self, year: i32) -> Option<f64> {
        self.cells.get(&year).map(|(q, _)| *q)
    }

    pub fn delta(&self, year: i32) -> Option<f64> {
        self.cells.get(&year).map(|(_, d)| *d)
    }
}

/// Rental price of capital at year `t`:
/// `delta_t q_t + i_t q_{t-1} - (1/2)(ln q_t - ln q_{t-2}) q_{t-1}`.
pub fn rental_price(inv: &AssetSeries, cpi: &CpiSeries, t: i32) -> Result<f64> {
    let missing: Vec<i32> = [t, t - 1, t - 2]
        .into_iter()
        .filter(|y| inv.q(*y).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Window(format!(
            "rental price at {t} for ({}, {:?}) needs investment prices in years {missing:?}",
            inv.country, inv.asset
        )));
    }
    let q_t = inv.q(t).expect("checked");
    let q_1 = inv.q(t - 1).expect("checked");
    let q_2 = inv.q(t - 2).expect("checked");
    let delta = inv.delta(t).expect("checked");
    let i_t = interest_rate(cpi, t)?;
    Ok(delta * q_t + i_t * q_1 - 0.5 * (q_t.ln() - q_2.ln()) * q_1)
}
