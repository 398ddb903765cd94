//! Balanced unit × time outcome panels with one treated unit.
//!
//! Panels are read from long-format CSV (`unit,time,<outcome>...`), one row
//! per unit-period. Missing cells are a hard error; nothing is imputed.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Rectangular outcome grid: rows are units, columns are periods.
///
/// Immutable after construction. The treated unit is stored by index into
/// `units`; every other unit is a donor, in panel order.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    units: Vec<String>,
    times: Vec<i64>,
    outcomes: DMatrix<f64>,
    treated: usize,
    t0_index: usize,
}

/// Ordered donor identifiers (every unit except the treated one).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DonorPool {
    members: Vec<String>,
}

impl DonorPool {
    pub fn new(members: Vec<String>, treated: &str) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyDonorPool);
        }
        let mut seen = std::collections::HashSet::new();
        for m in &members {
            if m == treated {
                return Err(Error::InvalidArgument(format!("treated unit `{m}` cannot be a donor")));
            }
            if !seen.insert(m.as_str()) {
                return Err(Error::DuplicateUnit(m.clone()));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[String] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl Panel {
    /// Builds a panel, checking every structural invariant.
    ///
    /// `t0_index` is the column of the first treated period; at least two
    /// pre-periods and one post-period are required.
    pub fn new(units: Vec<String>, times: Vec<i64>, outcomes: DMatrix<f64>, treated: &str, t0_index: usize) -> Result<Self> {
        if units.len() < 2 {
            return Err(Error::EmptyDonorPool);
        }
        if outcomes.nrows() != units.len() || outcomes.ncols() != times.len() {
            return Err(Error::UnbalancedPanel(format!(
                "outcome matrix is {}x{}, expected {}x{}",
                outcomes.nrows(),
                outcomes.ncols(),
                units.len(),
                times.len()
            )));
        }
        if times.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::UnbalancedPanel("periods must be consecutive integers".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for u in &units {
            if !seen.insert(u.as_str()) {
                return Err(Error::DuplicateUnit(u.clone()));
            }
        }
        let treated_idx = units
            .iter()
            .position(|u| u == treated)
            .ok_or_else(|| Error::UnknownUnit(treated.to_string()))?;
        if t0_index < 2 || t0_index + 1 > times.len() {
            let t = times.get(t0_index).copied().unwrap_or(t0_index as i64);
            return Err(Error::T0OutOfRange(t));
        }
        if let Some(pos) = outcomes.iter().position(|v| !v.is_finite() || *v < 0.0) {
            // column-major storage
            let (r, c) = (pos % outcomes.nrows(), pos / outcomes.nrows());
            return Err(Error::NonNumericOutcome {
                row: r * times.len() + c + 1,
                value: outcomes[(r, c)].to_string(),
            });
        }
        Ok(Self {
            units,
            times,
            outcomes,
            treated: treated_idx,
            t0_index,
        })
    }

    /// Same as [`Panel::new`] with the intervention given as a period value.
    pub fn with_t0_period(units: Vec<String>, times: Vec<i64>, outcomes: DMatrix<f64>, treated: &str, t0: i64) -> Result<Self> {
        let idx = times.iter().position(|&t| t == t0).ok_or(Error::T0OutOfRange(t0))?;
        Self::new(units, times, outcomes, treated, idx).map_err(|e| match e {
            Error::T0OutOfRange(_) => Error::T0OutOfRange(t0),
            other => other,
        })
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn treated(&self) -> &str {
        &self.units[self.treated]
    }

    pub fn treated_index(&self) -> usize {
        self.treated
    }

    pub fn t0_index(&self) -> usize {
        self.t0_index
    }

    /// First treated period.
    pub fn t0(&self) -> i64 {
        self.times[self.t0_index]
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_post(&self) -> usize {
        self.times.len() - self.t0_index
    }

    pub fn donor_indices(&self) -> Vec<usize> {
        (0..self.units.len()).filter(|&i| i != self.treated).collect()
    }

    pub fn donor_pool(&self) -> DonorPool {
        DonorPool {
            members: self.donor_indices().into_iter().map(|i| self.units[i].clone()).collect(),
        }
    }

    pub fn n_donors(&self) -> usize {
        self.units.len() - 1
    }

    pub fn unit_index(&self, unit: &str) -> Option<usize> {
        self.units.iter().position(|u| u == unit)
    }

    /// Outcome path of the treated unit over all periods.
    pub fn treated_series(&self) -> Vec<f64> {
        self.outcomes.row(self.treated).iter().copied().collect()
    }

    pub fn series(&self, unit: usize) -> Vec<f64> {
        self.outcomes.row(unit).iter().copied().collect()
    }

    /// Donor outcomes as a periods × donors matrix (one column per donor).
    pub fn donor_matrix(&self) -> DMatrix<f64> {
        let donors = self.donor_indices();
        DMatrix::from_fn(self.times.len(), donors.len(), |t, j| self.outcomes[(donors[j], t)])
    }

    /// Splits the outcome grid into pre-period and post-period column blocks.
    pub fn split_pre_post(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let pre = self.outcomes.columns(0, self.t0_index).into_owned();
        let post = self.outcomes.columns(self.t0_index, self.n_post()).into_owned();
        (pre, post)
    }

    /// Keeps the treated unit plus `keep` (in the order given).
    pub fn restrict_donors<S: AsRef<str>>(&self, keep: &[S]) -> Result<Panel> {
        if keep.is_empty() {
            return Err(Error::EmptyDonorPool);
        }
        let mut rows = vec![self.treated];
        for k in keep {
            let k = k.as_ref();
            let idx = self.unit_index(k).ok_or_else(|| Error::UnknownUnit(k.to_string()))?;
            if idx == self.treated {
                return Err(Error::InvalidArgument(format!("treated unit `{k}` cannot be kept as a donor")));
            }
            if rows.contains(&idx) {
                return Err(Error::DuplicateUnit(k.to_string()));
            }
            rows.push(idx);
        }
        // preserve original panel order
        rows.sort_unstable();
        self.select_units(&rows, self.treated())
    }

    /// Panel with `unit` removed from the donor pool.
    pub fn drop_donor(&self, unit: &str) -> Result<Panel> {
        let idx = self.unit_index(unit).ok_or_else(|| Error::UnknownUnit(unit.to_string()))?;
        if idx == self.treated {
            return Err(Error::InvalidArgument("cannot drop the treated unit".into()));
        }
        let keep: Vec<&str> = self
            .donor_indices()
            .into_iter()
            .filter(|&i| i != idx)
            .map(|i| self.units[i].as_str())
            .collect();
        self.restrict_donors(&keep)
    }

    /// Panel over the same data with a different treated unit; the former
    /// treated unit is removed from the pool.
    pub fn reassign_treated(&self, unit: &str) -> Result<Panel> {
        let idx = self.unit_index(unit).ok_or_else(|| Error::UnknownUnit(unit.to_string()))?;
        let rows: Vec<usize> = (0..self.units.len()).filter(|&i| i != self.treated).collect();
        if idx == self.treated {
            return Err(Error::InvalidArgument("placebo unit must differ from the treated unit".into()));
        }
        self.select_units(&rows, unit)
    }

    /// Restricts the panel to periods before the true intervention and moves
    /// the intervention to `t0` (used for backdating).
    pub fn backdate(&self, t0: i64) -> Result<Panel> {
        let idx = self.times.iter().position(|&t| t == t0).ok_or(Error::T0OutOfRange(t0))?;
        if idx >= self.t0_index {
            return Err(Error::T0OutOfRange(t0));
        }
        let outcomes = self.outcomes.columns(0, self.t0_index).into_owned();
        Panel::new(
            self.units.clone(),
            self.times[..self.t0_index].to_vec(),
            outcomes,
            self.treated(),
            idx,
        )
        .map_err(|e| match e {
            Error::T0OutOfRange(_) => Error::T0OutOfRange(t0),
            other => other,
        })
    }

    /// Same units and periods with every outcome multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Panel> {
        Panel::new(
            self.units.clone(),
            self.times.clone(),
            &self.outcomes * c,
            self.treated(),
            self.t0_index,
        )
    }

    /// Same layout with a transformed outcome grid.
    pub fn with_outcomes(&self, outcomes: DMatrix<f64>) -> Result<Panel> {
        Panel::new(self.units.clone(), self.times.clone(), outcomes, self.treated(), self.t0_index)
    }

    fn select_units(&self, rows: &[usize], treated: &str) -> Result<Panel> {
        let units: Vec<String> = rows.iter().map(|&i| self.units[i].clone()).collect();
        let outcomes = self.outcomes.select_rows(rows.iter());
        Panel::new(units, self.times.clone(), outcomes, treated, self.t0_index)
    }

    /// Writes the panel in long format with a single outcome column.
    pub fn write_csv(&self, path: impl AsRef<Path>, outcome: &str) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["unit", "time", outcome])?;
        for (i, unit) in self.units.iter().enumerate() {
            for (t, time) in self.times.iter().enumerate() {
                w.write_record([unit.as_str(), &time.to_string(), &format_value(self.outcomes[(i, t)])])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Shortest decimal text that parses back to the same `f64`.
pub fn format_value(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().ok(), Some(v));
    s
}

/// Reads a long-format panel CSV and selects one outcome column.
///
/// Units keep their first-appearance order. Every unit must cover the same
/// consecutive run of periods; a missing unit-period is reported as
/// [`Error::MissingCell`], a repeated one as [`Error::UnbalancedPanel`].
pub fn load_csv(path: impl AsRef<Path>, outcome: &str, treated: &str, t0: i64) -> Result<Panel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, outcome, treated, t0)
}

/// [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(reader: R, outcome: &str, treated: &str, t0: i64) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("unit") || headers.get(1) != Some("time") {
        return Err(Error::UnbalancedPanel("header must start with `unit,time`".into()));
    }
    let col = headers
        .iter()
        .skip(2)
        .position(|h| h == outcome)
        .map(|p| p + 2)
        .ok_or_else(|| Error::UnknownColumn(outcome.to_string()))?;

    let mut units: Vec<String> = Vec::new();
    let mut unit_pos: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, i64), f64> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let unit = rec.get(0).unwrap_or("").to_string();
        let time_txt = rec.get(1).unwrap_or("");
        let time: i64 = time_txt.parse().map_err(|_| Error::NonNumericOutcome {
            row,
            value: time_txt.to_string(),
        })?;
        let raw = rec.get(col).unwrap_or("");
        let value: f64 = raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| Error::NonNumericOutcome {
                row,
                value: raw.to_string(),
            })?;
        let u = *unit_pos.entry(unit.clone()).or_insert_with(|| {
            units.push(unit);
            units.len() - 1
        });
        if cells.insert((u, time), value).is_some() {
            return Err(Error::UnbalancedPanel(format!(
                "duplicate row for unit {} at time {time}",
                units[u]
            )));
        }
    }
    if units.is_empty() {
        return Err(Error::UnbalancedPanel("no data rows".into()));
    }
    let lo = cells.keys().map(|k| k.1).min().unwrap_or(0);
    let hi = cells.keys().map(|k| k.1).max().unwrap_or(0);
    let times: Vec<i64> = (lo..=hi).collect();
    let mut outcomes = DMatrix::zeros(units.len(), times.len());
    for (u, name) in units.iter().enumerate() {
        for (t, &time) in times.iter().enumerate() {
            match cells.get(&(u, time)) {
                Some(v) => outcomes[(u, t)] = *v,
                None => return Err(Error::MissingCell { unit: name.clone(), time }),
            }
        }
    }
    if !unit_pos.contains_key(treated) {
        return Err(Error::UnknownUnit(treated.to_string()));
    }
    Panel::with_t0_period(units, times, outcomes, treated, t0)
}
