//! Price-index panels and the study-design windows they are fit over.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::MonthKey;

/// One monthly price index. Coverage is contiguous and every value is
/// strictly positive and finite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PriceSeries {
    id: String,
    label: String,
    observations: BTreeMap<MonthKey, f64>,
}

impl PriceSeries {
    pub fn new(
        id: impl Into<String>,
        label: impl Into<String>,
        observations: BTreeMap<MonthKey, f64>,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| Error::InvalidSeries {
            series: id.clone(),
            reason,
        };
        if observations.is_empty() {
            return Err(invalid("no observations".into()));
        }
        for (month, value) in &observations {
            if !value.is_finite() || *value <= 0.0 {
                return Err(invalid(format!(
                    "value {value} at {month} is not strictly positive"
                )));
            }
        }
        let gaps: Vec<MonthKey> = observations
            .keys()
            .zip(observations.keys().skip(1))
            .flat_map(|(a, b)| MonthKey::range_inclusive(a.succ(), b.pred()))
            .collect();
        if !gaps.is_empty() {
            let listed: Vec<String> = gaps.iter().map(|m| m.to_string()).collect();
            return Err(invalid(format!("gap in coverage at {}", listed.join(", "))));
        }
        Ok(PriceSeries {
            id,
            label: label.into(),
            observations,
        })
    }

    /// Builds a series from consecutive values starting at `start`.
    pub fn from_values(
        id: impl Into<String>,
        label: impl Into<String>,
        start: MonthKey,
        values: &[f64],
    ) -> Result<Self> {
        let obs = values
            .iter()
            .enumerate()
            .map(|(i, v)| (start.add_months(i as i64), *v))
            .collect();
        Self::new(id, label, obs)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn observations(&self) -> &BTreeMap<MonthKey, f64> {
        &self.observations
    }

    pub fn first_month(&self) -> MonthKey {
        *self.observations.keys().next().expect("nonempty by construction")
    }

    pub fn last_month(&self) -> MonthKey {
        *self
            .observations
            .keys()
            .next_back()
            .expect("nonempty by construction")
    }

    pub fn get(&self, month: MonthKey) -> Option<f64> {
        self.observations.get(&month).copied()
    }

    pub fn value(&self, month: MonthKey) -> Result<f64> {
        self.get(month).ok_or_else(|| Error::Coverage {
            series: self.id.clone(),
            missing: vec![month],
        })
    }

    pub fn covers(&self, from: MonthKey, to: MonthKey) -> bool {
        self.first_month() <= from && to <= self.last_month()
    }

    /// Months of `[from, to]` this series has no value for.
    pub fn missing_in(&self, from: MonthKey, to: MonthKey) -> Vec<MonthKey> {
        MonthKey::range_inclusive(from, to)
            .filter(|m| !self.observations.contains_key(m))
            .collect()
    }

    /// Copy restricted to `[from, to]`.
    pub fn restricted(&self, from: MonthKey, to: MonthKey) -> Result<Self> {
        let values = slice(self, from, to)?;
        Self::from_values(self.id.clone(), self.label.clone(), from, &values)
    }

    /// Copy scaled so that the value at `base` equals 100.
    pub fn rebased(&self, base: MonthKey) -> Result<Self> {
        let b = self.value(base)?;
        let obs = self
            .observations
            .iter()
            .map(|(m, v)| (*m, v / b * 100.0))
            .collect();
        Self::new(self.id.clone(), self.label.clone(), obs)
    }

    /// Copy with every value multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let obs = self.observations.iter().map(|(m, v)| (*m, v * factor)).collect();
        Self::new(self.id.clone(), self.label.clone(), obs)
    }
}

/// Values of `series` over `[from, to]` in chronological order.
pub fn slice(series: &PriceSeries, from: MonthKey, to: MonthKey) -> Result<Vec<f64>> {
    if to < from {
        return Err(Error::InvalidArgument(format!("empty slice range {from}..{to}")));
    }
    let missing = series.missing_in(from, to);
    if !missing.is_empty() {
        return Err(Error::Coverage {
            series: series.id.clone(),
            missing,
        });
    }
    Ok(series.observations.range(from..=to).map(|(_, v)| *v).collect())
}

/// Pre-treatment fitting window and post-treatment evaluation window.
///
/// `treatment_start` immediately follows `pre_end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub pre_start: MonthKey,
    pub pre_end: MonthKey,
    pub treatment_start: MonthKey,
    pub eval_end: MonthKey,
}

impl StudyDesign {
    pub fn new(
        pre_start: MonthKey,
        pre_end: MonthKey,
        treatment_start: MonthKey,
        eval_end: MonthKey,
    ) -> Result<Self> {
        let design = StudyDesign {
            pre_start,
            pre_end,
            treatment_start,
            eval_end,
        };
        design.check()?;
        Ok(design)
    }

    pub fn check(&self) -> Result<()> {
        if self.pre_end < self.pre_start {
            return Err(Error::InvalidDesign(format!(
                "pre_end {} precedes pre_start {}",
                self.pre_end, self.pre_start
            )));
        }
        if self.treatment_start != self.pre_end.succ() {
            return Err(Error::InvalidDesign(format!(
                "treatment_start {} must be the month after pre_end {}",
                self.treatment_start, self.pre_end
            )));
        }
        if self.eval_end < self.treatment_start {
            return Err(Error::InvalidDesign(format!(
                "eval_end {} precedes treatment_start {}",
                self.eval_end, self.treatment_start
            )));
        }
        if self.pre_len() < 2 {
            return Err(Error::InvalidDesign(
                "pre-treatment window needs at least 2 months".into(),
            ));
        }
        Ok(())
    }

    pub fn pre_len(&self) -> usize {
        (self.pre_start.months_until(self.pre_end) + 1).max(0) as usize
    }

    pub fn post_len(&self) -> usize {
        (self.treatment_start.months_until(self.eval_end) + 1).max(0) as usize
    }

    pub fn pre_months(&self) -> impl Iterator<Item = MonthKey> {
        MonthKey::range_inclusive(self.pre_start, self.pre_end)
    }

    pub fn post_months(&self) -> impl Iterator<Item = MonthKey> {
        MonthKey::range_inclusive(self.treatment_start, self.eval_end)
    }

    pub fn months(&self) -> impl Iterator<Item = MonthKey> {
        MonthKey::range_inclusive(self.pre_start, self.eval_end)
    }

    pub fn is_post(&self, month: MonthKey) -> bool {
        month >= self.treatment_start
    }
}

impl Default for StudyDesign {
    /// Twelve pre-announcement months 2022-11..2023-10, treatment from the
    /// 2023-11 announcement, evaluation through 2024-07.
    fn default() -> Self {
        let m = |y, mo| MonthKey::new(y, mo).expect("valid month");
        StudyDesign {
            pre_start: m(2022, 11),
            pre_end: m(2023, 10),
            treatment_start: m(2023, 11),
            eval_end: m(2024, 7),
        }
    }
}

/// A treated series, its donor pool and the study windows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Panel {
    pub treated: PriceSeries,
    pub donors: Vec<PriceSeries>,
    pub design: StudyDesign,
}

impl Panel {
    /// Builds a panel and rejects it unless [`validate_panel`] is clean.
    pub fn new(treated: PriceSeries, donors: Vec<PriceSeries>, design: StudyDesign) -> Result<Self> {
        let panel = Panel {
            treated,
            donors,
            design,
        };
        let report = validate_panel(&panel);
        if report.is_empty() {
            Ok(panel)
        } else {
            Err(Error::Validation(report))
        }
    }

    pub fn donor_ids(&self) -> Vec<&str> {
        self.donors.iter().map(|d| d.id()).collect()
    }

    pub fn donor_count(&self) -> usize {
        self.donors.len()
    }

    /// Same panel without donor `id`.
    pub fn without_donor(&self, id: &str) -> Result<Self> {
        if !self.donors.iter().any(|d| d.id() == id) {
            return Err(Error::UnknownSeries(id.to_string()));
        }
        let donors = self.donors.iter().filter(|d| d.id() != id).cloned().collect();
        Panel::new(self.treated.clone(), donors, self.design)
    }

    /// Donor `id` as the treated unit, the remaining donors as its pool.
    /// The original treated unit is dropped.
    pub fn placebo_for(&self, id: &str) -> Result<Self> {
        let unit = self
            .donors
            .iter()
            .find(|d| d.id() == id)
            .ok_or_else(|| Error::UnknownSeries(id.to_string()))?;
        let donors = self.donors.iter().filter(|d| d.id() != id).cloned().collect();
        Panel::new(unit.clone(), donors, self.design)
    }

    /// Every series rebased to 100 at `pre_start`.
    pub fn rebased(&self) -> Result<Self> {
        let base = self.design.pre_start;
        let donors = self
            .donors
            .iter()
            .map(|d| d.rebased(base))
            .collect::<Result<Vec<_>>>()?;
        Panel::new(self.treated.rebased(base)?, donors, self.design)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub series: Option<String>,
    pub month: Option<MonthKey>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.series, &self.month) {
            (Some(s), Some(m)) => write!(f, "{s} @ {m}: {}", self.message),
            (Some(s), None) => write!(f, "{s}: {}", self.message),
            (None, Some(m)) => write!(f, "{m}: {}", self.message),
            (None, None) => write!(f, "{}", self.message),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, series: Option<&str>, month: Option<MonthKey>, message: impl Into<String>) {
        self.violations.push(Violation {
            series: series.map(str::to_string),
            month,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Checks every panel invariant; an empty report means the panel is usable.
pub fn validate_panel(panel: &Panel) -> ValidationReport {
    let mut report = ValidationReport::default();
    let design = &panel.design;
    if let Err(e) = design.check() {
        report.push(None, None, e.to_string());
    }
    if panel.donors.len() < 2 {
        report.push(
            None,
            None,
            format!(
                "donor pool has {} series; at least 2 required",
                panel.donors.len()
            ),
        );
    }
    let treated_id = panel.treated.id();
    if panel.donors.iter().any(|d| d.id() == treated_id) {
        report.push(Some(treated_id), None, "treated unit present in donor pool");
    }
    let mut seen = BTreeSet::new();
    for d in &panel.donors {
        if !seen.insert(d.id()) && d.id() != treated_id {
            report.push(Some(d.id()), None, "duplicate donor id");
        }
    }
    for series in std::iter::once(&panel.treated).chain(&panel.donors) {
        for month in series.missing_in(design.pre_start, design.eval_end) {
            report.push(Some(series.id()), Some(month), "missing observation");
        }
    }
    report
}
