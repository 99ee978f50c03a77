//! Dose-regimens, subregimens and regimen panels.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const HOURS_PER_DAY: f64 = 24.0;

/// A planned sequence of doses (µg/kg) with administration times (h).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegimen", into = "RawRegimen")]
pub struct DoseRegimen {
    doses: Vec<f64>,
    times: Vec<f64>,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct RawRegimen {
    label: String,
    doses: Vec<f64>,
    times_h: Vec<f64>,
}

impl TryFrom<RawRegimen> for DoseRegimen {
    type Error = crate::Error;
    fn try_from(raw: RawRegimen) -> Result<Self> {
        DoseRegimen::new(raw.doses, raw.times_h, raw.label)
    }
}

impl From<DoseRegimen> for RawRegimen {
    fn from(r: DoseRegimen) -> Self {
        RawRegimen {
            label: r.label,
            doses: r.doses,
            times_h: r.times,
        }
    }
}

impl DoseRegimen {
    /// Validating constructor; `times` are hours from trial start.
    ///
    /// Zero doses are accepted so that placebo-like regimens can be simulated;
    /// regimens used in a panel must be strictly positive.
    pub fn new(doses: Vec<f64>, times: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if doses.is_empty() || doses.len() != times.len() {
            return invalid(format!(
                "regimen needs equal, nonzero numbers of doses and times (got {} and {})",
                doses.len(),
                times.len()
            ));
        }
        if doses.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return invalid(format!("doses must be finite and nonnegative: {doses:?}"));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return invalid(format!("times must be finite and nonnegative: {times:?}"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return invalid(format!("administration times must be strictly increasing: {times:?}"));
        }
        Ok(Self {
            doses,
            times,
            label: label.into(),
        })
    }

    /// Builds a regimen from administration days (converted with 24 h/day).
    pub fn from_days(doses: Vec<f64>, days: &[f64], label: impl Into<String>) -> Result<Self> {
        Self::new(doses, days.iter().map(|d| d * HOURS_PER_DAY).collect(), label)
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn len(&self) -> usize {
        self.doses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doses.is_empty()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.doses.iter().all(|&d| d > 0.0)
    }

    /// The first `j` administrations (1-based `j`).
    pub fn subregimen(&self, j: usize) -> Result<Self> {
        if j == 0 || j > self.len() {
            return invalid(format!(
                "administration index {j} outside 1..={} for regimen '{}'",
                self.len(),
                self.label
            ));
        }
        Ok(Self {
            doses: self.doses[..j].to_vec(),
            times: self.times[..j].to_vec(),
            label: self.label.clone(),
        })
    }

    /// Regimen actually received when dosing stops after administration `j_stop`.
    pub fn truncate_at_toxicity(&self, j_stop: usize) -> Result<Self> {
        self.subregimen(j_stop)
    }

    /// Doses formatted as `(d1,d2,...)` for reports.
    pub fn dose_string(&self) -> String {
        let parts: Vec<String> = self.doses.iter().map(|d| format!("{d}")).collect();
        format!("({})", parts.join(","))
    }
}

/// Ordered panel of regimens studied in a trial, with the set of doses used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPanel", into = "RawPanel")]
pub struct RegimenPanel {
    regimens: Vec<DoseRegimen>,
    dose_set: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPanel {
    regimens: Vec<DoseRegimen>,
}

impl TryFrom<RawPanel> for RegimenPanel {
    type Error = crate::Error;
    fn try_from(raw: RawPanel) -> Result<Self> {
        RegimenPanel::new(raw.regimens)
    }
}

impl From<RegimenPanel> for RawPanel {
    fn from(p: RegimenPanel) -> Self {
        RawPanel { regimens: p.regimens }
    }
}

impl RegimenPanel {
    pub fn new(regimens: Vec<DoseRegimen>) -> Result<Self> {
        if regimens.is_empty() {
            return invalid("regimen panel is empty");
        }
        let mut dose_set: Vec<f64> = regimens.iter().flat_map(|r| r.doses.iter().copied()).collect();
        dose_set.sort_by(f64::total_cmp);
        dose_set.dedup();
        Ok(Self { regimens, dose_set })
    }

    pub fn regimens(&self) -> &[DoseRegimen] {
        &self.regimens
    }

    /// Regimen `k` using 0-based indexing.
    pub fn get(&self, k: usize) -> Option<&DoseRegimen> {
        self.regimens.get(k)
    }

    pub fn len(&self) -> usize {
        self.regimens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regimens.is_empty()
    }

    pub fn dose_set(&self) -> &[f64] {
        &self.dose_set
    }

    pub fn labels(&self) -> Vec<String> {
        self.regimens.iter().map(|r| r.label.clone()).collect()
    }
}
