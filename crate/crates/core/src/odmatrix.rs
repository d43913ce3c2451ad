//! Origin-destination matrices, Pearson's chi-squared comparison and
//! localization error percentiles.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geo::LatLon;
use crate::region::RegionGrid;
use crate::stats::{chi_squared_sf, nearest_rank};

/// Home-district by work-district user shares.
#[derive(Debug, Clone, PartialEq)]
pub struct OdMatrix {
    pub districts: Vec<String>,
    /// Row = home district, column = work district.
    pub counts: Vec<Vec<u64>>,
    pub percent: Vec<Vec<f64>>,
}

impl OdMatrix {
    /// Matrix given directly as percentages (e.g. a published table).
    pub fn from_percent(districts: Vec<String>, percent: Vec<Vec<f64>>) -> Result<Self> {
        let n = districts.len();
        if percent.len() != n || percent.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: percent.len(),
            });
        }
        Ok(OdMatrix {
            districts,
            counts: vec![vec![0; n]; n],
            percent,
        })
    }

    pub fn size(&self) -> usize {
        self.districts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Percent cells in row-major order.
    pub fn cells(&self) -> Vec<f64> {
        self.percent.iter().flatten().copied().collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("home\\work");
        for d in &self.districts {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        for (d, row) in self.districts.iter().zip(&self.percent) {
            out.push_str(d);
            for v in row {
                let _ = write!(out, ",{v:.2}");
            }
            out.push('\n');
        }
        out
    }
}

/// Counts users whose home and work anchors both fall in a district.
pub fn build_od_matrix<I>(anchors: I, districts: &RegionGrid) -> Result<OdMatrix>
where
    I: IntoIterator<Item = (Option<LatLon>, Option<LatLon>)>,
{
    let n = districts.len();
    let mut counts = vec![vec![0u64; n]; n];
    for (home, work) in anchors {
        let (Some(h), Some(w)) = (home, work) else {
            continue;
        };
        if let (Some(i), Some(j)) = (districts.locate(h), districts.locate(w)) {
            counts[i][j] += 1;
        }
    }
    let total: u64 = counts.iter().flatten().sum();
    if total == 0 {
        return Err(Error::NoUsers);
    }
    let percent = counts
        .iter()
        .map(|r| r.iter().map(|&c| 100.0 * c as f64 / total as f64).collect())
        .collect();
    Ok(OdMatrix {
        districts: districts.regions().iter().map(|r| r.id.clone()).collect(),
        counts,
        percent,
    })
}

/// How the degrees of freedom are derived from an n×n comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DfMode {
    /// One per compared cell (n²).
    #[default]
    Cells,
    /// Contingency-table convention (n − 1)².
    Contingency,
}

impl DfMode {
    pub fn df(self, size: usize) -> u32 {
        let d = match self {
            DfMode::Cells => size * size,
            DfMode::Contingency => (size.saturating_sub(1)).pow(2),
        };
        d.max(1) as u32
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DfMode::Cells => "cells",
            DfMode::Contingency => "contingency",
        }
    }
}

impl FromStr for DfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cells" => Ok(DfMode::Cells),
            "contingency" => Ok(DfMode::Contingency),
            other => Err(Error::InvalidConfig(format!("unknown df mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquaredResult {
    pub statistic: f64,
    pub df: u32,
    pub p: f64,
    /// (observed, expected, contribution) per cell.
    pub contributions: Vec<(f64, f64, f64)>,
}

/// Σ (O − E)² / E over paired cells.
pub fn chi_squared_statistic(
    observed: &[f64],
    expected: &[f64],
) -> Result<(f64, Vec<(f64, f64, f64)>)> {
    if observed.len() != expected.len() {
        return Err(Error::DimensionMismatch {
            expected: expected.len(),
            found: observed.len(),
        });
    }
    if let Some(index) = expected.iter().position(|&e| !(e > 0.0)) {
        return Err(Error::ZeroExpectedCell { index });
    }
    let contributions: Vec<(f64, f64, f64)> = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o, e, (o - e).powi(2) / e))
        .collect();
    Ok((contributions.iter().map(|c| c.2).sum(), contributions))
}

pub fn chi_squared_p(statistic: f64, df: u32) -> f64 {
    chi_squared_sf(statistic, df)
}

/// Compares two matrices cell by cell on their percentages.
pub fn compare_matrices(
    observed: &OdMatrix,
    expected: &OdMatrix,
    mode: DfMode,
) -> Result<ChiSquaredResult> {
    if observed.size() != expected.size() {
        return Err(Error::DimensionMismatch {
            expected: expected.size(),
            found: observed.size(),
        });
    }
    let (statistic, contributions) = chi_squared_statistic(&observed.cells(), &expected.cells())?;
    let df = mode.df(observed.size());
    Ok(ChiSquaredResult {
        statistic,
        df,
        p: chi_squared_p(statistic, df),
        contributions,
    })
}

/// Nearest-rank percentiles of per-user errors.
pub fn error_percentiles(errors: &[f64], pcts: &[f64]) -> Option<Vec<(f64, f64)>> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    pcts.iter()
        .map(|&p| nearest_rank(&sorted, p).map(|v| (p, v)))
        .collect()
}

pub const REPORT_PERCENTILES: [f64; 3] = [70.0, 80.0, 90.0];

/// Plain `key = value` report, one entry per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvReport {
    pub entries: Vec<(String, String)>,
}

impl KvReport {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn push_chi(&mut self, prefix: &str, r: &ChiSquaredResult) {
        self.push(format!("{prefix}.chi2"), format!("{:.6}", r.statistic));
        self.push(format!("{prefix}.df"), r.df);
        self.push(format!("{prefix}.p"), format!("{:.6}", r.p));
    }

    pub fn push_percentiles(&mut self, prefix: &str, pcts: &[(f64, f64)]) {
        for (p, v) in pcts {
            self.push(format!("{prefix}.p{p}_m"), format!("{v:.1}"));
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
