//! Share of initiation-context circumcisions performed with medical methods.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structure::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ShareMode {
    FixedZero,
    FixedValue { value: f64 },
    LogitNormal { mean: f64, sd: f64 },
}

/// One rule; later rules override earlier ones on overlapping cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawShareRule")]
pub struct ShareRule {
    /// Region identifiers; `None` means every region.
    #[serde(default)]
    pub regions: Option<Vec<String>>,
    pub year_from: i32,
    pub year_to: i32,
    #[serde(flatten)]
    pub mode: ShareMode,
}

/// Flat wire form of a rule, so unknown keys are rejected.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShareRule {
    #[serde(default)]
    regions: Option<Vec<String>>,
    year_from: i32,
    year_to: i32,
    mode: String,
    value: Option<f64>,
    mean: Option<f64>,
    sd: Option<f64>,
}

impl TryFrom<RawShareRule> for ShareRule {
    type Error = String;

    fn try_from(r: RawShareRule) -> std::result::Result<Self, String> {
        let mode = match (r.mode.as_str(), r.value, r.mean, r.sd) {
            ("fixed_zero", None, None, None) => ShareMode::FixedZero,
            ("fixed_value", Some(value), None, None) => ShareMode::FixedValue { value },
            ("logit_normal", None, Some(mean), Some(sd)) => ShareMode::LogitNormal { mean, sd },
            (m, ..) => return Err(format!("share rule mode `{m}` with missing or extra fields")),
        };
        Ok(ShareRule { regions: r.regions, year_from: r.year_from, year_to: r.year_to, mode })
    }
}

/// Defaults to zero share everywhere.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MmctShareConfig {
    pub rules: Vec<ShareRule>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShareCell {
    Fixed(f64),
    /// Free logit-scale parameter `slot` within the share block.
    Free { slot: usize, mean: f64, sd: f64 },
}

/// Share mode per (region, model year); constant over age.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedShares {
    n_years: usize,
    cells: Vec<ShareCell>,
    free: Vec<(usize, usize, f64, f64)>,
}

impl MmctShareConfig {
    pub fn resolve(&self, grid: &Grid) -> Result<ResolvedShares> {
        let (ni, nt) = (grid.n_regions(), grid.n_model_years());
        let mut modes = vec![ShareMode::FixedZero; ni * nt];
        for (k, rule) in self.rules.iter().enumerate() {
            match rule.mode {
                ShareMode::FixedValue { value } if !(0.0..=1.0).contains(&value) => {
                    return Err(Error::Config(format!(
                        "share rule {k}: fixed value {value} outside [0, 1]"
                    )))
                }
                ShareMode::LogitNormal { mean, sd } if !(sd > 0.0) || !mean.is_finite() => {
                    return Err(Error::Config(format!(
                        "share rule {k}: logit-normal needs finite mean and sd > 0"
                    )))
                }
                _ => {}
            }
            if rule.year_to < rule.year_from {
                return Err(Error::Config(format!("share rule {k}: empty year range")));
            }
            let regions: Vec<usize> = match &rule.regions {
                None => (0..ni).collect(),
                Some(ids) => ids
                    .iter()
                    .map(|id| {
                        grid.region_index(id).ok_or_else(|| {
                            Error::Config(format!("share rule {k}: unknown region `{id}`"))
                        })
                    })
                    .collect::<Result<_>>()?,
            };
            for year in rule.year_from..=rule.year_to {
                let Some(t) = grid.model_year_index(year) else {
                    continue;
                };
                for &i in &regions {
                    modes[i * nt + t] = rule.mode.clone();
                }
            }
        }
        let mut free = Vec::new();
        let cells = modes
            .into_iter()
            .enumerate()
            .map(|(c, m)| match m {
                ShareMode::FixedZero => ShareCell::Fixed(0.0),
                ShareMode::FixedValue { value } => ShareCell::Fixed(value),
                ShareMode::LogitNormal { mean, sd } => {
                    free.push((c / nt, c % nt, mean, sd));
                    ShareCell::Free {
                        slot: free.len() - 1,
                        mean,
                        sd,
                    }
                }
            })
            .collect();
        Ok(ResolvedShares {
            n_years: nt,
            cells,
            free,
        })
    }
}

impl ResolvedShares {
    pub fn cell(&self, region: usize, year: usize) -> ShareCell {
        self.cells[region * self.n_years + year]
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    /// `(region, model year, mean, sd)` of each free share parameter.
    pub fn free_entries(&self) -> &[(usize, usize, f64, f64)] {
        &self.free
    }
}
