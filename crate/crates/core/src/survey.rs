//! Survey records to weighted outcome counts on the Lexis grid.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowIssue};
use crate::structure::{check_header, Grid, LexisDims, TERMINAL_EVENT_AGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "TMIC")]
    Tmic,
    #[serde(rename = "MMC_NT")]
    MmcNt,
    #[serde(rename = "RIGHT_CENSORED")]
    RightCensored,
    #[serde(rename = "LEFT_CENSORED")]
    LeftCensored,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::Tmic,
        Outcome::MmcNt,
        Outcome::RightCensored,
        Outcome::LeftCensored,
    ];

    pub fn is_event(self) -> bool {
        matches!(self, Outcome::Tmic | Outcome::MmcNt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRecord {
    pub survey_id: String,
    pub region: String,
    pub birth_year: i32,
    pub outcome: Outcome,
    /// Age at circumcision for events, age at interview for censored records.
    pub event_age: i64,
    pub weight: f64,
}

/// Weighted counts `Ñ^l_iat` for each outcome `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventCountCube {
    pub dims: LexisDims,
    counts: [Vec<f64>; 4],
    /// Records that could not be placed on the grid (logged, not fatal).
    pub dropped_records: usize,
}

impl EventCountCube {
    pub fn zeros(dims: LexisDims) -> Self {
        EventCountCube {
            dims,
            counts: std::array::from_fn(|_| vec![0.0; dims.len()]),
            dropped_records: 0,
        }
    }

    pub fn counts(&self, outcome: Outcome) -> &[f64] {
        &self.counts[outcome as usize]
    }

    pub fn add(&mut self, outcome: Outcome, cell: usize, w: f64) {
        self.counts[outcome as usize][cell] += w;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().flatten().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().flatten().all(|&c| c == 0.0)
    }
}

/// Kish effective sample size `(Σω)² / Σω²`.
pub fn kish_effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::domain("Kish effective sample size of an empty sample"));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::domain(format!("weights must be positive and finite, got {w}")));
    }
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    Ok(s * s / s2)
}

/// `ω̃ = (ω / ω̄_si) · (M_s / M_s^eff)`, aligned with `records`.
///
/// Group means are per (survey, region); sample size and effective sample
/// size are per survey.
pub fn normalize_weights(records: &[SurveyRecord]) -> Result<Vec<f64>> {
    let mut by_survey: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut by_group: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for (k, r) in records.iter().enumerate() {
        if !(r.weight > 0.0) || !r.weight.is_finite() {
            return Err(Error::domain(format!("record {k} has nonpositive weight {}", r.weight)));
        }
        by_survey.entry(&r.survey_id).or_default().push(k);
        let g = by_group.entry((&r.survey_id, &r.region)).or_insert((0.0, 0));
        g.0 += r.weight;
        g.1 += 1;
    }
    let mut factor = BTreeMap::new();
    for (s, idx) in &by_survey {
        let w: Vec<f64> = idx.iter().map(|&k| records[k].weight).collect();
        let m_eff = kish_effective_sample_size(&w)?;
        factor.insert(*s, w.len() as f64 / m_eff);
    }
    Ok(records
        .iter()
        .map(|r| {
            let (sum, n) = by_group[&(r.survey_id.as_str(), r.region.as_str())];
            let mean = sum / n as f64;
            r.weight / mean * factor[r.survey_id.as_str()]
        })
        .collect())
}

/// Validates records against the grid, normalizes their weights and places
/// each in exactly one cell.
///
/// Events go to `(i, a, birth + a)`. Right-censored records go to
/// `(i, min(a, 59, max_age), ·)`; events older than the grid's max age are
/// treated as uncircumcised through `max_age`. Left-censored records older
/// than the grid, and cohorts born before the extended grid, are dropped and
/// counted.
pub fn expand_to_cube(records: &[SurveyRecord], grid: &Grid) -> Result<EventCountCube> {
    let dims = grid.dims();
    let mut issues = Vec::new();
    let mut placed: Vec<(SurveyRecord, Outcome, usize)> = Vec::with_capacity(records.len());
    let mut dropped = 0usize;
    let max_age = grid.max_age() as i64;
    for (k, r) in records.iter().enumerate() {
        let row = k + 1;
        let Some(i) = grid.region_index(&r.region) else {
            issues.push(RowIssue { row, message: format!("unknown region `{}`", r.region) });
            continue;
        };
        if r.event_age < 0 {
            issues.push(RowIssue { row, message: format!("negative age {}", r.event_age) });
            continue;
        }
        if !(r.weight > 0.0) || !r.weight.is_finite() {
            issues.push(RowIssue { row, message: format!("weight {} is not positive", r.weight) });
            continue;
        }
        if r.outcome.is_event() && r.event_age > TERMINAL_EVENT_AGE as i64 {
            issues.push(RowIssue {
                row,
                message: format!("event at age {} after terminal age {TERMINAL_EVENT_AGE}", r.event_age),
            });
            continue;
        }
        let cap = max_age.min(TERMINAL_EVENT_AGE as i64);
        let (outcome, age) = match r.outcome {
            o if o.is_event() && r.event_age <= max_age => (o, r.event_age),
            Outcome::Tmic | Outcome::MmcNt => (Outcome::RightCensored, max_age),
            Outcome::RightCensored => (Outcome::RightCensored, r.event_age.min(cap)),
            Outcome::LeftCensored => {
                if r.event_age > max_age {
                    dropped += 1;
                    continue;
                }
                (Outcome::LeftCensored, r.event_age)
            }
        };
        let year = r.birth_year as i64 + age;
        if r.birth_year < grid.first_model_year() {
            dropped += 1;
            continue;
        }
        if year > grid.t_max() as i64 {
            issues.push(RowIssue {
                row,
                message: format!("observation year {year} is after the grid's last year {}", grid.t_max()),
            });
            continue;
        }
        let t = grid.model_year_index(year as i32).expect("checked bounds");
        placed.push((r.clone(), outcome, dims.idx(i, age as usize, t)));
    }
    if !issues.is_empty() {
        return Err(Error::Validation { source_name: "survey records".into(), issues });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} survey record(s) that fall outside the model grid");
    }
    // canonical order makes the cube independent of input order, bit for bit
    placed.sort_by(|x, y| {
        (&x.0.survey_id, &x.0.region, x.0.birth_year, x.0.outcome, x.0.event_age)
            .cmp(&(&y.0.survey_id, &y.0.region, y.0.birth_year, y.0.outcome, y.0.event_age))
            .then(x.0.weight.total_cmp(&y.0.weight))
    });
    let kept: Vec<SurveyRecord> = placed.iter().map(|p| p.0.clone()).collect();
    let weights = normalize_weights(&kept)?;
    let mut cube = EventCountCube::zeros(dims);
    for ((_, outcome, cell), w) in placed.iter().zip(weights) {
        cube.add(*outcome, *cell, w);
    }
    cube.dropped_records = dropped;
    Ok(cube)
}

const SURVEY_HEADER: [&str; 6] = ["survey_id", "region", "birth_year", "outcome", "event_age", "weight"];

pub fn read_survey_csv(path: impl AsRef<Path>) -> Result<Vec<SurveyRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_survey(file, &path.display().to_string())
}

pub fn read_survey(reader: impl std::io::Read, source_name: &str) -> Result<Vec<SurveyRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(&mut rdr, &SURVEY_HEADER, source_name)?;
    let mut out = Vec::new();
    let mut issues = Vec::new();
    for (k, rec) in rdr.deserialize::<SurveyRecord>().enumerate() {
        match rec {
            Ok(r) => out.push(r),
            Err(e) => issues.push(RowIssue { row: k + 1, message: e.to_string() }),
        }
    }
    if !issues.is_empty() {
        return Err(Error::Validation { source_name: source_name.to_string(), issues });
    }
    Ok(out)
}

pub fn write_survey_csv(path: impl AsRef<Path>, records: &[SurveyRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    if records.is_empty() {
        w.write_record(SURVEY_HEADER).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(survey: &str, region: &str, birth: i32, outcome: Outcome, age: i64, w: f64) -> SurveyRecord {
        SurveyRecord {
            survey_id: survey.into(),
            region: region.into(),
            birth_year: birth,
            outcome,
            event_age: age,
            weight: w,
        }
    }

    #[test]
    fn kish_cases() {
        assert_eq!(kish_effective_sample_size(&[1.0; 4]).unwrap(), 4.0);
        assert!((kish_effective_sample_size(&[2.0, 1.0, 1.0]).unwrap() - 16.0 / 6.0).abs() < 1e-12);
        assert!((kish_effective_sample_size(&[7.3]).unwrap() - 1.0).abs() < 1e-15);
        assert!(kish_effective_sample_size(&[]).is_err());
        assert!(kish_effective_sample_size(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn normalization_hand_case() {
        let rs = vec![
            rec("s", "r", 1990, Outcome::RightCensored, 20, 2.0),
            rec("s", "r", 1990, Outcome::RightCensored, 20, 1.0),
            rec("s", "r", 1990, Outcome::RightCensored, 20, 1.0),
        ];
        let w = normalize_weights(&rs).unwrap();
        let f = 3.0 / (16.0 / 6.0);
        for (got, base) in w.iter().zip([1.5, 0.75, 0.75]) {
            assert!((got - base * f).abs() < 1e-12);
        }
        let eq: Vec<_> = (0..5).map(|_| rec("s", "r", 1990, Outcome::Tmic, 10, 3.3)).collect();
        assert!(normalize_weights(&eq).unwrap().iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn single_event_placement() {
        let grid = Grid::new(vec!["r".into()], 30, 2005, 2012, 10).unwrap();
        let cube = expand_to_cube(&[rec("s", "r", 1990, Outcome::MmcNt, 20, 1.0)], &grid).unwrap();
        let c = grid.dims().idx(0, 20, grid.model_year_index(2010).unwrap());
        assert_eq!(cube.counts(Outcome::MmcNt)[c], 1.0);
        assert_eq!(cube.total(), 1.0);
        assert!(expand_to_cube(&[], &grid).unwrap().is_empty());
    }

    #[test]
    fn censoring_rules_and_errors() {
        let grid = Grid::new(vec!["r".into()], 30, 2005, 2012, 10).unwrap();
        let d = grid.dims();
        // event beyond the grid's ages becomes censored at max age
        let cube = expand_to_cube(&[rec("s", "r", 1976, Outcome::Tmic, 34, 1.0)], &grid).unwrap();
        let c = d.idx(0, 30, grid.model_year_index(2006).unwrap());
        assert_eq!(cube.counts(Outcome::RightCensored)[c], 1.0);
        // cohort before the extended grid is dropped
        let cube = expand_to_cube(&[rec("s", "r", 1960, Outcome::RightCensored, 10, 1.0)], &grid).unwrap();
        assert_eq!(cube.dropped_records, 1);
        assert_eq!(cube.total(), 0.0);
        let bad = vec![
            rec("s", "x", 1990, Outcome::Tmic, 10, 1.0),
            rec("s", "r", 1990, Outcome::Tmic, 60, 1.0),
            rec("s", "r", 1990, Outcome::Tmic, 10, -1.0),
            rec("s", "r", 2000, Outcome::RightCensored, 20, 1.0),
        ];
        match expand_to_cube(&bad, &grid).unwrap_err() {
            Error::Validation { issues, .. } => {
                assert_eq!(issues.iter().map(|i| i.row).collect::<Vec<_>>(), vec![1, 2, 3, 4])
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn csv_roundtrip() {
        let rs = vec![
            rec("s1", "r", 1990, Outcome::LeftCensored, 20, 1.25),
            rec("s2", "r", 1991, Outcome::MmcNt, 12, 0.5),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("survey.csv");
        write_survey_csv(&p, &rs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("survey_id,region,birth_year,outcome,event_age,weight\n"));
        assert!(text.contains("LEFT_CENSORED") && text.contains("MMC_NT"));
        assert_eq!(read_survey_csv(&p).unwrap(), rs);
    }
}
