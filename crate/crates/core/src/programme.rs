//! Programme (VMMC) counts by region, year and age band.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result, RowIssue};
use crate::structure::{check_header, Grid};

/// Count of medical circumcisions `Y_iGt` over the inclusive band
/// `[age_lo, age_hi]`. Counts are real-valued so that reallocated shares
/// keep their totals.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgrammeCount {
    pub region: usize,
    pub year: i32,
    pub age_lo: usize,
    pub age_hi: usize,
    pub count: f64,
}

impl ProgrammeCount {
    fn key(&self) -> (usize, i32, usize, usize) {
        (self.region, self.year, self.age_lo, self.age_hi)
    }
}

#[derive(Debug, Deserialize)]
struct CountRow {
    region: String,
    year: i32,
    age_lo: i64,
    age_hi: i64,
    count: f64,
}

pub fn load_programme_counts(path: impl AsRef<Path>, grid: &Grid) -> Result<Vec<ProgrammeCount>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_programme_counts(file, grid, &path.display().to_string())
}

/// Parses and validates `region,year,age_lo,age_hi,count`. Rows with the
/// same key are summed; partially overlapping bands are an error.
pub fn read_programme_counts(
    reader: impl std::io::Read,
    grid: &Grid,
    source_name: &str,
) -> Result<Vec<ProgrammeCount>> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(&mut rdr, &["region", "year", "age_lo", "age_hi", "count"], source_name)?;
    let mut issues = Vec::new();
    let mut rows = Vec::new();
    for (k, rec) in rdr.deserialize::<CountRow>().enumerate() {
        let row = k + 1;
        let r = match rec {
            Ok(r) => r,
            Err(e) => {
                issues.push(RowIssue { row, message: e.to_string() });
                continue;
            }
        };
        let mut bad = |m: String| issues.push(RowIssue { row, message: m });
        let Some(region) = grid.region_index(&r.region) else {
            bad(format!("unknown region `{}`", r.region));
            continue;
        };
        if !(r.count >= 0.0) || !r.count.is_finite() {
            bad(format!("count {} is negative or not finite", r.count));
            continue;
        }
        if r.age_lo < 0 || r.age_lo > r.age_hi || r.age_hi > grid.max_age() as i64 {
            bad(format!("malformed age band {}-{}", r.age_lo, r.age_hi));
            continue;
        }
        if grid.model_year_index(r.year).is_none() {
            bad(format!("year {} is outside the model grid", r.year));
            continue;
        }
        rows.push((
            row,
            ProgrammeCount {
                region,
                year: r.year,
                age_lo: r.age_lo as usize,
                age_hi: r.age_hi as usize,
                count: r.count,
            },
        ));
    }
    if !issues.is_empty() {
        return Err(Error::Validation { source_name: source_name.to_string(), issues });
    }
    let merged = merge_duplicates(rows.into_iter().map(|(_, c)| c), Some(source_name));
    check_overlaps(&merged, source_name)?;
    Ok(merged)
}

/// Sums rows sharing `(region, year, band)`; output is sorted by that key.
pub fn merge_duplicates(
    rows: impl IntoIterator<Item = ProgrammeCount>,
    warn_source: Option<&str>,
) -> Vec<ProgrammeCount> {
    let mut map: BTreeMap<(usize, i32, usize, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = map.entry(r.key()).or_insert((0.0, 0));
        e.0 += r.count;
        e.1 += 1;
    }
    map.into_iter()
        .map(|((region, year, age_lo, age_hi), (count, n))| {
            if n > 1 {
                if let Some(src) = warn_source {
                    log::warn!(
                        "{src}: {n} rows for region {region}, year {year}, ages {age_lo}-{age_hi} summed"
                    );
                }
            }
            ProgrammeCount { region, year, age_lo, age_hi, count }
        })
        .collect()
}

fn check_overlaps(rows: &[ProgrammeCount], source_name: &str) -> Result<()> {
    let mut issues = Vec::new();
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.region == b.region && a.year == b.year && b.age_lo <= a.age_hi {
            issues.push(RowIssue {
                row: 0,
                message: format!(
                    "overlapping bands {}-{} and {}-{} for region {} in {}",
                    a.age_lo, a.age_hi, b.age_lo, b.age_hi, a.region, a.year
                ),
            });
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation { source_name: source_name.to_string(), issues })
    }
}

/// Row-stochastic reallocation of counts from source regions to destinations
/// over a year range.
#[derive(Debug, Clone, PartialEq)]
pub struct ReallocationRule {
    pub source: usize,
    pub year_from: i32,
    pub year_to: i32,
    pub shares: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReallocationMatrix {
    pub rules: Vec<ReallocationRule>,
}

impl ReallocationMatrix {
    pub fn new(rules: Vec<ReallocationRule>) -> Result<Self> {
        let mut issues = Vec::new();
        for (k, r) in rules.iter().enumerate() {
            let total: f64 = r.shares.iter().map(|s| s.1).sum();
            if (total - 1.0).abs() > 1e-10 || r.shares.iter().any(|s| !(s.1 >= 0.0)) {
                issues.push(RowIssue {
                    row: k + 1,
                    message: format!(
                        "shares for source {} in {}-{} sum to {total}, not 1",
                        r.source, r.year_from, r.year_to
                    ),
                });
            }
            if r.year_to < r.year_from {
                issues.push(RowIssue { row: k + 1, message: "empty year range".into() });
            }
        }
        for (a, ra) in rules.iter().enumerate() {
            for rb in &rules[a + 1..] {
                if ra.source == rb.source && ra.year_from <= rb.year_to && rb.year_from <= ra.year_to {
                    issues.push(RowIssue {
                        row: a + 1,
                        message: format!("overlapping year ranges for source {}", ra.source),
                    });
                }
            }
        }
        if !issues.is_empty() {
            return Err(Error::Validation { source_name: "reallocation".into(), issues });
        }
        Ok(ReallocationMatrix { rules })
    }

    pub fn rule_for(&self, source: usize, year: i32) -> Option<&ReallocationRule> {
        self.rules
            .iter()
            .find(|r| r.source == source && (r.year_from..=r.year_to).contains(&year))
    }

    pub fn from_csv(path: impl AsRef<Path>, grid: &Grid) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, grid, &path.display().to_string())
    }

    /// Reads `source,dest,share,year_from,year_to`; rows sharing
    /// `(source, year_from, year_to)` form one distribution.
    pub fn from_reader(reader: impl std::io::Read, grid: &Grid, source_name: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            source: String,
            dest: String,
            share: f64,
            year_from: i32,
            year_to: i32,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        check_header(&mut rdr, &["source", "dest", "share", "year_from", "year_to"], source_name)?;
        let mut issues = Vec::new();
        let mut groups: BTreeMap<(usize, i32, i32), Vec<(usize, f64)>> = BTreeMap::new();
        for (k, rec) in rdr.deserialize::<Row>().enumerate() {
            let row = k + 1;
            match rec {
                Ok(r) => match (grid.region_index(&r.source), grid.region_index(&r.dest)) {
                    (Some(s), Some(d)) => groups.entry((s, r.year_from, r.year_to)).or_default().push((d, r.share)),
                    _ => issues.push(RowIssue {
                        row,
                        message: format!("unknown region in `{}` -> `{}`", r.source, r.dest),
                    }),
                },
                Err(e) => issues.push(RowIssue { row, message: e.to_string() }),
            }
        }
        if !issues.is_empty() {
            return Err(Error::Validation { source_name: source_name.to_string(), issues });
        }
        Self::new(
            groups
                .into_iter()
                .map(|((source, year_from, year_to), shares)| ReallocationRule { source, year_from, year_to, shares })
                .collect(),
        )
    }
}

/// Splits counts of covered (source, year) pairs across destinations; other
/// rows pass through. The last destination takes the remainder so each
/// split conserves its count.
pub fn reallocate(counts: &[ProgrammeCount], matrix: &ReallocationMatrix) -> Vec<ProgrammeCount> {
    let mut out = Vec::with_capacity(counts.len());
    for c in counts {
        match matrix.rule_for(c.region, c.year) {
            None => out.push(c.clone()),
            Some(rule) => {
                let mut assigned = 0.0;
                let n = rule.shares.len();
                for (k, &(dest, share)) in rule.shares.iter().enumerate() {
                    let part = if k + 1 == n { c.count - assigned } else { c.count * share };
                    assigned += part;
                    out.push(ProgrammeCount { region: dest, count: part.max(0.0), ..c.clone() });
                }
            }
        }
    }
    merge_duplicates(out, None)
}

pub fn write_programme_csv(path: impl AsRef<Path>, rows: &[ProgrammeCount], grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["region", "year", "age_lo", "age_hi", "count"])
        .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record([
            grid.regions()[r.region].clone(),
            r.year.to_string(),
            r.age_lo.to_string(),
            r.age_hi.to_string(),
            format!("{}", r.count),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid {
        Grid::new((0..n).map(|i| format!("r{i}")).collect(), 60, 2010, 2019, 10).unwrap()
    }

    #[test]
    fn loads_and_merges() {
        let g = grid(2);
        let one = read_programme_counts("region,year,age_lo,age_hi,count\nr0,2015,10,60,500\n".as_bytes(), &g, "p").unwrap();
        assert_eq!(one, vec![ProgrammeCount { region: 0, year: 2015, age_lo: 10, age_hi: 60, count: 500.0 }]);
        let two = read_programme_counts(
            "region,year,age_lo,age_hi,count\nr0,2015,10,60,200\nr0,2015,10,60,300\n".as_bytes(),
            &g,
            "p",
        )
        .unwrap();
        assert_eq!(two.len(), 1);
        assert_eq!(two[0].count, 500.0);
    }

    #[test]
    fn validation_errors() {
        let g = grid(2);
        for body in [
            "r0,2015,30,10,5\n",
            "r0,2015,10,20,-5\n",
            "rx,2015,10,20,5\n",
            "r0,2015,10,20,5\nr0,2015,15,30,5\n",
        ] {
            let text = format!("region,year,age_lo,age_hi,count\n{body}");
            assert!(read_programme_counts(text.as_bytes(), &g, "p").is_err(), "{body}");
        }
    }

    #[test]
    fn identity_and_split() {
        let counts = vec![
            ProgrammeCount { region: 0, year: 2018, age_lo: 10, age_hi: 60, count: 100.0 },
            ProgrammeCount { region: 1, year: 2015, age_lo: 10, age_hi: 60, count: 40.0 },
        ];
        let ident = ReallocationMatrix::new(vec![
            ReallocationRule { source: 0, year_from: 2010, year_to: 2019, shares: vec![(0, 1.0)] },
            ReallocationRule { source: 1, year_from: 2010, year_to: 2019, shares: vec![(1, 1.0)] },
        ])
        .unwrap();
        assert_eq!(reallocate(&counts, &ident), counts);
        let split = ReallocationMatrix::new(vec![ReallocationRule {
            source: 0,
            year_from: 2018,
            year_to: 2019,
            shares: vec![(0, 0.7), (1, 0.3)],
        }])
        .unwrap();
        let out = reallocate(&counts, &split);
        let find = |r, y| out.iter().find(|c| c.region == r && c.year == y).unwrap().count;
        assert!((find(0, 2018) - 70.0).abs() < 1e-12);
        assert!((find(1, 2018) - 30.0).abs() < 1e-12);
        assert_eq!(find(1, 2015), 40.0);
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let bad = ReallocationMatrix::new(vec![ReallocationRule {
            source: 0,
            year_from: 2018,
            year_to: 2019,
            shares: vec![(0, 0.7), (1, 0.2)],
        }]);
        assert!(bad.is_err());
        let g = grid(2);
        let m = ReallocationMatrix::from_reader(
            "source,dest,share,year_from,year_to\nr0,r0,0.5,2018,2019\nr0,r1,0.5,2018,2019\n".as_bytes(),
            &g,
            "m",
        )
        .unwrap();
        assert_eq!(m.rules.len(), 1);
    }
}
