use std::collections::HashSet;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result, RowIssue};
use crate::structure::{check_header, Grid, LexisDims};

/// Male population `P_iat` on the model grid. Cells absent from the input
/// are zero and flagged as missing.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    dims: LexisDims,
    values: Vec<f64>,
    present: Vec<bool>,
}

impl Population {
    pub fn zeros(grid: &Grid) -> Self {
        let dims = grid.dims();
        Population {
            dims,
            values: vec![0.0; dims.len()],
            present: vec![false; dims.len()],
        }
    }

    /// Same value in every cell.
    pub fn constant(grid: &Grid, value: f64) -> Self {
        let dims = grid.dims();
        Population {
            dims,
            values: vec![value; dims.len()],
            present: vec![true; dims.len()],
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut p = Self::zeros(grid);
        for i in 0..p.dims.n_regions {
            for a in 0..p.dims.n_ages {
                for t in 0..p.dims.n_years {
                    p.set(i, a, t, f(i, a, t));
                }
            }
        }
        p
    }

    pub fn dims(&self) -> LexisDims {
        self.dims
    }

    pub fn get(&self, region: usize, age: usize, year: usize) -> f64 {
        self.values[self.dims.idx(region, age, year)]
    }

    pub fn is_present(&self, region: usize, age: usize, year: usize) -> bool {
        self.present[self.dims.idx(region, age, year)]
    }

    pub fn set(&mut self, region: usize, age: usize, year: usize, value: f64) {
        let k = self.dims.idx(region, age, year);
        self.values[k] = value;
        self.present[k] = true;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Reads `region,year,age,population`. Rows outside the model grid's ages
    /// or years are skipped and counted in the log.
    pub fn from_csv(path: impl AsRef<Path>, grid: &Grid) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, grid, &path.display().to_string())
    }

    pub fn from_reader(reader: impl std::io::Read, grid: &Grid, source_name: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            region: String,
            year: i32,
            age: i64,
            population: f64,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        check_header(&mut rdr, &["region", "year", "age", "population"], source_name)?;
        let mut pop = Self::zeros(grid);
        let mut issues = Vec::new();
        let mut seen = HashSet::new();
        let mut skipped = 0usize;
        for (k, rec) in rdr.deserialize::<Row>().enumerate() {
            let row = k + 1;
            let r = match rec {
                Ok(r) => r,
                Err(e) => {
                    issues.push(RowIssue { row, message: e.to_string() });
                    continue;
                }
            };
            let Some(i) = grid.region_index(&r.region) else {
                issues.push(RowIssue { row, message: format!("unknown region `{}`", r.region) });
                continue;
            };
            if !(r.population >= 0.0) || !r.population.is_finite() {
                issues.push(RowIssue { row, message: format!("invalid population {}", r.population) });
                continue;
            }
            let (Some(t), true) = (grid.model_year_index(r.year), r.age >= 0 && (r.age as usize) <= grid.max_age()) else {
                skipped += 1;
                continue;
            };
            let a = r.age as usize;
            if !seen.insert((i, a, t)) {
                issues.push(RowIssue {
                    row,
                    message: format!("duplicate cell ({}, {}, {})", r.region, r.year, r.age),
                });
                continue;
            }
            pop.set(i, a, t, r.population);
        }
        if !issues.is_empty() {
            return Err(Error::Validation { source_name: source_name.to_string(), issues });
        }
        if skipped > 0 {
            log::info!("{source_name}: skipped {skipped} row(s) outside the model grid");
        }
        Ok(pop)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["region", "year", "age", "population"])
            .map_err(|e| Error::csv(path, e))?;
        for i in 0..self.dims.n_regions {
            for t in 0..self.dims.n_years {
                for a in 0..self.dims.n_ages {
                    if !self.is_present(i, a, t) {
                        continue;
                    }
                    w.write_record([
                        grid.regions()[i].clone(),
                        grid.model_year(t).to_string(),
                        a.to_string(),
                        format!("{}", self.get(i, a, t)),
                    ])
                    .map_err(|e| Error::csv(path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
