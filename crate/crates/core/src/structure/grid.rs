use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Oldest age at which any circumcision can occur.
pub const TERMINAL_EVENT_AGE: usize = 59;

/// Estimation grid: regions, single-year ages `0..=max_age` and reporting
/// years `t_min..=t_max`.
///
/// The model itself runs on an extended year range that starts `max_age`
/// years before `t_min`, so that every cohort observed inside the reporting
/// window has its full history on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    regions: Vec<String>,
    max_age: usize,
    t_min: i32,
    t_max: i32,
    paediatric_cutoff: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Grid {
    pub fn new(
        regions: Vec<String>,
        max_age: usize,
        t_min: i32,
        t_max: i32,
        paediatric_cutoff: usize,
    ) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::structural("grid needs at least one region"));
        }
        if t_max < t_min {
            return Err(Error::structural(format!(
                "year range {t_min}..{t_max} is empty"
            )));
        }
        if paediatric_cutoff == 0 {
            return Err(Error::structural("paediatric cutoff must be at least 1"));
        }
        if max_age < paediatric_cutoff {
            return Err(Error::structural(format!(
                "max age {max_age} is below the paediatric cutoff {paediatric_cutoff}"
            )));
        }
        let mut index = HashMap::with_capacity(regions.len());
        for (i, r) in regions.iter().enumerate() {
            if index.insert(r.clone(), i).is_some() {
                return Err(Error::structural(format!("duplicate region `{r}`")));
            }
        }
        Ok(Grid {
            regions,
            max_age,
            t_min,
            t_max,
            paediatric_cutoff,
            index,
        })
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn max_age(&self) -> usize {
        self.max_age
    }

    pub fn n_ages(&self) -> usize {
        self.max_age + 1
    }

    pub fn t_min(&self) -> i32 {
        self.t_min
    }

    pub fn t_max(&self) -> i32 {
        self.t_max
    }

    pub fn paediatric_cutoff(&self) -> usize {
        self.paediatric_cutoff
    }

    pub fn region_index(&self, id: &str) -> Option<usize> {
        if self.index.is_empty() {
            // deserialized grids arrive without the lookup table
            return self.regions.iter().position(|r| r == id);
        }
        self.index.get(id).copied()
    }

    /// First year of the extended model grid.
    pub fn first_model_year(&self) -> i32 {
        self.t_min - self.max_age as i32
    }

    pub fn n_model_years(&self) -> usize {
        (self.t_max - self.first_model_year() + 1) as usize
    }

    pub fn model_year_index(&self, year: i32) -> Option<usize> {
        if year < self.first_model_year() || year > self.t_max {
            None
        } else {
            Some((year - self.first_model_year()) as usize)
        }
    }

    pub fn model_year(&self, t: usize) -> i32 {
        self.first_model_year() + t as i32
    }

    pub fn reporting_years(&self) -> impl Iterator<Item = i32> {
        self.t_min..=self.t_max
    }

    pub fn dims(&self) -> LexisDims {
        LexisDims {
            n_regions: self.n_regions(),
            n_ages: self.n_ages(),
            n_years: self.n_model_years(),
        }
    }
}

/// Shape of a region × age × (model) year array, stored with year fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexisDims {
    pub n_regions: usize,
    pub n_ages: usize,
    pub n_years: usize,
}

impl LexisDims {
    pub fn len(&self) -> usize {
        self.n_regions * self.n_ages * self.n_years
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, region: usize, age: usize, year: usize) -> usize {
        (region * self.n_ages + age) * self.n_years + year
    }
}
