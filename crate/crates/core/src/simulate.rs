//! Synthetic survey and programme data from known hazard fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::block_constraints;
use crate::whiten::block_axes;
use crate::hazard::{compute_hazards, compute_survivor_and_cif, expected_programme_counts, HazardField};
use crate::params::{Block, ParameterVector, RandomEffect};
use crate::population::Population;
use crate::programme::ProgrammeCount;
use crate::structure::{Grid, ModelStructure, TERMINAL_EVENT_AGE};
use crate::survey::{Outcome, SurveyRecord};

/// Known parameters for a simulation: intercepts, a common σ and
/// correlation logit, and standard-normal innovations from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    /// TMIC, paediatric MMC-nT and adult MMC-nT intercepts.
    pub alpha: [f64; 3],
    pub sigma: f64,
    #[serde(default = "default_rho_logit")]
    pub rho_logit: f64,
    #[serde(default)]
    pub share_logit: f64,
    pub seed: u64,
}

fn default_rho_logit() -> f64 {
    3.0
}

impl TruthSpec {
    pub fn parameters(&self, structure: &ModelStructure) -> Result<ParameterVector> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("truth sigma {} must be positive", self.sigma)));
        }
        let l = &structure.layout;
        let mut p = ParameterVector::zeros(l);
        for (k, blk) in [Block::AlphaTmic, Block::AlphaPaed, Block::AlphaAdult].into_iter().enumerate() {
            p.values[l.range(blk).start] = self.alpha[k];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        for re in RandomEffect::ALL {
            for k in l.range(re.block()) {
                p.values[k] = StandardNormal.sample(&mut rng);
            }
            // keep the truth on the constrained surface
            let start = l.range(re.block()).start;
            for line in block_constraints(&block_axes(re, l), structure) {
                let mean = line.iter().map(|&i| p.values[start + i]).sum::<f64>() / line.len() as f64;
                for &i in &line {
                    p.values[start + i] -= mean;
                }
            }
            p.values[l.sigma_index(re)] = self.sigma.ln();
        }
        for k in l.range(Block::LogitRho) {
            p.values[k] = self.rho_logit;
        }
        for k in l.range(Block::LogitShare) {
            p.values[k] = self.share_logit;
        }
        Ok(p)
    }
}

/// One cross-sectional survey: respondents are spread uniformly over
/// regions and over ages `age_lo..=age_hi` at the survey year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyDesign {
    pub id: String,
    pub year: i32,
    pub respondents: usize,
    pub age_lo: usize,
    pub age_hi: usize,
}

#[derive(Debug, Clone)]
pub struct SimDesign {
    pub grid: Grid,
    pub hazards: HazardField,
    pub population: Population,
    pub surveys: Vec<SurveyDesign>,
    /// Log-scale sd of the lognormal weight dispersion.
    pub weight_sd: f64,
    /// Fraction of events reported without an age.
    pub left_censored_fraction: f64,
    /// Programme age bands, reported for every region in `programme_years`.
    pub programme_bands: Vec<(usize, usize)>,
    pub programme_years: Vec<i32>,
    pub seed: u64,
}

impl SimDesign {
    /// Design with hazards evaluated at known parameters.
    pub fn from_parameters(
        structure: &ModelStructure,
        truth: &ParameterVector,
        population: Population,
        surveys: Vec<SurveyDesign>,
        seed: u64,
    ) -> Result<Self> {
        Ok(SimDesign {
            grid: structure.grid.clone(),
            hazards: compute_hazards(truth, structure)?,
            population,
            surveys,
            weight_sd: 0.3,
            left_censored_fraction: 0.0,
            programme_bands: Vec::new(),
            programme_years: Vec::new(),
            seed,
        })
    }

    fn check(&self) -> Result<()> {
        let g = &self.grid;
        if self.hazards.dims != g.dims() || self.population.dims() != g.dims() {
            return Err(Error::structural("design hazards or population do not match the grid"));
        }
        for s in &self.surveys {
            if s.year < g.t_min() || s.year > g.t_max() || s.age_lo > s.age_hi || s.age_hi > g.max_age() {
                return Err(Error::Config(format!("survey `{}` lies outside the grid", s.id)));
            }
        }
        if !(0.0..=1.0).contains(&self.left_censored_fraction) || !(self.weight_sd >= 0.0) {
            return Err(Error::Config("invalid censoring fraction or weight dispersion".into()));
        }
        Ok(())
    }
}

/// Walks each respondent's cohort diagonal from birth to the survey.
pub fn simulate_individuals(design: &SimDesign) -> Result<Vec<SurveyRecord>> {
    design.check()?;
    let g = &design.grid;
    let d = g.dims();
    let h = &design.hazards;
    let dispersion = LogNormal::new(0.0, design.weight_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    for (k, s) in design.surveys.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
        rng.set_stream(k as u64);
        let ty = g.model_year_index(s.year).expect("checked");
        for _ in 0..s.respondents {
            let i = rng.random_range(0..g.n_regions());
            let age = rng.random_range(s.age_lo..=s.age_hi);
            let t0 = ty - age;
            let mut outcome = Outcome::RightCensored;
            let mut event_age = age.min(TERMINAL_EVENT_AGE);
            for a in 0..age.min(TERMINAL_EVENT_AGE + 1) {
                let c = d.idx(i, a, t0 + a);
                if rng.random::<f64>() < h.tmic[c] {
                    outcome = Outcome::Tmic;
                } else if rng.random::<f64>() < h.mmcnt_tilde[c] {
                    outcome = Outcome::MmcNt;
                } else {
                    continue;
                }
                event_age = a;
                break;
            }
            if outcome.is_event() && rng.random::<f64>() < design.left_censored_fraction {
                outcome = Outcome::LeftCensored;
                event_age = age;
            }
            let weight = dispersion.sample(&mut rng);
            out.push(SurveyRecord {
                survey_id: s.id.clone(),
                region: g.regions()[i].clone(),
                birth_year: s.year - age as i32,
                outcome,
                event_age: event_age as i64,
                weight,
            });
        }
    }
    Ok(out)
}

/// Poisson counts at the exact expected MMC volume of every band.
pub fn simulate_programme(design: &SimDesign) -> Result<Vec<ProgrammeCount>> {
    design.check()?;
    let g = &design.grid;
    let mut rows = Vec::new();
    for i in 0..g.n_regions() {
        for &year in &design.programme_years {
            for &(lo, hi) in &design.programme_bands {
                rows.push(ProgrammeCount { region: i, year, age_lo: lo, age_hi: hi, count: 0.0 });
            }
        }
    }
    let coverage = compute_survivor_and_cif(&design.hazards);
    let mu = expected_programme_counts(&coverage, &design.hazards, &design.population, g, &rows)?;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    rng.set_stream(u64::MAX);
    for (r, m) in rows.iter_mut().zip(mu) {
        r.count = if m > 0.0 {
            Poisson::new(m).map_err(|e| Error::domain(e.to_string()))?.sample(&mut rng)
        } else {
            0.0
        };
    }
    Ok(rows)
}
