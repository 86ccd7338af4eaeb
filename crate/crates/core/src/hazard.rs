//! Process model: per-step circumcision probabilities by type, survivor
//! function, incidence and cumulative incidence along birth cohorts, and
//! expected programme counts.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::whiten::standardized;
use crate::params::{Block, ParameterVector, RandomEffect};
use crate::population::Population;
use crate::programme::ProgrammeCount;
use crate::shares::ShareCell;
use crate::structure::{Grid, LexisDims, ModelStructure, TERMINAL_EVENT_AGE};

/// Hazards are kept inside `[HAZARD_FLOOR, 1 − HAZARD_FLOOR]`.
pub const HAZARD_FLOOR: f64 = 1e-12;

/// Linear predictors are clamped to `±ETA_BOUND`, i.e. `logit(1 − HAZARD_FLOOR)`.
pub(crate) const ETA_BOUND: f64 = 27.631021115871036;

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CircType {
    #[serde(rename = "MMC-nT")]
    MmcNt,
    #[serde(rename = "MMC-T")]
    MmcT,
    #[serde(rename = "TMC")]
    Tmc,
    #[serde(rename = "MMC")]
    Mmc,
    #[serde(rename = "TMIC")]
    Tmic,
    #[serde(rename = "MC")]
    Mc,
}

impl CircType {
    pub const ALL: [CircType; 6] = [
        CircType::MmcNt,
        CircType::MmcT,
        CircType::Tmc,
        CircType::Mmc,
        CircType::Tmic,
        CircType::Mc,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CircType::MmcNt => "MMC-nT",
            CircType::MmcT => "MMC-T",
            CircType::Tmc => "TMC",
            CircType::Mmc => "MMC",
            CircType::Tmic => "TMIC",
            CircType::Mc => "MC",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        CircType::ALL.into_iter().find(|t| t.label() == s)
    }
}

/// Per-step probabilities on the Lexis grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardField {
    pub dims: LexisDims,
    pub tmic: Vec<f64>,
    /// MMC-nT probability conditional on no TMIC in the same step.
    pub mmcnt_tilde: Vec<f64>,
    pub mmcnt: Vec<f64>,
    pub mmct: Vec<f64>,
    pub tmc: Vec<f64>,
    pub uc: Vec<f64>,
    /// Share `p` of TMIC performed as MMC-T.
    pub share: Vec<f64>,
}

impl HazardField {
    /// Builds the full field from TMIC probabilities, conditional MMC-nT
    /// probabilities and MMC-T shares, applying the ordering rule.
    pub fn from_components(
        dims: LexisDims,
        tmic: Vec<f64>,
        mmcnt_tilde: Vec<f64>,
        share: Vec<f64>,
    ) -> Result<Self> {
        let n = dims.len();
        if tmic.len() != n || mmcnt_tilde.len() != n || share.len() != n {
            return Err(Error::structural("hazard component lengths do not match the grid"));
        }
        for (name, v) in [("tmic", &tmic), ("mmcnt_tilde", &mmcnt_tilde), ("share", &share)] {
            if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::Numerical {
                    block: name.to_string(),
                    message: format!("probability {x} outside [0, 1]"),
                });
            }
        }
        let mmcnt: Vec<f64> = tmic.iter().zip(&mmcnt_tilde).map(|(t, m)| m * (1.0 - t)).collect();
        let mmct: Vec<f64> = tmic.iter().zip(&share).map(|(t, p)| p * t).collect();
        let tmc: Vec<f64> = tmic.iter().zip(&share).map(|(t, p)| (1.0 - p) * t).collect();
        let uc: Vec<f64> = tmic
            .iter()
            .zip(&mmcnt_tilde)
            .map(|(t, m)| (1.0 - t) * (1.0 - m))
            .collect();
        Ok(HazardField { dims, tmic, mmcnt_tilde, mmcnt, mmct, tmc, uc, share })
    }

    /// Hazard of type `k` at flat cell `c`.
    pub fn get(&self, k: CircType, c: usize) -> f64 {
        match k {
            CircType::MmcNt => self.mmcnt[c],
            CircType::MmcT => self.mmct[c],
            CircType::Tmc => self.tmc[c],
            CircType::Mmc => self.mmcnt[c] + self.mmct[c],
            CircType::Tmic => self.tmic[c],
            CircType::Mc => self.tmic[c] + self.mmcnt[c],
        }
    }
}

/// Additive pieces of the two linear predictors, already scaled by their σ.
#[derive(Debug, Clone)]
pub(crate) struct Effects {
    pub alpha: [f64; 3],
    pub psi: [Vec<f64>; 3],
    /// Age effects: all ages (TMIC), paediatric ages, adult ages.
    pub phi: [Vec<f64>; 3],
    pub theta: Vec<f64>,
    /// Age × region effects, row-major `(age, region)`.
    pub gamma: [Vec<f64>; 3],
    /// Adult age × year, row-major.
    pub delta: Vec<f64>,
    /// Region × year, row-major.
    pub zeta: Vec<f64>,
    pub share_logits: Vec<f64>,
}

fn scaled(values: &[f64], sigma: f64) -> Vec<f64> {
    values.iter().map(|v| v * sigma).collect()
}

/// `σ · W · Z` with `Z` stored row-major `(n_basis × cols)`.
fn basis_times(w: &DMatrix<f64>, z: &[f64], cols: usize, sigma: f64) -> Vec<f64> {
    let zm = DMatrix::from_row_slice(w.ncols(), cols, z);
    let prod = w * zm * sigma;
    let mut out = Vec::with_capacity(prod.len());
    for r in 0..prod.nrows() {
        for c in 0..cols {
            out.push(prod[(r, c)]);
        }
    }
    out
}

impl Effects {
    pub fn new(params: &ParameterVector, s: &ModelStructure) -> Result<Self> {
        let l = &s.layout;
        if params.values.len() != l.len() {
            return Err(Error::structural(format!(
                "parameter vector has length {} but layout needs {}",
                params.values.len(),
                l.len()
            )));
        }
        let ni = l.n_regions();
        let nt = l.n_years();
        let sig = |re: RandomEffect| params.sigma(l, re);
        let b = |blk: Block| params.block(l, blk);
        let z = |re: RandomEffect| standardized(params, l, re);
        let effects = Effects {
            alpha: [b(Block::AlphaTmic)[0], b(Block::AlphaPaed)[0], b(Block::AlphaAdult)[0]],
            psi: [
                scaled(&z(RandomEffect::PsiTmic), sig(RandomEffect::PsiTmic)),
                scaled(&z(RandomEffect::PsiPaed), sig(RandomEffect::PsiPaed)),
                scaled(&z(RandomEffect::PsiAdult), sig(RandomEffect::PsiAdult)),
            ],
            phi: [
                basis_times(s.basis_all.design(), &z(RandomEffect::PhiTmic), 1, sig(RandomEffect::PhiTmic)),
                basis_times(s.basis_paed.design(), &z(RandomEffect::PhiPaed), 1, sig(RandomEffect::PhiPaed)),
                basis_times(s.basis_adult.design(), &z(RandomEffect::PhiAdult), 1, sig(RandomEffect::PhiAdult)),
            ],
            theta: scaled(&z(RandomEffect::Theta), sig(RandomEffect::Theta)),
            gamma: [
                basis_times(s.basis_all.design(), &z(RandomEffect::GammaTmic), ni, sig(RandomEffect::GammaTmic)),
                basis_times(s.basis_paed.design(), &z(RandomEffect::GammaPaed), ni, sig(RandomEffect::GammaPaed)),
                basis_times(s.basis_adult.design(), &z(RandomEffect::GammaAdult), ni, sig(RandomEffect::GammaAdult)),
            ],
            delta: basis_times(s.basis_adult.design(), &z(RandomEffect::Delta), nt, sig(RandomEffect::Delta)),
            zeta: scaled(&z(RandomEffect::Zeta), sig(RandomEffect::Zeta)),
            share_logits: b(Block::LogitShare).to_vec(),
        };
        effects.check_finite()?;
        Ok(effects)
    }

    fn check_finite(&self) -> Result<()> {
        let blocks: [(&str, &[f64]); 14] = [
            ("alpha", &self.alpha),
            ("psi_tmic", &self.psi[0]),
            ("psi_paed", &self.psi[1]),
            ("psi_adult", &self.psi[2]),
            ("phi_tmic", &self.phi[0]),
            ("phi_paed", &self.phi[1]),
            ("phi_adult", &self.phi[2]),
            ("theta", &self.theta),
            ("gamma_tmic", &self.gamma[0]),
            ("gamma_paed", &self.gamma[1]),
            ("gamma_adult", &self.gamma[2]),
            ("delta", &self.delta),
            ("zeta", &self.zeta),
            ("logit_share", &self.share_logits),
        ];
        for (name, v) in blocks {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical {
                    block: name.to_string(),
                    message: "non-finite linear predictor contribution".into(),
                });
            }
        }
        Ok(())
    }

    /// Unclamped TMIC predictor at `(i, a)`.
    #[inline]
    pub fn eta_tmic(&self, ni: usize, i: usize, a: usize) -> f64 {
        self.alpha[0] + self.psi[0][i] + self.phi[0][a] + self.gamma[0][a * ni + i]
    }

    /// Unclamped MMC-nT predictor at `(i, a, t)`.
    #[inline]
    pub fn eta_mmc(&self, ni: usize, nt: usize, cutoff: usize, i: usize, a: usize, t: usize) -> f64 {
        if a < cutoff {
            self.alpha[1] + self.psi[1][i] + self.phi[1][a] + self.gamma[1][a * ni + i]
        } else {
            let b = a - cutoff;
            self.alpha[2]
                + self.psi[2][i]
                + self.phi[2][b]
                + self.theta[t]
                + self.gamma[2][b * ni + i]
                + self.delta[b * nt + t]
                + self.zeta[i * nt + t]
        }
    }

    pub fn share(&self, s: &ModelStructure, i: usize, t: usize) -> f64 {
        match s.shares.cell(i, t) {
            ShareCell::Fixed(p) => p,
            ShareCell::Free { slot, .. } => logistic(self.share_logits[slot]),
        }
    }
}

/// Clamps a predictor; returns the probability and whether the clamp was inactive.
#[inline]
pub(crate) fn clamped_prob(eta: f64) -> (f64, f64, bool) {
    let active = eta.abs() < ETA_BOUND;
    let e = eta.clamp(-ETA_BOUND, ETA_BOUND);
    (e, logistic(e), active)
}

/// Evaluates every hazard on the model grid from a parameter vector.
pub fn compute_hazards(params: &ParameterVector, s: &ModelStructure) -> Result<HazardField> {
    let eff = Effects::new(params, s)?;
    Ok(hazards_from_effects(&eff, s))
}

pub(crate) fn hazards_from_effects(eff: &Effects, s: &ModelStructure) -> HazardField {
    let d = s.dims();
    let (ni, nt) = (d.n_regions, d.n_years);
    let cutoff = s.grid.paediatric_cutoff();
    let n = d.len();
    let mut tmic = vec![0.0; n];
    let mut tilde = vec![0.0; n];
    let mut share = vec![0.0; n];
    for i in 0..ni {
        for a in 0..d.n_ages {
            let live = a <= TERMINAL_EVENT_AGE;
            let lt = clamped_prob(eff.eta_tmic(ni, i, a)).1;
            for t in 0..nt {
                let c = d.idx(i, a, t);
                share[c] = eff.share(s, i, t);
                if live {
                    tmic[c] = lt;
                    tilde[c] = clamped_prob(eff.eta_mmc(ni, nt, cutoff, i, a, t)).1;
                }
            }
        }
    }
    HazardField::from_components(d, tmic, tilde, share).expect("probabilities in range by construction")
}

/// Survivor function, incidence and cumulative incidence by type.
///
/// `survivor[c]` is the probability of entering step `c` uncircumcised;
/// `survivor_end[c] = survivor[c] · λ^UC[c]` is the probability of leaving it
/// uncircumcised, so `survivor_end + CIF^MC = 1` along every cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageField {
    pub dims: LexisDims,
    pub survivor: Vec<f64>,
    pub survivor_end: Vec<f64>,
    incidence: [Vec<f64>; 6],
    cif: [Vec<f64>; 6],
}

impl CoverageField {
    #[cfg(test)]
    pub(crate) fn from_parts(
        dims: LexisDims,
        survivor: Vec<f64>,
        survivor_end: Vec<f64>,
        incidence: [Vec<f64>; 6],
        cif: [Vec<f64>; 6],
    ) -> Self {
        CoverageField { dims, survivor, survivor_end, incidence, cif }
    }

    pub fn incidence(&self, k: CircType) -> &[f64] {
        &self.incidence[k as usize]
    }

    pub fn cif(&self, k: CircType) -> &[f64] {
        &self.cif[k as usize]
    }
}

/// Runs every cohort diagonal. Cohorts entering the grid above age 0 start
/// with survivor 1 at their first on-grid cell.
pub fn compute_survivor_and_cif(h: &HazardField) -> CoverageField {
    let d = h.dims;
    let n = d.len();
    let mut survivor = vec![1.0; n];
    let mut survivor_end = vec![1.0; n];
    let mut cif: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
    let mut incidence: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
    let elementary = [CircType::MmcNt, CircType::MmcT, CircType::Tmc];
    for i in 0..d.n_regions {
        for a in 0..d.n_ages {
            for t in 0..d.n_years {
                let c = d.idx(i, a, t);
                let prev = (a > 0 && t > 0).then(|| d.idx(i, a - 1, t - 1));
                let s = prev.map_or(1.0, |p| survivor_end[p]);
                survivor[c] = s;
                survivor_end[c] = s * h.uc[c];
                for k in elementary {
                    let inc = s * h.get(k, c);
                    incidence[k as usize][c] = inc;
                    cif[k as usize][c] = prev.map_or(0.0, |p| cif[k as usize][p]) + inc;
                }
            }
        }
    }
    for (agg, parts) in [
        (CircType::Mmc, [CircType::MmcNt, CircType::MmcT].as_slice()),
        (CircType::Tmic, [CircType::MmcT, CircType::Tmc].as_slice()),
        (CircType::Mc, elementary.as_slice()),
    ] {
        let mut inc = vec![0.0; n];
        let mut cum = vec![0.0; n];
        for &p in parts {
            for c in 0..n {
                inc[c] += incidence[p as usize][c];
                cum[c] += cif[p as usize][c];
            }
        }
        incidence[agg as usize] = inc;
        cif[agg as usize] = cum;
    }
    CoverageField { dims: d, survivor, survivor_end, incidence, cif }
}

/// `μ_iGt = Σ_{a∈G} P_iat S_iat (λ^MMC-nT + λ^MMC-T)` for each programme row.
pub fn expected_programme_counts(
    coverage: &CoverageField,
    hazards: &HazardField,
    population: &Population,
    grid: &Grid,
    rows: &[ProgrammeCount],
) -> Result<Vec<f64>> {
    let d = coverage.dims;
    rows.iter()
        .map(|r| {
            let t = band_year(grid, r)?;
            Ok((r.age_lo..=r.age_hi)
                .map(|a| {
                    let c = d.idx(r.region, a, t);
                    population.get(r.region, a, t) * coverage.survivor[c] * (hazards.mmcnt[c] + hazards.mmct[c])
                })
                .sum())
        })
        .collect()
}

/// Model-year index of a programme row after checking its band is on the grid.
pub(crate) fn band_year(grid: &Grid, r: &ProgrammeCount) -> Result<usize> {
    if r.region >= grid.n_regions() || r.age_lo > r.age_hi || r.age_hi > grid.max_age() {
        return Err(Error::structural(format!(
            "programme band [{}, {}] for region {} is outside the grid",
            r.age_lo, r.age_hi, r.region
        )));
    }
    grid.model_year_index(r.year)
        .ok_or_else(|| Error::structural(format!("programme year {} is outside the grid", r.year)))
}
