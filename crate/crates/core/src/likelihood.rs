//! Negative log posterior: survey pseudo-likelihood, Poisson programme
//! likelihood and prior densities, with an analytic gradient.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::Result;
use crate::hazard::{
    band_year, clamped_prob, compute_hazards, compute_survivor_and_cif, expected_programme_counts,
    softplus, CoverageField, Effects, HazardField,
};
use crate::params::{Block, Layout, ParameterVector, RandomEffect};
use crate::population::Population;
use crate::programme::ProgrammeCount;
use crate::shares::ShareCell;
use crate::structure::{ModelStructure, SOFT_CONSTRAINT_KAPPA, TERMINAL_EVENT_AGE};
use crate::survey::{EventCountCube, Outcome};
use crate::whiten::{block_axes, standardized_back, BlockAxes};

/// Probabilities entering a logarithm are floored here.
pub const LOG_FLOOR: f64 = 1e-12;

/// Fixed constants of the hyperpriors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperpriors {
    /// Standard deviation of the Gaussian intercept priors.
    pub intercept_sd: f64,
    /// Rate of the exponential prior on each standard deviation.
    pub sigma_rate: f64,
    /// Mean and sd of the Gaussian prior on logit-scale correlations.
    pub rho_logit_mean: f64,
    pub rho_logit_sd: f64,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Hyperpriors { intercept_sd: 5.0, sigma_rate: 1.0, rho_logit_mean: 3.0, rho_logit_sd: 1.0 }
    }
}

/// Data and structure defining one posterior.
#[derive(Debug, Clone)]
pub struct PosteriorSpec {
    pub structure: Arc<ModelStructure>,
    pub cube: EventCountCube,
    pub programme: Vec<ProgrammeCount>,
    pub population: Population,
    pub hyper: Hyperpriors,
}

impl PosteriorSpec {
    pub fn new(
        structure: Arc<ModelStructure>,
        cube: EventCountCube,
        programme: Vec<ProgrammeCount>,
        population: Population,
    ) -> Result<Self> {
        let d = structure.dims();
        if cube.dims != d || population.dims() != d {
            return Err(crate::Error::structural("cube, population and structure grids differ"));
        }
        for r in &programme {
            let t = band_year(&structure.grid, r)?;
            if let Some(a) = (r.age_lo..=r.age_hi).find(|&a| !population.is_present(r.region, a, t)) {
                return Err(crate::Error::structural(format!(
                    "population missing for region {}, year {}, age {a} used by a programme row",
                    structure.grid.regions()[r.region],
                    r.year
                )));
            }
        }
        Ok(PosteriorSpec { structure, cube, programme, population, hyper: Hyperpriors::default() })
    }

    pub fn layout(&self) -> &Layout {
        &self.structure.layout
    }
}

/// `−Σ [Ñ^TMIC log(S λ^TMIC) + Ñ^MMC-nT log(S λ^MMC-nT) + Ñ^RC log S + Ñ^LC log(1 − S)]`.
pub fn survey_nll(cube: &EventCountCube, coverage: &CoverageField, hazards: &HazardField) -> f64 {
    // products are formed in log space so tiny survivors stay accurate
    let lg = |x: f64| x.max(f64::MIN_POSITIVE).ln();
    let mut total = 0.0;
    for c in 0..cube.dims.len() {
        let s = coverage.survivor[c];
        let ls = lg(s);
        let terms = [
            (Outcome::Tmic, ls + lg(hazards.tmic[c])),
            (Outcome::MmcNt, ls + lg(hazards.mmcnt[c])),
            (Outcome::RightCensored, ls),
            (Outcome::LeftCensored, (1.0 - s).max(LOG_FLOOR).ln()),
        ];
        for (o, log_prob) in terms {
            let n = cube.counts(o)[c];
            if n > 0.0 {
                if !log_prob.is_finite() || log_prob < -700.0 {
                    log::warn!("survey cell {c} has {o:?} count {n} with vanishing probability");
                }
                total -= n * log_prob;
            }
        }
    }
    total
}

/// Poisson negative log-likelihood `Σ μ − y log μ + log Γ(y + 1)`.
pub fn programme_nll(counts: &[ProgrammeCount], expected: &[f64]) -> f64 {
    counts
        .iter()
        .zip(expected)
        .map(|(r, &mu)| poisson_term(r.count, mu).0)
        .sum()
}

/// Value and derivative in `μ`. Means below the floor are clamped.
fn poisson_term(y: f64, mu: f64) -> (f64, f64) {
    if mu < LOG_FLOOR {
        if y > 0.0 {
            log::warn!("programme mean {mu} with count {y} clamped");
        }
        let m = LOG_FLOOR;
        return (m - y * m.ln() + ln_gamma(y + 1.0), 0.0);
    }
    (mu - y * mu.ln() + ln_gamma(y + 1.0), 1.0 - y / mu)
}

/// Sum-to-zero constraints of a block as index sets into its stored vector:
/// one per ICAR component and per line along the region axis.
pub(crate) fn block_constraints(ax: &BlockAxes, s: &ModelStructure) -> Vec<Vec<usize>> {
    let comps: Vec<&Vec<usize>> = s.icar.constraints.iter().map(|c| &c.indices).collect();
    let (rows, cols) = (ax.rows, ax.cols);
    if ax.icar_cols {
        (0..rows).flat_map(|j| comps.iter().map(move |c| c.iter().map(|&i| j * cols + i).collect())).collect()
    } else if ax.icar_rows {
        (0..cols).flat_map(|t| comps.iter().map(move |c| c.iter().map(|&i| i * cols + t).collect())).collect()
    } else {
        Vec::new()
    }
}

/// Prior negative log density of the whole parameter vector, optionally
/// accumulating its gradient into `grad`.
fn prior_terms(params: &ParameterVector, s: &ModelStructure, h: &Hyperpriors, mut grad: Option<&mut [f64]>) -> f64 {
    let l = &s.layout;
    let mut total = 0.0;
    let ln2pi = (2.0 * PI).ln();
    let q = &s.icar.matrix;
    let icar_rank = s.icar.dim() - s.icar.rank_deficiency;

    // intercepts
    for blk in [Block::AlphaTmic, Block::AlphaPaed, Block::AlphaAdult] {
        let k = l.range(blk).start;
        let x = params.values[k];
        let v = h.intercept_sd * h.intercept_sd;
        total += 0.5 * x * x / v + 0.5 * (ln2pi + v.ln());
        if let Some(g) = grad.as_deref_mut() {
            g[k] += x / v;
        }
    }

    // innovations of each random effect and their σ
    for re in RandomEffect::ALL {
        let ax = block_axes(re, l);
        let range = l.range(re.block());
        let u = &params.values[range.clone()];
        let um = DMatrix::from_row_slice(ax.rows, ax.cols, u);
        // gradient of ½ uᵀ Q u, with Q the ICAR precision on the region axis
        let (qu, rank, log_det) = if ax.icar_cols {
            (&um * q, ax.rows * icar_rank, ax.rows as f64 * s.icar_log_det)
        } else if ax.icar_rows {
            (q * &um, ax.cols * icar_rank, ax.cols as f64 * s.icar_log_det)
        } else {
            (um.clone(), u.len(), 0.0)
        };
        total += 0.5 * um.dot(&qu) + 0.5 * rank as f64 * ln2pi - 0.5 * log_det;
        let cons = block_constraints(&ax, s);
        let mut sums = Vec::with_capacity(cons.len());
        for c in &cons {
            let sum: f64 = c.iter().map(|&i| u[i]).sum();
            total += 0.5 * sum * sum / SOFT_CONSTRAINT_KAPPA;
            sums.push(sum);
        }

        let si = l.sigma_index(re);
        let w = params.values[si];
        let sigma = w.exp();
        // Exp(rate) on σ with log-Jacobian of the log σ parameterization
        total += h.sigma_rate * sigma - h.sigma_rate.ln() - w;

        if let Some(g) = grad.as_deref_mut() {
            for r in 0..ax.rows {
                for c in 0..ax.cols {
                    g[range.start + r * ax.cols + c] += qu[(r, c)];
                }
            }
            for (c, sum) in cons.iter().zip(&sums) {
                for &i in c {
                    g[range.start + i] += sum / SOFT_CONSTRAINT_KAPPA;
                }
            }
            g[si] += h.sigma_rate * sigma - 1.0;
        }
    }

    // logit-scale correlations
    for k in l.range(Block::LogitRho) {
        let x = params.values[k];
        let zz = (x - h.rho_logit_mean) / h.rho_logit_sd;
        total += 0.5 * zz * zz + 0.5 * ln2pi + h.rho_logit_sd.ln();
        if let Some(g) = grad.as_deref_mut() {
            g[k] += zz / h.rho_logit_sd;
        }
    }

    // free MMC-T shares
    let off = l.range(Block::LogitShare).start;
    for (slot, &(_, _, mean, sd)) in s.shares.free_entries().iter().enumerate() {
        let x = params.values[off + slot];
        let zz = (x - mean) / sd;
        total += 0.5 * zz * zz + 0.5 * ln2pi + sd.ln();
        if let Some(g) = grad.as_deref_mut() {
            g[off + slot] += zz / sd;
        }
    }
    total
}

/// Prior negative log density (all normalizing constants included).
pub fn prior_nlp(params: &ParameterVector, s: &ModelStructure, hyper: &Hyperpriors) -> f64 {
    prior_terms(params, s, hyper, None)
}

/// Total negative log posterior, evaluated through the hazard and coverage
/// fields.
pub fn total_nlp(params: &ParameterVector, spec: &PosteriorSpec) -> Result<f64> {
    let s = &spec.structure;
    let hazards = compute_hazards(params, s)?;
    let coverage = compute_survivor_and_cif(&hazards);
    let mut total = survey_nll(&spec.cube, &coverage, &hazards);
    if !spec.programme.is_empty() {
        let mu = expected_programme_counts(&coverage, &hazards, &spec.population, &s.grid, &spec.programme)?;
        total += programme_nll(&spec.programme, &mu);
    }
    Ok(total + prior_nlp(params, s, &spec.hyper))
}

/// Value and analytic gradient of the total negative log posterior.
pub fn total_nlp_and_grad(params: &ParameterVector, spec: &PosteriorSpec) -> Result<(f64, Vec<f64>)> {
    let s = &*spec.structure;
    let eff = Effects::new(params, s)?;
    let d = s.dims();
    let (ni, na, nt) = (d.n_regions, d.n_ages, d.n_years);
    let cutoff = s.grid.paediatric_cutoff();
    let n = d.len();

    // forward pass -------------------------------------------------------
    let mut lam_t = vec![0.0; n];
    let mut lam_m = vec![0.0; n];
    let mut act_t = vec![0.0; n];
    let mut act_m = vec![0.0; n];
    let mut log_t = vec![f64::NEG_INFINITY; n];
    let mut log_1t = vec![0.0; n];
    let mut log_m = vec![f64::NEG_INFINITY; n];
    let mut log_1m = vec![0.0; n];
    let mut share = vec![0.0; n];
    for i in 0..ni {
        for a in 0..na {
            let live = a <= TERMINAL_EVENT_AGE;
            let (et, pt, at) = clamped_prob(eff.eta_tmic(ni, i, a));
            for t in 0..nt {
                let c = d.idx(i, a, t);
                share[c] = eff.share(s, i, t);
                if !live {
                    continue;
                }
                let (em, pm, am) = clamped_prob(eff.eta_mmc(ni, nt, cutoff, i, a, t));
                lam_t[c] = pt;
                lam_m[c] = pm;
                act_t[c] = if at { 1.0 } else { 0.0 };
                act_m[c] = if am { 1.0 } else { 0.0 };
                log_t[c] = -softplus(-et);
                log_1t[c] = -softplus(et);
                log_m[c] = -softplus(-em);
                log_1m[c] = -softplus(em);
            }
        }
    }
    let mut log_s = vec![0.0; n];
    for i in 0..ni {
        for a in 1..na {
            for t in 1..nt {
                let p = d.idx(i, a - 1, t - 1);
                log_s[d.idx(i, a, t)] = log_s[p] + log_1t[p] + log_1m[p];
            }
        }
    }

    // adjoints: b = ∂/∂ log S, gt/gm = ∂/∂η, gp = ∂/∂p
    let mut b = vec![0.0; n];
    let mut gt = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let mut gp = vec![0.0; n];
    let mut value = 0.0;

    let cube = &spec.cube;
    let (nt_c, nm_c, nr_c, nl_c) = (
        cube.counts(Outcome::Tmic),
        cube.counts(Outcome::MmcNt),
        cube.counts(Outcome::RightCensored),
        cube.counts(Outcome::LeftCensored),
    );
    for c in 0..n {
        let ls = log_s[c];
        let (ct, cm, cr, cl) = (nt_c[c], nm_c[c], nr_c[c], nl_c[c]);
        if ct > 0.0 {
            value -= ct * (ls + log_t[c]);
            gt[c] -= ct * (1.0 - lam_t[c]) * act_t[c];
        }
        if cm > 0.0 {
            value -= cm * (ls + log_m[c] + log_1t[c]);
            gt[c] += cm * lam_t[c] * act_t[c];
            gm[c] -= cm * (1.0 - lam_m[c]) * act_m[c];
        }
        if cr > 0.0 {
            value -= cr * ls;
        }
        b[c] -= ct + cm + cr;
        if cl > 0.0 {
            let om = -ls.exp_m1();
            if om > LOG_FLOOR {
                value -= cl * om.ln();
                b[c] += cl * ls.exp() / om;
            } else {
                log::warn!("left-censored count {cl} in cell {c} with survivor ~1");
                value -= cl * LOG_FLOOR.ln();
            }
        }
    }

    for r in &spec.programme {
        let t = band_year(&s.grid, r)?;
        let cells: Vec<usize> = (r.age_lo..=r.age_hi).map(|a| d.idx(r.region, a, t)).collect();
        let contrib = |c: usize| {
            let h = lam_m[c] * (1.0 - lam_t[c]) + share[c] * lam_t[c];
            spec.population.get(r.region, (c / nt) % na, t) * log_s[c].exp() * h
        };
        let mu: f64 = cells.iter().map(|&c| contrib(c)).sum();
        let (v, g) = poisson_term(r.count, mu);
        value += v;
        if g != 0.0 {
            for &c in &cells {
                let ps = spec.population.get(r.region, (c / nt) % na, t) * log_s[c].exp();
                let (lt, lm, p) = (lam_t[c], lam_m[c], share[c]);
                b[c] += g * ps * (lm * (1.0 - lt) + p * lt);
                gt[c] += g * ps * lt * (1.0 - lt) * (p - lm) * act_t[c];
                gm[c] += g * ps * lm * (1.0 - lm) * (1.0 - lt) * act_m[c];
                gp[c] += g * ps * lt;
            }
        }
    }

    // back along cohort diagonals: log S_c sums log λ^UC over predecessors
    let mut acc = vec![0.0; n];
    for a in (0..na).rev() {
        for i in 0..ni {
            for t in (0..nt).rev() {
                let c = d.idx(i, a, t);
                let after = if a + 1 < na && t + 1 < nt { acc[d.idx(i, a + 1, t + 1)] } else { 0.0 };
                acc[c] = b[c] + after;
                if after != 0.0 && a <= TERMINAL_EVENT_AGE {
                    gt[c] -= after * lam_t[c] * act_t[c];
                    gm[c] -= after * lam_m[c] * act_m[c];
                }
            }
        }
    }

    let mut grad = vec![0.0; s.layout.len()];
    backprop_effects(&eff, params, s, &gt, &gm, &gp, &share, &mut grad);
    value += prior_terms(params, s, &spec.hyper, Some(&mut grad));
    Ok((value, grad))
}

/// Pushes per-cell predictor adjoints back onto the parameter vector.
#[allow(clippy::too_many_arguments)]
fn backprop_effects(
    eff: &Effects,
    params: &ParameterVector,
    s: &ModelStructure,
    gt: &[f64],
    gm: &[f64],
    gp: &[f64],
    share: &[f64],
    grad: &mut [f64],
) {
    let l = &s.layout;
    let d = s.dims();
    let (ni, na, nt) = (d.n_regions, d.n_ages, d.n_years);
    let cutoff = s.grid.paediatric_cutoff();
    let nad = na - cutoff;

    let mut g_alpha = [0.0; 3];
    let mut g_psi = [vec![0.0; ni], vec![0.0; ni], vec![0.0; ni]];
    let mut g_phi = [vec![0.0; na], vec![0.0; cutoff], vec![0.0; nad]];
    let mut g_gamma = [vec![0.0; na * ni], vec![0.0; cutoff * ni], vec![0.0; nad * ni]];
    let mut g_theta = vec![0.0; nt];
    let mut g_delta = vec![0.0; nad * nt];
    let mut g_zeta = vec![0.0; ni * nt];
    let mut g_share = vec![0.0; s.shares.n_free()];

    for i in 0..ni {
        for a in 0..na {
            let mut sum_t = 0.0;
            for t in 0..nt {
                let c = d.idx(i, a, t);
                sum_t += gt[c];
                let m = gm[c];
                if a < cutoff {
                    g_alpha[1] += m;
                    g_psi[1][i] += m;
                    g_phi[1][a] += m;
                    g_gamma[1][a * ni + i] += m;
                } else {
                    let b = a - cutoff;
                    g_alpha[2] += m;
                    g_psi[2][i] += m;
                    g_phi[2][b] += m;
                    g_theta[t] += m;
                    g_gamma[2][b * ni + i] += m;
                    g_delta[b * nt + t] += m;
                    g_zeta[i * nt + t] += m;
                }
                if let ShareCell::Free { slot, .. } = s.shares.cell(i, t) {
                    let p = share[c];
                    g_share[slot] += gp[c] * p * (1.0 - p);
                }
            }
            g_alpha[0] += sum_t;
            g_psi[0][i] += sum_t;
            g_phi[0][a] += sum_t;
            g_gamma[0][a * ni + i] += sum_t;
        }
    }

    for (k, blk) in [Block::AlphaTmic, Block::AlphaPaed, Block::AlphaAdult].into_iter().enumerate() {
        grad[l.range(blk).start] += g_alpha[k];
    }
    let designs = [s.basis_all.design(), s.basis_paed.design(), s.basis_adult.design()];
    let psi_re = [RandomEffect::PsiTmic, RandomEffect::PsiPaed, RandomEffect::PsiAdult];
    let phi_re = [RandomEffect::PhiTmic, RandomEffect::PhiPaed, RandomEffect::PhiAdult];
    let gamma_re = [RandomEffect::GammaTmic, RandomEffect::GammaPaed, RandomEffect::GammaAdult];
    for k in 0..3 {
        plain_back(psi_re[k], &g_psi[k], &eff.psi[k], params, l, grad);
        basis_back(phi_re[k], designs[k], &g_phi[k], &eff.phi[k], 1, params, l, grad);
        basis_back(gamma_re[k], designs[k], &g_gamma[k], &eff.gamma[k], ni, params, l, grad);
    }
    plain_back(RandomEffect::Theta, &g_theta, &eff.theta, params, l, grad);
    basis_back(RandomEffect::Delta, designs[2], &g_delta, &eff.delta, nt, params, l, grad);
    plain_back(RandomEffect::Zeta, &g_zeta, &eff.zeta, params, l, grad);
    let off = l.range(Block::LogitShare).start;
    for (k, g) in g_share.into_iter().enumerate() {
        grad[off + k] += g;
    }
}

/// Effect `e = σ z(u)`: `∂/∂z = σ g`, `∂/∂ log σ = ⟨g, e⟩`.
fn plain_back(re: RandomEffect, g: &[f64], e: &[f64], params: &ParameterVector, l: &Layout, grad: &mut [f64]) {
    let sigma = params.sigma(l, re);
    let gz: Vec<f64> = g.iter().map(|v| sigma * v).collect();
    standardized_back(params, l, re, &gz, grad);
    grad[l.sigma_index(re)] += g.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
}

/// Effect `E = σ W Z(U)` (row-major, `cols` columns): `∂/∂Z = σ Wᵀ G`.
#[allow(clippy::too_many_arguments)]
fn basis_back(
    re: RandomEffect,
    w: &DMatrix<f64>,
    g: &[f64],
    e: &[f64],
    cols: usize,
    params: &ParameterVector,
    l: &Layout,
    grad: &mut [f64],
) {
    let sigma = params.sigma(l, re);
    let gm = DMatrix::from_row_slice(w.nrows(), cols, g);
    let gz = w.transpose() * gm * sigma;
    let mut flat = Vec::with_capacity(gz.len());
    for j in 0..gz.nrows() {
        for c in 0..cols {
            flat.push(gz[(j, c)]);
        }
    }
    standardized_back(params, l, re, &flat, grad);
    grad[l.sigma_index(re)] += g.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shares::{MmctShareConfig, ShareMode, ShareRule};
    use crate::structure::{generalized_log_det, kronecker_precision, AdjacencyGraph, Grid, PrecisionSpec, SplineSettings};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn structure() -> Arc<ModelStructure> {
        let grid = Grid::new(vec!["a".into(), "b".into(), "c".into(), "d".into()], 8, 2000, 2002, 3).unwrap();
        // d is isolated
        let graph = AdjacencyGraph::new(4, [(0, 1), (1, 2)]).unwrap();
        let shares = MmctShareConfig {
            rules: vec![ShareRule {
                regions: Some(vec!["a".into(), "b".into()]),
                year_from: 1990,
                year_to: 2002,
                mode: ShareMode::LogitNormal { mean: -1.0, sd: 0.7 },
            }],
        };
        Arc::new(ModelStructure::new(grid, graph, SplineSettings { knot_spacing: 2.0, degree: 2 }, &shares).unwrap())
    }

    fn spec(rng: &mut ChaCha8Rng) -> PosteriorSpec {
        let s = structure();
        let d = s.dims();
        let mut cube = EventCountCube::zeros(d);
        for c in 0..d.len() {
            for o in [Outcome::Tmic, Outcome::MmcNt, Outcome::RightCensored, Outcome::LeftCensored] {
                if rng.random::<f64>() < 0.3 {
                    cube.add(o, c, rng.random::<f64>() * 3.0);
                }
            }
        }
        let pop = Population::from_fn(&s.grid, |i, a, _| 100.0 + 10.0 * i as f64 + a as f64);
        let programme = vec![
            ProgrammeCount { region: 0, year: 2001, age_lo: 0, age_hi: 2, count: 12.0 },
            ProgrammeCount { region: 1, year: 2002, age_lo: 3, age_hi: 8, count: 40.5 },
            ProgrammeCount { region: 3, year: 2000, age_lo: 4, age_hi: 6, count: 0.0 },
        ];
        PosteriorSpec::new(s, cube, programme, pop).unwrap()
    }

    fn random_params(layout: &Layout, rng: &mut ChaCha8Rng, scale: f64) -> ParameterVector {
        let mut p = ParameterVector::zeros(layout);
        for v in p.values.iter_mut() {
            *v = scale * (rng.random::<f64>() * 2.0 - 1.0);
        }
        p
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = spec(&mut rng);
        for _ in 0..3 {
            let p = random_params(spec.layout(), &mut rng, 0.8);
            let (_, g) = total_nlp_and_grad(&p, &spec).unwrap();
            for k in 0..p.values.len() {
                let h = 1e-5;
                let mut up = p.clone();
                up.values[k] += h;
                let mut dn = p.clone();
                dn.values[k] -= h;
                let fd = (total_nlp(&up, &spec).unwrap() - total_nlp(&dn, &spec).unwrap()) / (2.0 * h);
                let err = (fd - g[k]).abs() / fd.abs().max(1.0);
                assert!(err < 1e-6, "coordinate {k} ({:?}): fd {fd} analytic {}", spec.layout().block_of(k), g[k]);
            }
        }
    }

    #[test]
    fn log_domain_value_matches_field_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = spec(&mut rng);
        for _ in 0..5 {
            let p = random_params(spec.layout(), &mut rng, 1.5);
            let (v, _) = total_nlp_and_grad(&p, &spec).unwrap();
            assert_relative_eq!(v, total_nlp(&p, &spec).unwrap(), max_relative = 1e-10);
        }
    }

    #[test]
    fn hand_computed_terms() {
        // two right-censored respondents with S = 0.5
        let s = structure();
        let d = s.dims();
        let mut cube = EventCountCube::zeros(d);
        cube.add(Outcome::RightCensored, 0, 2.0);
        let mut h = compute_hazards(&ParameterVector::zeros(&s.layout), &s).unwrap();
        let mut cov = compute_survivor_and_cif(&h);
        cov.survivor[0] = 0.5;
        assert_relative_eq!(survey_nll(&cube, &cov, &h), 1.3862943611198906, epsilon = 1e-12);
        h.tmic[0] = 0.2;
        let mut cube = EventCountCube::zeros(d);
        cube.add(Outcome::Tmic, 0, 1.0);
        assert_relative_eq!(survey_nll(&cube, &cov, &h), -(0.1f64).ln(), epsilon = 1e-12);

        let row = ProgrammeCount { region: 0, year: 2000, age_lo: 0, age_hi: 0, count: 0.0 };
        assert_relative_eq!(programme_nll(std::slice::from_ref(&row), &[1.0]), 1.0, epsilon = 1e-14);
        let row = ProgrammeCount { count: 3.0, ..row };
        let expect = 2.0 - 3.0 * 2.0f64.ln() + 6.0f64.ln();
        assert_relative_eq!(programme_nll(&[row], &[2.0]), expect, epsilon = 1e-12);
    }

    #[test]
    fn zero_counts_do_not_touch_degenerate_probabilities() {
        let s = structure();
        let cube = EventCountCube::zeros(s.dims());
        let h = compute_hazards(&ParameterVector::zeros(&s.layout), &s).unwrap();
        let mut cov = compute_survivor_and_cif(&h);
        cov.survivor.iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(survey_nll(&cube, &cov, &h), 0.0);
    }

    /// Dense prior density of the stored innovations built from explicit
    /// precision matrices.
    fn dense_prior(p: &ParameterVector, s: &ModelStructure, h: &Hyperpriors) -> f64 {
        let l = &s.layout;
        let ln2pi = (2.0 * PI).ln();
        let normal = |x: f64, m: f64, sd: f64| 0.5 * ((x - m) / sd).powi(2) + 0.5 * ln2pi + sd.ln();
        let mut total = 0.0;
        for blk in [Block::AlphaTmic, Block::AlphaPaed, Block::AlphaAdult] {
            total += normal(p.values[l.range(blk).start], 0.0, h.intercept_sd);
        }
        let eye = |n| PrecisionSpec { matrix: DMatrix::identity(n, n), rank_deficiency: 0, constraints: vec![] };
        let one = eye(1);
        let nt = l.n_years();
        let ni = l.n_regions();
        for re in RandomEffect::ALL {
            let q = match re {
                RandomEffect::PsiTmic | RandomEffect::PsiPaed | RandomEffect::PsiAdult => s.icar.clone(),
                RandomEffect::PhiTmic => eye(l.n_basis_all()),
                RandomEffect::PhiPaed => eye(l.n_basis_paed()),
                RandomEffect::PhiAdult => eye(l.n_basis_adult()),
                RandomEffect::Theta => eye(nt),
                RandomEffect::GammaTmic => kronecker_precision(&eye(l.n_basis_all()), &s.icar),
                RandomEffect::GammaPaed => kronecker_precision(&eye(l.n_basis_paed()), &s.icar),
                RandomEffect::GammaAdult => kronecker_precision(&eye(l.n_basis_adult()), &s.icar),
                RandomEffect::Delta => eye(l.n_basis_adult() * nt),
                RandomEffect::Zeta => kronecker_precision(&s.icar, &eye(nt)),
            };
            assert_eq!(q.dim(), p.block(l, re.block()).len(), "{re:?} {ni}");
            let q = kronecker_precision(&one, &q);
            let z = p.block(l, re.block());
            let rank = q.dim() - q.rank_deficiency;
            total += 0.5 * q.quadratic_form(z) + q.constraint_penalty(z) + 0.5 * rank as f64 * ln2pi
                - 0.5 * generalized_log_det(&q.matrix, q.rank_deficiency);
            let sigma = p.sigma(l, re);
            // Exp(rate) density on σ, pulled back to log σ
            total += -(h.sigma_rate.ln() - h.sigma_rate * sigma) - sigma.ln();
        }
        for k in l.range(Block::LogitRho) {
            total += normal(p.values[k], h.rho_logit_mean, h.rho_logit_sd);
        }
        let off = l.range(Block::LogitShare).start;
        for (k, &(_, _, m, sd)) in s.shares.free_entries().iter().enumerate() {
            total += normal(p.values[off + k], m, sd);
        }
        total
    }

    #[test]
    fn prior_matches_dense_oracle() {
        let s = structure();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            let p = random_params(&s.layout, &mut rng, 1.2);
            let h = Hyperpriors::default();
            assert_relative_eq!(prior_nlp(&p, &s, &h), dense_prior(&p, &s, &h), max_relative = 1e-9);
        }
    }

    #[test]
    fn quadrupled_counts_quadruple_survey_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = spec(&mut rng);
        let p = random_params(spec.layout(), &mut rng, 0.5);
        let h = compute_hazards(&p, &spec.structure).unwrap();
        let cov = compute_survivor_and_cif(&h);
        let mut big = spec.cube.clone();
        for o in [Outcome::Tmic, Outcome::MmcNt, Outcome::RightCensored, Outcome::LeftCensored] {
            for c in 0..big.dims.len() {
                let v = spec.cube.counts(o)[c];
                big.add(o, c, 3.0 * v);
            }
        }
        assert_relative_eq!(
            survey_nll(&big, &cov, &h),
            4.0 * survey_nll(&spec.cube, &cov, &h),
            max_relative = 1e-12
        );
    }
}
