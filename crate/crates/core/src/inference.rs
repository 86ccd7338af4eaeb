//! Posterior mode search and Laplace-approximation sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{total_nlp, total_nlp_and_grad, PosteriorSpec};
use crate::optim::{max_abs, minimize, LbfgsSettings, LbfgsStatus, Objective};
use crate::params::{Block, Layout, ParameterVector, RandomEffect};
use crate::whiten::{set_standardized, standardized_tangent};
use crate::structure::TERMINAL_EVENT_AGE;
use crate::survey::Outcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSettings {
    pub max_iter: u64,
    /// Relative objective change at which L-BFGS stops.
    pub tol_obj: f64,
    /// Gradient max-norm at which the search is converged.
    pub tol_grad: f64,
    pub lbfgs_memory: usize,
    /// Newton steps on the finite-difference Hessian after L-BFGS.
    pub newton_steps: usize,
    /// Step for differencing the analytic gradient.
    pub hessian_step: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub hessian_mode: HessianMode,
    /// Parameter count above which `auto` would switch away from the dense
    /// Hessian.
    pub dense_max_params: usize,
}

/// How the curvature at the mode is obtained. Only the dense
/// finite-difference Hessian is available; `bfgs` is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    Dense,
    Bfgs,
    Auto,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings {
            max_iter: 5000,
            tol_obj: 1e-12,
            tol_grad: 1e-6,
            lbfgs_memory: 12,
            newton_steps: 40,
            hessian_step: 1e-2,
            n_samples: 1000,
            seed: 20240601,
            hessian_mode: HessianMode::Auto,
            dense_max_params: 2000,
        }
    }
}

impl InferenceSettings {
    pub fn validate(&self) -> Result<()> {
        if self.hessian_mode == HessianMode::Bfgs {
            return Err(Error::Config("hessian_mode \"bfgs\" is not supported; use \"dense\" or \"auto\"".into()));
        }
        let ok = self.max_iter > 0
            && self.tol_obj > 0.0
            && self.tol_grad > 0.0
            && self.lbfgs_memory > 0
            && self.hessian_step > 0.0
            && self.n_samples > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid inference settings: {self:?}")))
        }
    }
}

/// Why the mode search stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceStatus {
    GradientTolerance,
    ObjectiveTolerance,
    MaxIterations,
    LineSearchFailed(String),
}

impl ConvergenceStatus {
    pub fn converged(&self) -> bool {
        matches!(self, ConvergenceStatus::GradientTolerance | ConvergenceStatus::ObjectiveTolerance)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LogEntry {
    pub stage: String,
    pub iteration: u64,
    pub objective: f64,
    pub gradient_max: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub mode: ParameterVector,
    pub objective: f64,
    pub gradient_max: f64,
    pub iterations: u64,
    pub status: ConvergenceStatus,
    /// Symmetrized Hessian of the negative log posterior at the mode.
    pub hessian: DMatrix<f64>,
    pub log: Vec<LogEntry>,
}

impl Objective for PosteriorSpec {
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = ParameterVector { values: x.to_vec() };
        match total_nlp_and_grad(&p, self) {
            Ok((v, g)) if v.is_finite() => Ok((v, g)),
            // outside the numerically admissible region
            Ok(_) | Err(Error::Numerical { .. }) => Ok((f64::INFINITY, vec![0.0; x.len()])),
            Err(e) => Err(e),
        }
    }
}

/// Starting point: intercepts from crude event rates, everything else at its
/// prior centre.
pub fn initial_parameters(spec: &PosteriorSpec) -> ParameterVector {
    let s = &*spec.structure;
    let l = &s.layout;
    let d = s.dims();
    let cutoff = s.grid.paediatric_cutoff();
    let cube = &spec.cube;
    let logit = |ev: f64, ex: f64| {
        let r = ((ev + 0.5) / (ex + 1.0)).clamp(1e-6, 0.5);
        (r / (1.0 - r)).ln()
    };
    // exposure approximated by every respondent-cell in the cube
    let mut ev = [0.0; 3];
    let mut ex = [0.0; 3];
    for i in 0..d.n_regions {
        for a in 0..d.n_ages.min(TERMINAL_EVENT_AGE + 1) {
            for t in 0..d.n_years {
                let c = d.idx(i, a, t);
                let total: f64 = [Outcome::Tmic, Outcome::MmcNt, Outcome::RightCensored, Outcome::LeftCensored]
                    .iter()
                    .map(|&o| cube.counts(o)[c])
                    .sum();
                let k = if a < cutoff { 1 } else { 2 };
                // a respondent observed at age a was exposed for a + 1 steps
                ev[0] += cube.counts(Outcome::Tmic)[c];
                ex[0] += total * (a + 1) as f64;
                ev[k] += cube.counts(Outcome::MmcNt)[c];
                ex[k] += total * (a + 1) as f64;
            }
        }
    }
    let mut p = ParameterVector::zeros(l);
    for (k, blk) in [Block::AlphaTmic, Block::AlphaPaed, Block::AlphaAdult].into_iter().enumerate() {
        p.values[l.range(blk).start] = logit(ev[k], ex[k]);
    }
    for k in l.range(Block::LogitRho) {
        p.values[k] = spec.hyper.rho_logit_mean;
    }
    let off = l.range(Block::LogitShare).start;
    for (k, &(_, _, mean, _)) in s.shares.free_entries().iter().enumerate() {
        p.values[off + k] = mean;
    }
    p
}

/// Fourth-order central differences of the analytic gradient, symmetrized.
/// The wide stencil keeps rounding noise far below the truncation error, so
/// the curvature is stable under ulp-level changes to the data.
pub fn finite_difference_hessian(spec: &PosteriorSpec, x: &ParameterVector, step: f64) -> Result<DMatrix<f64>> {
    let n = x.values.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let h = step * x.values[k].abs().max(1.0);
            let grad_at = |d: f64| {
                let mut p = x.clone();
                p.values[k] += d;
                total_nlp_and_grad(&p, spec).map(|r| r.1)
            };
            let (m2, m1, p1, p2) = (grad_at(-2.0 * h)?, grad_at(-h)?, grad_at(h)?, grad_at(2.0 * h)?);
            Ok((0..n).map(|i| (m2[i] - 8.0 * m1[i] + 8.0 * p1[i] - p2[i]) / (12.0 * h)).collect())
        })
        .collect::<Result<_>>()?;
    let h = DMatrix::from_fn(n, n, |i, j| 0.5 * (cols[j][i] + cols[i][j]));
    Ok(h)
}

/// Newton polishing stops once the gradient max-norm is below this.
const NEWTON_TOL: f64 = 1e-13;

/// Solves `(H + μI) d = g` with the smallest `μ` in a geometric ladder
/// that makes the factorization succeed.
fn damped_newton_direction(h: &DMatrix<f64>, g: &[f64]) -> Option<DVector<f64>> {
    let g = DVector::from_column_slice(g);
    let scale = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut mu = 0.0;
    for _ in 0..30 {
        let mut m = h.clone();
        for k in 0..m.nrows() {
            m[(k, k)] += mu;
        }
        if let Some(chol) = m.cholesky() {
            return Some(chol.solve(&g));
        }
        mu = if mu == 0.0 { 1e-10 * scale } else { mu * 10.0 };
    }
    None
}

/// Finds the posterior mode: L-BFGS, then Newton polishing on the
/// finite-difference Hessian so the result does not depend on the path.
pub fn optimize(spec: &PosteriorSpec, settings: &InferenceSettings) -> Result<FitResult> {
    settings.validate()?;
    let x0 = initial_parameters(spec);
    optimize_from(spec, settings, x0)
}

pub fn optimize_from(spec: &PosteriorSpec, settings: &InferenceSettings, x0: ParameterVector) -> Result<FitResult> {
    settings.validate()?;
    if settings.hessian_mode == HessianMode::Auto && x0.values.len() > settings.dense_max_params {
        log::warn!(
            "{} parameters exceed dense_max_params {}; using the dense Hessian anyway",
            x0.values.len(),
            settings.dense_max_params
        );
    }
    let (f0, g0) = spec.eval(&x0.values)?;
    if !f0.is_finite() {
        return Err(Error::Numerical { block: "initial".into(), message: "objective not finite at start".into() });
    }
    let mut log = vec![LogEntry { stage: "init".into(), iteration: 0, objective: f0, gradient_max: max_abs(&g0) }];
    let lb = LbfgsSettings {
        memory: settings.lbfgs_memory,
        max_iter: settings.max_iter,
        tol_obj: settings.tol_obj,
        tol_grad: settings.tol_grad,
        ..Default::default()
    };
    let res = minimize(spec, &x0.values, &lb)?;
    for &(iteration, objective, gradient_max) in &res.history {
        log.push(LogEntry { stage: "lbfgs".into(), iteration, objective, gradient_max });
    }
    let iterations = res.iterations;
    let mut status = match res.status {
        LbfgsStatus::GradientTolerance => ConvergenceStatus::GradientTolerance,
        LbfgsStatus::ObjectiveTolerance => ConvergenceStatus::ObjectiveTolerance,
        LbfgsStatus::MaxIterations => ConvergenceStatus::MaxIterations,
        LbfgsStatus::LineSearchFailed => ConvergenceStatus::LineSearchFailed("no acceptable step".into()),
    };
    let (mut x, mut f, mut g) = (res.x, res.f, res.g);

    // Newton polishing, Levenberg-damped where the Hessian is not positive
    // definite. The curvature is refreshed only while far from the mode;
    // near it the fixed matrix still contracts the gradient geometrically.
    let mut hessian = finite_difference_hessian(spec, &ParameterVector { values: x.clone() }, settings.hessian_step)?;
    let mut stale = false;
    let (mut best, mut stalled) = (max_abs(&g), 0);
    for step in 0..settings.newton_steps {
        let g_before = max_abs(&g);
        if g_before <= NEWTON_TOL {
            break;
        }
        let Some(dir) = damped_newton_direction(&hessian, &g) else { break };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a - t * d).collect();
            let (fc, gc) = spec.eval(&cand)?;
            if fc.is_finite() && (fc < f || (fc <= f + 1e-14 * f.abs() && max_abs(&gc) < g_before)) {
                x = cand;
                f = fc;
                g = gc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        log.push(LogEntry {
            stage: "newton".into(),
            iteration: step as u64 + 1,
            objective: f,
            gradient_max: max_abs(&g),
        });
        if !accepted {
            break;
        }
        let gm = max_abs(&g);
        if gm < 0.5 * best {
            (best, stalled) = (gm, 0);
        } else {
            stalled += 1;
            if stalled >= 3 {
                break;
            }
        }
        stale = true;
        if t < 1.0 || gm > 1e-3 * g_before.min(1.0) {
            hessian = finite_difference_hessian(spec, &ParameterVector { values: x.clone() }, settings.hessian_step)?;
            stale = false;
        }
    }
    if stale {
        hessian = finite_difference_hessian(spec, &ParameterVector { values: x.clone() }, settings.hessian_step)?;
    }
    let gmax = max_abs(&g);
    if gmax <= settings.tol_grad {
        status = ConvergenceStatus::GradientTolerance;
    }
    if !status.converged() {
        log::warn!("mode search did not converge: {status:?} (gradient max {gmax:.3e})");
    }
    Ok(FitResult {
        mode: ParameterVector { values: x },
        objective: f,
        gradient_max: gmax,
        iterations,
        status,
        hessian,
        log,
    })
}

/// Joint draws from the Gaussian approximation `N(mode, H⁻¹)`.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub layout_hash: String,
    /// One parameter vector per draw.
    pub draws: Vec<ParameterVector>,
}

/// Displacements `L⁻ᵀ z ~ N(0, H⁻¹)` with `H = L Lᵀ`, or `None` when `H` is
/// not positive definite. Draw `k` uses its own ChaCha stream, so output is
/// independent of the thread count.
pub fn gaussian_displacements(h: &DMatrix<f64>, n: usize, seed: u64) -> Option<Vec<DVector<f64>>> {
    let lt = h.clone().cholesky()?.l().transpose();
    let dim = h.nrows();
    Some(
        (0..n)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
                lt.solve_upper_triangular(&z).expect("triangular factor is nonsingular")
            })
            .collect(),
    )
}

/// Draws from `N(mode, H⁻¹)` taken in effect coordinates (see
/// [`linearized_draw`]).
pub fn laplace_samples(fit: &FitResult, layout: &Layout, n: usize, seed: u64) -> Result<PosteriorSamples> {
    let h = &fit.hessian;
    let Some(dx) = gaussian_displacements(h, n, seed) else {
        return Err(Error::IndefiniteCurvature(indefinite_diagnostic(h, layout)));
    };
    let draws = dx.par_iter().map(|d| linearized_draw(&fit.mode, d.as_slice(), layout)).collect();
    Ok(PosteriorSamples { layout_hash: layout.hash(), draws })
}

/// Maps a displacement of the Gaussian approximation to a parameter vector
/// whose effects `σ·Z` equal their first-order expansion about the mode.
/// Hyperparameters, intercepts and shares move by `dx` as drawn; the
/// innovations are then solved for, so each draw's effects are linear in
/// the normal deviate. This is the same Gaussian expressed in effect
/// coordinates, where level trade-offs between intercepts and effects
/// cancel exactly in the linear predictors.
pub fn linearized_draw(mode: &ParameterVector, dx: &[f64], layout: &Layout) -> ParameterVector {
    let mut x = ParameterVector { values: mode.values.iter().zip(dx).map(|(m, d)| m + d).collect() };
    for re in RandomEffect::ALL {
        let (z, dz) = standardized_tangent(mode, dx, layout, re);
        let si = layout.sigma_index(re);
        let dw = dx[si];
        let ratio = (mode.values[si] - x.values[si]).exp();
        let target: Vec<f64> = z.iter().zip(&dz).map(|(z, d)| ratio * (z * (1.0 + dw) + d)).collect();
        set_standardized(&mut x, layout, re, &target);
    }
    x
}

fn indefinite_diagnostic(h: &DMatrix<f64>, layout: &Layout) -> String {
    let eig = SymmetricEigen::new(h.clone());
    let (k, lam) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, f64::NAN));
    let v = eig.eigenvectors.column(k);
    let (idx, _) = v.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap_or((0, &0.0));
    format!(
        "Hessian at the mode is not positive definite: smallest eigenvalue {lam:.3e}, \
         direction dominated by coordinate {idx} in block {:?}",
        layout.block_of(idx)
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheckEntry {
    pub index: usize,
    pub block: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub max_relative_error: f64,
    pub worst: Option<GradientCheckEntry>,
    pub entries: Vec<GradientCheckEntry>,
}

/// Compares the analytic gradient against central differences of the
/// objective. Relative error uses `max(|numeric|, 1)` as the scale.
pub fn gradient_check(spec: &PosteriorSpec, x: &ParameterVector, step: f64) -> Result<GradientReport> {
    let (_, g) = total_nlp_and_grad(x, spec)?;
    let layout = spec.layout();
    let entries: Vec<GradientCheckEntry> = (0..x.values.len())
        .into_par_iter()
        .map(|k| {
            let h = step * x.values[k].abs().max(1.0);
            let mut up = x.clone();
            up.values[k] += h;
            let mut dn = x.clone();
            dn.values[k] -= h;
            let numeric = (total_nlp(&up, spec)? - total_nlp(&dn, spec)?) / (2.0 * h);
            Ok(GradientCheckEntry {
                index: k,
                block: format!("{:?}", layout.block_of(k).expect("index within layout")),
                analytic: g[k],
                numeric,
                relative_error: (g[k] - numeric).abs() / numeric.abs().max(1.0),
            })
        })
        .collect::<Result<_>>()?;
    let worst = entries.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error)).cloned();
    Ok(GradientReport { max_relative_error: worst.as_ref().map_or(0.0, |w| w.relative_error), worst, entries })
}
