//! Whitened coordinates for the AR1 axes of the random effects.
//!
//! A block stored as innovations `U` maps to standardized effects `Z` by
//! running the stationary AR1 recursion `z_0 = u_0`,
//! `z_t = ρ z_{t-1} + √(1 − ρ²) u_t` along each AR1 axis. `U` then has a
//! ρ-free prior: independent standard normals on AR1 axes, the ICAR
//! precision on region axes.

use crate::params::{drho_dlogit, rho_from_logit, Layout, ParameterVector, RandomEffect, RhoSlot};

/// Shape of a block as a row-major matrix and the correlation slot, if any,
/// attached to each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockAxes {
    pub rows: usize,
    pub cols: usize,
    pub row_rho: Option<RhoSlot>,
    pub col_rho: Option<RhoSlot>,
    /// Which axis, if any, carries the ICAR structure.
    pub icar_rows: bool,
    pub icar_cols: bool,
}

pub fn block_axes(re: RandomEffect, l: &Layout) -> BlockAxes {
    let (ni, nt) = (l.n_regions(), l.n_years());
    let ax = |rows, cols, row_rho, col_rho, icar_rows, icar_cols| BlockAxes {
        rows,
        cols,
        row_rho,
        col_rho,
        icar_rows,
        icar_cols,
    };
    match re {
        RandomEffect::PsiTmic | RandomEffect::PsiPaed | RandomEffect::PsiAdult => ax(1, ni, None, None, false, true),
        RandomEffect::PhiTmic => ax(l.n_basis_all(), 1, Some(RhoSlot::PhiTmic), None, false, false),
        RandomEffect::PhiPaed => ax(l.n_basis_paed(), 1, Some(RhoSlot::PhiPaed), None, false, false),
        RandomEffect::PhiAdult => ax(l.n_basis_adult(), 1, Some(RhoSlot::PhiAdult), None, false, false),
        RandomEffect::Theta => ax(nt, 1, Some(RhoSlot::Theta), None, false, false),
        RandomEffect::GammaTmic => ax(l.n_basis_all(), ni, Some(RhoSlot::GammaTmic), None, false, true),
        RandomEffect::GammaPaed => ax(l.n_basis_paed(), ni, Some(RhoSlot::GammaPaed), None, false, true),
        RandomEffect::GammaAdult => ax(l.n_basis_adult(), ni, Some(RhoSlot::GammaAdult), None, false, true),
        RandomEffect::Delta => ax(l.n_basis_adult(), nt, Some(RhoSlot::DeltaAge), Some(RhoSlot::DeltaTime), false, false),
        RandomEffect::Zeta => ax(ni, nt, None, Some(RhoSlot::Zeta), true, false),
    }
}

/// Index of element `k` of line `j` along an axis of a row-major matrix.
#[inline]
fn at(along_rows: bool, cols: usize, line: usize, k: usize) -> usize {
    if along_rows {
        k * cols + line
    } else {
        line * cols + k
    }
}

fn colour(x: &[f64], rows: usize, cols: usize, along_rows: bool, rho: f64) -> Vec<f64> {
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let (n, lines) = if along_rows { (rows, cols) } else { (cols, rows) };
    let mut y = x.to_vec();
    for j in 0..lines {
        for k in 1..n {
            let i = at(along_rows, cols, j, k);
            y[i] = rho * y[at(along_rows, cols, j, k - 1)] + s * x[i];
        }
    }
    y
}

/// Adjoint of [`colour`]: gradient with respect to the input and to the
/// logit of the correlation.
fn colour_back(x: &[f64], y: &[f64], gy: &[f64], rows: usize, cols: usize, along_rows: bool, logit: f64) -> (Vec<f64>, f64) {
    let rho = rho_from_logit(logit);
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let drho = drho_dlogit(logit);
    // d√(1 − ρ²)/d logit, written to stay finite as ρ → 1
    let ds = -rho * s * 0.5;
    let (n, lines) = if along_rows { (rows, cols) } else { (cols, rows) };
    let mut gx = vec![0.0; x.len()];
    let mut glogit = 0.0;
    for j in 0..lines {
        let mut w = 0.0;
        for k in (0..n).rev() {
            let i = at(along_rows, cols, j, k);
            w = gy[i] + rho * w;
            if k == 0 {
                gx[i] = w;
            } else {
                gx[i] = s * w;
                glogit += w * (y[at(along_rows, cols, j, k - 1)] * drho + x[i] * ds);
            }
        }
    }
    (gx, glogit)
}

/// Directional derivative of [`colour`] along `(dx, dlogit)`.
fn colour_tangent(x: &[f64], dx: &[f64], rows: usize, cols: usize, along_rows: bool, logit: f64, dlogit: f64) -> (Vec<f64>, Vec<f64>) {
    let rho = rho_from_logit(logit);
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let drho = drho_dlogit(logit) * dlogit;
    let ds = -rho * s * 0.5 * dlogit;
    let (n, lines) = if along_rows { (rows, cols) } else { (cols, rows) };
    let (mut y, mut dy) = (x.to_vec(), dx.to_vec());
    for j in 0..lines {
        for k in 1..n {
            let (i, p) = (at(along_rows, cols, j, k), at(along_rows, cols, j, k - 1));
            dy[i] = rho * dy[p] + drho * y[p] + s * dx[i] + ds * x[i];
            y[i] = rho * y[p] + s * x[i];
        }
    }
    (y, dy)
}

/// Inverse of [`colour`].
fn whiten(y: &[f64], rows: usize, cols: usize, along_rows: bool, rho: f64) -> Vec<f64> {
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let (n, lines) = if along_rows { (rows, cols) } else { (cols, rows) };
    let mut x = y.to_vec();
    for j in 0..lines {
        for k in 1..n {
            let i = at(along_rows, cols, j, k);
            x[i] = (y[i] - rho * y[at(along_rows, cols, j, k - 1)]) / s;
        }
    }
    x
}

/// Standardized effect coefficients `Z` of a block.
pub fn standardized(params: &ParameterVector, l: &Layout, re: RandomEffect) -> Vec<f64> {
    let ax = block_axes(re, l);
    let mut z = params.block(l, re.block()).to_vec();
    if let Some(slot) = ax.col_rho {
        z = colour(&z, ax.rows, ax.cols, false, params.rho(l, slot));
    }
    if let Some(slot) = ax.row_rho {
        z = colour(&z, ax.rows, ax.cols, true, params.rho(l, slot));
    }
    z
}

/// `Z` and its directional derivative along `dir` (a full-length
/// parameter displacement).
pub fn standardized_tangent(params: &ParameterVector, dir: &[f64], l: &Layout, re: RandomEffect) -> (Vec<f64>, Vec<f64>) {
    let ax = block_axes(re, l);
    let range = l.range(re.block());
    let mut z = params.values[range.clone()].to_vec();
    let mut dz = dir[range].to_vec();
    for (slot, along_rows) in [(ax.col_rho, false), (ax.row_rho, true)] {
        if let Some(slot) = slot {
            let k = l.rho_index(slot);
            (z, dz) = colour_tangent(&z, &dz, ax.rows, ax.cols, along_rows, params.values[k], dir[k]);
        }
    }
    (z, dz)
}

/// Stores innovations so that the block's standardized effects equal `z`
/// under the correlations already in `params`.
pub fn set_standardized(params: &mut ParameterVector, l: &Layout, re: RandomEffect, z: &[f64]) {
    let ax = block_axes(re, l);
    let mut u = z.to_vec();
    if let Some(slot) = ax.row_rho {
        u = whiten(&u, ax.rows, ax.cols, true, params.rho(l, slot));
    }
    if let Some(slot) = ax.col_rho {
        u = whiten(&u, ax.rows, ax.cols, false, params.rho(l, slot));
    }
    params.block_mut(l, re.block()).copy_from_slice(&u);
}

/// Pulls a gradient with respect to `Z` back onto the stored innovations and
/// the correlation logits, accumulating into `grad`.
pub fn standardized_back(params: &ParameterVector, l: &Layout, re: RandomEffect, gz: &[f64], grad: &mut [f64]) {
    let ax = block_axes(re, l);
    let range = l.range(re.block());
    let u = &params.values[range.clone()];
    let mid = match ax.col_rho {
        Some(slot) => colour(u, ax.rows, ax.cols, false, params.rho(l, slot)),
        None => u.to_vec(),
    };
    let mut g = gz.to_vec();
    if let Some(slot) = ax.row_rho {
        let z = colour(&mid, ax.rows, ax.cols, true, params.rho(l, slot));
        let idx = l.rho_index(slot);
        let (gm, gl) = colour_back(&mid, &z, &g, ax.rows, ax.cols, true, params.values[idx]);
        grad[idx] += gl;
        g = gm;
    }
    if let Some(slot) = ax.col_rho {
        let idx = l.rho_index(slot);
        let (gu, gl) = colour_back(u, &mid, &g, ax.rows, ax.cols, false, params.values[idx]);
        grad[idx] += gl;
        g = gu;
    }
    for (k, v) in g.into_iter().enumerate() {
        grad[range.start + k] += v;
    }
}
