use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// B-spline design over a contiguous integer age range.
///
/// Knots are uniform with the given spacing, starting at the first age and
/// running until they cover the last one, then padded with `degree` extra
/// knots on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    design: DMatrix<f64>,
    first_age: usize,
    knot_spacing: f64,
    degree: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn n_ages(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_functions(&self) -> usize {
        self.design.ncols()
    }

    pub fn first_age(&self) -> usize {
        self.first_age
    }

    pub fn knot_spacing(&self) -> f64 {
        self.knot_spacing
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Row of basis values for an age in the covered range.
    pub fn row(&self, age: usize) -> impl Iterator<Item = f64> + '_ {
        let r = age - self.first_age;
        (0..self.design.ncols()).map(move |j| self.design[(r, j)])
    }
}

/// Evaluates a B-spline basis at every integer age in `ages`.
pub fn build_spline_basis(
    ages: std::ops::RangeInclusive<usize>,
    knot_spacing: f64,
    degree: usize,
) -> Result<SplineBasis> {
    if !(knot_spacing >= 1.0) || !knot_spacing.is_finite() {
        return Err(Error::domain(format!(
            "knot spacing must be at least 1 year, got {knot_spacing}"
        )));
    }
    if degree < 1 {
        return Err(Error::domain("spline degree must be at least 1"));
    }
    let (lo, hi) = (*ages.start(), *ages.end());
    if hi < lo || ((hi - lo) as f64) < knot_spacing {
        return Err(Error::structural(format!(
            "age range {lo}..={hi} is shorter than one knot interval ({knot_spacing})"
        )));
    }
    let intervals = (((hi - lo) as f64) / knot_spacing - 1e-9).ceil() as i64;
    let knots: Vec<f64> = (-(degree as i64)..=intervals + degree as i64)
        .map(|m| lo as f64 + m as f64 * knot_spacing)
        .collect();
    let n_basis = knots.len() - degree - 1;
    let n_ages = hi - lo + 1;
    let mut design = DMatrix::zeros(n_ages, n_basis);
    for (r, age) in (lo..=hi).enumerate() {
        let x = age as f64;
        // span k with knots[k] <= x < knots[k+1], closed at the last interior knot
        let k = (knots.partition_point(|&t| t <= x) - 1).min(n_basis - 1);
        let vals = de_boor_nonzero(&knots, k, degree, x);
        for (m, v) in vals.into_iter().enumerate() {
            design[(r, k - degree + m)] = v;
        }
    }
    Ok(SplineBasis {
        design,
        first_age: lo,
        knot_spacing,
        degree,
        knots,
    })
}

/// The `degree + 1` nonzero basis values on span `k` (triangular scheme).
fn de_boor_nonzero(knots: &[f64], k: usize, degree: usize, x: f64) -> Vec<f64> {
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[k + 1 - j];
        right[j] = knots[k + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    n
}
