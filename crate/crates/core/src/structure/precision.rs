use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::structure::{AdjacencyGraph, SplineBasis};

/// Variance `κ` of each constrained sum under the soft sum-to-zero penalty
/// `(Σ_S x)² / (2κ)`, one per null-space direction of an improper prior.
pub const SOFT_CONSTRAINT_KAPPA: f64 = 1e-3;

/// Sum-to-zero constraint over a subset of a block's coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SumToZero {
    pub indices: Vec<usize>,
}

/// Structured precision matrix of a Gaussian (possibly improper) prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionSpec {
    pub matrix: DMatrix<f64>,
    pub rank_deficiency: usize,
    pub constraints: Vec<SumToZero>,
}

impl PrecisionSpec {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        (v.transpose() * &self.matrix * &v)[(0, 0)]
    }

    /// `Σ_c (Σ_{i∈c} x_i)² / (2κ)` over all attached constraints.
    pub fn constraint_penalty(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| {
                let s: f64 = c.indices.iter().map(|&i| x[i]).sum();
                0.5 * s * s / SOFT_CONSTRAINT_KAPPA
            })
            .sum()
    }

    /// Log of the product of nonzero eigenvalues.
    pub fn generalized_log_det(&self) -> f64 {
        generalized_log_det(&self.matrix, self.rank_deficiency)
    }
}

/// Log pseudo-determinant of a symmetric PSD matrix with known nullity.
pub fn generalized_log_det(m: &DMatrix<f64>, nullity: usize) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev[nullity.min(ev.len())..].iter().map(|v| v.ln()).sum()
}

/// ICAR precision `D − A`. Isolated nodes get an independent unit-precision
/// effect; every connected component with at least two nodes contributes one
/// null-space dimension and one sum-to-zero constraint.
pub fn build_icar_precision(graph: &AdjacencyGraph) -> Result<PrecisionSpec> {
    let n = graph.n_nodes();
    if n == 0 {
        return Err(Error::structural("ICAR precision needs a nonempty graph"));
    }
    let mut q = vec![0i64; n * n];
    for (a, b) in graph.edges() {
        q[a * n + b] -= 1;
        q[b * n + a] -= 1;
        q[a * n + a] += 1;
        q[b * n + b] += 1;
    }
    let mut constraints = Vec::new();
    for comp in graph.components() {
        if comp.len() == 1 {
            let i = comp[0];
            q[i * n + i] = 1;
        } else {
            constraints.push(SumToZero { indices: comp });
        }
    }
    Ok(PrecisionSpec {
        matrix: DMatrix::from_row_iterator(n, n, q.into_iter().map(|v| v as f64)),
        rank_deficiency: constraints.len(),
        constraints,
    })
}

fn check_rho(rho: f64) -> Result<()> {
    if !rho.is_finite() || rho.abs() >= 1.0 {
        return Err(Error::domain(format!(
            "AR1 correlation must satisfy |rho| < 1, got {rho}"
        )));
    }
    Ok(())
}

/// Tridiagonal precision of a stationary AR1 process with unit marginal variance.
pub fn build_ar1_precision(n: usize, rho: f64) -> Result<PrecisionSpec> {
    if n == 0 {
        return Err(Error::structural("AR1 length must be at least 1"));
    }
    check_rho(rho)?;
    Ok(PrecisionSpec {
        matrix: ar1_matrix(n, rho),
        rank_deficiency: 0,
        constraints: Vec::new(),
    })
}

fn ar1_matrix(n: usize, rho: f64) -> DMatrix<f64> {
    let s = 1.0 / (1.0 - rho * rho);
    let mut m = DMatrix::zeros(n, n);
    if n == 1 {
        m[(0, 0)] = 1.0;
        return m;
    }
    for i in 0..n {
        m[(i, i)] = if i == 0 || i == n - 1 { s } else { (1.0 + rho * rho) * s };
        if i + 1 < n {
            m[(i, i + 1)] = -rho * s;
            m[(i + 1, i)] = -rho * s;
        }
    }
    m
}

/// `log |Q_AR1(rho)| = −(n−1) log(1 − rho²)`.
pub fn ar1_log_det(n: usize, rho: f64) -> f64 {
    -((n as f64) - 1.0) * (1.0 - rho * rho).ln()
}

/// Dense Kronecker product `a ⊗ b`; index `(i, j)` of `a` and `(k, l)` of `b`
/// map to `(i·nb + k, j·nb + l)`.
pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Which pair of marginal structures a Type IV interaction combines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionKind {
    AgeSpace,
    AgeTime,
    SpaceTime,
}

/// Age-side operand of an interaction: either the spline-weight precision
/// itself or its image `W Q Wᵀ` on the age grid.
pub enum AgeOperand<'a> {
    Weights(&'a PrecisionSpec),
    Projected {
        basis: &'a SplineBasis,
        weights: &'a PrecisionSpec,
    },
}

/// `W Q Wᵀ` for a spline design `W` (ages × weights).
pub fn project_through_basis(basis: &SplineBasis, weights: &PrecisionSpec) -> Result<PrecisionSpec> {
    let w = basis.design();
    if w.ncols() != weights.dim() {
        return Err(Error::structural(format!(
            "basis has {} functions but weight precision is {}×{}",
            w.ncols(),
            weights.dim(),
            weights.dim()
        )));
    }
    let m = w * &weights.matrix * w.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let rank = w.nrows().min(w.ncols().saturating_sub(weights.rank_deficiency));
    Ok(PrecisionSpec {
        matrix: m,
        rank_deficiency: w.nrows() - rank,
        constraints: Vec::new(),
    })
}

/// Kronecker product of two precision structures with its null-space
/// bookkeeping: nullity `n_a n_b − r_a r_b`, and constraints lifted from
/// each factor.
pub fn kronecker_precision(a: &PrecisionSpec, b: &PrecisionSpec) -> PrecisionSpec {
    let (na, nb) = (a.dim(), b.dim());
    let (ra, rb) = (na - a.rank_deficiency, nb - b.rank_deficiency);
    let mut constraints = Vec::new();
    for c in &b.constraints {
        for i in 0..na {
            constraints.push(SumToZero {
                indices: c.indices.iter().map(|&k| i * nb + k).collect(),
            });
        }
    }
    for c in &a.constraints {
        for k in 0..nb {
            constraints.push(SumToZero {
                indices: c.indices.iter().map(|&i| i * nb + k).collect(),
            });
        }
    }
    PrecisionSpec {
        matrix: kronecker(&a.matrix, &b.matrix),
        rank_deficiency: na * nb - ra * rb,
        constraints,
    }
}

/// Type IV interaction precision.
///
/// `AgeSpace`: age operand ⊗ `Q_I`; `AgeTime`: age operand ⊗ `Q_T(ρ)`;
/// `SpaceTime`: `Q_I ⊗ Q_T(ρ)`. `expected` gives the required
/// `(first, second)` operand dimensions.
pub fn build_interaction_precision(
    kind: InteractionKind,
    first: AgeOrOther<'_>,
    second: &PrecisionSpec,
    expected: (usize, usize),
) -> Result<PrecisionSpec> {
    let first = match first {
        AgeOrOther::Age(AgeOperand::Weights(q)) => q.clone(),
        AgeOrOther::Age(AgeOperand::Projected { basis, weights }) => {
            project_through_basis(basis, weights)?
        }
        AgeOrOther::Other(q) => {
            if kind != InteractionKind::SpaceTime {
                return Err(Error::structural(format!(
                    "{kind:?} interaction needs an age operand first"
                )));
            }
            q.clone()
        }
    };
    if first.dim() != expected.0 || second.dim() != expected.1 {
        return Err(Error::structural(format!(
            "{kind:?} interaction expects {}×{} operands, got {}×{}",
            expected.0,
            expected.1,
            first.dim(),
            second.dim()
        )));
    }
    Ok(kronecker_precision(&first, second))
}

/// First operand of [`build_interaction_precision`].
pub enum AgeOrOther<'a> {
    Age(AgeOperand<'a>),
    Other(&'a PrecisionSpec),
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn zero_eigs(m: &DMatrix<f64>) -> usize {
        SymmetricEigen::new(m.clone())
            .eigenvalues
            .iter()
            .filter(|v| v.abs() < 1e-9)
            .count()
    }

    #[test]
    fn icar_path_graph() {
        let g = AdjacencyGraph::new(3, [(0, 1), (1, 2)]).unwrap();
        let q = build_icar_precision(&g).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[1., -1., 0., -1., 2., -1., 0., -1., 1.]);
        assert_eq!(q.matrix, expect);
        assert_eq!(q.rank_deficiency, 1);
        for i in 0..3 {
            assert_eq!(q.matrix.row(i).sum(), 0.0);
        }
    }

    #[test]
    fn icar_two_pairs_rank_deficiency_matches_eigen_count() {
        let g = AdjacencyGraph::new(4, [(0, 1), (2, 3)]).unwrap();
        let q = build_icar_precision(&g).unwrap();
        assert_eq!(q.rank_deficiency, 2);
        assert_eq!(zero_eigs(&q.matrix), 2);
        assert_eq!(q.constraints.len(), 2);
    }

    #[test]
    fn icar_isolated_node_is_proper() {
        let g = AdjacencyGraph::new(3, [(0, 1)]).unwrap();
        let q = build_icar_precision(&g).unwrap();
        assert_eq!(q.rank_deficiency, 1);
        assert_eq!(zero_eigs(&q.matrix), 1);
        assert_eq!(q.matrix[(2, 2)], 1.0);
    }

    #[test]
    fn ar1_cases() {
        let q = build_ar1_precision(3, 0.0).unwrap();
        assert_eq!(q.matrix, DMatrix::identity(3, 3));
        let q = build_ar1_precision(2, 0.5).unwrap();
        assert_relative_eq!(q.matrix[(0, 0)], 4.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(q.matrix[(0, 1)], -2.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(q.matrix[(1, 1)], 4.0 / 3.0, epsilon = 1e-14);
        assert!(build_ar1_precision(3, 1.0).is_err());
        assert!(build_ar1_precision(3, -1.2).is_err());
    }

    #[test]
    fn ar1_inverse_correlation_identity() {
        for n in 1..=6 {
            for &rho in &[-0.9, 0.0, 0.5, 0.99] {
                let q = build_ar1_precision(n, rho).unwrap().matrix;
                let sigma = DMatrix::from_fn(n, n, |i, j| rho.powi((i as i32 - j as i32).abs()));
                let prod = &q * &sigma;
                for i in 0..n {
                    for j in 0..n {
                        let e = if i == j { 1.0 } else { 0.0 };
                        assert!((prod[(i, j)] - e).abs() < 1e-10, "n={n} rho={rho}");
                    }
                }
                let ld = q.clone().determinant().ln();
                assert_relative_eq!(ar1_log_det(n, rho), ld, epsilon = 1e-8, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn kronecker_identity_and_dims() {
        let k = kronecker(&DMatrix::identity(2, 2), &DMatrix::identity(3, 3));
        assert_eq!(k, DMatrix::identity(6, 6));
        let k = kronecker(&DMatrix::zeros(4, 4), &DMatrix::zeros(5, 5));
        assert_eq!(k.shape(), (20, 20));
    }

    #[test]
    fn space_time_interaction_matches_dense_oracle() {
        let g = AdjacencyGraph::new(3, [(0, 1), (1, 2)]).unwrap();
        let qi = build_icar_precision(&g).unwrap();
        let qt = build_ar1_precision(2, 0.0).unwrap();
        let k = build_interaction_precision(
            InteractionKind::SpaceTime,
            AgeOrOther::Other(&qi),
            &qt,
            (3, 2),
        )
        .unwrap();
        // block oracle: entry ((i,t),(j,s)) = Q_I[i,j] * Q_T[t,s]
        for r in 0..6 {
            for c in 0..6 {
                let want = qi.matrix[(r / 2, c / 2)] * qt.matrix[(r % 2, c % 2)];
                assert_eq!(k.matrix[(r, c)], want);
            }
        }
        assert_eq!(k.rank_deficiency, 2);
        assert_eq!(zero_eigs(&k.matrix), 2);
        assert_eq!(k.constraints.len(), 2);
        // space-time: Q_I is first, so constraints sum over regions for each year
        assert_eq!(k.constraints[0].indices, vec![0, 2, 4]);
        assert_eq!(k.constraints[1].indices, vec![1, 3, 5]);
    }

    #[test]
    fn interaction_dimension_mismatch() {
        let qa = build_ar1_precision(4, 0.3).unwrap();
        let qt = build_ar1_precision(3, 0.3).unwrap();
        let err = build_interaction_precision(
            InteractionKind::AgeTime,
            AgeOrOther::Age(AgeOperand::Weights(&qa)),
            &qt,
            (5, 3),
        );
        assert!(err.is_err());
    }

    #[test]
    fn generalized_log_det_of_path() {
        let g = AdjacencyGraph::new(3, [(0, 1), (1, 2)]).unwrap();
        let q = build_icar_precision(&g).unwrap();
        // eigenvalues of the 3-path Laplacian are 0, 1, 3
        assert_relative_eq!(q.generalized_log_det(), 3f64.ln(), epsilon = 1e-12);
    }
}
