//! Estimation grid, region adjacency, spline bases and the structured
//! precision matrices used by the priors.

mod graph;
mod grid;
mod precision;
mod spline;

pub use graph::AdjacencyGraph;
pub(crate) use graph::check_header;
pub use grid::{Grid, LexisDims, TERMINAL_EVENT_AGE};
pub use precision::{
    ar1_log_det, build_ar1_precision, build_icar_precision, build_interaction_precision, generalized_log_det,
    kronecker, kronecker_precision, project_through_basis, AgeOperand, AgeOrOther,
    InteractionKind, PrecisionSpec, SumToZero, SOFT_CONSTRAINT_KAPPA,
};
pub use spline::{build_spline_basis, SplineBasis};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::Layout;
use crate::shares::{MmctShareConfig, ResolvedShares};

/// Spline settings shared by all age effects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineSettings {
    #[serde(default = "default_knot_spacing")]
    pub knot_spacing: f64,
    #[serde(default = "default_degree")]
    pub degree: usize,
}

fn default_knot_spacing() -> f64 {
    5.0
}

fn default_degree() -> usize {
    3
}

impl Default for SplineSettings {
    fn default() -> Self {
        SplineSettings {
            knot_spacing: default_knot_spacing(),
            degree: default_degree(),
        }
    }
}

/// Everything about the model that is fixed before seeing parameter values.
#[derive(Debug, Clone)]
pub struct ModelStructure {
    pub grid: Grid,
    pub graph: AdjacencyGraph,
    pub icar: PrecisionSpec,
    /// Generalized log-determinant of the ICAR precision.
    pub icar_log_det: f64,
    /// Age basis over all ages (TMIC effects).
    pub basis_all: SplineBasis,
    /// Age basis over paediatric ages `0..cutoff`.
    pub basis_paed: SplineBasis,
    /// Age basis over `cutoff..=max_age`.
    pub basis_adult: SplineBasis,
    pub shares: ResolvedShares,
    pub layout: Layout,
    pub splines: SplineSettings,
}

impl ModelStructure {
    pub fn new(
        grid: Grid,
        graph: AdjacencyGraph,
        splines: SplineSettings,
        shares: &MmctShareConfig,
    ) -> Result<Self> {
        if graph.n_nodes() != grid.n_regions() {
            return Err(crate::Error::structural(format!(
                "graph has {} nodes but grid has {} regions",
                graph.n_nodes(),
                grid.n_regions()
            )));
        }
        let icar = build_icar_precision(&graph)?;
        let icar_log_det = icar.generalized_log_det();
        let cutoff = grid.paediatric_cutoff();
        let basis_all = build_spline_basis(0..=grid.max_age(), splines.knot_spacing, splines.degree)?;
        let basis_paed = build_spline_basis(0..=cutoff - 1, splines.knot_spacing, splines.degree)?;
        let basis_adult =
            build_spline_basis(cutoff..=grid.max_age(), splines.knot_spacing, splines.degree)?;
        let shares = shares.resolve(&grid)?;
        let layout = Layout::new(
            &grid,
            basis_all.n_functions(),
            basis_paed.n_functions(),
            basis_adult.n_functions(),
            shares.n_free(),
        );
        Ok(ModelStructure {
            grid,
            graph,
            icar,
            icar_log_det,
            basis_all,
            basis_paed,
            basis_adult,
            shares,
            layout,
            splines,
        })
    }

    pub fn dims(&self) -> LexisDims {
        self.grid.dims()
    }
}
