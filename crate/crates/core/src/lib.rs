//! Bayesian competing-risks model of male circumcision coverage by region,
//! age, year and type, fitted to weighted household-survey records and
//! programme counts.

pub mod aggregate;
pub mod error;
pub mod hazard;
pub mod inference;
pub mod likelihood;
pub mod optim;
pub mod params;
pub mod population;
pub mod programme;
pub mod run;
pub mod shares;
pub mod simulate;
pub mod structure;
pub mod survey;
pub mod whiten;

pub use error::{Error, Result};
