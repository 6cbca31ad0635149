//! Missing-not-at-random aware analysis of untargeted metabolomics data.

pub mod dataset;
pub mod diffabund;
pub mod error;
pub mod factor;
pub mod fdr;
pub mod linalg;
pub mod mechanism;
pub mod mtgwas;
mod par;
pub mod pipeline;
pub mod quadrature;
pub mod selection;
pub mod simulate;

pub use error::{Error, Result};
pub use quadrature::{miss_prob, miss_prob_partials, MissProbPartials, QuadratureRule};
pub use selection::{SelectionCdf, SelectionFamily};
pub use dataset::{
    partition_metabolites, DesignMatrix, MetaboliteClass, MetabolitePartition, ObservedMatrix, TableFormat,
};
