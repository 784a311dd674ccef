//! Compressed-row inference runtime and parameter accounting.

mod csr;
mod model;
mod report;

pub use csr::SparseMatrix;
pub use model::{SparseContext, SparseLayer, SparseModel};
pub use report::{compression_ratio, LayerReport, PruneReport};
