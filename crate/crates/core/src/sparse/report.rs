use std::fmt::Write as _;

use serde::Serialize;

use crate::decoder::DecoderModel;
use crate::error::{Error, Result};

use super::SparseModel;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub total: usize,
    pub nnz: usize,
    pub sparsity: f64,
}

/// Parameter accounting. The headline sparsity and compression ratio count
/// weight matrices only; the `*_with_biases` fields add the (never pruned)
/// biases to both totals.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneReport {
    pub layers: Vec<LayerReport>,
    pub total: usize,
    pub nnz: usize,
    pub sparsity: f64,
    pub compression_ratio: f64,
    pub biases: usize,
    pub nnz_with_biases: usize,
    pub compression_ratio_with_biases: f64,
}

/// `1 / (1 - sparsity)` snapped to 1e-9; infinite at full sparsity.
pub fn compression_ratio(sparsity: f64) -> f64 {
    crate::gating::snap(1.0 / (1.0 - sparsity))
}

fn ratio(total: usize, nnz: usize) -> f64 {
    total as f64 / nnz as f64
}

impl PruneReport {
    pub fn from_counts(layers: Vec<(String, usize, usize)>, biases: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer list"));
        }
        let layers: Vec<LayerReport> = layers
            .into_iter()
            .map(|(name, total, nnz)| LayerReport {
                name,
                total,
                nnz,
                sparsity: 1.0 - nnz as f64 / total as f64,
            })
            .collect();
        let total = layers.iter().map(|l| l.total).sum();
        let nnz = layers.iter().map(|l| l.nnz).sum();
        Ok(PruneReport {
            layers,
            total,
            nnz,
            sparsity: 1.0 - nnz as f64 / total as f64,
            compression_ratio: ratio(total, nnz),
            biases,
            nnz_with_biases: nnz + biases,
            compression_ratio_with_biases: ratio(total + biases, nnz + biases),
        })
    }

    /// Counts the weights a model uses at inference: gates resolved to their
    /// maximum-likelihood masks, fixed masks applied.
    pub fn of_model(model: &DecoderModel) -> Result<Self> {
        let layers = model
            .layers
            .iter()
            .map(|l| {
                (
                    l.name.as_str().to_string(),
                    l.weight.len(),
                    l.effective_weight().count_nonzero(),
                )
            })
            .collect();
        Self::from_counts(layers, model.bias_count())
    }

    pub fn of_sparse(model: &SparseModel) -> Result<Self> {
        let layers = model
            .layers
            .iter()
            .map(|l| {
                (
                    l.name.as_str().to_string(),
                    l.matrix.rows() * l.matrix.cols(),
                    l.matrix.nnz(),
                )
            })
            .collect();
        let biases = model.layers.iter().filter_map(|l| l.bias.as_ref()).map(Vec::len).sum();
        Self::from_counts(layers, biases)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerReport> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// `layer,total,nnz,sparsity` rows.
    pub fn layer_csv(&self) -> String {
        let mut out = String::from("layer,total,nnz,sparsity\n");
        for l in &self.layers {
            let _ = writeln!(out, "{},{},{},{:.6}", l.name, l.total, l.nnz, l.sparsity);
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "weights {} nnz {} sparsity {:.4} CR {:.2}x (with biases: nnz {} CR {:.2}x)",
            self.total,
            self.nnz,
            self.sparsity,
            self.compression_ratio,
            self.nnz_with_biases,
            self.compression_ratio_with_biases
        )
    }
}
