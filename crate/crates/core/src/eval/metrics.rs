use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{EncodedScene, Vocabulary, END, START};
use crate::error::{Error, Result};

use super::beam::{beam_search, StepModel};
use super::bleu::{corpus_bleu, Bleu};

/// Percentage of generated captions absent from the training captions.
pub fn uniqueness(generated: &[String], training: &HashSet<String>) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::Empty("generated caption set"));
    }
    let unique = generated.iter().filter(|c| !training.contains(*c)).count();
    Ok(100.0 * unique as f64 / generated.len() as f64)
}

/// Mean token count, start and end markers excluded.
pub fn avg_length(captions: &[Vec<usize>]) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::Empty("caption set"));
    }
    let total: usize = captions
        .iter()
        .map(|c| c.iter().filter(|&&t| t != START && t != END).count())
        .sum();
    Ok(total as f64 / captions.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub bleu: Bleu,
    pub uniqueness_pct: f64,
    pub avg_len: f64,
    /// Generated token ids per scene, in input order.
    pub captions: Vec<Vec<usize>>,
}

/// Beam-decodes every scene and scores the result against its reference
/// captions. With `workers > 1` scenes are decoded in parallel; the output
/// order is unaffected.
pub fn evaluate<M>(
    model: &M,
    scenes: &[EncodedScene],
    vocab: &Vocabulary,
    training: &HashSet<String>,
    beam: usize,
    max_len: usize,
    workers: usize,
) -> Result<EvalReport>
where
    M: StepModel + Sync,
{
    if scenes.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let decode = |s: &EncodedScene| beam_search(model, &s.features, beam, max_len);
    let captions: Vec<Vec<usize>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?;
        pool.install(|| scenes.par_iter().map(decode).collect::<Result<_>>())?
    } else {
        scenes.iter().map(decode).collect::<Result<_>>()?
    };
    let references: Vec<Vec<Vec<usize>>> = scenes
        .iter()
        .map(|s| {
            s.captions
                .iter()
                .map(|c| c.iter().copied().filter(|&t| t != END).collect())
                .collect()
        })
        .collect();
    let bleu = corpus_bleu(&captions, &references)?;
    let text: Vec<String> = captions.iter().map(|c| vocab.decode(c)).collect();
    Ok(EvalReport {
        bleu,
        uniqueness_pct: uniqueness(&text, training)?,
        avg_len: avg_length(&captions)?,
        captions,
    })
}

/// One line of the evaluation CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub model_id: String,
    pub sparsity: f64,
    pub cr: f64,
    pub b: [f64; 4],
    pub uniqueness_pct: f64,
    pub avg_len: f64,
}

impl EvalRow {
    pub const HEADER: &'static str = "model_id,sparsity,cr,b1,b2,b3,b4,uniqueness_pct,avg_len";

    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{:.6},{:.4}", self.model_id, self.sparsity, self.cr);
        for b in self.b {
            let _ = write!(s, ",{b:.6}");
        }
        let _ = write!(s, ",{:.4},{:.4}", self.uniqueness_pct, self.avg_len);
        s
    }
}
