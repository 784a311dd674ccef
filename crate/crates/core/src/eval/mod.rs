//! Beam-search decoding and caption metrics.

mod beam;
mod bleu;
mod metrics;

pub use beam::{beam_search, GraphStepper, StepModel};
pub use bleu::{corpus_bleu, Bleu};
pub use metrics::{avg_length, evaluate, uniqueness, EvalReport, EvalRow};
