use std::cmp::Ordering;

use crate::data::{END, PAD, START};
use crate::decoder::{DecoderModel, DecoderState, ForwardConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sparse::{SparseContext, SparseModel};
use crate::tensor::Tensor;

/// Anything that can be decoded one token at a time.
pub trait StepModel {
    type Context;

    fn vocab_size(&self) -> usize;

    /// Per-image context and the initial state.
    fn prepare(&self, image: &Tensor) -> Result<(Self::Context, DecoderState)>;

    /// Distribution over the next token given `state.prev_token`.
    fn step(&self, ctx: &Self::Context, state: &DecoderState) -> Result<(Vec<f64>, DecoderState)>;
}

impl StepModel for SparseModel {
    type Context = SparseContext;

    fn vocab_size(&self) -> usize {
        self.dims.vocab
    }

    fn prepare(&self, image: &Tensor) -> Result<(SparseContext, DecoderState)> {
        SparseModel::prepare(self, image)
    }

    fn step(&self, ctx: &SparseContext, state: &DecoderState) -> Result<(Vec<f64>, DecoderState)> {
        self.sparse_decode_step(ctx, state)
    }
}

/// Decodes through the differentiable graph with maximum-likelihood gates.
/// Slow; used as a reference for the sparse runtime.
pub struct GraphStepper<'a>(pub &'a DecoderModel);

impl StepModel for GraphStepper<'_> {
    type Context = Tensor;

    fn vocab_size(&self) -> usize {
        self.0.dims.vocab
    }

    fn prepare(&self, image: &Tensor) -> Result<(Tensor, DecoderState)> {
        let (_, embed) = self.0.encode_image(image)?;
        Ok((image.clone(), self.0.init_state(&embed)?))
    }

    fn step(&self, image: &Tensor, state: &DecoderState) -> Result<(Vec<f64>, DecoderState)> {
        self.0.decoder_step(state, image, &ForwardConfig::EVAL, &mut Rng::new(0))
    }
}

struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
    state: DecoderState,
}

struct Done {
    logp: f64,
    step: usize,
    tokens: Vec<usize>,
}

/// Higher log-probability first, then lexicographically smaller tokens.
fn rank(a_lp: f64, a: &[usize], b_lp: f64, b: &[usize]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a.cmp(b))
}

/// Beam search without length normalisation. Returns the completed
/// hypothesis with the highest cumulative log-probability (end marker
/// stripped); ties go to the earlier completion, then to the
/// lexicographically smaller sequence. Hypotheses reaching `max_len` tokens
/// are forced to end.
pub fn beam_search<M: StepModel>(model: &M, image: &Tensor, beam: usize, max_len: usize) -> Result<Vec<usize>> {
    if beam == 0 || max_len == 0 {
        return Err(Error::invalid("beam width and max length must be at least 1"));
    }
    let vocab = model.vocab_size();
    let (ctx, init) = model.prepare(image)?;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
        state: init,
    }];
    let mut done: Vec<Done> = Vec::new();
    for t in 0..=max_len {
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (hi, h) in live.iter().enumerate() {
            let mut state = h.state.clone();
            state.prev_token = *h.tokens.last().unwrap_or(&START);
            let (p, next) = model.step(&ctx, &state)?;
            if p.len() != vocab {
                return Err(Error::invalid("step distribution has the wrong size"));
            }
            next_states.push(next);
            for (w, &pw) in p.iter().enumerate() {
                if w == PAD || w == START || (t == max_len && w != END) {
                    continue;
                }
                let lp = h.logp + pw.ln();
                if !lp.is_finite() {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(w);
                cands.push((lp, tokens, hi));
            }
        }
        cands.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));
        let mut new_live = Vec::with_capacity(beam);
        for (lp, mut tokens, hi) in cands.into_iter().take(beam) {
            if *tokens.last().expect("nonempty") == END {
                tokens.pop();
                done.push(Done { logp: lp, step: t, tokens });
            } else {
                new_live.push(Hyp {
                    tokens,
                    logp: lp,
                    state: next_states[hi].clone(),
                });
            }
        }
        live = new_live;
        let best_done = done.iter().map(|d| d.logp).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.logp).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || (!done.is_empty() && best_done >= best_live) {
            break;
        }
    }
    done.into_iter()
        .min_by(|a, b| {
            b.logp
                .total_cmp(&a.logp)
                .then(a.step.cmp(&b.step))
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .map(|d| d.tokens)
        .ok_or(Error::Empty("beam search produced no hypothesis"))
}
