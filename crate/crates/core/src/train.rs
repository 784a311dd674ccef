//! Two-stage training driver.
//!
//! Stage 1 trains the decoder (and, for the gated method, the gate logits)
//! with the encoder frozen. Stage 2 freezes the gates, keeps sampling
//! stochastic masks, and trains the decoder together with the encoder.
//! All randomness is derived from the configured seed, the stage and the
//! step or epoch index, so runs are reproducible and resumable.

use serde::Serialize;

use crate::autodiff::Graph;
use crate::baseline::{self, GradualSchedule};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Corpus, EncodedScene, Vocabulary};
use crate::decoder::{
    CellKind, DecoderModel, Dims, DropoutRates, ForwardConfig, LayerName, LossNorm, ParamId, Trainable,
};
use crate::error::{Error, Result};
use crate::gating::{self, GateSampling};
use crate::optim::{lr_at, Adam, Momentum};
use crate::rng::Rng;
use crate::sparse::PruneReport;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr_init_stage1: f64,
    pub lr_final: f64,
    pub lr_init_stage2: f64,
    pub gate_lr: f64,
    pub gate_momentum: f64,
    pub weight_decay: f64,
    pub dropout_dense: DropoutRates,
    pub dropout_sparse: DropoutRates,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 32,
            epochs_stage1: 30,
            epochs_stage2: 10,
            lr_init_stage1: 1e-2,
            lr_final: 1e-5,
            lr_init_stage2: 1e-3,
            gate_lr: gating::DEFAULT_GATE_LR,
            gate_momentum: 0.9,
            weight_decay: 1e-5,
            dropout_dense: DropoutRates::DENSE,
            dropout_sparse: DropoutRates::SPARSE,
        }
    }
}

impl TrainConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let t = TrainConfig {
            seed: cfg.parsed("seed")?,
            batch_size: cfg.parsed("batch_size")?,
            epochs_stage1: cfg.parsed("epochs_stage1")?,
            epochs_stage2: cfg.parsed("epochs_stage2")?,
            lr_init_stage1: cfg.parsed("lr_init_stage1")?,
            lr_final: cfg.parsed("lr_final")?,
            lr_init_stage2: cfg.parsed("lr_init_stage2")?,
            gate_lr: cfg.parsed("gate_lr")?,
            gate_momentum: cfg.parsed("gate_momentum")?,
            weight_decay: cfg.parsed("weight_decay")?,
            dropout_dense: DropoutRates {
                rnn: cfg.parsed("dropout_dense_rnn")?,
                attn: cfg.parsed("dropout_dense_attn")?,
            },
            dropout_sparse: DropoutRates {
                rnn: cfg.parsed("dropout_sparse_rnn")?,
                attn: cfg.parsed("dropout_sparse_attn")?,
            },
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lr_init_stage1,
            self.lr_final,
            self.lr_init_stage2,
            self.gate_lr,
        ];
        if rates.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_final > self.lr_init_stage1 || self.lr_final > self.lr_init_stage2 {
            return Err(Error::Config("lr_final exceeds an initial learning rate".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.gate_momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("gate_momentum must be in [0, 1), weight_decay >= 0".into()));
        }
        for d in [self.dropout_dense, self.dropout_sparse] {
            if !(0.0..1.0).contains(&d.rnn) || !(0.0..1.0).contains(&d.attn) {
                return Err(Error::Config("dropout rates must be in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Decoder dimensions from a run config plus the data-dependent sizes.
pub fn dims_from_run(cfg: &RunConfig, vocab: usize, raw: usize) -> Result<Dims> {
    let d = Dims {
        rnn: cfg.parsed("rnn_size")?,
        word: cfg.parsed("word_size")?,
        attn: cfg.parsed("attn_size")?,
        vocab,
        feat: cfg.parsed("feat_size")?,
        raw,
    };
    if [d.rnn, d.word, d.attn, d.feat].contains(&0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatedSettings {
    pub s_target: f64,
    pub lambda_s: f64,
    pub gate_init: f64,
}

/// Stage-1 training flavour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Dense,
    Gated(GatedSettings),
    /// In-training magnitude pruning; `freq` is the number of steps between
    /// mask updates (automatic when `None`).
    Gradual { s_final: f64, freq: Option<u64> },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::Gated(_) => "gated",
            Method::Gradual { .. } => "gradual",
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub step: u64,
    pub epoch: usize,
    pub loss_caption: f64,
    /// Weighted term `λ_s L_s`.
    pub loss_sparsity: f64,
    pub alpha: f64,
    pub sparsity_ml: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialise")
    }
}

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: DecoderModel,
    pub adam: Adam,
    pub gate_opt: Momentum,
    /// Optimizer steps taken in the current stage.
    pub step: u64,
    /// Completed epochs in the current stage.
    pub epoch: usize,
    /// 1 for decoder training, 2 for fine-tuning, 3 for retraining after
    /// hard pruning.
    pub stage: u8,
}

impl TrainState {
    pub fn new(model: DecoderModel, cfg: &TrainConfig) -> Self {
        TrainState {
            model,
            adam: Adam::new(),
            gate_opt: Momentum::new(cfg.gate_momentum),
            step: 0,
            epoch: 0,
            stage: 1,
        }
    }

    /// Fresh Xavier-initialised model for `method`, seeded from `cfg.seed`.
    pub fn init(dims: Dims, cell: CellKind, method: &Method, cfg: &TrainConfig) -> Self {
        let mut rng = Rng::derived(cfg.seed, "init");
        let mut model = DecoderModel::new(dims, cell, &mut rng);
        if let Method::Gated(g) = method {
            model.add_gates(g.gate_init);
        }
        TrainState::new(model, cfg)
    }

    /// Resets the optimizer and counters for a new stage.
    pub fn begin_stage(&mut self, stage: u8, cfg: &TrainConfig) {
        self.adam = Adam::new();
        self.gate_opt = Momentum::new(cfg.gate_momentum);
        self.step = 0;
        self.epoch = 0;
        self.stage = stage;
    }

    pub fn to_checkpoint(&self, config_echo: &str, vocab: &Vocabulary) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in self.model.named_tensors() {
            ck.insert(format!("model.{name}"), t.clone());
        }
        let d = &self.model.dims;
        ck.insert(
            "meta.dims",
            Tensor::vector([d.rnn, d.word, d.attn, d.vocab, d.feat, d.raw].map(|x| x as f64).to_vec()),
        );
        ck.put_text("meta.cell", self.model.cell.as_str());
        ck.put_scalar("meta.step", self.step as f64);
        ck.put_scalar("meta.epoch", self.epoch as f64);
        ck.put_scalar("meta.stage", self.stage as f64);
        ck.put_scalar("meta.gate_momentum", self.gate_opt.mu);
        ck.put_text("meta.config", config_echo);
        ck.put_text("meta.vocab", &vocab.tokens().join("\n"));
        for (name, slot) in &self.adam.slots {
            ck.insert(format!("adam.{name}.m"), Tensor::vector(slot.m.clone()));
            ck.insert(format!("adam.{name}.v"), Tensor::vector(slot.v.clone()));
            ck.put_scalar(&format!("adam.{name}.t"), slot.t as f64);
        }
        for (name, v) in &self.gate_opt.velocity {
            ck.insert(format!("sgd.{name}.v"), Tensor::vector(v.clone()));
        }
        ck
    }

    /// Restores state, returning it with the config echo and vocabulary.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, String, Vocabulary)> {
        let dv = ck.get("meta.dims")?.data();
        if dv.len() != 6 {
            return Err(Error::Format("meta.dims must hold 6 sizes".into()));
        }
        let dims = Dims {
            rnn: dv[0] as usize,
            word: dv[1] as usize,
            attn: dv[2] as usize,
            vocab: dv[3] as usize,
            feat: dv[4] as usize,
            raw: dv[5] as usize,
        };
        let cell = CellKind::parse(&ck.text("meta.cell")?)?;
        let mut layers = Vec::with_capacity(8);
        for name in LayerName::ALL {
            let n = name.as_str();
            let opt = |suffix: &str| ck.get(&format!("model.{n}.{suffix}")).ok().cloned();
            layers.push(crate::decoder::WeightLayer {
                name,
                weight: ck.get(&format!("model.{n}.weight"))?.clone(),
                bias: opt("bias"),
                gate: opt("gate"),
                mask: opt("mask"),
            });
        }
        let model = DecoderModel {
            dims,
            cell,
            layers,
            encoder: crate::decoder::Encoder {
                weight: ck.get("model.encoder.weight")?.clone(),
                bias: ck.get("model.encoder.bias")?.clone(),
            },
        };
        model.check_shapes()?;
        let mut adam = Adam::new();
        let mut gate_opt = Momentum::new(ck.scalar("meta.gate_momentum")?);
        for (key, t) in &ck.tensors {
            if let Some(name) = key.strip_prefix("adam.").and_then(|k| k.strip_suffix(".m")) {
                adam.slots.insert(
                    name.to_string(),
                    crate::optim::AdamSlot {
                        m: t.data().to_vec(),
                        v: ck.get(&format!("adam.{name}.v"))?.data().to_vec(),
                        t: ck.scalar(&format!("adam.{name}.t"))? as u64,
                    },
                );
            } else if let Some(name) = key.strip_prefix("sgd.").and_then(|k| k.strip_suffix(".v")) {
                gate_opt.velocity.insert(name.to_string(), t.data().to_vec());
            }
        }
        let vocab_text = ck.text("meta.vocab")?;
        let vocab = Vocabulary::from_tokens(vocab_text.split('\n').map(String::from).collect())?;
        if vocab.len() != dims.vocab {
            return Err(Error::Format("vocabulary size does not match the model".into()));
        }
        let state = TrainState {
            model,
            adam,
            gate_opt,
            step: ck.scalar("meta.step")? as u64,
            epoch: ck.scalar("meta.epoch")? as usize,
            stage: ck.scalar("meta.stage")? as u8,
        };
        Ok((state, ck.text("meta.config")?, vocab))
    }

    /// Maximum-likelihood sparsity of the weights used at inference.
    pub fn sparsity(&self) -> f64 {
        PruneReport::of_model(&self.model).map(|r| r.sparsity).unwrap_or(0.0)
    }
}

/// All `(scene, caption)` pairs of a split.
fn caption_pairs(scenes: &[EncodedScene]) -> Vec<(usize, usize)> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.captions.len()).map(move |c| (i, c)))
        .collect()
}

pub fn steps_per_epoch(corpus: &Corpus, batch_size: usize) -> u64 {
    caption_pairs(&corpus.train).len().div_ceil(batch_size) as u64
}

/// Gradual schedule for a run: pruning starts at the first step of the
/// second epoch and ends at the end of the middle epoch.
pub fn gradual_schedule(s_final: f64, freq: Option<u64>, spe: u64, epochs: usize) -> Result<GradualSchedule> {
    let t_start = spe;
    let t_end = (spe * (epochs as u64).div_ceil(2)).max(t_start + 1);
    let freq = freq.unwrap_or_else(|| ((t_end - t_start) / 100).max(1));
    GradualSchedule::new(s_final, t_start, t_end, freq)
}

struct Plan {
    trainable: Trainable,
    sampling: GateSampling,
    dropout: DropoutRates,
    lr_init: f64,
    epochs: usize,
    sparsity: Option<(f64, f64)>,
    gradual: Option<GradualSchedule>,
}

type EpochHook<'a> = &'a mut dyn FnMut(&TrainState, &EpochMetrics) -> Result<()>;

fn run_epochs(state: &mut TrainState, corpus: &Corpus, cfg: &TrainConfig, plan: &Plan, hook: EpochHook) -> Result<()> {
    let pairs = caption_pairs(&corpus.train);
    if pairs.is_empty() {
        return Err(Error::Empty("training captions"));
    }
    let spe = pairs.len().div_ceil(cfg.batch_size) as u64;
    let n_max = spe * plan.epochs as u64;
    let masked = state.model.is_masked() || plan.gradual.is_some();
    while state.epoch < plan.epochs {
        let mut order = pairs.clone();
        Rng::derived(cfg.seed, &format!("stage{}/shuffle/{}", state.stage, state.epoch)).shuffle(&mut order);
        let (mut sum_lc, mut sum_ls, mut batches) = (0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            if let Some(sched) = &plan.gradual {
                if sched.is_update_step(state.step) {
                    let masks = baseline::gradual_update(&state.model, state.step, sched);
                    baseline::apply_masks(&mut state.model, masks)?;
                }
            }
            let mut rng = Rng::derived(cfg.seed, &format!("stage{}/step/{}", state.stage, state.step));
            let mut g = Graph::new();
            let bound = state.model.bind(&mut g, plan.trainable, plan.sampling, &mut rng)?;
            let images: Vec<&Tensor> = batch.iter().map(|&(s, _)| &corpus.train[s].features).collect();
            let captions: Vec<&[usize]> = batch
                .iter()
                .map(|&(s, c)| corpus.train[s].captions[c].as_slice())
                .collect();
            let fwd = ForwardConfig {
                training: true,
                dropout: plan.dropout,
                sampling: plan.sampling,
            };
            let enc = state.model.encode(&mut g, &bound, &images)?;
            let lc = state
                .model
                .caption_loss_vars(&mut g, &bound, &enc, &captions, LossNorm::PerToken, cfg.weight_decay, &fwd, &mut rng)?;
            sum_lc += g.value(lc).data()[0];
            let loss = match plan.sparsity {
                Some((s_target, lambda_s)) => {
                    let ls = gating::sparsity_loss(
                        &mut g,
                        &bound.gate_pairs(),
                        s_target,
                        state.step as usize,
                        n_max as usize,
                    )?;
                    sum_ls += lambda_s * g.value(ls).data()[0];
                    gating::total_loss(&mut g, lc, ls, lambda_s)?
                }
                None => lc,
            };
            g.backward(loss)?;
            lr = lr_at(state.step, n_max, plan.lr_init, cfg.lr_final);
            for &(id, var) in &bound.params {
                let Some(grad) = g.grad(var) else { continue };
                let name = id.name();
                let param = state
                    .model
                    .param_mut(id)
                    .expect("bound parameters exist on the model");
                if let ParamId::Gate(_) = id {
                    state.gate_opt.step(&name, param, grad, cfg.gate_lr)?;
                } else {
                    state.adam.step(&name, param, grad, lr)?;
                }
            }
            if masked {
                baseline::enforce_masks(&mut state.model);
            }
            state.step += 1;
            batches += 1;
        }
        state.epoch += 1;
        let metrics = EpochMetrics {
            step: state.step,
            epoch: state.epoch,
            loss_caption: sum_lc / batches as f64,
            loss_sparsity: sum_ls / batches as f64,
            alpha: gating::cosine_anneal(state.step as usize, n_max as usize),
            sparsity_ml: state.sparsity(),
            lr,
        };
        hook(state, &metrics)?;
    }
    Ok(())
}

/// Decoder training with the encoder frozen. Gate logits train at the
/// constant gate learning rate when the model is gated; gradual pruning
/// updates masks in-loop.
pub fn train_stage1(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    method: &Method,
    hook: EpochHook,
) -> Result<()> {
    cfg.validate()?;
    let spe = steps_per_epoch(corpus, cfg.batch_size);
    let (sampling, sparsity, gradual) = match method {
        Method::Dense => (GateSampling::MaxLikelihood, None, None),
        Method::Gated(g) => {
            if !state.model.is_gated() {
                return Err(Error::invalid("gated training needs a gated model"));
            }
            gating::SparsityConfig::new(g.s_target, g.lambda_s, (spe * cfg.epochs_stage1 as u64) as usize)?;
            (GateSampling::Bernoulli, Some((g.s_target, g.lambda_s)), None)
        }
        Method::Gradual { s_final, freq } => (
            GateSampling::MaxLikelihood,
            None,
            Some(gradual_schedule(*s_final, *freq, spe, cfg.epochs_stage1)?),
        ),
    };
    let sparse = !matches!(method, Method::Dense);
    let plan = Plan {
        trainable: Trainable {
            weights: true,
            gates: sparsity.is_some(),
            encoder: false,
        },
        sampling,
        dropout: if sparse { cfg.dropout_sparse } else { cfg.dropout_dense },
        lr_init: cfg.lr_init_stage1,
        epochs: cfg.epochs_stage1,
        sparsity,
        gradual,
    };
    run_epochs(state, corpus, cfg, &plan, hook)
}

/// Fine-tuning: gates frozen but still sampled, encoder and decoder
/// trainable. Call [`TrainState::begin_stage`] with stage 2 first (or resume
/// a stage-2 checkpoint).
pub fn train_stage2(state: &mut TrainState, corpus: &Corpus, cfg: &TrainConfig, hook: EpochHook) -> Result<()> {
    cfg.validate()?;
    if !state.model.is_gated() {
        return Err(Error::invalid("fine-tuning needs a checkpoint with gate logits"));
    }
    if state.stage != 2 {
        state.begin_stage(2, cfg);
    }
    let plan = Plan {
        trainable: Trainable {
            weights: true,
            gates: false,
            encoder: true,
        },
        sampling: GateSampling::Bernoulli,
        dropout: cfg.dropout_sparse,
        lr_init: cfg.lr_init_stage2,
        epochs: cfg.epochs_stage2,
        sparsity: None,
        gradual: None,
    };
    run_epochs(state, corpus, cfg, &plan, hook)
}

/// Retraining after hard pruning: masks fixed, encoder frozen, learning
/// rate annealed from the fine-tuning rate. Sparse dropout rates apply once
/// the masks remove any weight. Starts a fresh stage unless a
/// retraining checkpoint is being resumed.
pub fn retrain(state: &mut TrainState, corpus: &Corpus, cfg: &TrainConfig, epochs: usize, hook: EpochHook) -> Result<()> {
    cfg.validate()?;
    if state.stage != 3 {
        state.begin_stage(3, cfg);
    }
    let plan = Plan {
        trainable: Trainable {
            weights: true,
            gates: false,
            encoder: false,
        },
        sampling: GateSampling::MaxLikelihood,
        dropout: if state.sparsity() > 0.0 { cfg.dropout_sparse } else { cfg.dropout_dense },
        lr_init: cfg.lr_init_stage2,
        epochs,
        sparsity: None,
        gradual: None,
    };
    run_epochs(state, corpus, cfg, &plan, hook)
}

/// Hook that ignores every epoch.
pub fn no_hook(_: &TrainState, _: &EpochMetrics) -> Result<()> {
    Ok(())
}
