//! Training runs on the toy task, memoised per process and optionally cached
//! on disk (set `SPARSECAP_ACCEPTANCE_CACHE` to a directory) so the trend
//! criteria can be re-scored without retraining.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::time::Instant;

use sparsecap::baseline::{self, HardScheme};
use sparsecap::checkpoint::Checkpoint;
use sparsecap::data::{preprocess, Corpus, DataConfig, Dataset};
use sparsecap::decoder::{CellKind, DecoderModel, Dims};
use sparsecap::eval::{evaluate, EvalReport};
use sparsecap::sparse::SparseModel;
use sparsecap::train::{self, Method, TrainConfig, TrainState};

/// Scenes in the acceptance corpus (2000 train / 200 val / 200 test).
pub const SCENES: usize = 2400;
pub const DATA_SEED: u64 = 1;
pub const MIN_FREQ: usize = 5;
pub const MAX_LEN: usize = 20;
pub const BEAM: usize = 3;
pub const RETRAIN_EPOCHS: usize = 10;

pub fn full_dims(vocab: usize, raw: usize) -> Dims {
    Dims {
        rnn: 32,
        word: 16,
        attn: 32,
        vocab,
        feat: 16,
        raw,
    }
}

/// Every width divided by four.
pub fn quarter_dims(vocab: usize, raw: usize) -> Dims {
    Dims {
        rnn: 8,
        word: 4,
        attn: 8,
        vocab,
        feat: 4,
        raw,
    }
}

pub struct Lab {
    pub corpus: Corpus,
    pub training_set: HashSet<String>,
    runs: HashMap<String, TrainState>,
    cache: Option<PathBuf>,
    started: Instant,
}

impl Lab {
    pub fn new() -> Lab {
        let data_cfg = DataConfig::with_total(DATA_SEED, SCENES).unwrap();
        let corpus = preprocess(&Dataset::generate(&data_cfg), MIN_FREQ, MAX_LEN).unwrap();
        let cache = std::env::var_os("SPARSECAP_ACCEPTANCE_CACHE").map(PathBuf::from);
        if let Some(dir) = &cache {
            std::fs::create_dir_all(dir).unwrap();
        }
        Lab {
            training_set: corpus.training_caption_set(),
            corpus,
            runs: HashMap::new(),
            cache,
            started: Instant::now(),
        }
    }

    pub fn full(&self) -> Dims {
        full_dims(self.corpus.vocab.len(), self.corpus.feature_dim())
    }

    pub fn quarter(&self) -> Dims {
        quarter_dims(self.corpus.vocab.len(), self.corpus.feature_dim())
    }

    pub fn config(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..TrainConfig::default()
        }
    }

    fn memo(&mut self, key: &str, run: impl FnOnce(&Corpus) -> TrainState) -> TrainState {
        if let Some(s) = self.runs.get(key) {
            return s.clone();
        }
        let path = self.cache.as_ref().map(|d| d.join(format!("{key}.gckp")));
        let cached = path
            .as_ref()
            .filter(|p| p.exists())
            .map(|p| TrainState::from_checkpoint(&Checkpoint::load(p).unwrap()).unwrap().0);
        let state = match cached {
            Some(s) => s,
            None => {
                let t0 = Instant::now();
                let s = run(&self.corpus);
                eprintln!(
                    "  trained {key} in {:.0}s (sparsity {:.4}, elapsed {:.0}s)",
                    t0.elapsed().as_secs_f64(),
                    s.sparsity(),
                    self.started.elapsed().as_secs_f64()
                );
                if let Some(p) = &path {
                    s.to_checkpoint(key, &self.corpus.vocab).save(p).unwrap();
                }
                s
            }
        };
        self.runs.insert(key.to_string(), state.clone());
        state
    }

    /// Stage-1 training from a fresh initialisation.
    pub fn stage1(&mut self, key: &str, dims: Dims, method: Method, seed: u64) -> TrainState {
        self.memo(key, |corpus| {
            let cfg = Lab::config(seed);
            let mut state = TrainState::init(dims, CellKind::Lstm, &method, &cfg);
            train::train_stage1(&mut state, corpus, &cfg, &method, &mut train::no_hook).unwrap();
            state
        })
    }

    /// Stage-2 fine-tuning of a gated stage-1 result.
    pub fn finetune(&mut self, key: &str, from: &TrainState, seed: u64) -> TrainState {
        let from = from.clone();
        self.memo(key, |corpus| {
            let cfg = Lab::config(seed);
            let mut state = from;
            state.begin_stage(2, &cfg);
            train::train_stage2(&mut state, corpus, &cfg, &mut train::no_hook).unwrap();
            state
        })
    }

    /// One-shot magnitude pruning of a dense result followed by retraining.
    pub fn hard(&mut self, key: &str, dense: &TrainState, s: f64, scheme: HardScheme, seed: u64) -> TrainState {
        let dense = dense.clone();
        self.memo(key, |corpus| {
            let cfg = Lab::config(seed);
            let mut state = dense;
            let masks = baseline::hard_prune(&state.model, s, scheme).unwrap();
            baseline::apply_masks(&mut state.model, masks).unwrap();
            train::retrain(&mut state, corpus, &cfg, RETRAIN_EPOCHS, &mut train::no_hook).unwrap();
            state
        })
    }

    /// Beam-search evaluation of the exported sparse model on the test split.
    pub fn eval(&self, model: &DecoderModel) -> EvalReport {
        let sparse = SparseModel::from_model(model, self.corpus.vocab.tokens().to_vec()).unwrap();
        evaluate(
            &sparse,
            &self.corpus.test,
            &self.corpus.vocab,
            &self.training_set,
            BEAM,
            self.corpus.max_len,
            1,
        )
        .unwrap()
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
