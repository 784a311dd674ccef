//! Synthetic scene-captioning corpus.
//!
//! Each scene is a 4x4 grid of feature cells holding one or two groups of
//! identical objects. Cells occupied by an object carry one-hot colour, shape,
//! size and count channels; every cell carries its normalised grid position.
//! Gaussian noise is added everywhere. Captions are produced from a small
//! template grammar so that spatial relations and attributes are only
//! recoverable by looking at the right cells.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const GRID: usize = 4;
pub const N_POS: usize = GRID * GRID;

pub const COLORS: [&str; 8] = [
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black",
];
pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "star", "heart"];
pub const SIZES: [&str; 2] = ["small", "large"];
const NUMBERS: [&str; 3] = ["one", "two", "three"];
/// Decorations attached to very few captions; they fall under the
/// minimum-frequency filter and become unknown tokens.
pub const RARE_WORDS: [&str; 6] = ["shiny", "tiny", "vivid", "glossy", "dull", "faded"];
const RARE_RATE: f64 = 0.002;

const CH_COLOR: usize = 0;
const CH_SHAPE: usize = CH_COLOR + COLORS.len();
const CH_SIZE: usize = CH_SHAPE + SHAPES.len();
const CH_COUNT: usize = CH_SIZE + SIZES.len();
const CH_OBJECT: usize = CH_COUNT + NUMBERS.len();
const CH_ROW: usize = CH_OBJECT + 1;
const CH_COL: usize = CH_ROW + 1;
/// Width of a raw feature cell.
pub const D_RAW: usize = CH_COL + 1;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectGroup {
    pub color: usize,
    pub shape: usize,
    pub size: usize,
    /// 1..=3
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "to the left of",
            Relation::RightOf => "to the right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    fn inverse(self) -> Self {
        match self {
            Relation::LeftOf => Relation::RightOf,
            Relation::RightOf => Relation::LeftOf,
            Relation::Above => Relation::Below,
            Relation::Below => Relation::Above,
        }
    }
}

/// One stored scene, as written to the JSON-lines dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub features: Vec<Vec<f64>>,
    pub captions: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            noise: 0.1,
        }
    }
}

impl DataConfig {
    /// Splits `n_scenes` with a twelfth each held out for validation and test.
    pub fn with_total(seed: u64, n_scenes: usize) -> Result<Self> {
        if n_scenes < 100 {
            return Err(Error::invalid(format!("need at least 100 scenes, got {n_scenes}")));
        }
        let held = n_scenes / 12;
        Ok(DataConfig {
            seed,
            n_train: n_scenes - 2 * held,
            n_val: held,
            n_test: held,
            ..Default::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

fn noun_phrase(g: &ObjectGroup, big_synonym: bool) -> Vec<&'static str> {
    let det = match g.count {
        1 => "a",
        2 => "two",
        _ => "three",
    };
    let size = if g.size == 1 && big_synonym { "big" } else { SIZES[g.size] };
    let shape = SHAPES[g.shape];
    let noun: &'static str = if g.count == 1 {
        shape
    } else {
        match shape {
            "circle" => "circles",
            "square" => "squares",
            "triangle" => "triangles",
            "star" => "stars",
            _ => "hearts",
        }
    };
    vec![det, size, COLORS[g.color], noun]
}

fn be(g: &ObjectGroup) -> &'static str {
    if g.count == 1 {
        "is"
    } else {
        "are"
    }
}

/// Every caption the grammar can say about a scene, one per template.
fn templates(groups: &[ObjectGroup], relation: Option<Relation>, big: bool) -> Vec<Vec<&'static str>> {
    let join = |parts: &[&[&'static str]]| parts.concat();
    let a = noun_phrase(&groups[0], big);
    match (groups.len(), relation) {
        (1, _) => vec![
            a.clone(),
            join(&[&["there", be(&groups[0])], &a]),
            join(&[&["a", "picture", "of"], &a]),
            join(&[&a, &["in", "the", "picture"]]),
            join(&[&["an", "image", "with"], &a]),
        ],
        (_, Some(rel)) => {
            let b = noun_phrase(&groups[1], big);
            let r: Vec<&str> = rel.phrase().split(' ').collect();
            let inv: Vec<&str> = rel.inverse().phrase().split(' ').collect();
            vec![
                join(&[&a, &r, &b]),
                join(&[&b, &inv, &a]),
                join(&[&["there", be(&groups[0])], &a, &["and"], &b]),
                join(&[&["a", "picture", "of"], &a, &r, &b]),
                join(&[&["an", "image", "with"], &a, &["and"], &b]),
            ]
        }
        _ => unreachable!("two groups always carry a relation"),
    }
}

fn random_group(rng: &mut Rng) -> ObjectGroup {
    ObjectGroup {
        color: rng.below(COLORS.len()),
        shape: rng.below(SHAPES.len()),
        size: rng.below(SIZES.len()),
        count: 1 + rng.below(3),
    }
}

fn cell(row: usize, col: usize) -> usize {
    row * GRID + col
}

fn make_scene(id: usize, split: Split, noise: f64, rng: &mut Rng) -> Scene {
    let two = rng.bernoulli(0.6);
    let mut groups = vec![random_group(rng)];
    let mut regions: Vec<Vec<usize>> = Vec::new();
    let mut relation = None;
    if two {
        let mut second = random_group(rng);
        while second.color == groups[0].color && second.shape == groups[0].shape {
            second = random_group(rng);
        }
        groups.push(second);
        let horizontal = rng.bernoulli(0.5);
        let first_low = rng.bernoulli(0.5);
        let half = |low: bool| -> Vec<usize> {
            let span = if low { 0..GRID / 2 } else { GRID / 2..GRID };
            let mut cells = Vec::new();
            for major in span {
                for minor in 0..GRID {
                    cells.push(if horizontal { cell(minor, major) } else { cell(major, minor) });
                }
            }
            cells
        };
        regions.push(half(first_low));
        regions.push(half(!first_low));
        relation = Some(match (horizontal, first_low) {
            (true, true) => Relation::LeftOf,
            (true, false) => Relation::RightOf,
            (false, true) => Relation::Above,
            (false, false) => Relation::Below,
        });
    } else {
        regions.push((0..N_POS).collect());
    }

    let mut features = vec![vec![0.0; D_RAW]; N_POS];
    for (p, f) in features.iter_mut().enumerate() {
        f[CH_ROW] = (p / GRID) as f64 / (GRID - 1) as f64;
        f[CH_COL] = (p % GRID) as f64 / (GRID - 1) as f64;
    }
    for (g, region) in groups.iter().zip(regions.iter_mut()) {
        rng.shuffle(region);
        for &p in region.iter().take(g.count) {
            let f = &mut features[p];
            f[CH_COLOR + g.color] = 1.0;
            f[CH_SHAPE + g.shape] = 1.0;
            f[CH_SIZE + g.size] = 1.0;
            f[CH_COUNT + g.count - 1] = 1.0;
            f[CH_OBJECT] = 1.0;
        }
    }
    for f in features.iter_mut().flatten() {
        *f = ((*f + noise * rng.normal()) * 1e4).round() / 1e4;
    }

    let big = rng.bernoulli(0.3);
    let mut pool = templates(&groups, relation, big);
    rng.shuffle(&mut pool);
    let n_captions = 2 + rng.below(4);
    let captions = pool
        .into_iter()
        .take(n_captions)
        .map(|mut words| {
            if rng.bernoulli(RARE_RATE) {
                words.push(*rng.choose(&RARE_WORDS));
            }
            words.join(" ")
        })
        .collect();
    Scene {
        id,
        features,
        captions,
        split,
    }
}

impl Dataset {
    /// Deterministic in `cfg`.
    pub fn generate(cfg: &DataConfig) -> Dataset {
        let mut rng = Rng::derived(cfg.seed, "scenes");
        let plan = [
            (Split::Train, cfg.n_train),
            (Split::Val, cfg.n_val),
            (Split::Test, cfg.n_test),
        ];
        let mut scenes = Vec::with_capacity(cfg.n_train + cfg.n_val + cfg.n_test);
        for (split, n) in plan {
            for _ in 0..n {
                let id = scenes.len();
                scenes.push(make_scene(id, split, cfg.noise, &mut rng));
            }
        }
        Dataset { scenes }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for s in &self.scenes {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Dataset> {
        let r = BufReader::new(fs::File::open(path)?);
        let mut scenes = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let scene: Scene = serde_json::from_str(&line)?;
            if scene.features.is_empty()
                || scene.features.iter().any(|r| r.len() != scene.features[0].len())
            {
                return Err(Error::Format(format!("line {}: ragged feature grid", n + 1)));
            }
            scenes.push(scene);
        }
        if scenes.is_empty() {
            return Err(Error::Empty("dataset file has no scenes"));
        }
        Ok(Dataset { scenes })
    }
}

pub fn tokenize(caption: &str) -> Vec<String> {
    caption.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Token/id bijection. Ids 0..4 are `<pad>`, `<start>`, `<end>`, `<unk>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times, ordered by descending
    /// frequency then alphabetically.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Vocabulary {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for t in tokenize(c) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_freq && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Format("vocabulary must start with the reserved tokens".into()));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Format("duplicate vocabulary token".into()));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Words of a caption without start/end/pad markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != START && i != END && i != PAD)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A scene with encoded captions ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct EncodedScene {
    pub id: usize,
    /// `[n_pos x d_raw]`
    pub features: Tensor,
    /// Word ids truncated to `max_len`, each followed by [`END`].
    pub captions: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<EncodedScene>,
    pub val: Vec<EncodedScene>,
    pub test: Vec<EncodedScene>,
    pub max_len: usize,
}

pub fn encode_caption(vocab: &Vocabulary, caption: &str, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokenize(caption)
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t))
        .collect();
    ids.push(END);
    ids
}

/// Lowercases and tokenises on whitespace, builds the vocabulary from the
/// training split only, and truncates every caption to `max_len` words before
/// appending the end marker.
pub fn preprocess(data: &Dataset, min_freq: usize, max_len: usize) -> Result<Corpus> {
    let vocab = Vocabulary::build(
        data.split(Split::Train)
            .flat_map(|s| s.captions.iter().map(|c| c.as_str())),
        min_freq,
    );
    Corpus::encode(data, vocab, max_len)
}

impl Corpus {
    /// Encodes every split with a fixed vocabulary (for instance one restored
    /// from a model file); out-of-vocabulary words map to `<unk>`.
    pub fn encode(data: &Dataset, vocab: Vocabulary, max_len: usize) -> Result<Corpus> {
        let encode = |split: Split| -> Result<Vec<EncodedScene>> {
            data.split(split)
                .map(|s| {
                    let rows = s.features.len();
                    let cols = s.features.first().map_or(0, Vec::len);
                    let features =
                        Tensor::new(vec![rows, cols], s.features.iter().flatten().copied().collect())?;
                    Ok(EncodedScene {
                        id: s.id,
                        features,
                        captions: s
                            .captions
                            .iter()
                            .map(|c| encode_caption(&vocab, c, max_len))
                            .collect(),
                    })
                })
                .collect()
        };
        let (train, val, test) = (encode(Split::Train)?, encode(Split::Val)?, encode(Split::Test)?);
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        Ok(Corpus {
            vocab,
            train,
            val,
            test,
            max_len,
        })
    }

    /// Exact-string set of every training caption after vocabulary mapping.
    pub fn training_caption_set(&self) -> HashSet<String> {
        self.train
            .iter()
            .flat_map(|s| s.captions.iter().map(|c| self.vocab.decode(c)))
            .collect()
    }

    /// Raw feature width.
    pub fn feature_dim(&self) -> usize {
        self.train[0].features.cols()
    }

    pub fn n_positions(&self) -> usize {
        self.train[0].features.rows()
    }
}
