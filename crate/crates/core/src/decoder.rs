//! Single-layer recurrent caption decoder with additive soft attention.
//!
//! Weights are stored input-major (`[fan_in x fan_out]`) so a batch of row
//! vectors is multiplied on the left. Every weight matrix may carry gate
//! logits (learnable pruning) or a fixed binary mask (magnitude baselines);
//! biases are never pruned.

use crate::autodiff::{Graph, Var};
use crate::data::{Vocabulary, START};
use crate::error::{Error, Result};
use crate::gating::{self, GateSampling, GatedParameter};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gate_count(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            _ => Err(Error::invalid(format!("unknown cell kind `{s}`"))),
        }
    }
}

/// Layer sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// RNN units (r)
    pub rnn: usize,
    /// word embedding size (q)
    pub word: usize,
    /// context vector and attention MLP size (a)
    pub attn: usize,
    /// vocabulary size (v)
    pub vocab: usize,
    /// encoded feature width, also the image-embedding size (h)
    pub feat: usize,
    /// raw feature width fed to the encoder
    pub raw: usize,
}

impl Dims {
    /// Desk-scale defaults.
    pub fn desk(vocab: usize, raw: usize) -> Self {
        Dims {
            rnn: 64,
            word: 32,
            attn: 64,
            vocab,
            feat: 32,
            raw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerName {
    RnnInitialState,
    RnnKernel,
    AttnKey,
    AttnValue,
    AttnQuery,
    AttnMlp,
    WordEmbedding,
    Logits,
}

impl LayerName {
    pub const ALL: [LayerName; 8] = [
        LayerName::RnnInitialState,
        LayerName::RnnKernel,
        LayerName::AttnKey,
        LayerName::AttnValue,
        LayerName::AttnQuery,
        LayerName::AttnMlp,
        LayerName::WordEmbedding,
        LayerName::Logits,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerName::RnnInitialState => "rnn_initial_state",
            LayerName::RnnKernel => "rnn_kernel",
            LayerName::AttnKey => "attn_key",
            LayerName::AttnValue => "attn_value",
            LayerName::AttnQuery => "attn_query",
            LayerName::AttnMlp => "attn_mlp",
            LayerName::WordEmbedding => "word_embedding",
            LayerName::Logits => "logits",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown layer `{s}`")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn weight_shape(self, d: &Dims, cell: CellKind) -> [usize; 2] {
        match self {
            LayerName::RnnInitialState => [d.feat, d.rnn],
            LayerName::RnnKernel => [d.word + d.attn + d.rnn, cell.gate_count() * d.rnn],
            LayerName::AttnKey | LayerName::AttnValue => [d.feat, d.attn],
            LayerName::AttnQuery => [d.rnn, d.attn],
            LayerName::AttnMlp => [d.attn, 1],
            LayerName::WordEmbedding => [d.vocab, d.word],
            LayerName::Logits => [d.rnn, d.vocab],
        }
    }

    pub fn bias_len(self, d: &Dims, cell: CellKind) -> Option<usize> {
        match self {
            LayerName::RnnKernel => Some(cell.gate_count() * d.rnn),
            LayerName::AttnKey | LayerName::AttnValue => Some(d.attn),
            LayerName::Logits => Some(d.vocab),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightLayer {
    pub name: LayerName,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    /// Gate logits, same shape as `weight`.
    pub gate: Option<Tensor>,
    /// Fixed binary mask, same shape as `weight`.
    pub mask: Option<Tensor>,
}

impl WeightLayer {
    /// Weight as used at inference: maximum-likelihood gates and masks applied.
    pub fn effective_weight(&self) -> Tensor {
        let mut w = match &self.gate {
            Some(g) => gating::export_weight(&self.weight, g),
            None => self.weight.clone(),
        };
        if let Some(mask) = &self.mask {
            for (x, &m) in w.data_mut().iter_mut().zip(mask.data()) {
                if m == 0.0 {
                    *x = 0.0;
                }
            }
        }
        w
    }

    pub fn as_gated(&self) -> Option<GatedParameter> {
        let gate = self.gate.clone()?;
        GatedParameter::from_parts(self.name.as_str(), self.weight.clone(), gate).ok()
    }
}

/// Linear projection from raw feature cells to the attended feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Identifies one trainable tensor of a [`DecoderModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Weight(LayerName),
    Bias(LayerName),
    Gate(LayerName),
    EncoderWeight,
    EncoderBias,
}

impl ParamId {
    pub fn name(self) -> String {
        match self {
            ParamId::Weight(l) => format!("{}.weight", l.as_str()),
            ParamId::Bias(l) => format!("{}.bias", l.as_str()),
            ParamId::Gate(l) => format!("{}.gate", l.as_str()),
            ParamId::EncoderWeight => "encoder.weight".into(),
            ParamId::EncoderBias => "encoder.bias".into(),
        }
    }

    pub fn is_gate(self) -> bool {
        matches!(self, ParamId::Gate(_))
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, ParamId::EncoderWeight | ParamId::EncoderBias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    pub dims: Dims,
    pub cell: CellKind,
    /// Indexed by [`LayerName::index`].
    pub layers: Vec<WeightLayer>,
    pub encoder: Encoder,
}

fn xavier(shape: [usize; 2], rng: &mut Rng) -> Tensor {
    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::from_fn(&shape, |_| rng.uniform_range(-limit, limit))
}

/// Which parts of the model receive gradients in a bound graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub weights: bool,
    pub gates: bool,
    pub encoder: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        weights: false,
        gates: false,
        encoder: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutRates {
    pub rnn: f64,
    pub attn: f64,
}

impl DropoutRates {
    pub const DENSE: DropoutRates = DropoutRates { rnn: 0.35, attn: 0.1 };
    pub const SPARSE: DropoutRates = DropoutRates { rnn: 0.11, attn: 0.03 };
    pub const NONE: DropoutRates = DropoutRates { rnn: 0.0, attn: 0.0 };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardConfig {
    pub training: bool,
    pub dropout: DropoutRates,
    pub sampling: GateSampling,
}

impl ForwardConfig {
    /// Deterministic inference: no dropout, maximum-likelihood gates.
    pub const EVAL: ForwardConfig = ForwardConfig {
        training: false,
        dropout: DropoutRates::NONE,
        sampling: GateSampling::MaxLikelihood,
    };
}

/// Model tensors registered on a graph.
pub struct Bound {
    effective: Vec<Var>,
    biases: Vec<Option<Var>>,
    /// `(σ(G), G)` for gated layers.
    pub gates: Vec<Option<(Var, Var)>>,
    gru_kernels: Option<[Var; 4]>,
    enc_weight: Var,
    enc_bias: Var,
    /// Every differentiable leaf, for reading gradients after backward.
    pub params: Vec<(ParamId, Var)>,
    /// Raw weight and bias leaves, the operands of weight decay.
    pub decay: Vec<Var>,
}

impl Bound {
    pub fn effective(&self, layer: LayerName) -> Var {
        self.effective[layer.index()]
    }

    pub fn gate_pairs(&self) -> Vec<(Var, Var)> {
        self.gates.iter().flatten().copied().collect()
    }
}

/// Encoded batch of images.
pub struct Encoded {
    pub batch: usize,
    pub positions: usize,
    pub features: Var,
    pub embed: Var,
    pub keys: Var,
    pub values: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub m: Option<Var>,
}

/// How the summed token cross-entropy of a batch is scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossNorm {
    /// Mean over captions of each caption's summed token loss.
    PerCaption,
    /// Mean over all target tokens in the batch.
    PerToken,
}

/// Recurrent state of one caption during inference.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub h: Tensor,
    /// Memory cell; absent for GRU.
    pub m: Option<Tensor>,
    pub prev_token: usize,
}

impl DecoderModel {
    /// Xavier-uniform weights, zero biases except the LSTM forget gate (1.0).
    pub fn new(dims: Dims, cell: CellKind, rng: &mut Rng) -> Self {
        let layers = LayerName::ALL
            .iter()
            .map(|&name| {
                let weight = xavier(name.weight_shape(&dims, cell), rng);
                let bias = name.bias_len(&dims, cell).map(|n| {
                    let mut b = Tensor::zeros(&[n]);
                    if name == LayerName::RnnKernel && cell == CellKind::Lstm {
                        b.data_mut()[dims.rnn..2 * dims.rnn].fill(1.0);
                    }
                    b
                });
                WeightLayer {
                    name,
                    weight,
                    bias,
                    gate: None,
                    mask: None,
                }
            })
            .collect();
        let encoder = Encoder {
            weight: xavier([dims.raw, dims.feat], rng),
            bias: Tensor::zeros(&[dims.feat]),
        };
        DecoderModel {
            dims,
            cell,
            layers,
            encoder,
        }
    }

    pub fn layer(&self, name: LayerName) -> &WeightLayer {
        &self.layers[name.index()]
    }

    pub fn layer_mut(&mut self, name: LayerName) -> &mut WeightLayer {
        &mut self.layers[name.index()]
    }

    /// Attaches gate logits initialised to `init` on every weight matrix.
    pub fn add_gates(&mut self, init: f64) {
        for l in &mut self.layers {
            l.gate = Some(Tensor::full(l.weight.shape(), init));
        }
    }

    pub fn is_gated(&self) -> bool {
        self.layers.iter().any(|l| l.gate.is_some())
    }

    pub fn is_masked(&self) -> bool {
        self.layers.iter().any(|l| l.mask.is_some())
    }

    pub fn gate_tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().filter_map(|l| l.gate.as_ref()).collect()
    }

    /// Maximum-likelihood sparsity of the gates.
    pub fn gate_sparsity(&self) -> Result<f64> {
        gating::sparsity(self.gate_tensors())
    }

    /// Prunable parameter count (weight matrices only).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.bias.as_ref()).map(Tensor::len).sum()
    }

    /// Gates and masks folded into plain weights; both are dropped.
    pub fn export_dense(&self) -> DecoderModel {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.weight = l.effective_weight();
            l.gate = None;
            l.mask = None;
        }
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        match id {
            ParamId::Weight(l) => Some(&self.layer(l).weight),
            ParamId::Bias(l) => self.layer(l).bias.as_ref(),
            ParamId::Gate(l) => self.layer(l).gate.as_ref(),
            ParamId::EncoderWeight => Some(&self.encoder.weight),
            ParamId::EncoderBias => Some(&self.encoder.bias),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::Weight(l) => Some(&mut self.layer_mut(l).weight),
            ParamId::Bias(l) => self.layer_mut(l).bias.as_mut(),
            ParamId::Gate(l) => self.layer_mut(l).gate.as_mut(),
            ParamId::EncoderWeight => Some(&mut self.encoder.weight),
            ParamId::EncoderBias => Some(&mut self.encoder.bias),
        }
    }

    /// Every tensor the model owns, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            let n = l.name.as_str();
            out.push((format!("{n}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("{n}.bias"), b));
            }
            if let Some(g) = &l.gate {
                out.push((format!("{n}.gate"), g));
            }
            if let Some(m) = &l.mask {
                out.push((format!("{n}.mask"), m));
            }
        }
        out.push(("encoder.weight".into(), &self.encoder.weight));
        out.push(("encoder.bias".into(), &self.encoder.bias));
        out
    }

    pub fn check_shapes(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            let want = l.name.weight_shape(&self.dims, self.cell);
            if l.name.index() != i || l.weight.shape() != want {
                return Err(Error::Shape {
                    op: l.name.as_str(),
                    left: l.weight.shape().to_vec(),
                    right: want.to_vec(),
                });
            }
            let blen = l.name.bias_len(&self.dims, self.cell);
            if l.bias.as_ref().map(Tensor::len) != blen {
                return Err(Error::Format(format!("{}: bias length", l.name.as_str())));
            }
            for extra in [&l.gate, &l.mask].into_iter().flatten() {
                if extra.shape() != l.weight.shape() {
                    return Err(Error::Shape {
                        op: l.name.as_str(),
                        left: extra.shape().to_vec(),
                        right: want.to_vec(),
                    });
                }
            }
        }
        if self.encoder.weight.shape() != [self.dims.raw, self.dims.feat]
            || self.encoder.bias.len() != self.dims.feat
        {
            return Err(Error::Format("encoder shape".into()));
        }
        Ok(())
    }

    /// Registers the model on `graph`, sampling gate masks where present.
    pub fn bind(
        &self,
        graph: &mut Graph,
        trainable: Trainable,
        sampling: GateSampling,
        rng: &mut Rng,
    ) -> Result<Bound> {
        let mut params = Vec::new();
        let mut decay = Vec::new();
        let mut effective = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        let mut gates = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = if trainable.weights {
                let v = graph.param(l.weight.clone());
                params.push((ParamId::Weight(l.name), v));
                v
            } else {
                graph.constant(l.weight.clone())
            };
            decay.push(w);
            let mut eff = w;
            let mut gate_pair = None;
            if let Some(g) = &l.gate {
                let gv = if trainable.gates {
                    let v = graph.param(g.clone());
                    params.push((ParamId::Gate(l.name), v));
                    v
                } else {
                    graph.constant(g.clone())
                };
                let (e, probs) = gating::gated_weight(graph, eff, gv, sampling, rng)?;
                eff = e;
                gate_pair = Some((probs, gv));
            }
            if let Some(mask) = &l.mask {
                eff = graph.mul_const(eff, mask.data().to_vec())?;
            }
            effective.push(eff);
            gates.push(gate_pair);
            biases.push(match &l.bias {
                Some(b) => {
                    let v = if trainable.weights {
                        let v = graph.param(b.clone());
                        params.push((ParamId::Bias(l.name), v));
                        v
                    } else {
                        graph.constant(b.clone())
                    };
                    decay.push(v);
                    Some(v)
                }
                None => None,
            });
        }
        let (enc_weight, enc_bias) = if trainable.encoder {
            let w = graph.param(self.encoder.weight.clone());
            let b = graph.param(self.encoder.bias.clone());
            params.push((ParamId::EncoderWeight, w));
            params.push((ParamId::EncoderBias, b));
            (w, b)
        } else {
            (
                graph.constant(self.encoder.weight.clone()),
                graph.constant(self.encoder.bias.clone()),
            )
        };
        let gru_kernels = if self.cell == CellKind::Gru {
            let r = self.dims.rnn;
            let k = effective[LayerName::RnnKernel.index()];
            let b = biases[LayerName::RnnKernel.index()].expect("kernel has a bias");
            let b = graph.reshape(b, &[1, 3 * r])?;
            Some([
                graph.slice_cols(k, 0, 2 * r)?,
                graph.slice_cols(k, 2 * r, 3 * r)?,
                graph.slice_cols(b, 0, 2 * r)?,
                graph.slice_cols(b, 2 * r, 3 * r)?,
            ])
        } else {
            None
        };
        Ok(Bound {
            effective,
            biases,
            gates,
            gru_kernels,
            enc_weight,
            enc_bias,
            params,
            decay,
        })
    }

    fn bias(&self, b: &Bound, layer: LayerName) -> Var {
        b.biases[layer.index()].expect("layer has a bias")
    }

    /// Projects raw feature grids and precomputes attention keys and values.
    pub fn encode(&self, graph: &mut Graph, b: &Bound, images: &[&Tensor]) -> Result<Encoded> {
        if images.is_empty() {
            return Err(Error::Empty("image batch"));
        }
        let positions = images[0].rows();
        let mut raw = Vec::with_capacity(images.len() * positions * self.dims.raw);
        for img in images {
            if img.rows() != positions || img.cols() != self.dims.raw {
                return Err(Error::Shape {
                    op: "encode",
                    left: img.shape().to_vec(),
                    right: vec![positions, self.dims.raw],
                });
            }
            raw.extend_from_slice(img.data());
        }
        let raw = graph.constant(Tensor::new(vec![images.len() * positions, self.dims.raw], raw)?);
        let proj = graph.matmul(raw, b.enc_weight)?;
        let features = graph.add_bias(proj, b.enc_bias)?;
        self.encode_features(graph, b, features, images.len())
    }

    /// Same as [`DecoderModel::encode`] for an already projected feature map
    /// `[batch * n_pos x feat]`.
    pub fn encode_features(&self, graph: &mut Graph, b: &Bound, features: Var, batch: usize) -> Result<Encoded> {
        let positions = graph.value(features).rows() / batch;
        let uniform = graph.constant(Tensor::full(&[batch, positions], 1.0 / positions as f64));
        // Mean-pooled feature map serves as the image embedding.
        let embed = graph.weighted_sum(uniform, features)?;
        let k = graph.matmul(features, b.effective(LayerName::AttnKey))?;
        let keys = graph.add_bias(k, self.bias(b, LayerName::AttnKey))?;
        let v = graph.matmul(features, b.effective(LayerName::AttnValue))?;
        let values = graph.add_bias(v, self.bias(b, LayerName::AttnValue))?;
        Ok(Encoded {
            batch,
            positions,
            features,
            embed,
            keys,
            values,
        })
    }

    /// `h = W_I · I_embed`, `m = 0`.
    pub fn init_state_vars(&self, graph: &mut Graph, b: &Bound, embed: Var) -> Result<StateVars> {
        let h = graph.matmul(embed, b.effective(LayerName::RnnInitialState))?;
        let m = match self.cell {
            CellKind::Lstm => {
                let rows = graph.value(embed).rows();
                Some(graph.constant(Tensor::zeros(&[rows, self.dims.rnn])))
            }
            CellKind::Gru => None,
        };
        Ok(StateVars { h, m })
    }

    /// Additive attention conditioned on the previous hidden state. Returns
    /// the context `[batch x a]` and the attention weights `[batch x n_pos]`
    /// (before dropout).
    pub fn attend(
        &self,
        graph: &mut Graph,
        b: &Bound,
        enc: &Encoded,
        h_prev: Var,
        fwd: &ForwardConfig,
        rng: &mut Rng,
    ) -> Result<(Var, Var)> {
        let q = graph.matmul(h_prev, b.effective(LayerName::AttnQuery))?;
        let pre = graph.add_grouped(enc.keys, q)?;
        let hidden = graph.tanh(pre);
        let scores = graph.matmul(hidden, b.effective(LayerName::AttnMlp))?;
        let scores = graph.reshape(scores, &[enc.batch, enc.positions])?;
        let weights = graph.softmax(scores);
        let dropped = graph.dropout(weights, fwd.dropout.attn, fwd.training, rng)?;
        let context = graph.weighted_sum(dropped, enc.values)?;
        Ok((context, weights))
    }

    fn lstm(&self, graph: &mut Graph, b: &Bound, x: Var, s: StateVars) -> Result<StateVars> {
        let r = self.dims.rnn;
        let xh = graph.concat(&[x, s.h])?;
        let z = graph.matmul(xh, b.effective(LayerName::RnnKernel))?;
        let z = graph.add_bias(z, self.bias(b, LayerName::RnnKernel))?;
        let zi = graph.slice_cols(z, 0, r)?;
        let zf = graph.slice_cols(z, r, 2 * r)?;
        let zg = graph.slice_cols(z, 2 * r, 3 * r)?;
        let zo = graph.slice_cols(z, 3 * r, 4 * r)?;
        let i = graph.sigmoid(zi);
        let f = graph.sigmoid(zf);
        let g = graph.tanh(zg);
        let o = graph.sigmoid(zo);
        let m_prev = s.m.expect("lstm state carries memory");
        let keep = graph.mul(f, m_prev)?;
        let write = graph.mul(i, g)?;
        let m = graph.add(keep, write)?;
        let tm = graph.tanh(m);
        let h = graph.mul(o, tm)?;
        Ok(StateVars { h, m: Some(m) })
    }

    fn gru(&self, graph: &mut Graph, b: &Bound, x: Var, s: StateVars) -> Result<StateVars> {
        let r = self.dims.rnn;
        let [k_gates, k_cand, b_gates, b_cand] = b.gru_kernels.expect("gru kernels bound");
        let xh = graph.concat(&[x, s.h])?;
        let z = graph.matmul(xh, k_gates)?;
        let z = graph.add_bias(z, b_gates)?;
        let zu = graph.slice_cols(z, 0, r)?;
        let zr = graph.slice_cols(z, r, 2 * r)?;
        let u = graph.sigmoid(zu);
        let reset = graph.sigmoid(zr);
        let rh = graph.mul(reset, s.h)?;
        let xrh = graph.concat(&[x, rh])?;
        let zc = graph.matmul(xrh, k_cand)?;
        let zc = graph.add_bias(zc, b_cand)?;
        let cand = graph.tanh(zc);
        let diff = graph.sub(s.h, cand)?;
        let gated = graph.mul(u, diff)?;
        let h = graph.add(cand, gated)?;
        Ok(StateVars { h, m: None })
    }

    /// One decoding step for a batch. Returns vocabulary logits and the new
    /// state.
    pub fn step_vars(
        &self,
        graph: &mut Graph,
        b: &Bound,
        enc: &Encoded,
        state: StateVars,
        prev_tokens: &[usize],
        fwd: &ForwardConfig,
        rng: &mut Rng,
    ) -> Result<(Var, StateVars)> {
        let emb = graph.lookup(b.effective(LayerName::WordEmbedding), prev_tokens)?;
        let (context, _) = self.attend(graph, b, enc, state.h, fwd, rng)?;
        let x = graph.concat(&[emb, context])?;
        let x = graph.dropout(x, fwd.dropout.rnn, fwd.training, rng)?;
        let next = match self.cell {
            CellKind::Lstm => self.lstm(graph, b, x, state)?,
            CellKind::Gru => self.gru(graph, b, x, state)?,
        };
        let out = graph.dropout(next.h, fwd.dropout.rnn, fwd.training, rng)?;
        let logits = graph.matmul(out, b.effective(LayerName::Logits))?;
        let logits = graph.add_bias(logits, self.bias(b, LayerName::Logits))?;
        Ok((logits, next))
    }

    /// Teacher-forced loss of a batch: the per-token cross-entropy summed
    /// and scaled according to `norm`, plus `weight_decay * ||θ||²`.
    /// Captions carry their end marker.
    #[allow(clippy::too_many_arguments)]
    pub fn caption_loss_vars(
        &self,
        graph: &mut Graph,
        b: &Bound,
        enc: &Encoded,
        captions: &[&[usize]],
        norm: LossNorm,
        weight_decay: f64,
        fwd: &ForwardConfig,
        rng: &mut Rng,
    ) -> Result<Var> {
        if captions.len() != enc.batch {
            return Err(Error::invalid("one caption per image is required"));
        }
        if captions.iter().any(|c| c.is_empty()) {
            return Err(Error::Empty("caption token sequence"));
        }
        let steps = captions.iter().map(|c| c.len()).max().expect("nonempty batch");
        let scale = match norm {
            LossNorm::PerCaption => 1.0 / captions.len() as f64,
            LossNorm::PerToken => 1.0 / captions.iter().map(|c| c.len()).sum::<usize>() as f64,
        };
        let mut state = self.init_state_vars(graph, b, enc.embed)?;
        let mut total: Option<Var> = None;
        for t in 0..steps {
            let prev: Vec<usize> = captions
                .iter()
                .map(|c| if t == 0 { START } else { *c.get(t - 1).unwrap_or(&START) })
                .collect();
            let targets: Vec<usize> = captions.iter().map(|c| *c.get(t).unwrap_or(&0)).collect();
            let weights: Vec<f64> = captions
                .iter()
                .map(|c| if t < c.len() { scale } else { 0.0 })
                .collect();
            let (logits, next) = self.step_vars(graph, b, enc, state, &prev, fwd, rng)?;
            state = next;
            let ce = graph.cross_entropy(logits, &targets, &weights)?;
            total = Some(match total {
                None => ce,
                Some(acc) => graph.add(acc, ce)?,
            });
        }
        let mut loss = total.expect("at least one step");
        if weight_decay > 0.0 {
            for &p in &b.decay {
                let sq = graph.sum_squares(p);
                let sq = graph.scale(sq, weight_decay);
                loss = graph.add(loss, sq)?;
            }
        }
        Ok(loss)
    }

    /// Scalar caption loss for a single image and caption, evaluated on a
    /// fresh graph.
    pub fn caption_loss(
        &self,
        image: &Tensor,
        caption: &[usize],
        weight_decay: f64,
        fwd: &ForwardConfig,
        rng: &mut Rng,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::NONE, fwd.sampling, rng)?;
        let enc = self.encode(&mut g, &b, &[image])?;
        let l = self.caption_loss_vars(&mut g, &b, &enc, &[caption], LossNorm::PerCaption, weight_decay, fwd, rng)?;
        Ok(g.value(l).data()[0])
    }

    /// Initial state for an image embedding of length `feat`.
    pub fn init_state(&self, image_embed: &Tensor) -> Result<DecoderState> {
        if image_embed.len() != self.dims.feat {
            return Err(Error::Shape {
                op: "init_state",
                left: image_embed.shape().to_vec(),
                right: vec![self.dims.feat],
            });
        }
        let w = self.layer(LayerName::RnnInitialState).effective_weight();
        let mut h = vec![0.0; self.dims.rnn];
        for (i, &x) in image_embed.data().iter().enumerate() {
            for (h, &w) in h.iter_mut().zip(w.row(i)) {
                *h += x * w;
            }
        }
        Ok(DecoderState {
            h: Tensor::vector(h),
            m: (self.cell == CellKind::Lstm).then(|| Tensor::zeros(&[self.dims.rnn])),
            prev_token: START,
        })
    }

    /// Projected feature map `[n_pos x feat]` and mean-pooled embedding for
    /// one raw feature grid.
    pub fn encode_image(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut rng = Rng::new(0);
        let b = self.bind(&mut g, Trainable::NONE, GateSampling::MaxLikelihood, &mut rng)?;
        let enc = self.encode(&mut g, &b, &[image])?;
        let e = g.value(enc.embed).clone().reshape(&[self.dims.feat])?;
        Ok((g.value(enc.features).clone(), e))
    }

    /// Soft attention of a single hidden state over an encoded feature map.
    pub fn soft_attention(&self, features: &Tensor, h_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut rng = Rng::new(0);
        let b = self.bind(&mut g, Trainable::NONE, GateSampling::MaxLikelihood, &mut rng)?;
        let f = g.constant(features.clone());
        let enc = self.encode_features(&mut g, &b, f, 1)?;
        let h = g.constant(h_prev.clone().reshape(&[1, self.dims.rnn])?);
        let (c, w) = self.attend(&mut g, &b, &enc, h, &ForwardConfig::EVAL, &mut rng)?;
        let n = enc.positions;
        Ok((
            g.value(c).clone().reshape(&[self.dims.attn])?,
            g.value(w).clone().reshape(&[n])?,
        ))
    }

    /// One decoding step for a single image given its raw feature grid.
    /// Returns the vocabulary distribution and the next state (whose
    /// `prev_token` is left for the caller to set).
    pub fn decoder_step(
        &self,
        state: &DecoderState,
        image: &Tensor,
        fwd: &ForwardConfig,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, DecoderState)> {
        if state.prev_token >= self.dims.vocab {
            return Err(Error::IndexOutOfRange {
                index: state.prev_token,
                len: self.dims.vocab,
            });
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, Trainable::NONE, fwd.sampling, rng)?;
        let enc = self.encode(&mut g, &b, &[image])?;
        let r = self.dims.rnn;
        let h = g.constant(state.h.clone().reshape(&[1, r])?);
        let m = match &state.m {
            Some(m) => Some(g.constant(m.clone().reshape(&[1, r])?)),
            None => None,
        };
        let (logits, next) =
            self.step_vars(&mut g, &b, &enc, StateVars { h, m }, &[state.prev_token], fwd, rng)?;
        let probs = g.softmax(logits);
        Ok((
            g.value(probs).data().to_vec(),
            DecoderState {
                h: g.value(next.h).clone().reshape(&[r])?,
                m: match next.m {
                    Some(m) => Some(g.value(m).clone().reshape(&[r])?),
                    None => None,
                },
                prev_token: state.prev_token,
            },
        ))
    }

    pub fn describe(&self, vocab: &Vocabulary) -> String {
        format!(
            "{} decoder r={} q={} a={} v={} ({} weights)",
            self.cell.as_str(),
            self.dims.rnn,
            self.dims.word,
            self.dims.attn,
            vocab.len(),
            self.weight_count()
        )
    }
}
