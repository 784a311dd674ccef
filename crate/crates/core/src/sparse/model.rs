use std::fs;
use std::path::Path;

use crate::autodiff::sigmoid_scalar;
use crate::checkpoint::{read_bytes, read_f64, read_u32, read_u64};
use crate::data::START;
use crate::decoder::{CellKind, DecoderModel, DecoderState, Dims, Encoder, LayerName, WeightLayer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::SparseMatrix;

pub const MAGIC: &[u8; 4] = b"GSPM";
pub const VERSION: u32 = 1;

/// One exported layer. The matrix is stored output-major (`W^T`, one row
/// per output unit) so each decoding step is a sparse matrix-vector
/// product; the word embedding keeps one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLayer {
    pub name: LayerName,
    pub matrix: SparseMatrix,
    pub bias: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseModel {
    pub dims: Dims,
    pub cell: CellKind,
    pub layers: Vec<SparseLayer>,
    pub encoder: Encoder,
    /// Token strings by id; empty when unknown.
    pub vocab: Vec<String>,
}

/// Per-image precomputation: attention keys and values.
#[derive(Clone, Debug)]
pub struct SparseContext {
    positions: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    for (o, b) in out.iter_mut().zip(bias) {
        *o += b;
    }
}

impl SparseModel {
    /// Exports a model: gates are resolved to their maximum-likelihood masks
    /// and discarded, fixed masks are applied, then every matrix is
    /// compressed.
    pub fn from_model(model: &DecoderModel, vocab: Vec<String>) -> Result<Self> {
        model.check_shapes()?;
        if !vocab.is_empty() && vocab.len() != model.dims.vocab {
            return Err(Error::invalid("vocabulary size does not match the model"));
        }
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let w = l.effective_weight();
                let oriented = if l.name == LayerName::WordEmbedding { w } else { w.transpose() };
                Ok(SparseLayer {
                    name: l.name,
                    matrix: SparseMatrix::from_dense(&oriented)?,
                    bias: l.bias.as_ref().map(|b| b.data().to_vec()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SparseModel {
            dims: model.dims,
            cell: model.cell,
            layers,
            encoder: model.encoder.clone(),
            vocab,
        })
    }

    /// Dense model with the exported weights (no gates or masks).
    pub fn to_dense(&self) -> Result<DecoderModel> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let d = l.matrix.to_dense();
                let weight = if l.name == LayerName::WordEmbedding { d } else { d.transpose() };
                Ok(WeightLayer {
                    name: l.name,
                    weight,
                    bias: l.bias.clone().map(Tensor::vector),
                    gate: None,
                    mask: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = DecoderModel {
            dims: self.dims,
            cell: self.cell,
            layers,
            encoder: self.encoder.clone(),
        };
        m.check_shapes()?;
        Ok(m)
    }

    pub fn layer(&self, name: LayerName) -> &SparseLayer {
        &self.layers[name.index()]
    }

    fn matrix(&self, name: LayerName) -> &SparseMatrix {
        &self.layer(name).matrix
    }

    fn bias(&self, name: LayerName) -> &[f64] {
        self.layer(name).bias.as_deref().expect("layer has a bias")
    }

    /// Encodes a raw feature grid `[n_pos x raw]`.
    pub fn encode(&self, image: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if image.cols() != self.dims.raw {
            return Err(Error::Shape {
                op: "encode",
                left: image.shape().to_vec(),
                right: vec![image.rows(), self.dims.raw],
            });
        }
        let (n, feat) = (image.rows(), self.dims.feat);
        let w = &self.encoder.weight;
        let mut f = vec![0.0; n * feat];
        for i in 0..n {
            let row = &mut f[i * feat..(i + 1) * feat];
            for (k, &x) in image.row(i).iter().enumerate() {
                for (o, &wv) in row.iter_mut().zip(w.row(k)) {
                    *o += x * wv;
                }
            }
            add_bias(row, self.encoder.bias.data());
        }
        let f = Tensor::new(vec![n, feat], f)?;
        let weight = 1.0 / n as f64;
        let mut embed = vec![0.0; feat];
        for i in 0..n {
            for (e, &x) in embed.iter_mut().zip(f.row(i)) {
                *e += weight * x;
            }
        }
        Ok((f, embed))
    }

    /// Attention keys and values for an encoded feature map `[n_pos x feat]`.
    pub fn context(&self, features: &Tensor) -> Result<SparseContext> {
        let (n, a) = (features.rows(), self.dims.attn);
        let mut keys = vec![0.0; n * a];
        let mut values = vec![0.0; n * a];
        for i in 0..n {
            let f = features.row(i);
            let k = &mut keys[i * a..(i + 1) * a];
            self.matrix(LayerName::AttnKey).spmv_rows(f, 0..a, k)?;
            add_bias(k, self.bias(LayerName::AttnKey));
            let v = &mut values[i * a..(i + 1) * a];
            self.matrix(LayerName::AttnValue).spmv_rows(f, 0..a, v)?;
            add_bias(v, self.bias(LayerName::AttnValue));
        }
        Ok(SparseContext {
            positions: n,
            keys,
            values,
        })
    }

    pub fn init_state(&self, embed: &[f64]) -> Result<DecoderState> {
        let h = self.matrix(LayerName::RnnInitialState).spmv(embed)?;
        Ok(DecoderState {
            h: Tensor::vector(h),
            m: (self.cell == CellKind::Lstm).then(|| Tensor::zeros(&[self.dims.rnn])),
            prev_token: START,
        })
    }

    /// Encodes an image and returns its attention context with the initial
    /// decoder state.
    pub fn prepare(&self, image: &Tensor) -> Result<(SparseContext, DecoderState)> {
        let (f, embed) = self.encode(image)?;
        Ok((self.context(&f)?, self.init_state(&embed)?))
    }

    /// Context vector and attention weights for hidden state `h`.
    pub fn attend(&self, ctx: &SparseContext, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = self.dims.attn;
        let q = self.matrix(LayerName::AttnQuery).spmv(h)?;
        let mlp = self.matrix(LayerName::AttnMlp);
        let mut scores = vec![0.0; ctx.positions];
        let mut hidden = vec![0.0; a];
        for (i, s) in scores.iter_mut().enumerate() {
            for ((t, &k), &qv) in hidden.iter_mut().zip(&ctx.keys[i * a..(i + 1) * a]).zip(&q) {
                *t = (k + qv).tanh();
            }
            *s = mlp.spmv(&hidden)?[0];
        }
        softmax_in_place(&mut scores);
        let mut c = vec![0.0; a];
        for (i, &w) in scores.iter().enumerate() {
            for (o, &v) in c.iter_mut().zip(&ctx.values[i * a..(i + 1) * a]) {
                *o += w * v;
            }
        }
        Ok((c, scores))
    }

    /// One inference step from `state.prev_token`. Returns the vocabulary
    /// distribution and the next state.
    pub fn sparse_decode_step(&self, ctx: &SparseContext, state: &DecoderState) -> Result<(Vec<f64>, DecoderState)> {
        let r = self.dims.rnn;
        if state.prev_token >= self.dims.vocab {
            return Err(Error::IndexOutOfRange {
                index: state.prev_token,
                len: self.dims.vocab,
            });
        }
        if state.h.len() != r {
            return Err(Error::Shape {
                op: "sparse_decode_step",
                left: state.h.shape().to_vec(),
                right: vec![r],
            });
        }
        let h = state.h.data();
        let emb = self.matrix(LayerName::WordEmbedding).dense_row(state.prev_token)?;
        let (c, _) = self.attend(ctx, h)?;
        let mut xh = Vec::with_capacity(self.dims.word + self.dims.attn + r);
        xh.extend_from_slice(&emb);
        xh.extend_from_slice(&c);
        xh.extend_from_slice(h);
        let kernel = self.matrix(LayerName::RnnKernel);
        let kb = self.bias(LayerName::RnnKernel);
        let (h_new, m_new) = match self.cell {
            CellKind::Lstm => {
                let m = state
                    .m
                    .as_ref()
                    .ok_or_else(|| Error::invalid("lstm state without memory"))?;
                let mut z = kernel.spmv(&xh)?;
                add_bias(&mut z, kb);
                let mut h_new = vec![0.0; r];
                let mut m_new = vec![0.0; r];
                for j in 0..r {
                    let i = sigmoid_scalar(z[j]);
                    let f = sigmoid_scalar(z[r + j]);
                    let g = z[2 * r + j].tanh();
                    let o = sigmoid_scalar(z[3 * r + j]);
                    m_new[j] = f * m.data()[j] + i * g;
                    h_new[j] = o * m_new[j].tanh();
                }
                (h_new, Some(Tensor::vector(m_new)))
            }
            CellKind::Gru => {
                let mut z = vec![0.0; 2 * r];
                kernel.spmv_rows(&xh, 0..2 * r, &mut z)?;
                add_bias(&mut z, &kb[..2 * r]);
                let u: Vec<f64> = z[..r].iter().map(|&v| sigmoid_scalar(v)).collect();
                let reset: Vec<f64> = z[r..].iter().map(|&v| sigmoid_scalar(v)).collect();
                let split = self.dims.word + self.dims.attn;
                for j in 0..r {
                    xh[split + j] = reset[j] * h[j];
                }
                let mut cand = vec![0.0; r];
                kernel.spmv_rows(&xh, 2 * r..3 * r, &mut cand)?;
                add_bias(&mut cand, &kb[2 * r..]);
                let h_new = (0..r)
                    .map(|j| {
                        let c = cand[j].tanh();
                        c + u[j] * (h[j] - c)
                    })
                    .collect();
                (h_new, None)
            }
        };
        let mut logits = self.matrix(LayerName::Logits).spmv(&h_new)?;
        add_bias(&mut logits, self.bias(LayerName::Logits));
        softmax_in_place(&mut logits);
        Ok((
            logits,
            DecoderState {
                h: Tensor::vector(h_new),
                m: m_new,
                prev_token: state.prev_token,
            },
        ))
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.matrix.rows() * l.matrix.cols()).sum()
    }

    pub fn nnz(&self) -> usize {
        self.layers.iter().map(|l| l.matrix.nnz()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, self.cell.as_str());
        let d = &self.dims;
        for v in [d.rnn, d.word, d.attn, d.vocab, d.feat, d.raw] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            put_str(&mut out, l.name.as_str());
            let m = &l.matrix;
            for v in [m.rows(), m.cols(), m.nnz()] {
                out.extend_from_slice(&(v as u64).to_le_bytes());
            }
            for &p in m.row_ptr() {
                out.extend_from_slice(&(p as u64).to_le_bytes());
            }
            for &c in m.col_idx() {
                out.extend_from_slice(&c.to_le_bytes());
            }
            put_f64s(&mut out, m.values());
            put_vec(&mut out, l.bias.as_deref().unwrap_or(&[]));
        }
        out.extend_from_slice(&(self.encoder.weight.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.encoder.weight.cols() as u64).to_le_bytes());
        put_f64s(&mut out, self.encoder.weight.data());
        put_vec(&mut out, self.encoder.bias.data());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for t in &self.vocab {
            put_str(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        if read_bytes(&mut r, 4)? != MAGIC {
            return Err(Error::Format("not a sparse model file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported sparse model version {version}")));
        }
        let cell = CellKind::parse(&get_str(&mut r)?)?;
        let mut dv = [0usize; 6];
        for v in &mut dv {
            *v = read_u64(&mut r)? as usize;
        }
        let dims = Dims {
            rnn: dv[0],
            word: dv[1],
            attn: dv[2],
            vocab: dv[3],
            feat: dv[4],
            raw: dv[5],
        };
        let count = read_u32(&mut r)? as usize;
        if count != LayerName::ALL.len() {
            return Err(Error::Format(format!("expected 8 layers, found {count}")));
        }
        let mut layers = Vec::with_capacity(count);
        for want in LayerName::ALL {
            let name = LayerName::parse(&get_str(&mut r)?)?;
            if name != want {
                return Err(Error::Format(format!("layer `{}` out of order", name.as_str())));
            }
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let nnz = read_u64(&mut r)? as usize;
            if nnz > r.len() / 12 || rows + 1 > r.len() / 8 {
                return Err(Error::Format("unexpected end of file".into()));
            }
            let row_ptr = (0..=rows)
                .map(|_| read_u64(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let col_idx = (0..nnz).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            let values = get_f64s(&mut r, nnz)?;
            let bias = get_vec(&mut r)?;
            layers.push(SparseLayer {
                name,
                matrix: SparseMatrix::from_parts(rows, cols, row_ptr, col_idx, values)?,
                bias: (!bias.is_empty()).then_some(bias),
            });
        }
        let er = read_u64(&mut r)? as usize;
        let ec = read_u64(&mut r)? as usize;
        if er.saturating_mul(ec) > r.len() / 8 {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let weight = Tensor::new(vec![er, ec], get_f64s(&mut r, er * ec)?)?;
        let bias = Tensor::vector(get_vec(&mut r)?);
        let n_vocab = read_u32(&mut r)? as usize;
        let vocab = (0..n_vocab).map(|_| get_str(&mut r)).collect::<Result<Vec<_>>>()?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after sparse model".into()));
        }
        let model = SparseModel {
            dims,
            cell,
            layers,
            encoder: Encoder { weight, bias },
            vocab,
        };
        // Shapes are validated through the dense view.
        model.to_dense()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let n = read_u32(r)? as usize;
    String::from_utf8(read_bytes(r, n)?).map_err(|e| Error::Format(e.to_string()))
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_f64s(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

fn put_vec(out: &mut Vec<u8>, xs: &[f64]) {
    out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    put_f64s(out, xs);
}

fn get_vec(r: &mut &[u8]) -> Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    if n > r.len() / 8 {
        return Err(Error::Format("unexpected end of file".into()));
    }
    get_f64s(r, n)
}
