use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use super::{ModelConfig, NmtError};
use crate::bpe::{BOS_ID, EOS_ID};
use crate::loss::ProbDist;
use crate::scalar::Scalar;
use crate::segment::TokenSequence;
use crate::{rng_from_seed, DrdaRng};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ln {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Attn {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct EncLayer {
    ln1: Ln,
    attn: Attn,
    ln2: Ln,
    ffn: Ffn,
}

#[derive(Debug, Clone, PartialEq)]
struct DecLayer {
    ln1: Ln,
    self_attn: Attn,
    ln2: Ln,
    cross: Attn,
    ln3: Ln,
    ffn: Ffn,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed: usize,
    out: usize,
    enc: Vec<EncLayer>,
    enc_ln: Ln,
    dec: Vec<DecLayer>,
    dec_ln: Ln,
}

/// Pre-LN Transformer encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq<T: Scalar> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Matrix<T>>,
    layout: Layout,
}

struct Builder<'a, T: Scalar> {
    names: Vec<String>,
    params: Vec<Matrix<T>>,
    rng: &'a mut DrdaRng,
}

impl<T: Scalar> Builder<'_, T> {
    fn push(&mut self, name: String, m: Matrix<T>) -> usize {
        self.names.push(name);
        self.params.push(m);
        self.params.len() - 1
    }

    fn xavier(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let m = Matrix::from_fn(rows, cols, |_, _| T::lit(self.rng.random_range(-limit..limit)));
        self.push(name, m)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.push(name, Matrix::zeros(rows, cols))
    }

    fn ln(&mut self, name: &str, d: usize) -> Ln {
        let g = self.push(format!("{name}.g"), Matrix::from_vec(1, d, vec![T::one(); d]));
        let b = self.zeros(format!("{name}.b"), 1, d);
        Ln { g, b }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.xavier(format!("{name}.q"), d, d),
            k: self.xavier(format!("{name}.k"), d, d),
            v: self.xavier(format!("{name}.v"), d, d),
            o: self.xavier(format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Ffn {
        Ffn {
            w1: self.xavier(format!("{name}.w1"), d, hidden),
            b1: self.zeros(format!("{name}.b1"), 1, hidden),
            w2: self.xavier(format!("{name}.w2"), hidden, d),
            b2: self.zeros(format!("{name}.b2"), 1, d),
        }
    }
}

/// The shared source/target embedding. The view for granularity `q` is the
/// first `q` rows of one buffer.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingMatrix<'a, T: Scalar> {
    matrix: &'a Matrix<T>,
}

impl<'a, T: Scalar> EmbeddingMatrix<'a, T> {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    /// Rows `0..q` as one borrowed slice, or `None` when `q` exceeds the matrix.
    pub fn view(&self, q: usize) -> Option<&'a [T]> {
        (q <= self.rows()).then(|| &self.matrix.as_slice()[..q * self.dim()])
    }

    pub fn vector(&self, id: u32) -> &'a [T] {
        self.matrix.row(id as usize)
    }

    pub fn matrix(&self) -> &'a Matrix<T> {
        self.matrix
    }
}

fn positional_encoding<T: Scalar>(n: usize, d: usize) -> Matrix<T> {
    Matrix::from_fn(n, d, |pos, i| {
        let angle = pos as f64 / 10_000f64.powf((i - i % 2) as f64 / d as f64);
        T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<T: Scalar> Seq2Seq<T> {
    /// Freshly initialised model; the same config (including seed) gives the
    /// same weights.
    pub fn new(config: ModelConfig) -> Result<Self, NmtError> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let d = config.d_model;
        let rows = config.embedding_rows();
        let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("valid deviation");
        let embedding = Matrix::from_fn(rows, d, |_, _| T::lit(normal.sample(&mut rng)));
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: &mut rng,
        };
        let embed = b.push("embed".into(), embedding);
        let out = b.xavier("out".into(), d, config.prime_size);
        let enc = (0..config.n_layers)
            .map(|l| EncLayer {
                ln1: b.ln(&format!("enc.{l}.ln1"), d),
                attn: b.attn(&format!("enc.{l}.self"), d),
                ln2: b.ln(&format!("enc.{l}.ln2"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let enc_ln = b.ln("enc.ln", d);
        let dec = (0..config.n_layers)
            .map(|l| DecLayer {
                ln1: b.ln(&format!("dec.{l}.ln1"), d),
                self_attn: b.attn(&format!("dec.{l}.self"), d),
                ln2: b.ln(&format!("dec.{l}.ln2"), d),
                cross: b.attn(&format!("dec.{l}.cross"), d),
                ln3: b.ln(&format!("dec.{l}.ln3"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim),
            })
            .collect();
        let dec_ln = b.ln("dec.ln", d);
        let Builder { names, params, .. } = b;
        Ok(Seq2Seq {
            config,
            names,
            params,
            layout: Layout {
                embed,
                out,
                enc,
                enc_ln,
                dec,
                dec_ln,
            },
        })
    }

    /// Rebuild from named parameters; shapes must match a model built from
    /// `config`.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Matrix<T>)>) -> Result<Self, NmtError> {
        let mut model = Seq2Seq::new(config)?;
        if named.len() != model.params.len() {
            return Err(NmtError::Checkpoint(format!(
                "{} parameters, expected {}",
                named.len(),
                model.params.len()
            )));
        }
        for (i, (name, m)) in named.into_iter().enumerate() {
            if name != model.names[i] || m.shape() != model.params[i].shape() {
                return Err(NmtError::Checkpoint(format!(
                    "parameter {i}: got {name} {:?}, expected {} {:?}",
                    m.shape(),
                    model.names[i],
                    model.params[i].shape()
                )));
            }
            model.params[i] = m;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Matrix<T>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|m| m.as_slice().len()).sum()
    }

    pub fn embedding(&self) -> EmbeddingMatrix<'_, T> {
        EmbeddingMatrix {
            matrix: &self.params[self.layout.embed],
        }
    }

    /// Output classes: the prime vocabulary.
    pub fn classes(&self) -> usize {
        self.config.prime_size
    }

    /// Set the output projection to zero so every prediction is uniform.
    /// Used to calibrate the initial loss against `ln(classes)`.
    pub fn zero_output_layer(&mut self) {
        let out = self.layout.out;
        let (r, c) = self.params[out].shape();
        self.params[out] = Matrix::zeros(r, c);
    }

    /// Teacher-forced next-token distributions for `tgt_prefix` followed by
    /// end of sentence; `tgt_prefix.len() + 1` positions. Dropout is off.
    pub fn forward(&self, src: &TokenSequence, tgt_prefix: &TokenSequence) -> Result<ProbDist<T>, NmtError> {
        let mut tape = Tape::new(self.params.len());
        let mut pass = Pass::new(self, &mut tape, None);
        let enc = pass.encode(&src.ids, src.vocab_size)?;
        let dec_in = decoder_input(&tgt_prefix.ids);
        let logits = pass.decode(enc, &dec_in)?;
        let lv = tape.value(logits);
        Ok(ProbDist::softmax(lv.rows(), lv.cols(), lv.as_slice())?)
    }
}

/// `<s>` followed by the target ids.
pub(crate) fn decoder_input(tgt: &[u32]) -> Vec<u32> {
    std::iter::once(BOS_ID).chain(tgt.iter().copied()).collect()
}

/// Target ids followed by `</s>`.
pub(crate) fn append_eos(tgt: &[u32]) -> Vec<u32> {
    tgt.iter().copied().chain(std::iter::once(EOS_ID)).collect()
}

/// One forward computation recorded on a tape. With `dropout` set the pass
/// is in training mode.
pub(crate) struct Pass<'t, 'p, T: Scalar> {
    model: &'p Seq2Seq<T>,
    pub(crate) tape: &'t mut Tape<'p, T>,
    dropout: Option<(DrdaRng, f64)>,
}

impl<'t, 'p, T: Scalar> Pass<'t, 'p, T> {
    pub(crate) fn new(model: &'p Seq2Seq<T>, tape: &'t mut Tape<'p, T>, dropout: Option<(DrdaRng, f64)>) -> Self {
        let dropout = dropout.filter(|(_, p)| *p > 0.0);
        Pass { model, tape, dropout }
    }

    fn p(&mut self, id: usize) -> Var {
        self.tape.param(id, &self.model.params[id])
    }

    fn drop(&mut self, x: Var) -> Var {
        let Some((rng, p)) = self.dropout.as_mut() else {
            return x;
        };
        let p = *p;
        let keep = T::lit(1.0 / (1.0 - p));
        let (r, c) = self.tape.value(x).shape();
        let mask = Matrix::from_fn(r, c, |_, _| if rng.random_bool(p) { T::zero() } else { keep });
        self.tape.mul_const(x, mask)
    }

    fn ln(&mut self, x: Var, ln: Ln) -> Var {
        let g = self.p(ln.g);
        let b = self.p(ln.b);
        self.tape.layer_norm(x, g, b)
    }

    fn embed(&mut self, ids: &[u32], size: usize) -> Result<Var, NmtError> {
        let rows = self.model.embedding().rows();
        if size > rows {
            return Err(NmtError::Config(format!(
                "granularity {size} exceeds the {rows}-row embedding"
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= size) {
            return Err(NmtError::Vocabulary { id, size });
        }
        let d = self.model.config.d_model;
        let table = self.p(self.model.layout.embed);
        let x = self.tape.gather(table, ids);
        let x = self.tape.scale(x, T::lit((d as f64).sqrt()));
        let pe = self.tape.constant(positional_encoding(ids.len(), d));
        let x = self.tape.add(x, pe);
        Ok(self.drop(x))
    }

    fn attention(&mut self, xq: Var, xkv: Var, a: Attn, causal: bool) -> Var {
        let (wq, wk, wv, wo) = (self.p(a.q), self.p(a.k), self.p(a.v), self.p(a.o));
        let q = self.tape.matmul(xq, wq);
        let k = self.tape.matmul(xkv, wk);
        let v = self.tape.matmul(xkv, wv);
        let heads = self.model.config.n_heads;
        let dh = self.model.config.d_model / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        self.tape.col_slice(q, h * dh, dh),
                        self.tape.col_slice(k, h * dh, dh),
                        self.tape.col_slice(v, h * dh, dh),
                    )
                };
                let s = self.tape.matmul_bt(qh, kh);
                let s = self.tape.scale(s, scale);
                let att = self.tape.softmax(s, causal);
                self.tape.matmul(att, vh)
            })
            .collect();
        let cat = if heads == 1 { outs[0] } else { self.tape.concat_cols(&outs) };
        self.tape.matmul(cat, wo)
    }

    fn ffn(&mut self, x: Var, f: Ffn) -> Var {
        let (w1, b1, w2, b2) = (self.p(f.w1), self.p(f.b1), self.p(f.w2), self.p(f.b2));
        let h = self.tape.matmul(x, w1);
        let h = self.tape.add_row(h, b1);
        let h = self.tape.gelu(h);
        let o = self.tape.matmul(h, w2);
        self.tape.add_row(o, b2)
    }

    fn residual(&mut self, x: Var, branch: Var) -> Var {
        let b = self.drop(branch);
        self.tape.add(x, b)
    }

    /// Encoder states for `src` (end of sentence appended) read through the
    /// size-`size` embedding view.
    pub(crate) fn encode(&mut self, src: &[u32], size: usize) -> Result<Var, NmtError> {
        let ids = append_eos(src);
        let mut x = self.embed(&ids, size)?;
        for l in 0..self.model.layout.enc.len() {
            let layer = self.model.layout.enc[l].clone();
            let h = self.ln(x, layer.ln1);
            let a = self.attention(h, h, layer.attn, false);
            x = self.residual(x, a);
            let h = self.ln(x, layer.ln2);
            let f = self.ffn(h, layer.ffn);
            x = self.residual(x, f);
        }
        Ok(self.ln(x, self.model.layout.enc_ln))
    }

    /// Output logits (`dec_in.len() x classes`) given encoder states.
    pub(crate) fn decode(&mut self, enc: Var, dec_in: &[u32]) -> Result<Var, NmtError> {
        let mut x = self.embed(dec_in, self.model.config.prime_size)?;
        for l in 0..self.model.layout.dec.len() {
            let layer = self.model.layout.dec[l].clone();
            let h = self.ln(x, layer.ln1);
            let a = self.attention(h, h, layer.self_attn, true);
            x = self.residual(x, a);
            let h = self.ln(x, layer.ln2);
            let c = self.attention(h, enc, layer.cross, false);
            x = self.residual(x, c);
            let h = self.ln(x, layer.ln3);
            let f = self.ffn(h, layer.ffn);
            x = self.residual(x, f);
        }
        let x = self.ln(x, self.model.layout.dec_ln);
        let out = self.p(self.model.layout.out);
        Ok(self.tape.matmul(x, out))
    }
}
