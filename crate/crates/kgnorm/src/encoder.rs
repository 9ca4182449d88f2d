//! Compact trainable sequence encoder with exact manual gradients.
//!
//! One single-head attention block plus a tanh FFN, residual connections
//! around both, and an output projection down to the embedding dimension.
//! No dropout or layer normalization, so forward is deterministic and the
//! hand-written backward matches central finite differences to float
//! precision. Checkpoints are a little-endian binary format with magic `KGE1`.

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tokenizer::TokenSequence;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_distr::Normal;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"KGE1";

/// Tensor shape configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    /// Vocabulary size V.
    pub vocab: usize,
    /// Hidden width d of the attention block.
    pub d_model: usize,
    /// FFN inner width f.
    pub d_ffn: usize,
    /// Output embedding dimension l.
    pub d_embed: usize,
    /// Fixed sequence length.
    pub max_len: usize,
}

/// All trainable tensors of the encoder plus per-relation transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F: Scalar> {
    pub dims: EncoderDims,
    /// Relation labels in inventory order; `rel_mats[i]`/`rel_vecs[i]` belong
    /// to `relations[i]`.
    pub relations: Vec<String>,
    pub token_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub w_q: Array2<F>,
    pub w_k: Array2<F>,
    pub w_v: Array2<F>,
    pub w_o: Array2<F>,
    pub ffn_w1: Array2<F>,
    pub ffn_b1: Array1<F>,
    pub ffn_w2: Array2<F>,
    pub ffn_b2: Array1<F>,
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
    pub rel_mats: Vec<Array2<F>>,
    pub rel_vecs: Vec<Array1<F>>,
}

/// Gradients (or any moment accumulator) with the same shapes as the params.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<F: Scalar> {
    pub token_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub w_q: Array2<F>,
    pub w_k: Array2<F>,
    pub w_v: Array2<F>,
    pub w_o: Array2<F>,
    pub ffn_w1: Array2<F>,
    pub ffn_b1: Array1<F>,
    pub ffn_w2: Array2<F>,
    pub ffn_b2: Array1<F>,
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
    pub rel_mats: Vec<Array2<F>>,
    pub rel_vecs: Vec<Array1<F>>,
}

/// Per-token hidden vectors after the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<F: Scalar> {
    /// `max_len x l`; rows at pad positions exist but poolings never read them.
    pub h: Array2<F>,
    pub mask: Vec<u8>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F: Scalar> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    attn: Array2<F>,
    ctx: Array2<F>,
    x1: Array2<F>,
    u: Array2<F>,
    x2: Array2<F>,
}

fn sample_normal<F: Scalar, R: Rng>(rng: &mut R, std: f64) -> F {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    crate::num::from_f64(rng.sample(dist))
}

fn normal_mat<F: Scalar, R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<F> {
    Array2::from_shape_fn(shape, |_| sample_normal(rng, std))
}

impl<F: Scalar> EncoderParams<F> {
    /// Random initialization: embeddings and projections ~ N(0, 0.02^2),
    /// relation matrices identity + N(0, 0.01^2) noise, biases zero.
    pub fn init<R: Rng>(dims: EncoderDims, relations: Vec<String>, rng: &mut R) -> Self {
        let (v, d, f, l, ml) = (
            dims.vocab,
            dims.d_model,
            dims.d_ffn,
            dims.d_embed,
            dims.max_len,
        );
        let token_emb = normal_mat(rng, (v, d), 0.02);
        let pos_emb = normal_mat(rng, (ml, d), 0.02);
        let w_q = normal_mat(rng, (d, d), 0.02);
        let w_k = normal_mat(rng, (d, d), 0.02);
        let w_v = normal_mat(rng, (d, d), 0.02);
        let w_o = normal_mat(rng, (d, d), 0.02);
        let ffn_w1 = normal_mat(rng, (d, f), 0.02);
        let ffn_w2 = normal_mat(rng, (f, d), 0.02);
        let out_w = normal_mat(rng, (d, l), 0.02);
        let rel_mats = (0..relations.len())
            .map(|_| {
                let mut m: Array2<F> = normal_mat(rng, (l, l), 0.01);
                for i in 0..l {
                    m[[i, i]] += F::one();
                }
                m
            })
            .collect();
        let rel_vecs = (0..relations.len())
            .map(|_| Array1::from_shape_fn(l, |_| sample_normal(rng, 0.02)))
            .collect();
        EncoderParams {
            dims,
            relations,
            token_emb,
            pos_emb,
            w_q,
            w_k,
            w_v,
            w_o,
            ffn_w1,
            ffn_b1: Array1::zeros(f),
            ffn_w2,
            ffn_b2: Array1::zeros(d),
            out_w,
            out_b: Array1::zeros(l),
            rel_mats,
            rel_vecs,
        }
    }

    /// All-zero params (used in tests and as a degenerate baseline).
    pub fn zeros(dims: EncoderDims, relations: Vec<String>) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = Self::init(dims, relations, &mut rng);
        for (_, t) in p.tensors_mut() {
            t.fill(F::zero());
        }
        p
    }

    /// Tensors in checkpoint field order, with stable names.
    pub fn tensors(&self) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = vec![
            ("token_emb".into(), self.token_emb.as_slice().unwrap()),
            ("pos_emb".into(), self.pos_emb.as_slice().unwrap()),
            ("w_q".into(), self.w_q.as_slice().unwrap()),
            ("w_k".into(), self.w_k.as_slice().unwrap()),
            ("w_v".into(), self.w_v.as_slice().unwrap()),
            ("w_o".into(), self.w_o.as_slice().unwrap()),
            ("ffn_w1".into(), self.ffn_w1.as_slice().unwrap()),
            ("ffn_b1".into(), self.ffn_b1.as_slice().unwrap()),
            ("ffn_w2".into(), self.ffn_w2.as_slice().unwrap()),
            ("ffn_b2".into(), self.ffn_b2.as_slice().unwrap()),
            ("out_w".into(), self.out_w.as_slice().unwrap()),
            ("out_b".into(), self.out_b.as_slice().unwrap()),
        ];
        for (label, m) in self.relations.iter().zip(&self.rel_mats) {
            out.push((format!("rel_mat:{label}"), m.as_slice().unwrap()));
        }
        for (label, v) in self.relations.iter().zip(&self.rel_vecs) {
            out.push((format!("rel_vec:{label}"), v.as_slice().unwrap()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> = vec![
            ("token_emb".into(), self.token_emb.as_slice_mut().unwrap()),
            ("pos_emb".into(), self.pos_emb.as_slice_mut().unwrap()),
            ("w_q".into(), self.w_q.as_slice_mut().unwrap()),
            ("w_k".into(), self.w_k.as_slice_mut().unwrap()),
            ("w_v".into(), self.w_v.as_slice_mut().unwrap()),
            ("w_o".into(), self.w_o.as_slice_mut().unwrap()),
            ("ffn_w1".into(), self.ffn_w1.as_slice_mut().unwrap()),
            ("ffn_b1".into(), self.ffn_b1.as_slice_mut().unwrap()),
            ("ffn_w2".into(), self.ffn_w2.as_slice_mut().unwrap()),
            ("ffn_b2".into(), self.ffn_b2.as_slice_mut().unwrap()),
            ("out_w".into(), self.out_w.as_slice_mut().unwrap()),
            ("out_b".into(), self.out_b.as_slice_mut().unwrap()),
        ];
        for (label, m) in self.relations.iter().zip(self.rel_mats.iter_mut()) {
            out.push((format!("rel_mat:{label}"), m.as_slice_mut().unwrap()));
        }
        for (label, v) in self.relations.iter().zip(self.rel_vecs.iter_mut()) {
            out.push((format!("rel_vec:{label}"), v.as_slice_mut().unwrap()));
        }
        out
    }
}

impl<F: Scalar> ParamGrads<F> {
    pub fn zeros_like(p: &EncoderParams<F>) -> Self {
        ParamGrads {
            token_emb: Array2::zeros(p.token_emb.raw_dim()),
            pos_emb: Array2::zeros(p.pos_emb.raw_dim()),
            w_q: Array2::zeros(p.w_q.raw_dim()),
            w_k: Array2::zeros(p.w_k.raw_dim()),
            w_v: Array2::zeros(p.w_v.raw_dim()),
            w_o: Array2::zeros(p.w_o.raw_dim()),
            ffn_w1: Array2::zeros(p.ffn_w1.raw_dim()),
            ffn_b1: Array1::zeros(p.ffn_b1.raw_dim()),
            ffn_w2: Array2::zeros(p.ffn_w2.raw_dim()),
            ffn_b2: Array1::zeros(p.ffn_b2.raw_dim()),
            out_w: Array2::zeros(p.out_w.raw_dim()),
            out_b: Array1::zeros(p.out_b.raw_dim()),
            rel_mats: p
                .rel_mats
                .iter()
                .map(|m| Array2::zeros(m.raw_dim()))
                .collect(),
            rel_vecs: p
                .rel_vecs
                .iter()
                .map(|v| Array1::zeros(v.raw_dim()))
                .collect(),
        }
    }

    /// Same order and names as [`EncoderParams::tensors`].
    pub fn tensors(&self, relations: &[String]) -> Vec<(String, &[F])> {
        let mut out: Vec<(String, &[F])> = vec![
            ("token_emb".into(), self.token_emb.as_slice().unwrap()),
            ("pos_emb".into(), self.pos_emb.as_slice().unwrap()),
            ("w_q".into(), self.w_q.as_slice().unwrap()),
            ("w_k".into(), self.w_k.as_slice().unwrap()),
            ("w_v".into(), self.w_v.as_slice().unwrap()),
            ("w_o".into(), self.w_o.as_slice().unwrap()),
            ("ffn_w1".into(), self.ffn_w1.as_slice().unwrap()),
            ("ffn_b1".into(), self.ffn_b1.as_slice().unwrap()),
            ("ffn_w2".into(), self.ffn_w2.as_slice().unwrap()),
            ("ffn_b2".into(), self.ffn_b2.as_slice().unwrap()),
            ("out_w".into(), self.out_w.as_slice().unwrap()),
            ("out_b".into(), self.out_b.as_slice().unwrap()),
        ];
        for (label, m) in relations.iter().zip(&self.rel_mats) {
            out.push((format!("rel_mat:{label}"), m.as_slice().unwrap()));
        }
        for (label, v) in relations.iter().zip(&self.rel_vecs) {
            out.push((format!("rel_vec:{label}"), v.as_slice().unwrap()));
        }
        out
    }

    pub fn tensors_mut(&mut self, relations: &[String]) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> = vec![
            ("token_emb".into(), self.token_emb.as_slice_mut().unwrap()),
            ("pos_emb".into(), self.pos_emb.as_slice_mut().unwrap()),
            ("w_q".into(), self.w_q.as_slice_mut().unwrap()),
            ("w_k".into(), self.w_k.as_slice_mut().unwrap()),
            ("w_v".into(), self.w_v.as_slice_mut().unwrap()),
            ("w_o".into(), self.w_o.as_slice_mut().unwrap()),
            ("ffn_w1".into(), self.ffn_w1.as_slice_mut().unwrap()),
            ("ffn_b1".into(), self.ffn_b1.as_slice_mut().unwrap()),
            ("ffn_w2".into(), self.ffn_w2.as_slice_mut().unwrap()),
            ("ffn_b2".into(), self.ffn_b2.as_slice_mut().unwrap()),
            ("out_w".into(), self.out_w.as_slice_mut().unwrap()),
            ("out_b".into(), self.out_b.as_slice_mut().unwrap()),
        ];
        for (label, m) in relations.iter().zip(self.rel_mats.iter_mut()) {
            out.push((format!("rel_mat:{label}"), m.as_slice_mut().unwrap()));
        }
        for (label, v) in relations.iter().zip(self.rel_vecs.iter_mut()) {
            out.push((format!("rel_vec:{label}"), v.as_slice_mut().unwrap()));
        }
        out
    }
}

fn check_tokens<F: Scalar>(p: &EncoderParams<F>, tokens: &TokenSequence) -> Result<()> {
    if tokens.ids.len() != p.dims.max_len || tokens.attention_mask.len() != p.dims.max_len {
        return Err(Error::Shape(format!(
            "token sequence length {} does not match max_len {}",
            tokens.ids.len(),
            p.dims.max_len
        )));
    }
    if let Some(&bad) = tokens
        .ids
        .iter()
        .find(|&&id| (id as usize) >= p.dims.vocab)
    {
        return Err(Error::InvalidInput(format!(
            "token id {bad} out of range for vocab size {}",
            p.dims.vocab
        )));
    }
    if tokens.attention_mask.iter().all(|&m| m == 0) {
        return Err(Error::InvalidInput("all-pad token sequence".into()));
    }
    Ok(())
}

/// Forward pass returning hidden states and the cache needed by backward.
pub fn forward_cached<F: Scalar>(
    p: &EncoderParams<F>,
    tokens: &TokenSequence,
) -> Result<(HiddenStates<F>, ForwardCache<F>)> {
    check_tokens(p, tokens)?;
    let ml = p.dims.max_len;
    let d = p.dims.d_model;
    let mask = &tokens.attention_mask;

    let mut x: Array2<F> = Array2::zeros((ml, d));
    for t in 0..ml {
        let emb = p.token_emb.row(tokens.ids[t] as usize);
        let pos = p.pos_emb.row(t);
        for j in 0..d {
            x[[t, j]] = emb[j] + pos[j];
        }
    }

    let q = x.dot(&p.w_q);
    let k = x.dot(&p.w_k);
    let v = x.dot(&p.w_v);

    // scaled dot-product attention over non-pad keys; every row (including
    // pad queries) gets a valid distribution
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let raw = q.dot(&k.t());
    let mut attn: Array2<F> = Array2::zeros((ml, ml));
    for i in 0..ml {
        let mut max = F::neg_infinity();
        for j in 0..ml {
            if mask[j] == 1 {
                let s = raw[[i, j]] * scale;
                if s > max {
                    max = s;
                }
            }
        }
        let mut denom = F::zero();
        for j in 0..ml {
            if mask[j] == 1 {
                let e = ((raw[[i, j]] * scale) - max).exp();
                attn[[i, j]] = e;
                denom += e;
            }
        }
        for j in 0..ml {
            if mask[j] == 1 {
                attn[[i, j]] /= denom;
            }
        }
    }

    let ctx = attn.dot(&v);
    let x1 = &x + &ctx.dot(&p.w_o);
    let z = x1.dot(&p.ffn_w1) + &p.ffn_b1;
    let u = z.mapv(|e| e.tanh());
    let x2 = &x1 + &(u.dot(&p.ffn_w2) + &p.ffn_b2);
    let h = x2.dot(&p.out_w) + &p.out_b;

    Ok((
        HiddenStates {
            h,
            mask: mask.clone(),
        },
        ForwardCache {
            x,
            q,
            k,
            v,
            attn,
            ctx,
            x1,
            u,
            x2,
        },
    ))
}

/// Forward pass without keeping the cache.
pub fn forward<F: Scalar>(p: &EncoderParams<F>, tokens: &TokenSequence) -> Result<HiddenStates<F>> {
    forward_cached(p, tokens).map(|(h, _)| h)
}

/// Embedding from the `[CLS]` position (row 0).
pub fn cls_pool<F: Scalar>(hidden: &HiddenStates<F>) -> Array1<F> {
    hidden.h.row(0).to_owned()
}

/// Arithmetic mean over non-pad rows, `[CLS]` and `[SEP]` included.
pub fn avg_pool<F: Scalar>(hidden: &HiddenStates<F>) -> Array1<F> {
    let l = hidden.h.ncols();
    let mut sum: Array1<F> = Array1::zeros(l);
    let mut n = 0usize;
    for (t, &m) in hidden.mask.iter().enumerate() {
        if m == 1 {
            sum = sum + hidden.h.row(t);
            n += 1;
        }
    }
    sum / F::from_usize(n).unwrap()
}

/// Which pooling produces the term embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Cls,
    Avg,
}

impl Pooling {
    pub fn apply<F: Scalar>(self, hidden: &HiddenStates<F>) -> Array1<F> {
        match self {
            Pooling::Cls => cls_pool(hidden),
            Pooling::Avg => avg_pool(hidden),
        }
    }

    /// Upstream gradient on the pooled embedding spread back over H rows.
    pub fn backward<F: Scalar>(self, d_emb: &Array1<F>, mask: &[u8]) -> Array2<F> {
        let ml = mask.len();
        let l = d_emb.len();
        let mut dh: Array2<F> = Array2::zeros((ml, l));
        match self {
            Pooling::Cls => {
                dh.row_mut(0).assign(d_emb);
            }
            Pooling::Avg => {
                let n = mask.iter().filter(|&&m| m == 1).count();
                let inv = F::one() / F::from_usize(n).unwrap();
                for (t, &m) in mask.iter().enumerate() {
                    if m == 1 {
                        for j in 0..l {
                            dh[[t, j]] = d_emb[j] * inv;
                        }
                    }
                }
            }
        }
        dh
    }

    pub fn tag(self) -> u8 {
        match self {
            Pooling::Cls => 0,
            Pooling::Avg => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Pooling::Cls),
            1 => Some(Pooling::Avg),
            _ => None,
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pooling::Cls => write!(f, "cls"),
            Pooling::Avg => write!(f, "avg"),
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "avg" => Ok(Pooling::Avg),
            other => Err(Error::InvalidConfig(format!(
                "unknown pooling {other:?} (expected cls or avg)"
            ))),
        }
    }
}

/// Accumulate exact gradients of `sum(H * upstream)` into `grads`.
///
/// Rows of `token_emb` for ids absent from the sequence are untouched.
pub fn accumulate_backward<F: Scalar>(
    p: &EncoderParams<F>,
    tokens: &TokenSequence,
    cache: &ForwardCache<F>,
    upstream: &Array2<F>,
    grads: &mut ParamGrads<F>,
) -> Result<()> {
    let ml = p.dims.max_len;
    let d = p.dims.d_model;
    if upstream.nrows() != ml || upstream.ncols() != p.dims.d_embed {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            upstream.nrows(),
            upstream.ncols(),
            ml,
            p.dims.d_embed
        )));
    }
    let mask = &tokens.attention_mask;

    // output projection: H = X2 out_w + out_b
    grads.out_w = &grads.out_w + &cache.x2.t().dot(upstream);
    grads.out_b = &grads.out_b + &upstream.sum_axis(Axis(0));
    let dx2 = upstream.dot(&p.out_w.t());

    // FFN with residual: X2 = X1 + tanh(X1 W1 + b1) W2 + b2
    let df = &dx2;
    grads.ffn_w2 = &grads.ffn_w2 + &cache.u.t().dot(df);
    grads.ffn_b2 = &grads.ffn_b2 + &df.sum_axis(Axis(0));
    let du = df.dot(&p.ffn_w2.t());
    let dz = &du * &cache.u.mapv(|e| F::one() - e * e);
    grads.ffn_w1 = &grads.ffn_w1 + &cache.x1.t().dot(&dz);
    grads.ffn_b1 = &grads.ffn_b1 + &dz.sum_axis(Axis(0));
    let dx1 = &dx2 + &dz.dot(&p.ffn_w1.t());

    // attention with residual: X1 = X + (A V) W_O
    let d_attn_out = &dx1;
    grads.w_o = &grads.w_o + &cache.ctx.t().dot(d_attn_out);
    let dctx = d_attn_out.dot(&p.w_o.t());
    let da = dctx.dot(&cache.v.t());
    let dv = cache.attn.t().dot(&dctx);

    // softmax backward per query row, restricted to non-pad keys
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let mut dscores: Array2<F> = Array2::zeros((ml, ml));
    for i in 0..ml {
        let mut dot = F::zero();
        for j in 0..ml {
            if mask[j] == 1 {
                dot += cache.attn[[i, j]] * da[[i, j]];
            }
        }
        for j in 0..ml {
            if mask[j] == 1 {
                dscores[[i, j]] = cache.attn[[i, j]] * (da[[i, j]] - dot) * scale;
            }
        }
    }
    let dq = dscores.dot(&cache.k);
    let dk = dscores.t().dot(&cache.q);

    grads.w_q = &grads.w_q + &cache.x.t().dot(&dq);
    grads.w_k = &grads.w_k + &cache.x.t().dot(&dk);
    grads.w_v = &grads.w_v + &cache.x.t().dot(&dv);

    let dx = dx1 + dq.dot(&p.w_q.t()) + dk.dot(&p.w_k.t()) + dv.dot(&p.w_v.t());

    // embedding scatter
    for t in 0..ml {
        let id = tokens.ids[t] as usize;
        for j in 0..d {
            grads.token_emb[[id, j]] += dx[[t, j]];
            grads.pos_emb[[t, j]] += dx[[t, j]];
        }
    }
    Ok(())
}

/// One-shot backward: recomputes the forward pass internally.
pub fn backward<F: Scalar>(
    p: &EncoderParams<F>,
    tokens: &TokenSequence,
    upstream: &Array2<F>,
) -> Result<ParamGrads<F>> {
    let (_, cache) = forward_cached(p, tokens)?;
    let mut grads = ParamGrads::zeros_like(p);
    accumulate_backward(p, tokens, &cache, upstream, &mut grads)?;
    Ok(grads)
}

// ---- checkpoint i/o ----

/// Checkpoint contents for callers that dispatch on the stored precision tag.
pub enum AnyParams {
    F32(EncoderParams<f32>),
    F64(EncoderParams<f64>),
}

/// Serialize params: magic, precision tag, dims, relation labels, then all
/// tensors row-major little-endian in field order.
pub fn save_checkpoint<F: Scalar>(p: &EncoderParams<F>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u8(F::PRECISION_TAG)?;
    for dim in [
        p.dims.vocab,
        p.dims.d_model,
        p.dims.d_ffn,
        p.dims.d_embed,
        p.dims.max_len,
        p.relations.len(),
    ] {
        w.write_u32::<LittleEndian>(dim as u32)?;
    }
    for label in &p.relations {
        let bytes = label.as_bytes();
        w.write_u32::<LittleEndian>(bytes.len() as u32)?;
        w.write_all(bytes)?;
    }
    for (_, slice) in p.tensors() {
        F::write_slice(slice, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn checkpoint_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

struct Header {
    tag: u8,
    dims: EncoderDims,
    relations: Vec<String>,
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| checkpoint_err(path, "file too short"))?;
    if &magic != MAGIC {
        return Err(checkpoint_err(path, "bad magic bytes"));
    }
    let tag = r.read_u8()?;
    if tag > 1 {
        return Err(checkpoint_err(path, format!("unknown precision tag {tag}")));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let mut relations = Vec::with_capacity(dims[5]);
    for _ in 0..dims[5] {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let label = String::from_utf8(buf)
            .map_err(|_| checkpoint_err(path, "relation label is not UTF-8"))?;
        relations.push(label);
    }
    Ok(Header {
        tag,
        dims: EncoderDims {
            vocab: dims[0],
            d_model: dims[1],
            d_ffn: dims[2],
            d_embed: dims[3],
            max_len: dims[4],
        },
        relations,
    })
}

fn read_body<F: Scalar, R: Read>(
    r: &mut R,
    header: Header,
    path: &Path,
) -> Result<EncoderParams<F>> {
    let mut p = EncoderParams::<F>::zeros(header.dims, header.relations);
    for (name, slice) in p.tensors_mut() {
        let data = F::read_vec(r, slice.len())
            .map_err(|_| checkpoint_err(path, format!("truncated tensor {name}")))?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(checkpoint_err(path, format!("non-finite value in {name}")));
        }
        slice.copy_from_slice(&data);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(checkpoint_err(path, "trailing bytes after tensors"));
    }
    Ok(p)
}

/// Load a checkpoint of known precision; errors if the stored tag differs.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<EncoderParams<F>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r, path)?;
    if header.tag != F::PRECISION_TAG {
        return Err(checkpoint_err(
            path,
            format!(
                "precision tag {} does not match requested precision {}",
                header.tag,
                F::PRECISION_TAG
            ),
        ));
    }
    read_body(&mut r, header, path)
}

/// Load a checkpoint dispatching on the stored precision tag.
pub fn load_checkpoint_any(path: &Path) -> Result<AnyParams> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r, path)?;
    match header.tag {
        0 => Ok(AnyParams::F32(read_body(&mut r, header, path)?)),
        1 => Ok(AnyParams::F64(read_body(&mut r, header, path)?)),
        _ => unreachable!("tag validated in read_header"),
    }
}
