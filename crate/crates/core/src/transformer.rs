//! Text backbone: embeddings, multi-head attention, position-wise feed-forward
//! layers, the encoder stack and the decoder up to the last layer's
//! source-target attention.
//!
//! Sequences are row-major: a batch of encoded sentences is `[batch, len, d]`
//! with one row per position. Weight matrices are stored `[out, in]` and applied
//! as `x * W^T`. Every sub-layer is wrapped post-norm:
//! `LayerNorm(x + Dropout(Sublayer(x)))`.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Forward-pass context: the graph, the bound parameters and the dropout rate.
#[derive(Clone, Copy)]
pub struct Fwd<'a, 'g> {
    pub g: &'g Graph,
    pub p: &'a Bound<'g>,
    pub dropout: f64,
}

impl<'g> Fwd<'_, 'g> {
    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.p.var(id)
    }

    fn drop(&self, x: Var<'g>) -> Result<Var<'g>> {
        x.dropout(self.dropout)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, seed: u64) -> Self {
        let w = store.glorot(&format!("{name}.W"), &[d_out, d_in], d_in, d_out, seed);
        let b = bias.then(|| store.zeros(&format!("{name}.b"), &[d_out]));
        Linear { w, b }
    }

    pub fn forward<'g>(&self, f: Fwd<'_, 'g>, x: Var<'g>) -> Result<Var<'g>> {
        let y = x.matmul_t(f.var(self.w), false, true)?;
        match self.b {
            Some(b) => y.add(f.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.ones(&format!("{name}.gain"), &[d]),
            bias: store.zeros(&format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward<'g>(&self, f: Fwd<'_, 'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(f.var(self.gain), f.var(self.bias), LAYER_NORM_EPS)
    }
}

/// Attention mask added to the score matrix: `0` where attention is allowed,
/// `-inf` where it is not. Shapes broadcast against `[batch, heads, queries, keys]`.
pub fn key_padding_mask(ids: &[Vec<u32>]) -> Tensor {
    let b = ids.len();
    let s = ids.first().map_or(0, Vec::len);
    let mut t = Tensor::zeros(&[b, 1, 1, s]);
    for (i, row) in ids.iter().enumerate() {
        for (k, &tok) in row.iter().enumerate() {
            if tok == PAD {
                t.set(&[i, 0, 0, k], f64::NEG_INFINITY);
            }
        }
    }
    t
}

pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[1, 1, t, t]);
    for q in 0..t {
        for k in q + 1..t {
            m.set(&[0, 0, q, k], f64::NEG_INFINITY);
        }
    }
    m
}

/// Multi-head attention with per-head projections packed into `d x d`
/// matrices (head `h` owns rows `h*d/heads .. (h+1)*d/heads`) and an output
/// map `W^C`. Scores are scaled by `1/sqrt(d)`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wc: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {d_model} is not divisible by {heads} heads"
            )));
        }
        let mut mat = |n: &str| store.glorot(&format!("{name}.{n}"), &[d_model, d_model], d_model, d_model, seed);
        Ok(MultiHeadAttention {
            wq: mat("WQ"),
            wk: mat("WK"),
            wv: mat("WV"),
            wc: mat("WC"),
            heads,
            d_model,
        })
    }

    fn split_heads<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let (b, t) = (s[0], s[1]);
        x.reshape(&[b, t, self.heads, self.d_model / self.heads])?
            .permute(&[0, 2, 1, 3])
    }

    /// `q` is `[batch, queries, d]`, `kv` is `[batch, keys, d]`. Returns the
    /// output and the attention weights `[batch, heads, queries, keys]`.
    pub fn forward_with_weights<'g>(
        &self,
        f: Fwd<'_, 'g>,
        q: Var<'g>,
        kv: Var<'g>,
        mask: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let qs = q.shape();
        let (b, tq) = (qs[0], qs[1]);
        let qh = self.split_heads(q.matmul_t(f.var(self.wq), false, true)?)?;
        let kh = self.split_heads(kv.matmul_t(f.var(self.wk), false, true)?)?;
        let vh = self.split_heads(kv.matmul_t(f.var(self.wv), false, true)?)?;
        let mut scores = qh.matmul_t(kh, false, true)?.scale(1.0 / (self.d_model as f64).sqrt());
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let weights = scores.softmax(3)?;
        let heads = weights.matmul(vh)?;
        let cat = heads.permute(&[0, 2, 1, 3])?.reshape(&[b, tq, self.d_model])?;
        Ok((cat.matmul_t(f.var(self.wc), false, true)?, weights))
    }

    pub fn forward<'g>(&self, f: Fwd<'_, 'g>, q: Var<'g>, kv: Var<'g>, mask: Option<Var<'g>>) -> Result<Var<'g>> {
        Ok(self.forward_with_weights(f, q, kv, mask)?.0)
    }
}

/// `relu(x W1^T + b1) W2^T + b2`, applied to every position independently.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, seed: u64) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.1"), d_model, d_ff, true, seed),
            outer: Linear::new(store, &format!("{name}.2"), d_ff, d_model, true, seed),
        }
    }

    pub fn forward<'g>(&self, f: Fwd<'_, 'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.inner.forward(f, x)?.relu();
        self.outer.forward(f, h)
    }
}

/// Token embedding plus sinusoidal position encoding.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub d_model: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, d_model: usize, seed: u64) -> Self {
        let tname = format!("{name}.table");
        let mut r = rng::for_name(seed, &tname);
        let data = (0..vocab * d_model).map(|_| StandardNormal.sample(&mut r)).collect();
        let table = store.add(tname, Tensor::new(vec![vocab, d_model], data).expect("embedding shape"));
        Embedding { table, vocab, d_model }
    }

    /// `ids` is a rectangular `[batch][len]` block.
    pub fn forward<'g>(&self, f: Fwd<'_, 'g>, ids: &[Vec<u32>]) -> Result<Var<'g>> {
        let b = ids.len();
        let t = ids.first().map_or(0, Vec::len);
        if b == 0 || t == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        let mut flat = Vec::with_capacity(b * t);
        for row in ids {
            if row.len() != t {
                return Err(Error::Input("ragged token block".into()));
            }
            for &id in row {
                if id as usize >= self.vocab {
                    return Err(Error::Input(format!("token id {id} outside vocabulary of {}", self.vocab)));
                }
                flat.push(id as usize);
            }
        }
        let emb = f.var(self.table).select(0, &flat)?.reshape(&[b, t, self.d_model])?;
        let pe = f.g.constant(positional_encoding(t, self.d_model));
        f.drop(emb.add(pe)?)
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for k in 0..d {
            let pair = (k / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
            t.set(&[pos, k], if k % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn forward<'g>(&self, f: Fwd<'_, 'g>, x: Var<'g>, mask: Option<Var<'g>>) -> Result<Var<'g>> {
        let a = self.self_attn.forward(f, x, x, mask)?;
        let h = self.ln1.forward(f, x.add(f.drop(a)?)?)?;
        let o = self.ffn.forward(f, h)?;
        self.ln2.forward(f, h.add(f.drop(o)?)?)
    }
}

/// The two attention sub-layers every decoder layer has.
#[derive(Debug, Clone, Copy)]
pub struct DecoderAttention {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub src_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
}

impl DecoderAttention {
    /// Returns the self-attention states and the source-side context.
    pub fn forward<'g>(
        &self,
        f: Fwd<'_, 'g>,
        y: Var<'g>,
        memory: Var<'g>,
        self_mask: Var<'g>,
        src_mask: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let a = self.self_attn.forward(f, y, y, Some(self_mask))?;
        let h = self.ln1.forward(f, y.add(f.drop(a)?)?)?;
        let c = self.src_attn.forward(f, h, memory, src_mask)?;
        let c = self.ln2.forward(f, h.add(f.drop(c)?)?)?;
        Ok((h, c))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnSublayer {
    pub ffn: FeedForward,
    pub ln: LayerNorm,
}

impl FfnSublayer {
    pub fn forward<'g>(&self, f: Fwd<'_, 'g>, x: Var<'g>) -> Result<Var<'g>> {
        let o = self.ffn.forward(f, x)?;
        self.ln.forward(f, x.add(f.drop(o)?)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerDims {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

/// Encoder stack plus the decoder up to (and including) the last layer's
/// source-target attention. The last layer's feed-forward sub-layer belongs to
/// the multimodal layer that follows.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub dims: TransformerDims,
    pub src_embed: Embedding,
    pub tgt_embed: Embedding,
    pub encoder: Vec<EncoderLayer>,
    /// Attention sub-layers of all decoder layers.
    pub decoder: Vec<DecoderAttention>,
    /// Feed-forward sub-layers of decoder layers `0..dec_layers-1`.
    pub decoder_ffn: Vec<FfnSublayer>,
    /// Feed-forward sub-layer of the last decoder layer.
    pub last_ffn: FfnSublayer,
    /// Output projection `[tgt_vocab, d_model]`.
    pub output: ParamId,
}

/// Decoder activations handed to the last layer.
pub struct DecoderPrefix<'g> {
    /// Output of decoder layer `L-1` (the input to the last layer).
    pub previous: Var<'g>,
    /// Self-attention states of the last layer.
    pub hidden: Var<'g>,
    /// Source-side context of the last layer, `[batch, tgt_len, d]`.
    pub context: Var<'g>,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, dims: TransformerDims, seed: u64) -> Result<Self> {
        let TransformerDims { d_model: d, heads, d_ff, .. } = dims;
        if dims.enc_layers == 0 || dims.dec_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dimension {d} is not divisible by {heads} heads")));
        }
        let src_embed = Embedding::new(store, "src_embed", dims.src_vocab, d, seed);
        let tgt_embed = Embedding::new(store, "tgt_embed", dims.tgt_vocab, d, seed);
        let mut encoder = Vec::new();
        for l in 0..dims.enc_layers {
            let p = format!("encoder.layer{l}");
            encoder.push(EncoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{p}.selfattn"), d, heads, seed)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d_ff, seed),
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
            });
        }
        let mut decoder = Vec::new();
        let mut decoder_ffn = Vec::new();
        for l in 0..dims.dec_layers {
            let p = format!("decoder.layer{l}");
            decoder.push(DecoderAttention {
                self_attn: MultiHeadAttention::new(store, &format!("{p}.selfattn"), d, heads, seed)?,
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                src_attn: MultiHeadAttention::new(store, &format!("{p}.srcattn"), d, heads, seed)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
            });
            if l + 1 < dims.dec_layers {
                decoder_ffn.push(FfnSublayer {
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d_ff, seed),
                    ln: LayerNorm::new(store, &format!("{p}.ln3"), d),
                });
            }
        }
        let last = format!("decoder.layer{}", dims.dec_layers - 1);
        let last_ffn = FfnSublayer {
            ffn: FeedForward::new(store, &format!("{last}.ffn"), d, d_ff, seed),
            ln: LayerNorm::new(store, &format!("{last}.ln3"), d),
        };
        let output = store.glorot("output.W", &[dims.tgt_vocab, d], d, dims.tgt_vocab, seed);
        Ok(Transformer {
            dims,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            decoder_ffn,
            last_ffn,
            output,
        })
    }

    /// Encodes a padded `[batch][len]` id block into `[batch, len, d]`.
    pub fn encode<'g>(&self, f: Fwd<'_, 'g>, src: &[Vec<u32>]) -> Result<Var<'g>> {
        let mut x = self.src_embed.forward(f, src)?;
        let mask = f.g.constant(key_padding_mask(src));
        for layer in &self.encoder {
            x = layer.forward(f, x, Some(mask))?;
        }
        Ok(x)
    }

    /// Runs decoder layers `0..L-1` in full and the last layer's two attention
    /// sub-layers. `tgt_in` starts with BOS (teacher forcing or a decoded prefix).
    pub fn decode_prefix<'g>(
        &self,
        f: Fwd<'_, 'g>,
        tgt_in: &[Vec<u32>],
        memory: Var<'g>,
        src: &[Vec<u32>],
    ) -> Result<DecoderPrefix<'g>> {
        let t = tgt_in.first().map_or(0, Vec::len);
        let mut y = self.tgt_embed.forward(f, tgt_in)?;
        let self_mask = f.g.constant(causal_mask(t));
        let src_mask = f.g.constant(key_padding_mask(src));
        let last = self.decoder.len() - 1;
        for (l, attn) in self.decoder.iter().enumerate() {
            let (h, c) = attn.forward(f, y, memory, self_mask, Some(src_mask))?;
            if l == last {
                return Ok(DecoderPrefix {
                    previous: y,
                    hidden: h,
                    context: c,
                });
            }
            y = self.decoder_ffn[l].forward(f, c)?;
        }
        unreachable!("decoder has at least one layer")
    }

    /// Logits `[batch, len, tgt_vocab]` from final decoder states.
    pub fn logits<'g>(&self, f: Fwd<'_, 'g>, states: Var<'g>) -> Result<Var<'g>> {
        states.matmul_t(f.var(self.output), false, true)
    }
}
