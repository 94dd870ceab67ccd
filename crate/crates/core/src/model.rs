//! The full translation model: text backbone plus the multimodal last layer.

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Vocab};
use crate::error::{Error, Result};
use crate::features::FeatureShape;
use crate::multimodal::{FeatureInput, GateMode, LayerTrace, MultimodalDims, MultimodalLayer, Variant, VisualInput};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Mode, Tensor, Var};
use crate::transformer::{Fwd, Transformer, TransformerDims, BOS, EOS, PAD};

/// Whether region vectors come precomputed or are rebuilt from class
/// annotations with a learned embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClassEmbeddings {
    #[default]
    Frozen,
    Trainable,
}

/// Architecture. Defaults are the 4-layer, 8-head, 256-wide configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// High-level capsules per routing network.
    pub n_v: usize,
    pub iterations: usize,
    pub d_c: usize,
    pub global_rows: usize,
    pub regions: usize,
    /// Multiplier on global feature rows before routing. Unset means
    /// `1 / global_rows`, which keeps the capsule sum at the scale of one row.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_scale: Option<f64>,
    pub variant: Variant,
    pub class_embeddings: ClassEmbeddings,
    /// Size of the class vocabulary when class embeddings are trained.
    pub classes: usize,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 4,
            dec_layers: 4,
            heads: 8,
            d_model: 256,
            d_ff: 1024,
            n_v: 1,
            iterations: 3,
            d_c: 256,
            global_rows: 196,
            regions: 10,
            global_scale: None,
            variant: Variant::Full,
            class_embeddings: ClassEmbeddings::Frozen,
            classes: 0,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn feature_shape(&self) -> FeatureShape {
        FeatureShape { global_rows: self.global_rows, regions: self.regions, d_c: self.d_c }
    }

    pub fn effective_global_scale(&self) -> f64 {
        self.global_scale.unwrap_or(1.0 / self.global_rows.max(1) as f64)
    }
}

/// Parameter totals per component.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub transformer: usize,
    pub dccn_global: usize,
    pub dccn_regional: usize,
    pub gate: usize,
    /// Norm around the fused visual context.
    pub multimodal_norm: usize,
    /// Attention that replaces routing in the ablation variants.
    pub attention: usize,
    pub class_embeddings: usize,
    pub total: usize,
}

impl ParamCounts {
    /// Both routing networks (each including its fusion map), the gate and the
    /// norm around their output.
    pub fn dccn_related(&self) -> usize {
        self.dccn_global + self.dccn_regional + self.gate + self.multimodal_norm
    }
}

pub const MM_PREFIX: &str = "multimodal";

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub store: ParamStore,
    pub transformer: Transformer,
    pub multimodal: MultimodalLayer,
    pub class_table: Option<ParamId>,
}

/// Features of a batch, stacked.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    /// `[B, global_rows, d_c]`
    pub global: Tensor,
    /// `[B, regions, d_c]`
    pub regional: Tensor,
    pub valid: Vec<Vec<bool>>,
    /// `[B, regions, classes]`
    pub annotations: Option<Tensor>,
}

/// A padded batch ready for the forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub src: Vec<Vec<u32>>,
    /// BOS followed by the target.
    pub tgt_in: Vec<Vec<u32>>,
    /// Target followed by EOS, flattened to `B * T`.
    pub tgt_out: Vec<usize>,
    /// 1 on real target positions, 0 on padding.
    pub weights: Vec<f64>,
    pub features: Option<BatchFeatures>,
    /// Non-pad target tokens (EOS included).
    pub target_tokens: usize,
}

fn pad_block(rows: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            r.resize(width, PAD);
            r
        })
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig, src_vocab: Vocab, tgt_vocab: Vocab) -> Result<Self> {
        if let Some(s) = config.global_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("global_scale {s} must be finite and positive")));
            }
        }
        let mut store = ParamStore::new();
        let dims = TransformerDims {
            src_vocab: src_vocab.len(),
            tgt_vocab: tgt_vocab.len(),
            d_model: config.d_model,
            heads: config.heads,
            d_ff: config.d_ff,
            enc_layers: config.enc_layers,
            dec_layers: config.dec_layers,
        };
        let transformer = Transformer::new(&mut store, dims, config.seed)?;
        let mm_dims = MultimodalDims { d_w: config.d_model, d_c: config.d_c, n_v: config.n_v, iterations: config.iterations };
        let multimodal = MultimodalLayer::new(&mut store, MM_PREFIX, config.variant, mm_dims, config.seed)?;
        let class_table = match (config.class_embeddings, config.variant.uses_visual()) {
            (ClassEmbeddings::Trainable, true) => {
                if config.classes == 0 {
                    return Err(Error::Config("trainable class embeddings need `classes` > 0".into()));
                }
                Some(store.glorot("class_embed.table", &[config.classes, config.d_c], config.classes, config.d_c, config.seed))
            }
            _ => None,
        };
        Ok(Model { config, src_vocab, tgt_vocab, store, transformer, multimodal, class_table })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn count_params(&self) -> ParamCounts {
        let s = &self.store;
        let mut c = ParamCounts {
            dccn_global: s.count_prefix(&format!("{MM_PREFIX}.dccn_global.")),
            dccn_regional: s.count_prefix(&format!("{MM_PREFIX}.dccn_regional.")),
            gate: s.count_prefix(&format!("{MM_PREFIX}.gate.")),
            multimodal_norm: s.count_prefix(&format!("{MM_PREFIX}.ln_mm.")),
            attention: s.count_prefix(&format!("{MM_PREFIX}.dccn_global_attn."))
                + s.count_prefix(&format!("{MM_PREFIX}.dccn_regional_attn.")),
            class_embeddings: s.count_prefix("class_embed."),
            total: s.count_trainable(),
            ..Default::default()
        };
        c.transformer = c.total - c.dccn_related() - c.attention - c.class_embeddings;
        c
    }

    /// Pads and stacks the examples `indices` of `corpus`.
    pub fn batch(&self, corpus: &Corpus, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut src = Vec::new();
        let mut tgt_in = Vec::new();
        let mut tgt_outs = Vec::new();
        for &i in indices {
            let ex = &corpus.examples[i];
            if ex.src.is_empty() {
                return Err(Error::Input(format!("sentence {} has an empty source", ex.id)));
            }
            let mut s = self.src_vocab.encode(&ex.src);
            s.push(EOS);
            src.push(s);
            let t = self.tgt_vocab.encode(&ex.tgt);
            let mut ti = vec![BOS];
            ti.extend(&t);
            tgt_in.push(ti);
            let mut to = t;
            to.push(EOS);
            tgt_outs.push(to);
        }
        let src = pad_block(&src);
        let tgt_in = pad_block(&tgt_in);
        let width = tgt_in[0].len();
        let mut tgt_out = Vec::with_capacity(indices.len() * width);
        let mut weights = Vec::with_capacity(indices.len() * width);
        for to in &tgt_outs {
            for k in 0..width {
                let real = k < to.len();
                tgt_out.push(if real { to[k] as usize } else { PAD as usize });
                weights.push(if real { 1.0 } else { 0.0 });
            }
        }
        let target_tokens = tgt_outs.iter().map(Vec::len).sum();
        let features = if self.variant().uses_visual() { Some(self.stack_features(corpus, indices)?) } else { None };
        Ok(Batch { indices: indices.to_vec(), src, tgt_in, tgt_out, weights, features, target_tokens })
    }

    fn stack_features(&self, corpus: &Corpus, indices: &[usize]) -> Result<BatchFeatures> {
        let shape = self.config.feature_shape();
        let gscale = self.config.effective_global_scale();
        let b = indices.len();
        let mut global = Vec::with_capacity(b * shape.global_rows * shape.d_c);
        let mut regional = Vec::with_capacity(b * shape.regions * shape.d_c);
        let mut valid = Vec::with_capacity(b);
        let mut annotations: Option<Vec<f64>> = self.class_table.map(|_| Vec::new());
        for &i in indices {
            let f = corpus.features(i)?.ok_or_else(|| {
                Error::Input(format!(
                    "variant {} needs global and regional features, sentence {} has none",
                    self.variant(),
                    corpus.examples[i].id
                ))
            })?;
            f.validate(shape)?;
            global.extend(f.global.data().iter().map(|x| x * gscale));
            regional.extend_from_slice(f.regional.data());
            valid.push(f.mask.clone());
            if let Some(acc) = annotations.as_mut() {
                let a = f.annotations.as_ref().ok_or_else(|| {
                    Error::Input(format!("sentence {} has no class annotations for trainable class embeddings", corpus.examples[i].id))
                })?;
                if a.shape() != [shape.regions, self.config.classes] {
                    return Err(Error::dim("class annotations", a.shape(), &[shape.regions, self.config.classes]));
                }
                acc.extend_from_slice(a.data());
            }
        }
        Ok(BatchFeatures {
            global: Tensor::new(vec![b, shape.global_rows, shape.d_c], global)?,
            regional: Tensor::new(vec![b, shape.regions, shape.d_c], regional)?,
            valid,
            annotations: annotations.map(|a| Tensor::new(vec![b, shape.regions, self.config.classes], a)).transpose()?,
        })
    }

    fn visual_input<'g>(&self, f: Fwd<'_, 'g>, feats: Option<&BatchFeatures>) -> Result<Option<VisualInput<'g>>> {
        if !self.variant().uses_visual() {
            return Ok(None);
        }
        let feats = feats.ok_or_else(|| Error::Input(format!("variant {} needs visual features", self.variant())))?;
        let regional_rows = match (self.class_table, &feats.annotations) {
            (Some(table), Some(a)) => f.g.constant(a.clone()).matmul(f.var(table))?,
            _ => f.g.constant(feats.regional.clone()),
        };
        let all_valid = feats.valid.iter().all(|r| r.iter().all(|&x| x));
        Ok(Some(VisualInput {
            global: Some(FeatureInput::new(f.g.constant(feats.global.clone()), None)?),
            regional: Some(FeatureInput::new(regional_rows, (!all_valid).then(|| feats.valid.clone()))?),
        }))
    }

    /// Teacher-forced logits `[B, T, V]`.
    pub fn forward<'g>(
        &self,
        f: Fwd<'_, 'g>,
        batch: &Batch,
        gate: GateMode,
        trace: Option<&mut LayerTrace>,
    ) -> Result<Var<'g>> {
        let visual = self.visual_input(f, batch.features.as_ref())?;
        let memory = self.transformer.encode(f, &batch.src)?;
        let prefix = self.transformer.decode_prefix(f, &batch.tgt_in, memory, &batch.src)?;
        let prep = self.multimodal.prepare(f, visual.as_ref())?;
        let out = self.multimodal.forward(f, &self.transformer.last_ffn, &prep, prefix.context, gate, trace)?;
        self.transformer.logits(f, out)
    }

    /// Summed cross-entropy over real target tokens.
    pub fn loss<'g>(&self, f: Fwd<'_, 'g>, batch: &Batch) -> Result<Var<'g>> {
        let logits = self.forward(f, batch, GateMode::Learned, None)?;
        let s = logits.shape();
        logits.reshape(&[s[0] * s[1], s[2]])?.cross_entropy(&batch.tgt_out, &batch.weights)
    }

    /// Mean per-token loss of a batch without building a backward graph.
    pub fn eval_loss(&self, batch: &Batch) -> Result<f64> {
        let g = Graph::new(Mode::Inference);
        let p = self.store.bind(&g);
        let f = Fwd { g: &g, p: &p, dropout: 0.0 };
        Ok(self.loss(f, batch)?.value().data()[0] / batch.target_tokens as f64)
    }

    /// Data-dependent initialization of `W_v` in each context-guided routing
    /// network, so that the multiplicative update `m ⊙ W_v v` starts close to
    /// the identity.
    ///
    /// With `v̄` the mean first-iteration capsule over `batch`, `W_v` becomes
    /// `1 v̄ᵀ / |v̄|²` plus its random initialization rescaled so that the random
    /// part of `W_v v` has root-mean-square `spread`. Returns
    /// `(parameter name, |v̄|)` per network.
    pub fn calibrate_routing(&mut self, batch: &Batch, spread: f64) -> Result<Vec<(String, f64)>> {
        let (pg, pr) = self.multimodal.routing_params();
        if pg.is_none() && pr.is_none() {
            return Ok(Vec::new());
        }
        let trace = {
            let g = Graph::new(Mode::Inference);
            let p = self.store.bind(&g);
            let f = Fwd { g: &g, p: &p, dropout: 0.0 };
            let visual = self.visual_input(f, batch.features.as_ref())?;
            let memory = self.transformer.encode(f, &batch.src)?;
            let prefix = self.transformer.decode_prefix(f, &batch.tgt_in, memory, &batch.src)?;
            let prep = self.multimodal.prepare(f, visual.as_ref())?;
            let mut trace = LayerTrace::default();
            self.multimodal.visual_context(f, &prep, prefix.context, GateMode::Learned, Some(&mut trace))?;
            trace
        };
        let real: Vec<bool> = batch.weights.iter().map(|&w| w > 0.0).collect();
        let mut out = Vec::new();
        for (params, rt) in [(pg, trace.global.as_ref()), (pr, trace.regional.as_ref())] {
            let (Some(params), Some(rt)) = (params, rt) else { continue };
            let v = &rt.iterations[0].v;
            let (bsz, n_v, t, d_c) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
            let mut mean = vec![0.0; d_c];
            let mut count = 0usize;
            let mut spread_now = 0.0;
            let wv = self.store.get(params.wv).clone();
            let d_w = wv.shape()[0];
            for b in 0..bsz {
                for j in 0..n_v {
                    for k in 0..t {
                        if !real[b * t + k] {
                            continue;
                        }
                        let row = &v.data()[((b * n_v + j) * t + k) * d_c..][..d_c];
                        for (m, x) in mean.iter_mut().zip(row) {
                            *m += x;
                        }
                        for r in 0..d_w {
                            let a: f64 = wv.row(r).iter().zip(row).map(|(w, x)| w * x).sum();
                            spread_now += a * a;
                        }
                        count += 1;
                    }
                }
            }
            for m in mean.iter_mut() {
                *m /= count.max(1) as f64;
            }
            let norm2: f64 = mean.iter().map(|x| x * x).sum();
            let rms = (spread_now / (count.max(1) * d_w) as f64).sqrt();
            if norm2 > 0.0 && rms.is_finite() && rms > 0.0 {
                let w = self.store.get_mut(params.wv);
                for r in 0..d_w {
                    for (c, m) in mean.iter().enumerate() {
                        let x = &mut w.data_mut()[r * d_c + c];
                        *x = *x * spread / rms + m / norm2;
                    }
                }
            }
            out.push((self.store.name(params.wv).to_string(), norm2.sqrt()));
        }
        Ok(out)
    }

    /// Greedy decoding until EOS or `2 * source length + 10` tokens. Returns
    /// target ids without BOS/EOS, one row per batch entry.
    pub fn greedy(&self, batch: &Batch) -> Result<Vec<Vec<u32>>> {
        let g = Graph::new(Mode::Inference);
        let p = self.store.bind(&g);
        let f = Fwd { g: &g, p: &p, dropout: 0.0 };
        let visual = self.visual_input(f, batch.features.as_ref())?;
        let memory = self.transformer.encode(f, &batch.src)?;
        let prep = self.multimodal.prepare(f, visual.as_ref())?;
        let n = batch.src.len();
        let limits: Vec<usize> = batch
            .src
            .iter()
            .map(|s| 2 * s.iter().filter(|&&t| t != PAD && t != EOS).count() + 10)
            .collect();
        let mut ys: Vec<Vec<u32>> = vec![vec![BOS]; n];
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        let vocab = self.tgt_vocab.len();
        let longest = limits.iter().copied().max().unwrap_or(0);
        for step in 0..longest {
            let prefix = self.transformer.decode_prefix(f, &ys, memory, &batch.src)?;
            let last = prefix.context.select(1, &[step])?;
            let h = self.multimodal.forward(f, &self.transformer.last_ffn, &prep, last, GateMode::Learned, None)?;
            let logits = self.transformer.logits(f, h)?.value();
            for b in 0..n {
                let row = &logits.data()[b * vocab..(b + 1) * vocab];
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                let tok = best as u32;
                if !done[b] {
                    if tok == EOS {
                        done[b] = true;
                    } else {
                        out[b].push(tok);
                        if out[b].len() >= limits[b] {
                            done[b] = true;
                        }
                    }
                }
                ys[b].push(if done[b] { PAD } else { tok });
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}
