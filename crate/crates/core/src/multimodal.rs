//! The last decoder layer: two routing networks (global and regional
//! features), the gate that fuses them, and the feed-forward sub-layer on top.
//! Also hosts the ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::routing::{self, DccnParams, Prepared, RoutingTrace};
use crate::tensor::{Tensor, Var};
use crate::transformer::{FfnSublayer, Fwd, LayerNorm};

/// Which visual pathway the last decoder layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No visual input; the last layer is a plain transformer layer.
    TextOnly,
    /// Context-guided routing over both granularities, gated.
    #[default]
    Full,
    GlobalOnly,
    RegionalOnly,
    /// Attention replaces routing on the global features.
    AttentionGlobal,
    /// Attention replaces routing on the regional features.
    AttentionRegional,
    AttentionBoth,
    /// Routing by agreement with squashing and no context, both granularities.
    ConventionalRouting,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::TextOnly,
        Variant::Full,
        Variant::GlobalOnly,
        Variant::RegionalOnly,
        Variant::AttentionGlobal,
        Variant::AttentionRegional,
        Variant::AttentionBoth,
        Variant::ConventionalRouting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TextOnly => "text-only",
            Variant::Full => "full",
            Variant::GlobalOnly => "global-only",
            Variant::RegionalOnly => "regional-only",
            Variant::AttentionGlobal => "attention-global",
            Variant::AttentionRegional => "attention-regional",
            Variant::AttentionBoth => "attention-both",
            Variant::ConventionalRouting => "conventional-routing",
        }
    }

    fn pathways(self) -> (Option<Pathway>, Option<Pathway>) {
        use Pathway::*;
        match self {
            Variant::TextOnly => (None, None),
            Variant::Full => (Some(Routing), Some(Routing)),
            Variant::GlobalOnly => (Some(Routing), None),
            Variant::RegionalOnly => (None, Some(Routing)),
            Variant::AttentionGlobal => (Some(Attention), Some(Routing)),
            Variant::AttentionRegional => (Some(Routing), Some(Attention)),
            Variant::AttentionBoth => (Some(Attention), Some(Attention)),
            Variant::ConventionalRouting => (Some(Conventional), Some(Conventional)),
        }
    }

    pub fn uses_visual(self) -> bool {
        self != Variant::TextOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pathway {
    Routing,
    Conventional,
    Attention,
}

/// Single-head dot-product attention from the decoder context over the rows
/// of a feature matrix, scaled by `1/sqrt(d_w)`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureAttention {
    /// `[d_c, d_w]`, maps the context into capsule space.
    pub wq: ParamId,
    /// `[d_w, d_c]`, maps the attended features back.
    pub wo: ParamId,
    pub d_w: usize,
}

impl FeatureAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_c: usize, d_w: usize, seed: u64) -> Self {
        FeatureAttention {
            wq: store.glorot(&format!("{name}.WQ"), &[d_c, d_w], d_w, d_c, seed),
            wo: store.glorot(&format!("{name}.WO"), &[d_w, d_c], d_c, d_w, seed),
            d_w,
        }
    }

    pub fn forward<'g>(&self, f: Fwd<'_, 'g>, context: Var<'g>, feats: &FeatureInput<'g>) -> Result<Var<'g>> {
        let q = context.matmul_t(f.var(self.wq), false, true)?;
        let mut scores = q.matmul_t(feats.rows, false, true)?.scale(1.0 / (self.d_w as f64).sqrt());
        if let Some(m) = feats.additive_mask {
            scores = scores.add(m)?;
        }
        let attended = scores.softmax(2)?.matmul(feats.rows)?;
        attended.matmul_t(f.var(self.wo), false, true)
    }
}

/// `alpha = sigmoid(W_g m_g + W_r m_r)`, one gate value per component.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub wg: ParamId,
    pub wr: ParamId,
}

impl GateParams {
    pub fn new(store: &mut ParamStore, name: &str, d_w: usize, seed: u64) -> Self {
        GateParams {
            wg: store.glorot(&format!("{name}.Wg"), &[d_w, d_w], d_w, d_w, seed),
            wr: store.glorot(&format!("{name}.Wr"), &[d_w, d_w], d_w, d_w, seed),
        }
    }
}

/// How the gate value is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    /// Every gate component is this constant.
    Forced(f64),
}

/// `alpha ⊙ m_g + (1 - alpha) ⊙ m_r`. Returns the fused vectors and `alpha`.
pub fn fuse_gate<'g>(
    f: Fwd<'_, 'g>,
    p: &GateParams,
    m_g: Var<'g>,
    m_r: Var<'g>,
    mode: GateMode,
) -> Result<(Var<'g>, Var<'g>)> {
    let alpha = match mode {
        GateMode::Learned => m_g
            .matmul_t(f.var(p.wg), false, true)?
            .add(m_r.matmul_t(f.var(p.wr), false, true)?)?
            .sigmoid(),
        GateMode::Forced(a) => {
            if m_g.shape() != m_r.shape() {
                return Err(Error::dim("gate", &m_g.shape(), &m_r.shape()));
            }
            f.g.constant(Tensor::full(&m_g.shape(), a))
        }
    };
    let fused = Var::blend(alpha, m_g, m_r)?;
    Ok((fused, alpha))
}

/// One feature matrix entered into the graph.
#[derive(Clone)]
pub struct FeatureInput<'g> {
    /// `[B, N_u, d_c]`
    pub rows: Var<'g>,
    /// Which rows take part, when some are padding.
    pub valid: Option<Vec<Vec<bool>>>,
    /// `[B, 1, N_u]`, `-inf` on padding rows.
    additive_mask: Option<Var<'g>>,
}

impl<'g> FeatureInput<'g> {
    pub fn new(rows: Var<'g>, valid: Option<Vec<Vec<bool>>>) -> Result<Self> {
        let s = rows.shape();
        if s.len() != 3 {
            return Err(Error::dim("feature rows", &s, &[0, 0, 0]));
        }
        let additive_mask = match &valid {
            Some(v) => {
                if v.len() != s[0] || v.iter().any(|r| r.len() != s[1]) {
                    return Err(Error::dim("feature mask", &[v.len(), v.first().map_or(0, Vec::len)], &s[..2]));
                }
                let mut m = Tensor::zeros(&[s[0], 1, s[1]]);
                for (b, r) in v.iter().enumerate() {
                    for (i, &ok) in r.iter().enumerate() {
                        if !ok {
                            m.set(&[b, 0, i], f64::NEG_INFINITY);
                        }
                    }
                }
                Some(rows.graph().constant(m))
            }
            None => None,
        };
        Ok(FeatureInput { rows, valid, additive_mask })
    }
}

/// Global and regional features of a batch.
#[derive(Clone)]
pub struct VisualInput<'g> {
    pub global: Option<FeatureInput<'g>>,
    pub regional: Option<FeatureInput<'g>>,
}

/// Per-iteration routing traces and gate values from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    pub global: Option<RoutingTrace>,
    pub regional: Option<RoutingTrace>,
    /// `[B, T, d_w]` gate values, when both granularities are fused.
    pub alpha: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
enum Branch {
    Routing(DccnParams),
    Conventional(DccnParams),
    Attention(FeatureAttention),
}

/// Per-batch feature work that can be reused across decoding steps.
pub struct PreparedVisual<'g> {
    global: Option<PreparedBranch<'g>>,
    regional: Option<PreparedBranch<'g>>,
}

enum PreparedBranch<'g> {
    Routing(Prepared<'g>),
    Attention(FeatureInput<'g>),
}

#[derive(Debug, Clone)]
pub struct MultimodalLayer {
    pub variant: Variant,
    global: Option<Branch>,
    regional: Option<Branch>,
    pub gate: Option<GateParams>,
    /// Norm of the residual around the fused visual context.
    pub norm: Option<LayerNorm>,
}

/// Sizes the multimodal layer needs.
#[derive(Debug, Clone, Copy)]
pub struct MultimodalDims {
    pub d_w: usize,
    pub d_c: usize,
    pub n_v: usize,
    pub iterations: usize,
}

impl MultimodalLayer {
    /// Creates only the parameters `variant` uses, under `prefix`.
    pub fn new(store: &mut ParamStore, prefix: &str, variant: Variant, d: MultimodalDims, seed: u64) -> Result<Self> {
        let (pg, pr) = variant.pathways();
        let mut branch = |p: Option<Pathway>, gran: &str| -> Result<Option<Branch>> {
            let name = format!("{prefix}.{gran}");
            Ok(match p {
                None => None,
                Some(Pathway::Routing) => {
                    Some(Branch::Routing(DccnParams::new(store, &name, d.d_c, d.d_w, d.n_v, d.iterations, seed)?))
                }
                Some(Pathway::Conventional) => {
                    Some(Branch::Conventional(DccnParams::new(store, &name, d.d_c, d.d_w, d.n_v, d.iterations, seed)?))
                }
                Some(Pathway::Attention) => Some(Branch::Attention(FeatureAttention::new(
                    store,
                    &format!("{prefix}.{gran}_attn"),
                    d.d_c,
                    d.d_w,
                    seed,
                ))),
            })
        };
        let global = branch(pg, "dccn_global")?;
        let regional = branch(pr, "dccn_regional")?;
        let gate = (global.is_some() && regional.is_some()).then(|| GateParams::new(store, &format!("{prefix}.gate"), d.d_w, seed));
        let norm = variant.uses_visual().then(|| LayerNorm::new(store, &format!("{prefix}.ln_mm"), d.d_w));
        Ok(MultimodalLayer { variant, global, regional, gate, norm })
    }

    /// Context-guided routing networks as `(global, regional)`.
    pub fn routing_params(&self) -> (Option<DccnParams>, Option<DccnParams>) {
        let pick = |b: Option<Branch>| match b {
            Some(Branch::Routing(p)) => Some(p),
            _ => None,
        };
        (pick(self.global), pick(self.regional))
    }

    /// Feature-side work for the whole batch.
    pub fn prepare<'g>(&self, f: Fwd<'_, 'g>, visual: Option<&VisualInput<'g>>) -> Result<PreparedVisual<'g>> {
        let one = |b: Option<Branch>, input: Option<&FeatureInput<'g>>, gran: &str| -> Result<Option<PreparedBranch<'g>>> {
            let Some(b) = b else { return Ok(None) };
            let input = input.ok_or_else(|| Error::Input(format!("variant {} needs {gran} features", self.variant)))?;
            Ok(Some(match b {
                Branch::Routing(p) | Branch::Conventional(p) => {
                    PreparedBranch::Routing(routing::prepare(f, &p, input.rows, input.valid.as_deref())?)
                }
                Branch::Attention(_) => PreparedBranch::Attention(input.clone()),
            }))
        };
        Ok(PreparedVisual {
            global: one(self.global, visual.and_then(|v| v.global.as_ref()), "global")?,
            regional: one(self.regional, visual.and_then(|v| v.regional.as_ref()), "regional")?,
        })
    }

    fn run_branch<'g>(
        f: Fwd<'_, 'g>,
        b: Branch,
        prep: &PreparedBranch<'g>,
        context: Var<'g>,
        trace: Option<&mut RoutingTrace>,
    ) -> Result<Var<'g>> {
        match (b, prep) {
            (Branch::Routing(p), PreparedBranch::Routing(pr)) => routing::route(f, &p, pr, context, trace),
            (Branch::Conventional(p), PreparedBranch::Routing(pr)) => {
                let t = context.shape()[1];
                let out = routing::route_conventional(f, &p, pr, trace)?;
                // the same vector for every timestep
                out.add(f.g.constant(Tensor::zeros(&[1, t, 1])))
            }
            (Branch::Attention(a), PreparedBranch::Attention(input)) => a.forward(f, context, input),
            _ => unreachable!("prepared branch matches its parameters"),
        }
    }

    /// The fused visual context `M` for every column of `context`
    /// (`[B, T, d_w]`), or `None` for the text-only variant.
    pub fn visual_context<'g>(
        &self,
        f: Fwd<'_, 'g>,
        prep: &PreparedVisual<'g>,
        context: Var<'g>,
        gate_mode: GateMode,
        mut trace: Option<&mut LayerTrace>,
    ) -> Result<Option<Var<'g>>> {
        let mut side = |b: Option<Branch>, p: &Option<PreparedBranch<'g>>, global: bool| -> Result<Option<Var<'g>>> {
            let (Some(b), Some(p)) = (b, p.as_ref()) else { return Ok(None) };
            let mut rt = RoutingTrace::default();
            let out = Self::run_branch(f, b, p, context, trace.is_some().then_some(&mut rt))?;
            if let Some(t) = trace.as_deref_mut() {
                if !matches!(b, Branch::Attention(_)) {
                    *(if global { &mut t.global } else { &mut t.regional }) = Some(rt);
                }
            }
            Ok(Some(out))
        };
        let m_g = side(self.global, &prep.global, true)?;
        let m_r = side(self.regional, &prep.regional, false)?;
        Ok(match (m_g, m_r, self.gate) {
            (Some(g), Some(r), Some(gate)) => {
                let (fused, alpha) = fuse_gate(f, &gate, g, r, gate_mode)?;
                if let Some(t) = trace {
                    t.alpha = Some((*alpha.value()).clone());
                }
                Some(fused)
            }
            (Some(m), None, _) | (None, Some(m), _) => Some(m),
            _ => None,
        })
    }

    /// Last decoder layer from the source-side context `C` (`[B, T, d_w]`):
    /// `X = LN(C + Dropout(M))`, then `LN(X + Dropout(FFN(X)))`. The text-only
    /// variant skips the first step.
    pub fn forward<'g>(
        &self,
        f: Fwd<'_, 'g>,
        ffn: &FfnSublayer,
        prep: &PreparedVisual<'g>,
        context: Var<'g>,
        gate_mode: GateMode,
        trace: Option<&mut LayerTrace>,
    ) -> Result<Var<'g>> {
        let x = match self.visual_context(f, prep, context, gate_mode, trace)? {
            Some(m) => {
                let norm = self.norm.expect("visual variants own a norm");
                norm.forward(f, context.add(m.dropout(f.dropout)?)?)?
            }
            None => context,
        };
        ffn.forward(f, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("fancy".parse::<Variant>(), Err(Error::Config(_))));
    }
}
