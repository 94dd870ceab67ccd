//! Context-guided dynamic routing between low-level capsules (rows of a visual
//! feature matrix) and high-level capsules, plus the conventional
//! squashing-routing variant.
//!
//! All timesteps of all sentences in a batch are routed at once. Shapes:
//!
//! | tensor | shape |
//! |---|---|
//! | context `C` | `[B, T, d_w]` |
//! | features `I` | `[B, N_u, d_c]` |
//! | `b`, `c`, `ρ` | `[B, N_v, T, N_u]` |
//! | `v` | `[B, N_v, T, d_c]` |
//! | `m` | `[B, N_v, T, d_w]` |
//!
//! The predictions `û_{j|i} = W_j u_i` are never materialized: with one
//! transform per high-level capsule, `Σ_i w_i û_{j|i} = W_j Σ_i w_i u_i` and
//! `û_{j|i} · v_j = u_i · (W_jᵀ v_j)`, which is far cheaper when there are many
//! capsules and few timesteps.
//!
//! Capsule rows are put in a canonical order before routing so that the
//! output does not depend on the order the rows were supplied in, down to the
//! last bit. Traces are reported in the caller's order.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use crate::transformer::Fwd;

/// Spread below which a vector counts as constant in the correlation.
pub const PCC_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct DccnParams {
    /// `[N_v, d_c, d_c]`, one transform per high-level capsule.
    pub wu: ParamId,
    /// `[d_c, d_w]`
    pub wm: ParamId,
    /// `[d_w, d_c]`
    pub wv: ParamId,
    /// `[d_w, N_v * d_w]`
    pub wf: ParamId,
    /// `[d_w]`
    pub bf: ParamId,
    pub n_v: usize,
    pub iterations: usize,
    pub d_c: usize,
    pub d_w: usize,
}

impl DccnParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_c: usize,
        d_w: usize,
        n_v: usize,
        iterations: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_v == 0 || iterations == 0 {
            return Err(Error::Config(format!(
                "routing needs at least one high-level capsule and one iteration (got N_v={n_v}, N_itr={iterations})"
            )));
        }
        if d_c < 2 {
            return Err(Error::Config(format!("capsule dimension {d_c} is too small for a correlation")));
        }
        Ok(DccnParams {
            wu: store.glorot(&format!("{name}.Wu"), &[n_v, d_c, d_c], d_c, d_c, seed),
            wm: store.glorot(&format!("{name}.Wm"), &[d_c, d_w], d_w, d_c, seed),
            wv: store.glorot(&format!("{name}.Wv"), &[d_w, d_c], d_c, d_w, seed),
            wf: store.glorot(&format!("{name}.Wf"), &[d_w, n_v * d_w], n_v * d_w, d_w, seed),
            bf: store.zeros(&format!("{name}.bf"), &[d_w]),
            n_v,
            iterations,
            d_c,
            d_w,
        })
    }
}

/// Pearson correlation with population moments; 0 when either vector is
/// constant.
pub fn pcc(u: &[f64], w: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mw = w.iter().sum::<f64>() / n;
    let (mut cov, mut vu, mut vw) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(w) {
        cov += (a - mu) * (b - mw);
        vu += (a - mu) * (a - mu);
        vw += (b - mw) * (b - mw);
    }
    let (su, sw) = ((vu / n).sqrt(), (vw / n).sqrt());
    if su <= PCC_EPS || sw <= PCC_EPS {
        0.0
    } else {
        cov / n / (su * sw)
    }
}

/// Routing state after one iteration, rows in the caller's capsule order.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    /// Coupling coefficients used in this iteration, `[B, N_v, T, N_u]`.
    pub c: Tensor,
    /// Correlations used for the weighted sum, `[B, N_v, T, N_u]`.
    pub rho: Tensor,
    /// Logits after this iteration's update, `[B, N_v, T, N_u]`.
    pub b: Tensor,
    /// High-level capsules `v_j`, `[B, N_v, T, d_c]`.
    pub v: Tensor,
    /// `|v_j|`, `[B, N_v, T]`.
    pub v_norm: Tensor,
    /// `|m_j|` after this iteration's update, `[B, N_v, T]`.
    pub m_norm: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct RoutingTrace {
    pub iterations: Vec<IterationTrace>,
    /// Which capsules took part, `[B][N_u]`.
    pub valid: Vec<Vec<bool>>,
}

/// Feature-side work that does not depend on the context: canonical ordering
/// and standardized capsules. Reusable across decoding steps.
pub struct Prepared<'g> {
    /// `[B, N_u, d_c]` capsules in canonical order.
    u: Var<'g>,
    /// `[B, N_u, d_c]` population z-scores of the capsules.
    zu: Var<'g>,
    /// `[B, 1, 1, N_u]`, 1 for capsules that take part.
    keep: Option<Var<'g>>,
    /// `order[b][k]` is the caller's row index of canonical row `k`.
    order: Vec<Vec<usize>>,
    valid: Vec<Vec<bool>>,
    batch: usize,
    n_u: usize,
}

impl Prepared<'_> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn canonical_order(feat: &Tensor, valid: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let s = feat.shape();
    let (n_u, d) = (s[1], s[2]);
    valid
        .iter()
        .enumerate()
        .map(|(b, ok)| {
            let row = |i: usize| &feat.data()[(b * n_u + i) * d..(b * n_u + i + 1) * d];
            let mut idx: Vec<usize> = (0..n_u).collect();
            idx.sort_by(|&x, &y| {
                ok[y].cmp(&ok[x]).then_with(|| {
                    row(x)
                        .iter()
                        .zip(row(y))
                        .map(|(p, q)| p.total_cmp(q))
                        .find(|o| *o != Ordering::Equal)
                        .unwrap_or(Ordering::Equal)
                })
            });
            idx
        })
        .collect()
}

fn check_finite(v: Var<'_>, what: &str, iteration: usize) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { what: what.into(), iteration })
    }
}

/// Maps a `[B, N_v, T, N_u]` tensor from canonical capsule order back to the
/// caller's order.
fn unsort(t: &Tensor, order: &[Vec<usize>]) -> Tensor {
    let s = t.shape();
    let n_u = s[3];
    let per_b = s[1] * s[2];
    let mut out = Tensor::zeros(s);
    for (b, ord) in order.iter().enumerate() {
        for r in 0..per_b {
            let base = (b * per_b + r) * n_u;
            for (k, &i) in ord.iter().enumerate() {
                out.data_mut()[base + i] = t.data()[base + k];
            }
        }
    }
    out
}

fn row_norms(t: &Tensor) -> Tensor {
    let s = t.shape();
    let d = s[s.len() - 1];
    let data = t.data().chunks(d).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    Tensor::new(s[..s.len() - 1].to_vec(), data).expect("norm shape")
}

/// Prepares `[B, N_u, d_c]` features for routing. `valid` marks the rows that
/// take part (all of them when `None`).
pub fn prepare<'g>(
    f: Fwd<'_, 'g>,
    p: &DccnParams,
    features: Var<'g>,
    valid: Option<&[Vec<bool>]>,
) -> Result<Prepared<'g>> {
    let s = features.shape();
    if s.len() != 3 || s[2] != p.d_c {
        return Err(Error::dim("route features", &s, &[0, 0, p.d_c]));
    }
    let (batch, n_u, d_c) = (s[0], s[1], s[2]);
    if n_u == 0 {
        return Err(Error::Input("routing needs at least one low-level capsule".into()));
    }
    let valid: Vec<Vec<bool>> = match valid {
        Some(v) => {
            if v.len() != batch || v.iter().any(|r| r.len() != n_u) {
                return Err(Error::dim("route mask", &[v.len(), v.first().map_or(0, Vec::len)], &[batch, n_u]));
            }
            v.to_vec()
        }
        None => vec![vec![true; n_u]; batch],
    };
    let order = canonical_order(&features.value(), &valid);
    let identity = order.iter().all(|o| o.iter().enumerate().all(|(k, &i)| k == i));
    let u = if identity {
        features
    } else {
        let flat: Vec<usize> = order
            .iter()
            .enumerate()
            .flat_map(|(b, o)| o.iter().map(move |&i| b * n_u + i))
            .collect();
        features.reshape(&[batch * n_u, d_c])?.select(0, &flat)?.reshape(&[batch, n_u, d_c])?
    };
    let all_valid = valid.iter().all(|r| r.iter().all(|&x| x));
    let keep = if all_valid {
        None
    } else {
        let mut m = Tensor::zeros(&[batch, 1, 1, n_u]);
        for (b, o) in order.iter().enumerate() {
            for (k, &i) in o.iter().enumerate() {
                if valid[b][i] {
                    m.set(&[b, 0, 0, k], 1.0);
                }
            }
        }
        Some(f.g.constant(m))
    };
    Ok(Prepared {
        u,
        zu: u.standardize(PCC_EPS),
        keep,
        order,
        valid,
        batch,
        n_u,
    })
}

/// `v_j = Σ_i w_ij û_{j|i}` for weights `w` of shape `[B, N_v, T, N_u]`.
fn high_level<'g>(f: Fwd<'_, 'g>, p: &DccnParams, prep: &Prepared<'g>, w: Var<'g>, t: usize) -> Result<Var<'g>> {
    let (b, n_v, d_c) = (prep.batch, p.n_v, p.d_c);
    let pooled = w.reshape(&[b, n_v * t, prep.n_u])?.matmul(prep.u)?;
    let wu = f.var(p.wu);
    if n_v == 1 {
        return pooled.matmul_t(wu.reshape(&[d_c, d_c])?, false, true)?.reshape(&[b, 1, t, d_c]);
    }
    pooled
        .reshape(&[b, n_v, t, d_c])?
        .permute(&[1, 0, 2, 3])?
        .reshape(&[n_v, b * t, d_c])?
        .matmul_t(wu, false, true)?
        .reshape(&[n_v, b, t, d_c])?
        .permute(&[1, 0, 2, 3])
}

/// `û_{j|i} · v_j` for `v` of shape `[B, N_v, T, d_c]`, as `[B, N_v, T, N_u]`.
fn agreement<'g>(f: Fwd<'_, 'g>, p: &DccnParams, prep: &Prepared<'g>, v: Var<'g>, t: usize) -> Result<Var<'g>> {
    let (b, n_v, d_c) = (prep.batch, p.n_v, p.d_c);
    let wu = f.var(p.wu);
    let back = if n_v == 1 {
        v.reshape(&[b, t, d_c])?.matmul(wu.reshape(&[d_c, d_c])?)?
    } else {
        v.permute(&[1, 0, 2, 3])?
            .reshape(&[n_v, b * t, d_c])?
            .matmul(wu)?
            .reshape(&[n_v, b, t, d_c])?
            .permute(&[1, 0, 2, 3])?
            .reshape(&[b, n_v * t, d_c])?
    };
    back.matmul_t(prep.u, false, true)?.reshape(&[b, n_v, t, prep.n_u])
}

/// `tanh(pcc(u_i, W_m m_j))` for every `(b, j, t, i)`.
fn correlation<'g>(f: Fwd<'_, 'g>, p: &DccnParams, prep: &Prepared<'g>, m: Var<'g>, t: usize) -> Result<Var<'g>> {
    let (b, n_v, d_c) = (prep.batch, p.n_v, p.d_c);
    let zw = m.matmul_t(f.var(p.wm), false, true)?.standardize(PCC_EPS);
    zw.reshape(&[b, n_v * t, d_c])?
        .matmul_t(prep.zu, false, true)?
        .scale(1.0 / d_c as f64)
        .tanh()
        .reshape(&[b, n_v, t, prep.n_u])
}

/// Routes every timestep of `context` (`[B, T, d_w]`) over the prepared
/// capsules. Returns the fused multimodal context `[B, T, d_w]`.
pub fn route<'g>(
    f: Fwd<'_, 'g>,
    p: &DccnParams,
    prep: &Prepared<'g>,
    context: Var<'g>,
    mut trace: Option<&mut RoutingTrace>,
) -> Result<Var<'g>> {
    let s = context.shape();
    if s.len() != 3 || s[0] != prep.batch || s[2] != p.d_w {
        return Err(Error::dim("route context", &s, &[prep.batch, 0, p.d_w]));
    }
    check_finite(context, "routing context", 0)?;
    let (bsz, t, n_v, n_u, d_w) = (prep.batch, s[1], p.n_v, prep.n_u, p.d_w);

    let c0 = context.reshape(&[bsz, 1, t, d_w])?;
    let mut m = if n_v == 1 { c0 } else { Var::concat(&vec![c0; n_v], 1)? };
    let mut rho = correlation(f, p, prep, m, t)?;
    let mut b = f.g.constant(Tensor::zeros(&[bsz, n_v, t, n_u]));
    if let Some(tr) = trace.as_deref_mut() {
        tr.iterations.clear();
        tr.valid = prep.valid.clone();
    }

    for itr in 1..=p.iterations {
        let c = b.softmax(1)?;
        let mut w = c.add(rho)?;
        if let Some(keep) = prep.keep {
            w = w.mul(keep)?;
        }
        let v = high_level(f, p, prep, w, t)?;
        check_finite(v, "high-level capsules", itr)?;
        let gate = v.matmul_t(f.var(p.wv), false, true)?;
        m = m.mul(gate)?;
        check_finite(m, "multimodal context capsules", itr)?;
        let rho_used = rho;
        rho = correlation(f, p, prep, m, t)?;
        b = b.add(rho.mul(agreement(f, p, prep, v, t)?)?)?;
        check_finite(b, "routing logits", itr)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.iterations.push(IterationTrace {
                c: unsort(&c.value(), &prep.order),
                rho: unsort(&rho_used.value(), &prep.order),
                b: unsort(&b.value(), &prep.order),
                v: (*v.value()).clone(),
                v_norm: row_norms(&v.value()),
                m_norm: row_norms(&m.value()),
            });
        }
    }

    let cat = m.permute(&[0, 2, 1, 3])?.reshape(&[bsz, t, n_v * d_w])?;
    let out = cat.matmul_t(f.var(p.wf), false, true)?.add(f.var(p.bf))?;
    check_finite(out, "routing output", p.iterations)?;
    Ok(out)
}

/// Routing by agreement with squashing and no context. The result depends only
/// on the features and is returned as `[B, 1, d_w]`, broadcasting over time.
pub fn route_conventional<'g>(
    f: Fwd<'_, 'g>,
    p: &DccnParams,
    prep: &Prepared<'g>,
    mut trace: Option<&mut RoutingTrace>,
) -> Result<Var<'g>> {
    let (bsz, n_v, n_u, d_w) = (prep.batch, p.n_v, prep.n_u, p.d_w);
    let mut b = f.g.constant(Tensor::zeros(&[bsz, n_v, 1, n_u]));
    if let Some(tr) = trace.as_deref_mut() {
        tr.iterations.clear();
        tr.valid = prep.valid.clone();
    }
    let mut v = None;
    for itr in 1..=p.iterations {
        let mut c = b.softmax(1)?;
        let c_used = c;
        if let Some(keep) = prep.keep {
            c = c.mul(keep)?;
        }
        let vj = high_level(f, p, prep, c, 1)?.squash();
        check_finite(vj, "high-level capsules", itr)?;
        b = b.add(agreement(f, p, prep, vj, 1)?)?;
        check_finite(b, "routing logits", itr)?;
        if let Some(tr) = trace.as_deref_mut() {
            let zeros = Tensor::zeros(&[bsz, n_v, 1, n_u]);
            tr.iterations.push(IterationTrace {
                c: unsort(&c_used.value(), &prep.order),
                rho: zeros,
                b: unsort(&b.value(), &prep.order),
                v: (*vj.value()).clone(),
                v_norm: row_norms(&vj.value()),
                m_norm: Tensor::zeros(&[bsz, n_v, 1]),
            });
        }
        v = Some(vj);
    }
    let v = v.expect("at least one iteration");
    let mapped = v.matmul_t(f.var(p.wv), false, true)?.reshape(&[bsz, n_v * d_w])?;
    let out = mapped.matmul_t(f.var(p.wf), false, true)?.add(f.var(p.bf))?;
    check_finite(out, "routing output", p.iterations)?;
    out.reshape(&[bsz, 1, d_w])
}
