//! Naive reference implementations.
//!
//! Everything here works on nested `Vec`s with explicit loops, one scalar at a
//! time, and shares no code with the tensor engine or the model modules. The
//! test suites compare the optimized paths against these functions.
//!
//! Matrices are `Vec<Vec<f64>>` in row order and map column vectors: a matrix
//! `w` with `w.len() == out` and `w[0].len() == in` sends `x` to `w * x`.

use std::collections::HashMap;

pub type Mat = Vec<Vec<f64>>;

fn mat_vec(w: &Mat, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for r in 0..w.len() {
        let mut s = 0.0;
        for c in 0..x.len() {
            s += w[r][c] * x[c];
        }
        out[r] = s;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut mx = f64::NEG_INFINITY;
    for &x in xs {
        if x > mx {
            mx = x;
        }
    }
    let mut out = vec![0.0; xs.len()];
    if mx == f64::NEG_INFINITY {
        return out;
    }
    let mut z = 0.0;
    for k in 0..xs.len() {
        out[k] = (xs[k] - mx).exp();
        z += out[k];
    }
    for v in out.iter_mut() {
        *v /= z;
    }
    out
}

/// Pearson correlation with population moments; 0 when either spread is
/// below 1e-12.
pub fn oracle_pcc(u: &[f64], w: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mut mu = 0.0;
    let mut mw = 0.0;
    for k in 0..u.len() {
        mu += u[k];
        mw += w[k];
    }
    mu /= n;
    mw /= n;
    let mut cov = 0.0;
    let mut vu = 0.0;
    let mut vw = 0.0;
    for k in 0..u.len() {
        cov += (u[k] - mu) * (w[k] - mw);
        vu += (u[k] - mu) * (u[k] - mu);
        vw += (w[k] - mw) * (w[k] - mw);
    }
    cov /= n;
    let su = (vu / n).sqrt();
    let sw = (vw / n).sqrt();
    if su <= 1e-12 || sw <= 1e-12 {
        return 0.0;
    }
    cov / (su * sw)
}

/// Routing weights in the column-vector convention.
#[derive(Debug, Clone)]
pub struct OracleDccn {
    /// One `d_c x d_c` transform per high-level capsule, shared by every
    /// low-level capsule.
    pub wu: Vec<Mat>,
    /// `d_c x d_w`.
    pub wm: Mat,
    /// `d_w x d_c`.
    pub wv: Mat,
    /// `d_w x (n_v * d_w)`.
    pub wf: Mat,
    pub bf: Vec<f64>,
}

/// What one routing call computed, iteration by iteration.
#[derive(Debug, Clone)]
pub struct OracleTrace {
    pub output: Vec<f64>,
    /// `c[itr][i][j]`
    pub c: Vec<Mat>,
    /// correlation used for the high-level sum at iteration `itr`
    pub rho: Vec<Mat>,
    /// logits after the update of iteration `itr`
    pub b: Vec<Mat>,
    /// `v[itr][j]`
    pub v: Vec<Mat>,
    /// `m[itr][j]` after the update of iteration `itr`
    pub m: Vec<Mat>,
}

/// Context-guided routing, one line of the algorithm at a time.
pub fn oracle_route(context: &[f64], capsules: &Mat, p: &OracleDccn, iterations: usize) -> OracleTrace {
    let n_u = capsules.len();
    let n_v = p.wu.len();

    // low-level capsules from the rows of the feature matrix
    let mut u: Vec<Vec<f64>> = Vec::new();
    for i in 0..n_u {
        u.push(capsules[i].clone());
    }
    // every multimodal context capsule starts as the context vector
    let mut m: Vec<Vec<f64>> = Vec::new();
    for _ in 0..n_v {
        m.push(context.to_vec());
    }

    let mut b = vec![vec![0.0; n_v]; n_u];
    let mut u_hat = vec![vec![Vec::new(); n_v]; n_u];
    let mut rho = vec![vec![0.0; n_v]; n_u];
    for i in 0..n_u {
        for j in 0..n_v {
            b[i][j] = 0.0;
            u_hat[i][j] = mat_vec(&p.wu[j], &u[i]);
            rho[i][j] = oracle_pcc(&u[i], &mat_vec(&p.wm, &m[j])).tanh();
        }
    }

    let mut trace = OracleTrace {
        output: Vec::new(),
        c: Vec::new(),
        rho: Vec::new(),
        b: Vec::new(),
        v: Vec::new(),
        m: Vec::new(),
    };
    let d_c = if n_u > 0 { u[0].len() } else { p.wm.len() };
    let mut v = vec![vec![0.0; d_c]; n_v];
    for _itr in 0..iterations {
        let mut c = vec![vec![0.0; n_v]; n_u];
        for i in 0..n_u {
            c[i] = softmax(&b[i]);
        }
        trace.rho.push(rho.clone());
        for j in 0..n_v {
            let mut s = vec![0.0; d_c];
            for i in 0..n_u {
                let w = c[i][j] + rho[i][j];
                for k in 0..d_c {
                    s[k] += w * u_hat[i][j][k];
                }
            }
            v[j] = s;
            let wvv = mat_vec(&p.wv, &v[j]);
            for k in 0..m[j].len() {
                m[j][k] *= wvv[k];
            }
        }
        for i in 0..n_u {
            for j in 0..n_v {
                rho[i][j] = oracle_pcc(&u[i], &mat_vec(&p.wm, &m[j])).tanh();
                b[i][j] += rho[i][j] * dot(&u_hat[i][j], &v[j]);
            }
        }
        trace.c.push(c);
        trace.b.push(b.clone());
        trace.v.push(v.clone());
        trace.m.push(m.clone());
    }

    let mut cat = Vec::new();
    for j in 0..n_v {
        cat.extend_from_slice(&m[j]);
    }
    let mut out = mat_vec(&p.wf, &cat);
    for k in 0..out.len() {
        out[k] += p.bf[k];
    }
    trace.output = out;
    trace
}

/// Routing by agreement with squashing and no context.
pub fn oracle_route_conventional(capsules: &Mat, p: &OracleDccn, iterations: usize) -> OracleTrace {
    let n_u = capsules.len();
    let n_v = p.wu.len();
    let d_c = p.wm.len();
    let mut u_hat = vec![vec![Vec::new(); n_v]; n_u];
    for i in 0..n_u {
        for j in 0..n_v {
            u_hat[i][j] = mat_vec(&p.wu[j], &capsules[i]);
        }
    }
    let mut b = vec![vec![0.0; n_v]; n_u];
    let mut v = vec![vec![0.0; d_c]; n_v];
    let mut trace = OracleTrace {
        output: Vec::new(),
        c: Vec::new(),
        rho: Vec::new(),
        b: Vec::new(),
        v: Vec::new(),
        m: Vec::new(),
    };
    for _ in 0..iterations {
        let mut c = vec![vec![0.0; n_v]; n_u];
        for i in 0..n_u {
            c[i] = softmax(&b[i]);
        }
        for j in 0..n_v {
            let mut s = vec![0.0; d_c];
            for i in 0..n_u {
                for k in 0..d_c {
                    s[k] += c[i][j] * u_hat[i][j][k];
                }
            }
            let n2 = dot(&s, &s);
            let f = if n2 == 0.0 { 0.0 } else { n2 / (1.0 + n2) / n2.sqrt() };
            for k in 0..d_c {
                v[j][k] = f * s[k];
            }
        }
        for i in 0..n_u {
            for j in 0..n_v {
                b[i][j] += dot(&u_hat[i][j], &v[j]);
            }
        }
        trace.c.push(c);
        trace.b.push(b.clone());
        trace.v.push(v.clone());
    }
    let mut cat = Vec::new();
    for j in 0..n_v {
        cat.extend(mat_vec(&p.wv, &v[j]));
    }
    let mut out = mat_vec(&p.wf, &cat);
    for k in 0..out.len() {
        out[k] += p.bf[k];
    }
    trace.output = out;
    trace
}

/// Multi-head scaled dot-product attention for one sequence.
///
/// Rows of `q`, `k`, `v` are positions. `wq`, `wk`, `wv`, `wc` are `d x d`.
/// Head `h` owns components `h*d/heads .. (h+1)*d/heads` of the projections.
/// Scores are divided by `sqrt(d)`. `allowed[t][s]` false masks key `s` for
/// query `t`.
#[allow(clippy::too_many_arguments)]
pub fn oracle_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    wc: &Mat,
    heads: usize,
    allowed: Option<&Vec<Vec<bool>>>,
) -> Mat {
    let d = wq.len();
    let dk = d / heads;
    let qp: Mat = q.iter().map(|x| mat_vec(wq, x)).collect();
    let kp: Mat = k.iter().map(|x| mat_vec(wk, x)).collect();
    let vp: Mat = v.iter().map(|x| mat_vec(wv, x)).collect();
    let mut out = Vec::new();
    for t in 0..q.len() {
        let mut cat = vec![0.0; d];
        for h in 0..heads {
            let mut scores = vec![0.0; k.len()];
            for s in 0..k.len() {
                let mut acc = 0.0;
                for c in h * dk..(h + 1) * dk {
                    acc += qp[t][c] * kp[s][c];
                }
                scores[s] = acc / (d as f64).sqrt();
                if let Some(a) = allowed {
                    if !a[t][s] {
                        scores[s] = f64::NEG_INFINITY;
                    }
                }
            }
            let w = softmax(&scores);
            for s in 0..k.len() {
                for c in h * dk..(h + 1) * dk {
                    cat[c] += w[s] * vp[s][c];
                }
            }
        }
        out.push(mat_vec(wc, &cat));
    }
    out
}

/// `w2 * relu(w1 * x + b1) + b2` for each row of `x`.
pub fn oracle_ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    let mut out = Vec::new();
    for row in x {
        let mut h = mat_vec(w1, row);
        for k in 0..h.len() {
            h[k] = (h[k] + b1[k]).max(0.0);
        }
        let mut y = mat_vec(w2, &h);
        for k in 0..y.len() {
            y[k] += b2[k];
        }
        out.push(y);
    }
    out
}

pub fn oracle_layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mu = 0.0;
    for &v in x {
        mu += v;
    }
    mu /= n;
    let mut var = 0.0;
    for &v in x {
        var += (v - mu) * (v - mu);
    }
    var /= n;
    let mut out = vec![0.0; x.len()];
    for k in 0..x.len() {
        out[k] = (x[k] - mu) / (var + eps).sqrt() * gain[k] + bias[k];
    }
    out
}

/// Corpus BLEU-4 with brevity penalty and no smoothing, on a 0-100 scale.
pub fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for s in 0..hyps.len() {
        let h = &hyps[s];
        let r = &refs[s];
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let mut ref_counts: HashMap<Vec<String>, usize> = HashMap::new();
            if r.len() >= n {
                for i in 0..=r.len() - n {
                    *ref_counts.entry(r[i..i + n].to_vec()).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<Vec<String>, usize> = HashMap::new();
            if h.len() >= n {
                for i in 0..=h.len() - n {
                    *hyp_counts.entry(h[i..i + n].to_vec()).or_insert(0) += 1;
                }
                total[n - 1] += h.len() - n + 1;
            }
            for (gram, count) in hyp_counts {
                let limit = ref_counts.get(&gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(limit);
            }
        }
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if matched[n] == 0 || total[n] == 0 {
            return 0.0;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * (log_sum / 4.0).exp()
}
