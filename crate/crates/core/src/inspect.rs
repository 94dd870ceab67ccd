//! Routing traces of a single sentence as CSV, and SVG heatmaps drawn from
//! that CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{Corpus, Example};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::multimodal::{GateMode, LayerTrace};
use crate::plot::{heatmaps, Grid};
use crate::routing::RoutingTrace;
use crate::tensor::{Graph, Mode, Tensor};
use crate::transformer::Fwd;

pub const TRACE_HEADER: &str = "granularity,timestep,iteration,i,j,valid,c,rho,b,v_norm,m_norm";
pub const GATE_HEADER: &str = "timestep,component,alpha";

/// A decoded sentence with the routing state behind each output position.
#[derive(Debug, Clone)]
pub struct SentenceTrace {
    pub source: Vec<String>,
    pub translation: Vec<String>,
    /// Decoder positions traced: the translation plus the end token.
    pub timesteps: usize,
    pub layer: LayerTrace,
}

/// Translates example `index` greedily, then replays the translation with
/// teacher forcing while recording every routing iteration.
pub fn trace_sentence(model: &Model, corpus: &Corpus, index: usize) -> Result<SentenceTrace> {
    if index >= corpus.len() {
        return Err(Error::Input(format!("sentence {index} is outside a corpus of {}", corpus.len())));
    }
    let ex = &corpus.examples[index];
    let hyp_ids = model.greedy(&model.batch(corpus, &[index])?)?.remove(0);
    let translation = model.tgt_vocab.decode(&hyp_ids);
    let replay = Corpus {
        examples: vec![Example { tgt: translation.clone(), ..ex.clone() }],
        ..corpus.clone()
    };
    let batch = model.batch(&replay, &[0])?;
    let g = Graph::new(Mode::Inference);
    let p = model.store.bind(&g);
    let f = Fwd { g: &g, p: &p, dropout: 0.0 };
    let mut layer = LayerTrace::default();
    model.forward(f, &batch, GateMode::Learned, Some(&mut layer))?;
    Ok(SentenceTrace { source: ex.src.clone(), translation, timesteps: batch.tgt_in[0].len(), layer })
}

fn push_rows(out: &mut String, name: &str, rt: &RoutingTrace) {
    for (itr, it) in rt.iterations.iter().enumerate() {
        let s = it.c.shape();
        let (n_v, t, n_u) = (s[1], s[2], s[3]);
        for k in 0..t {
            for j in 0..n_v {
                for i in 0..n_u {
                    let at = [0, j, k, i];
                    let _ = writeln!(
                        out,
                        "{name},{k},{},{i},{j},{},{},{},{},{},{}",
                        itr + 1,
                        u8::from(rt.valid[0][i]),
                        it.c.get(&at),
                        it.rho.get(&at),
                        it.b.get(&at),
                        it.v_norm.get(&[0, j, k]),
                        it.m_norm.get(&[0, j, k]),
                    );
                }
            }
        }
    }
}

/// One row per (granularity, timestep, iteration, capsule i, capsule j).
/// Iterations count from 1.
pub fn trace_csv(trace: &LayerTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    if let Some(rt) = &trace.global {
        push_rows(&mut out, "global", rt);
    }
    if let Some(rt) = &trace.regional {
        push_rows(&mut out, "regional", rt);
    }
    out
}

/// Gate values `[1, T, d_w]` as `timestep,component,alpha` rows.
pub fn gate_csv(alpha: &Tensor) -> String {
    let mut out = String::from(GATE_HEADER);
    out.push('\n');
    let s = alpha.shape();
    for k in 0..s[1] {
        for d in 0..s[2] {
            let _ = writeln!(out, "{k},{d},{}", alpha.get(&[0, k, d]));
        }
    }
    out
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field.parse().map_err(|_| Error::Input(format!("trace CSV line {line}: `{field}` is not a number")))
}

fn parse_usize(field: &str, line: usize) -> Result<usize> {
    field.parse().map_err(|_| Error::Input(format!("trace CSV line {line}: `{field}` is not an index")))
}

fn check_header(text: &str, header: &str) -> Result<()> {
    match text.lines().next() {
        Some(h) if h == header => Ok(()),
        other => Err(Error::Input(format!("expected CSV header `{header}`, got `{}`", other.unwrap_or("")))),
    }
}

/// Per-granularity maps keyed by (iteration, timestep, column).
#[derive(Default)]
struct Cells {
    c: BTreeMap<(usize, usize, usize), f64>,
    rho: BTreeMap<(usize, usize, usize), f64>,
    b: BTreeMap<(usize, usize, usize), f64>,
    v: BTreeMap<(usize, usize, usize), f64>,
    m: BTreeMap<(usize, usize, usize), f64>,
}

fn grids(title: &str, map: &BTreeMap<(usize, usize, usize), f64>, col_label: &str) -> Vec<Grid> {
    let mut by_itr: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for (&(itr, k, col), &v) in map {
        by_itr.entry(itr).or_default().push((k, col, v));
    }
    by_itr
        .into_iter()
        .map(|(itr, cells)| {
            let rows = cells.iter().map(|c| c.0).max().map_or(0, |m| m + 1);
            let cols = cells.iter().map(|c| c.1).max().map_or(0, |m| m + 1);
            let mut values = vec![0.0; rows * cols];
            for (k, col, v) in cells {
                values[k * cols + col] = v;
            }
            Grid {
                title: format!("{title}, iteration {itr}"),
                rows,
                cols,
                values,
                row_label: "timestep".into(),
                col_label: col_label.into(),
            }
        })
        .collect()
}

/// Heatmaps of `c`, `rho`, `b` (timestep by capsule) and of the capsule norms
/// (timestep by high-level capsule), one file per granularity and quantity,
/// with one panel per iteration. Returns `(file name, svg)` pairs.
pub fn trace_heatmaps(csv: &str) -> Result<Vec<(String, String)>> {
    check_header(csv, TRACE_HEADER)?;
    let mut per: BTreeMap<String, Cells> = BTreeMap::new();
    let mut n_u: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for (ln, line) in csv.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Input(format!("trace CSV line {}: {} fields, expected 11", ln + 1, f.len())));
        }
        let (k, itr, i, j) = (parse_usize(f[1], ln + 1)?, parse_usize(f[2], ln + 1)?, parse_usize(f[3], ln + 1)?, parse_usize(f[4], ln + 1)?);
        let e = n_u.entry(f[0].to_string()).or_insert(0);
        *e = (*e).max(i + 1);
        rows.push((f[0].to_string(), ln + 1, k, itr, i, j, f));
    }
    for (g, ln, k, itr, i, j, f) in rows {
        let col = j * n_u[&g] + i;
        let cells = per.entry(g).or_default();
        cells.c.insert((itr, k, col), parse_f64(f[6], ln)?);
        cells.rho.insert((itr, k, col), parse_f64(f[7], ln)?);
        cells.b.insert((itr, k, col), parse_f64(f[8], ln)?);
        cells.v.insert((itr, k, j), parse_f64(f[9], ln)?);
        cells.m.insert((itr, k, j), parse_f64(f[10], ln)?);
    }
    let mut out = Vec::new();
    for (g, cells) in &per {
        let capsule = "capsule i (j-major)";
        for (q, map, col) in [
            ("c", &cells.c, capsule),
            ("rho", &cells.rho, capsule),
            ("b", &cells.b, capsule),
            ("v_norm", &cells.v, "capsule j"),
            ("m_norm", &cells.m, "capsule j"),
        ] {
            let panels = grids(q, map, col);
            out.push((format!("{g}_{q}.svg"), heatmaps(&format!("{g} routing: {q}"), &panels)));
        }
    }
    Ok(out)
}

/// Heatmap of the gate, timestep by component.
pub fn gate_heatmap(csv: &str) -> Result<String> {
    check_header(csv, GATE_HEADER)?;
    let mut map = BTreeMap::new();
    for (ln, line) in csv.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Input(format!("gate CSV line {}: {} fields, expected 3", ln + 1, f.len())));
        }
        map.insert((1, parse_usize(f[0], ln + 1)?, parse_usize(f[1], ln + 1)?), parse_f64(f[2], ln + 1)?);
    }
    let mut panels = grids("alpha", &map, "component");
    for p in &mut panels {
        p.title = "alpha".into();
    }
    Ok(heatmaps("gate alpha (global share)", &panels))
}
