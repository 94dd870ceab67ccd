use dccn::oracle::{oracle_attention, oracle_ffn, oracle_layer_norm, Mat};
use dccn::transformer::{
    causal_mask, key_padding_mask, FeedForward, Fwd, MultiHeadAttention, Transformer, TransformerDims,
    LAYER_NORM_EPS, PAD,
};
use dccn::{Graph, Mode, ParamStore, Tensor};

fn dims() -> TransformerDims {
    TransformerDims { src_vocab: 13, tgt_vocab: 11, d_model: 8, heads: 2, d_ff: 16, enc_layers: 2, dec_layers: 2 }
}

fn mat(store: &ParamStore, name: &str) -> Mat {
    let t = store.get(store.lookup(name).unwrap_or_else(|| panic!("no {name}")));
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn vecp(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(store.lookup(name).unwrap()).data().to_vec()
}

fn rows(t: &Tensor, b: usize) -> Mat {
    let s = t.shape();
    let (n, d) = (s[1], s[2]);
    (0..n).map(|i| t.data()[(b * n + i) * d..(b * n + i + 1) * d].to_vec()).collect()
}

fn embed(store: &ParamStore, table: &str, ids: &[u32]) -> Mat {
    let t = mat(store, table);
    let d = t[0].len();
    ids.iter()
        .enumerate()
        .map(|(pos, &id)| {
            (0..d)
                .map(|k| {
                    let angle = pos as f64 / 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
                    t[id as usize][k] + if k % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect()
        })
        .collect()
}

fn residual_norm(store: &ParamStore, ln: &str, x: &Mat, y: &Mat) -> Mat {
    let (g, b) = (vecp(store, &format!("{ln}.gain")), vecp(store, &format!("{ln}.bias")));
    x.iter()
        .zip(y)
        .map(|(a, c)| {
            let s: Vec<f64> = a.iter().zip(c).map(|(p, q)| p + q).collect();
            oracle_layer_norm(&s, &g, &b, LAYER_NORM_EPS)
        })
        .collect()
}

fn attn(store: &ParamStore, p: &str, q: &Mat, kv: &Mat, heads: usize, allowed: Option<&Vec<Vec<bool>>>) -> Mat {
    let w = |n: &str| mat(store, &format!("{p}.{n}"));
    oracle_attention(q, kv, kv, &w("WQ"), &w("WK"), &w("WV"), &w("WC"), heads, allowed)
}

fn ffn(store: &ParamStore, p: &str, x: &Mat) -> Mat {
    oracle_ffn(
        x,
        &mat(store, &format!("{p}.1.W")),
        &vecp(store, &format!("{p}.1.b")),
        &mat(store, &format!("{p}.2.W")),
        &vecp(store, &format!("{p}.2.b")),
    )
}

fn naive_encode(store: &ParamStore, d: &TransformerDims, src: &[u32]) -> Mat {
    let mut x = embed(store, "src_embed.table", src);
    let allowed: Vec<Vec<bool>> = vec![src.iter().map(|&t| t != PAD).collect(); src.len()];
    for l in 0..d.enc_layers {
        let p = format!("encoder.layer{l}");
        let a = attn(store, &format!("{p}.selfattn"), &x, &x, d.heads, Some(&allowed));
        let h = residual_norm(store, &format!("{p}.ln1"), &x, &a);
        let o = ffn(store, &format!("{p}.ffn"), &h);
        x = residual_norm(store, &format!("{p}.ln2"), &h, &o);
    }
    x
}

fn naive_decode(store: &ParamStore, d: &TransformerDims, tgt: &[u32], mem: &Mat, src: &[u32]) -> (Mat, Mat, Mat) {
    let mut y = embed(store, "tgt_embed.table", tgt);
    let n = tgt.len();
    let causal: Vec<Vec<bool>> = (0..n).map(|t| (0..n).map(|s| s <= t).collect()).collect();
    let src_ok: Vec<Vec<bool>> = vec![src.iter().map(|&t| t != PAD).collect(); n];
    for l in 0..d.dec_layers {
        let p = format!("decoder.layer{l}");
        let a = attn(store, &format!("{p}.selfattn"), &y, &y, d.heads, Some(&causal));
        let h = residual_norm(store, &format!("{p}.ln1"), &y, &a);
        let c = attn(store, &format!("{p}.srcattn"), &h, mem, d.heads, Some(&src_ok));
        let c = residual_norm(store, &format!("{p}.ln2"), &h, &c);
        if l + 1 == d.dec_layers {
            return (y, h, c);
        }
        let o = ffn(store, &format!("{p}.ffn"), &c);
        y = residual_norm(store, &format!("{p}.ln3"), &c, &o);
    }
    unreachable!()
}

fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn encoder_and_decoder_match_naive_loops() {
    let d = dims();
    let mut store = ParamStore::new();
    let tr = Transformer::new(&mut store, d, 7).unwrap();
    let src = vec![vec![4, 5, 6, 7, 2], vec![8, 9, 2, PAD, PAD]];
    let tgt = vec![vec![1, 4, 5, 6], vec![1, 7, 8, 9]];
    let g = Graph::new(Mode::Inference);
    let p = store.bind(&g);
    let f = Fwd { g: &g, p: &p, dropout: 0.0 };
    let mem = tr.encode(f, &src).unwrap();
    let pre = tr.decode_prefix(f, &tgt, mem, &src).unwrap();
    for b in 0..2 {
        let m = naive_encode(&store, &d, &src[b]);
        let real = src[b].iter().filter(|&&t| t != PAD).count();
        assert!(max_diff(&rows(&mem.value(), b)[..real].to_vec(), &m[..real].to_vec()) < 1e-12);
        let (y, h, c) = naive_decode(&store, &d, &tgt[b], &m, &src[b]);
        assert!(max_diff(&rows(&pre.previous.value(), b), &y) < 1e-12);
        assert!(max_diff(&rows(&pre.hidden.value(), b), &h) < 1e-12);
        assert!(max_diff(&rows(&pre.context.value(), b), &c) < 1e-12);
    }
}

#[test]
fn two_position_attention_matches_oracle() {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, 3).unwrap();
    let x = vec![vec![0.3, -1.0, 0.5, 2.0], vec![1.5, 0.25, -0.75, 0.0]];
    let g = Graph::new(Mode::Inference);
    let p = store.bind(&g);
    let f = Fwd { g: &g, p: &p, dropout: 0.0 };
    let xv = g.constant(Tensor::from_rows(&x).unwrap().reshape(&[1, 2, 4]).unwrap());
    let (out, w) = mha.forward_with_weights(f, xv, xv, None).unwrap();
    let want = attn(&store, "a", &x, &x, 2, None);
    assert!(max_diff(&rows(&out.value(), 0), &want) < 1e-12);
    for row in w.value().data().chunks(2) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_key_identity_attention_returns_value_row() {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 3, 1, 0).unwrap();
    for n in ["WQ", "WK", "WV", "WC"] {
        store.set(&format!("a.{n}"), Tensor::eye(3)).unwrap();
    }
    let g = Graph::new(Mode::Inference);
    let p = store.bind(&g);
    let f = Fwd { g: &g, p: &p, dropout: 0.0 };
    let q = g.constant(Tensor::new(vec![1, 1, 3], vec![9.0, -2.0, 1.0]).unwrap());
    let kv = g.constant(Tensor::new(vec![1, 1, 3], vec![0.5, 1.5, -3.0]).unwrap());
    assert_eq!(mha.forward(f, q, kv, None).unwrap().value().data(), &[0.5, 1.5, -3.0]);
}

#[test]
fn decoder_is_causal() {
    let d = dims();
    let mut store = ParamStore::new();
    let tr = Transformer::new(&mut store, d, 1).unwrap();
    let src = vec![vec![4, 5, 6, 2]];
    let run = |tgt: Vec<u32>| {
        let g = Graph::new(Mode::Inference);
        let p = store.bind(&g);
        let f = Fwd { g: &g, p: &p, dropout: 0.0 };
        let mem = tr.encode(f, &src).unwrap();
        let c = tr.decode_prefix(f, &[tgt], mem, &src).unwrap().context.value();
        (*c).clone()
    };
    let a = run(vec![1, 4, 5, 6, 7]);
    let b = run(vec![1, 4, 5, 9, 10]);
    for t in 0..3 {
        for k in 0..8 {
            assert_eq!(a.get(&[0, t, k]).to_bits(), b.get(&[0, t, k]).to_bits());
        }
    }
    assert_ne!(a.get(&[0, 3, 0]), b.get(&[0, 3, 0]));
}

#[test]
fn padding_leaves_real_positions_unchanged() {
    let d = dims();
    let mut store = ParamStore::new();
    let tr = Transformer::new(&mut store, d, 2).unwrap();
    let g = Graph::new(Mode::Inference);
    let p = store.bind(&g);
    let f = Fwd { g: &g, p: &p, dropout: 0.0 };
    let short = vec![vec![4, 5, 6, 2]];
    let long = vec![vec![4, 5, 6, 2, PAD, PAD, PAD]];
    let tgt = vec![vec![1, 4, 5]];
    let ms = tr.encode(f, &short).unwrap();
    let ml = tr.encode(f, &long).unwrap();
    let (vs, vl) = (ms.value(), ml.value());
    assert!(vs.data().iter().zip(&vl.data()[..32]).all(|(a, b)| (a - b).abs() < 1e-9));
    let cs = tr.decode_prefix(f, &tgt, ms, &short).unwrap().context.value();
    let cl = tr.decode_prefix(f, &tgt, ml, &long).unwrap().context.value();
    assert!(cs.max_abs_diff(&cl) < 1e-9);
}

#[test]
fn shapes_follow_sequence_lengths() {
    let d = dims();
    let mut store = ParamStore::new();
    let tr = Transformer::new(&mut store, d, 2).unwrap();
    let g = Graph::new(Mode::Inference);
    let p = store.bind(&g);
    let f = Fwd { g: &g, p: &p, dropout: 0.0 };
    let src = vec![vec![4, 5, 6], vec![7, 8, 9]];
    let mem = tr.encode(f, &src).unwrap();
    assert_eq!(mem.shape(), vec![2, 3, 8]);
    let pre = tr.decode_prefix(f, &[vec![1], vec![1]], mem, &src).unwrap();
    assert_eq!(pre.context.shape(), vec![2, 1, 8]);
    assert_eq!(tr.logits(f, pre.context).unwrap().shape(), vec![2, 1, 11]);
    let one = tr.encode(f, &[vec![4]]).unwrap();
    assert_eq!(one.shape(), vec![1, 1, 8]);
}

#[test]
fn same_seed_same_bits() {
    let run = || {
        let mut store = ParamStore::new();
        let tr = Transformer::new(&mut store, dims(), 5).unwrap();
        let g = Graph::with_seed(Mode::Training, 9);
        let p = store.bind(&g);
        let f = Fwd { g: &g, p: &p, dropout: 0.1 };
        let v = tr.encode(f, &[vec![4, 5, 6, 2]]).unwrap().value();
        v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn ffn_is_position_wise() {
    let mut store = ParamStore::new();
    let ffn_l = FeedForward::new(&mut store, "f", 4, 8, 3);
    let g = Graph::new(Mode::Inference);
    let p = store.bind(&g);
    let f = Fwd { g: &g, p: &p, dropout: 0.0 };
    let x = vec![vec![1.0, -2.0, 0.5, 0.0], vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 3.0, 2.0, -0.5]];
    let perm = [2usize, 0, 1];
    let xp: Mat = perm.iter().map(|&i| x[i].clone()).collect();
    let run = |m: &Mat| (*ffn_l.forward(f, g.constant(Tensor::from_rows(m).unwrap())).unwrap().value()).clone();
    let (y, yp) = (run(&x), run(&xp));
    for (r, &i) in perm.iter().enumerate() {
        assert_eq!(yp.row(r), y.row(i));
    }
    assert!(max_diff(&(0..3).map(|i| y.row(i).to_vec()).collect(), &ffn(&store, "f", &x)) < 1e-12);

    let zero = g.constant(Tensor::zeros(&[2, 4]));
    assert!(ffn_l.forward(f, zero).unwrap().value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn masks_have_expected_entries() {
    let m = key_padding_mask(&[vec![4, PAD]]);
    assert_eq!(m.data(), &[0.0, f64::NEG_INFINITY]);
    assert_eq!(causal_mask(2).data(), &[0.0, f64::NEG_INFINITY, 0.0, 0.0]);
}
