//! Context-guided routing of one timestep, iteration by iteration, next to
//! the scalar reference implementation.
//!
//! `cargo run --example route`

use dccn::oracle::{oracle_route, OracleDccn};
use dccn::routing::{prepare, route, DccnParams, RoutingTrace};
use dccn::transformer::Fwd;
use dccn::{Graph, Mode, ParamStore, Tensor};

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn main() -> dccn::Result<()> {
    let (d, n_u, n_v, itr) = (6, 4, 2, 3);
    let mut store = ParamStore::new();
    let p = DccnParams::new(&mut store, "dccn", d, d, n_v, itr, 7)?;

    let context = Tensor::new(vec![1, 1, d], vec![0.9, -1.1, 0.4, 1.6, -0.7, -1.1])?;
    let feats = Tensor::new(vec![1, n_u, d], (0..n_u * d).map(|k| ((k * 37 % 11) as f64 - 5.0) / 5.0).collect())?;

    let g = Graph::new(Mode::Inference);
    let bound = store.bind(&g);
    let f = Fwd { g: &g, p: &bound, dropout: 0.0 };
    let prep = prepare(f, &p, g.constant(feats.clone()), None)?;
    let mut trace = RoutingTrace::default();
    let out = route(f, &p, &prep, g.constant(context.clone()), Some(&mut trace))?;

    for (k, it) in trace.iterations.iter().enumerate() {
        println!("iteration {}", k + 1);
        for i in 0..n_u {
            let c: Vec<String> = (0..n_v).map(|j| format!("{:.4}", it.c.get(&[0, j, 0, i]))).collect();
            let rho: Vec<String> = (0..n_v).map(|j| format!("{:+.4}", it.rho.get(&[0, j, 0, i]))).collect();
            println!("  capsule {i}: c [{}]  rho [{}]", c.join(", "), rho.join(", "));
        }
        let m: Vec<String> = (0..n_v).map(|j| format!("{:.4}", it.m_norm.get(&[0, j, 0]))).collect();
        println!("  |m_j| [{}]", m.join(", "));
    }

    let wu = store.get(p.wu);
    let oracle = OracleDccn {
        wu: (0..n_v).map(|j| rows(&Tensor::new(vec![d, d], wu.data()[j * d * d..(j + 1) * d * d].to_vec()).unwrap())).collect(),
        wm: rows(store.get(p.wm)),
        wv: rows(store.get(p.wv)),
        wf: rows(store.get(p.wf)),
        bf: store.get(p.bf).data().to_vec(),
    };
    let want = oracle_route(context.data(), &rows(&feats), &oracle, itr);
    let diff = out.value().data().iter().zip(&want.output).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("output {:?}", out.value().data());
    println!("max deviation from the scalar reference: {diff:e}");
    Ok(())
}
