//! Reverse-mode gradients through a tiny softmax regression, checked against
//! central differences.
//!
//! `cargo run --example autodiff`

use dccn::gradcheck::check;
use dccn::{Graph, Mode, Tensor};

fn main() -> dccn::Result<()> {
    let x = Tensor::from_rows(&[vec![1.0, -0.5, 2.0], vec![0.3, 0.8, -1.2]])?;
    let w = Tensor::from_rows(&[vec![0.2, -0.1], vec![0.4, 0.3], vec![-0.6, 0.5]])?;

    let g = Graph::new(Mode::Training);
    let xv = g.constant(x.clone());
    let wv = g.leaf(w.clone());
    let loss = xv.matmul(wv)?.softmax(1)?.tanh().sum();
    g.backward(loss)?;
    println!("loss {:.6}", loss.value().data()[0]);
    println!("dL/dW {:?}", wv.grad().expect("leaf has a gradient").data());

    let report = check(&[x, w], 1e-5, |_, v| Ok(v[0].matmul(v[1])?.softmax(1)?.tanh().sum()))?;
    println!("relative errors (x, W): {:?}", report.errors);
    Ok(())
}
