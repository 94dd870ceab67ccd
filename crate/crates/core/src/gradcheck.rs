//! Central finite-difference checks against the graph's reverse sweep.
//!
//! The error for each input is norm-wise,
//! `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, 1e-12)`,
//! so entries whose true gradient is zero do not turn rounding noise into a
//! huge relative error.

use crate::error::Result;
use crate::tensor::{Graph, Mode, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradReport {
    /// One norm-wise relative error per input, in input order.
    pub errors: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the reverse-mode gradient of the scalar `f(inputs)` with central
/// differences of step `h` for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new(Mode::Training);
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new(Mode::Inference);
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().data()[0])
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[k].shape());
        for e in 0..inputs[k].len() {
            let x0 = inputs[k].data()[e];
            work[k].data_mut()[e] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[e] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[e] = x0;
            num.data_mut()[e] = (up - down) / (2.0 * h);
        }
        numeric.push(num);
    }

    let errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let diff = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            diff / a.norm().max(n.norm()).max(1e-12)
        })
        .collect();
    Ok(GradReport {
        errors,
        analytic,
        numeric,
    })
}

/// A fixed pseudo-random projection used to reduce a tensor output to a scalar
/// loss with every element weighted differently.
pub fn projection(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let x = crate::rng::fnv1a64(&(i as u64 ^ salt.rotate_left(17)).to_le_bytes());
            (x >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("projection shape")
}

/// `sum(x * projection)`.
pub fn project<'g>(x: Var<'g>, salt: u64) -> Result<Var<'g>> {
    let p = x.graph().constant(projection(&x.shape(), salt));
    Ok(x.mul(p)?.sum())
}
