#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dccn::Tensor;

/// `key: values` records; repeated keys collect one row each.
pub fn fixture(name: &str) -> HashMap<String, Vec<Vec<f64>>> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut out: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once(':').expect("key: values");
        let row = v.split_whitespace().map(|x| x.parse().expect("number")).collect();
        out.entry(k.trim().to_string()).or_default().push(row);
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

pub fn to_mat(t: &Tensor) -> Vec<Vec<f64>> {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Rows with zero mean and unit variance, like the output of a layer norm.
pub fn normalized_rows(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(r, shape, 1.0);
    let d = *shape.last().unwrap();
    for row in t.data_mut().chunks_mut(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let sd = (row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64).sqrt();
        row.iter_mut().for_each(|x| *x = (*x - mu) / sd);
    }
    t
}

/// Rows scaled to unit Euclidean norm, like pooled visual features.
pub fn unit_rows(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(r, shape, 1.0);
    let d = *shape.last().unwrap();
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}
