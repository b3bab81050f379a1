#![allow(dead_code)]

use ccrk::corpus::MultilingualCorpus;
use ccrk::numerics::{DenseMatrix, SeededRng};

pub fn codes(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("l{i}")).collect()
}

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i}")).collect()
}

pub fn unit_rows(rows: usize, dim: usize, rng: &mut SeededRng) -> DenseMatrix {
    let v: Vec<f64> = (0..rows).flat_map(|_| rng.unit_vector(dim)).collect();
    DenseMatrix::new(rows, dim, v).unwrap()
}

/// Random unit-norm corpus.
pub fn random_corpus(n: usize, k: usize, d: usize, seed: u64) -> MultilingualCorpus {
    let mut rng = SeededRng::new(seed);
    let images = unit_rows(n, d, &mut rng);
    let texts = unit_rows(n * k, d, &mut rng);
    MultilingualCorpus::new(images, texts, codes(k), ids(n)).unwrap()
}

/// Every embedding equal to the same unit vector.
pub fn identical_corpus(n: usize, k: usize, d: usize) -> MultilingualCorpus {
    let mut e = vec![0.0; d];
    e[0] = 1.0;
    let images = DenseMatrix::from_rows(&vec![e.clone(); n]).unwrap();
    let texts = DenseMatrix::from_rows(&vec![e; n * k]).unwrap();
    MultilingualCorpus::new(images, texts, codes(k), ids(n)).unwrap()
}

pub fn from_rows(images: &[Vec<f64>], texts: &[Vec<f64>], k: usize) -> MultilingualCorpus {
    MultilingualCorpus::new(
        DenseMatrix::from_rows(images).unwrap(),
        DenseMatrix::from_rows(texts).unwrap(),
        codes(k),
        ids(images.len()),
    )
    .unwrap()
}

pub fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}
