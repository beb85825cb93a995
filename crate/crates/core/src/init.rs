//! Parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Half-width of the uniform initialization interval for weight matrices.
pub const INIT_SCALE: f64 = 0.08;

pub fn uniform<T: Scalar>(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-scale..=scale)))
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Square matrix with orthonormal rows (Gram-Schmidt on a uniform draw).
pub fn orthogonal<T: Scalar>(size: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(size);
    while rows.len() < size {
        let mut v: Vec<f64> = (0..size).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in &rows {
            let d: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::new(
        &[size, size],
        rows.concat().into_iter().map(T::of).collect(),
    )
    .expect("square")
}
