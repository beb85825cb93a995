//! Non-recurrent building blocks: dense layers, embeddings, dropout and
//! batch normalization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::init;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reserved token ids.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    /// `bias = false` is used when batch normalization follows, since the
    /// normalization removes any constant offset.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.W"),
            init::uniform(&[in_dim, out_dim], init::INIT_SCALE, rng),
        )?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(DenseLayer {
            w,
            b,
            activation,
            in_dim,
            out_dim,
        })
    }

    /// `activation(x·W + b)`
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::dim("dense", s, &[self.in_dim, self.out_dim]));
        }
        let w = g.param(store, self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = g.param(store, b);
            y = g.add(y, b)?;
        }
        Ok(match self.activation {
            Activation::Relu => g.relu(y),
            Activation::None => y,
        })
    }
}

/// Word embeddings. Row [`PAD_ID`] is zero-initialized and never updated.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub e: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if vocab <= UNK_ID {
            return Err(Error::Config(format!(
                "vocabulary of size {vocab} has no room for PAD and UNK"
            )));
        }
        let mut table = init::uniform::<T>(&[vocab, dim], init::INIT_SCALE, rng);
        table.data_mut()[..dim].fill(T::zero());
        let e = store.add(format!("{name}.E"), table)?;
        Ok(EmbeddingTable { e, vocab, dim })
    }

    /// Gathers one row per id. No non-linearity is applied.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ids: &[usize],
    ) -> Result<NodeId> {
        let e = g.param(store, self.e);
        g.gather_rows(e, ids, Some(PAD_ID))
    }
}

/// Inverted dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
}

impl DropoutSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        Ok(DropoutSpec { rate })
    }

    /// Identity in infer mode or at rate 0. In train mode each entry is
    /// zeroed with probability `rate` and survivors are scaled by
    /// `1 / (1 - rate)`; the mask is a graph constant, so backward reuses it.
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if mode == Mode::Infer || self.rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = g.constant(Tensor::new(&shape, mask)?);
        g.mul(x, m)
    }
}

/// Batch mean and biased variance observed in one train-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    pub dim: usize,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(BatchNormLayer {
            gamma,
            beta,
            running_mean: vec![T::zero(); dim],
            running_var: vec![T::one(); dim],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            dim,
        })
    }

    /// Train mode normalizes with statistics of the rows flagged in `rows`
    /// (padding excluded) and returns them for a later running-stat update.
    /// Infer mode is the fixed affine map given by the running statistics.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        rows: &[bool],
        mode: Mode,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let y = g.batch_norm(x, gamma, beta, rows, T::of(self.eps))?;
                let (mean, var) = g.batch_norm_stats(y).expect("batch norm node");
                let stats = BatchStats {
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                    count: rows.iter().filter(|&&r| r).count(),
                };
                Ok((y, Some(stats)))
            }
            Mode::Infer => {
                let eps = T::of(self.eps);
                let mean = g.constant(Tensor::from_vec(self.running_mean.clone()));
                let inv = g.constant(Tensor::from_vec(
                    self.running_var
                        .iter()
                        .map(|&v| T::one() / (v + eps).sqrt())
                        .collect(),
                ));
                let c = g.sub(x, mean)?;
                let n = g.mul(c, inv)?;
                let s = g.mul(n, gamma)?;
                Ok((g.add(s, beta)?, None))
            }
        }
    }

    /// `running ← (1 − m)·running + m·batch`, with the unbiased batch
    /// variance.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::of(self.momentum);
        let one = T::one();
        let correction = T::of(stats.count as f64 / (stats.count as f64 - 1.0));
        for j in 0..self.dim {
            self.running_mean[j] = (one - m) * self.running_mean[j] + m * stats.mean[j];
            self.running_var[j] = (one - m) * self.running_var[j] + m * stats.var[j] * correction;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::grad_check;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        init::uniform(shape, 1.0, &mut rng(seed))
    }

    #[test]
    fn dense_identity_without_activation() {
        let mut store = ParamStore::<f64>::new();
        let layer =
            DenseLayer::new(&mut store, "d", 2, 2, Activation::None, true, &mut rng(0)).unwrap();
        *store.value_mut(layer.w) = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.3, -2.0], vec![5.0, 0.0]]).unwrap());
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn dense_zero_weights_relu_bias() {
        let mut store = ParamStore::<f64>::new();
        let layer =
            DenseLayer::new(&mut store, "d", 3, 2, Activation::Relu, true, &mut rng(0)).unwrap();
        store.value_mut(layer.w).fill(0.0);
        *store.value_mut(layer.b.unwrap()) = Tensor::from_vec(vec![1.0, -1.0]);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[4, 3], 1));
        let y = layer.forward(&mut g, &store, x).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(y).row(r), &[1.0, 0.0]);
        }
    }

    #[test]
    fn dense_matches_independent_matrix_product() {
        let mut store = ParamStore::<f64>::new();
        let layer =
            DenseLayer::new(&mut store, "d", 4, 5, Activation::None, true, &mut rng(2)).unwrap();
        *store.value_mut(layer.b.unwrap()) = rand_tensor(&[5], 5);
        let x = rand_tensor(&[3, 4], 3);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = layer.forward(&mut g, &store, xn).unwrap();
        let w = store.value(layer.w);
        let b = store.value(layer.b.unwrap());
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = b.data()[j];
                for k in 0..4 {
                    acc += x.at(i, k) * w.at(k, j);
                }
                assert!((g.value(y).at(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_rejects_wrong_input_width() {
        let mut store = ParamStore::<f64>::new();
        let layer =
            DenseLayer::new(&mut store, "d", 4, 5, Activation::Relu, true, &mut rng(2)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            layer.forward(&mut g, &store, x),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn relu_dense_is_positively_homogeneous() {
        let mut store = ParamStore::<f64>::new();
        let layer =
            DenseLayer::new(&mut store, "d", 4, 3, Activation::Relu, true, &mut rng(7)).unwrap();
        *store.value_mut(layer.b.unwrap()) = rand_tensor(&[3], 8);
        let x = rand_tensor(&[5, 4], 9);
        let run = |s: &ParamStore<f64>| {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let y = layer.forward(&mut g, s, xn).unwrap();
            g.value(y).clone()
        };
        let base = run(&store);
        for alpha in [0.5, 2.0, 7.25] {
            let mut scaled = store.clone();
            scaled.value_mut(layer.w).scale(alpha);
            scaled.value_mut(layer.b.unwrap()).scale(alpha);
            let y = run(&scaled);
            for (a, b) in y.data().iter().zip(base.data()) {
                assert!((a - alpha * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_padding_row_and_scatter() {
        let mut store = ParamStore::<f64>::new();
        let emb = EmbeddingTable::new(&mut store, "emb", 5, 4, &mut rng(1)).unwrap();
        let mut g = Graph::new();
        let pad = emb.embed(&mut g, &store, &[0]).unwrap();
        assert!(g.value(pad).data().iter().all(|&v| v == 0.0));

        let two = emb.embed(&mut g, &store, &[2, 2, 0]).unwrap();
        assert_eq!(g.value(two).row(0), g.value(two).row(1));
        let s = g.sum(two);
        g.backward(s).unwrap();
        let grad = g.grad(g.param_node(emb.e).unwrap()).unwrap();
        assert_eq!(grad.row(2), &[2.0; 4]);
        assert_eq!(grad.row(0), &[0.0; 4]);
        assert_eq!(grad.row(1), &[0.0; 4]);
    }

    #[test]
    fn embedding_rejects_out_of_vocab_ids() {
        let mut store = ParamStore::<f64>::new();
        let emb = EmbeddingTable::new(&mut store, "emb", 5, 4, &mut rng(1)).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            emb.embed(&mut g, &store, &[1, 5]),
            Err(Error::OutOfVocab { id: 5, vocab: 5 })
        ));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let emb = EmbeddingTable::new(&mut store, "emb", 5, 4, &mut rng(11)).unwrap();
        let probe = rand_tensor(&[4, 4], 12);
        let report = grad_check(&mut store, &[emb.e], 1e-5, 1e-6, |s, g| {
            let x = emb.embed(g, s, &[3, 1, 3, 4])?;
            let p = g.constant(probe.clone());
            let y = g.mul(x, p)?;
            let t = g.tanh(y);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&[3, 3], 1));
        let zero = DropoutSpec::new(0.0).unwrap();
        let y = zero.apply(&mut g, x, Mode::Train, &mut rng(0)).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let half = DropoutSpec::new(0.5).unwrap();
        let y = half.apply(&mut g, x, Mode::Infer, &mut rng(0)).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(DropoutSpec::new(1.0).is_err());
    }

    #[test]
    fn dropout_monte_carlo_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[100_000], 1.0));
        let d = DropoutSpec::new(0.5).unwrap();
        let y = d.apply(&mut g, x, Mode::Train, &mut rng(42)).unwrap();
        let mean = g.value(y).sum() / 100_000.0;
        assert!((0.99..=1.01).contains(&mean), "{mean}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_preserves_expectation_per_entry() {
        let x = rand_tensor(&[2, 3], 5);
        let d = DropoutSpec::new(0.2).unwrap();
        let mut r = rng(6);
        let mut acc = Tensor::<f64>::zeros(&[2, 3]);
        let masks = 10_000;
        for _ in 0..masks {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let y = d.apply(&mut g, xn, Mode::Train, &mut r).unwrap();
            acc.add_assign(g.value(y));
        }
        acc.scale(1.0 / masks as f64);
        for (m, v) in acc.data().iter().zip(x.data()) {
            assert!((m - v).abs() <= 0.02 * v.abs(), "{m} vs {v}");
        }
    }

    #[test]
    fn dropout_backward_reuses_the_mask() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full(&[50], 1.0));
        let d = DropoutSpec::new(0.3).unwrap();
        let y = d.apply(&mut g, x, Mode::Train, &mut rng(3)).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), g.value(y).data());
    }

    #[test]
    fn batchnorm_constant_column_maps_to_zero() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNormLayer::new(&mut store, "bn", 2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(
            Tensor::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        );
        let (y, _) = bn
            .forward(&mut g, &store, x, &[true; 3], Mode::Train)
            .unwrap();
        for r in 0..3 {
            assert!(g.value(y).at(r, 0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNormLayer::new(&mut store, "bn", 4).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[8, 4], 21));
        let (y, stats) = bn
            .forward(&mut g, &store, x, &[true; 8], Mode::Train)
            .unwrap();
        let yv = g.value(y);
        let stats = stats.unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..8).map(|r| yv.at(r, j)).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            // exact value is var_x / (var_x + eps)
            let expect = stats.var[j] / (stats.var[j] + 1e-5);
            assert!((var - expect).abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_needs_two_rows_in_train_mode() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNormLayer::new(&mut store, "bn", 2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            bn.forward(&mut g, &store, x, &[true, false], Mode::Train),
            Err(Error::Contract(_))
        ));
        // a single row is fine at inference
        assert!(bn
            .forward(&mut g, &store, x, &[true, false], Mode::Infer)
            .is_ok());
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNormLayer::new(&mut store, "bn", 3).unwrap();
        *store.value_mut(bn.gamma) = rand_tensor(&[3], 31);
        *store.value_mut(bn.beta) = rand_tensor(&[3], 32);
        let x = store.add("x", rand_tensor(&[6, 3], 33)).unwrap();
        let probe = rand_tensor(&[6, 3], 34);
        let rows = [true, true, false, true, true, true];
        let report = grad_check(&mut store, &[x, bn.gamma, bn.beta], 1e-5, 1e-6, |s, g| {
            let xn = g.param(s, x);
            let (y, _) = bn.forward(g, s, xn, &rows, Mode::Train)?;
            let p = g.constant(probe.clone());
            let yp = g.mul(y, p)?;
            let t = g.tanh(yp);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn batchnorm_infer_uses_running_stats_only() {
        let mut store = ParamStore::<f64>::new();
        let mut bn = BatchNormLayer::new(&mut store, "bn", 2).unwrap();
        bn.update_running(&BatchStats {
            mean: vec![1.0, -1.0],
            var: vec![4.0, 0.25],
            count: 5,
        });
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
        let x = Tensor::from_rows(&[vec![2.0, 0.5]]).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let (y, stats) = bn
            .forward(&mut g, &store, xn, &[true], Mode::Infer)
            .unwrap();
        assert!(stats.is_none());
        for j in 0..2 {
            let expect = (x.at(0, j) - bn.running_mean[j]) / (bn.running_var[j] + 1e-5).sqrt();
            assert!((g.value(y).at(0, j) - expect).abs() < 1e-14);
        }
    }
}
