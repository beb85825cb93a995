use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn t2(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Entries are ±U(0.5, 1.5): bounded away from zero so products in the
/// checked gradients stay well above the finite-difference roundoff floor.
fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Wraps `inputs` as parameters and checks `Σ r ⊙ op(inputs)` against
/// central differences with ε = 1e-5.
fn check_op<F>(inputs: Vec<Tensor<f64>>, seed: u64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    check_op_with(Stencil::Central, inputs, seed, build)
}

fn check_op_with<F>(stencil: Stencil, inputs: Vec<Tensor<f64>>, seed: u64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), t).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let probe = {
        let mut g = Graph::new();
        let nodes: Vec<_> = ids.iter().map(|&id| g.param(&store, id)).collect();
        let out = build(&mut g, &nodes);
        random(g.shape(out), &mut rng)
    };
    grad_check_with(&mut store, &ids.clone(), stencil, 1e-5, 1e-6, |s, g| {
        let nodes: Vec<_> = ids.iter().map(|&id| g.param(s, id)).collect();
        let out = build(g, &nodes);
        let r = g.constant(probe.clone());
        let weighted = g.mul(out, r)?;
        Ok(g.sum(weighted))
    })
    .unwrap()
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(t2(&[&[1., 0.], &[0., 1.]]));
    let a = g.constant(t2(&[&[1., 2.], &[3., 4.]]));
    let b = g.constant(t2(&[&[5., 6.], &[7., 8.]]));
    let ia = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(ia).data(), &[1., 2., 3., 4.]);
    let ab = g.matmul(a, b).unwrap();
    // 1·5+2·7, 1·6+2·8, 3·5+4·7, 3·6+4·8
    assert_eq!(g.value(ab).data(), &[19., 22., 43., 50.]);
    assert_eq!(g.shape(ab), &[2, 2]);
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

/// exp via its Taylor series, independent of the library routine.
fn exp_series(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        term *= x / k as f64;
        sum += term;
    }
    sum
}

#[test]
fn elementwise_scalar_cases() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item(), 0.5);

    let x = g.constant(Tensor::from_vec(vec![-3.2, 3.2]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 3.2]);

    let h = g.constant(Tensor::scalar(0.5));
    let th = g.tanh(h);
    let e = exp_series(1.0);
    let oracle = (e - 1.0) / (e + 1.0);
    assert!((g.value(th).item() - oracle).abs() < 1e-12);
    assert!((g.value(th).item() - 0.462_117_157_26).abs() < 1e-11);
}

#[test]
fn bias_broadcast_is_the_only_broadcast() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t2(&[&[1., 2.], &[3., 4.]]));
    let b = g.constant(Tensor::from_vec(vec![10., 20.]));
    let y = g.add(x, b).unwrap();
    assert_eq!(g.value(y).data(), &[11., 22., 13., 24.]);
    let wrong = g.constant(Tensor::from_vec(vec![1., 2., 3.]));
    assert!(matches!(g.add(x, wrong), Err(Error::Dimension { .. })));
    let col = g.constant(Tensor::zeros(&[2, 1]));
    assert!(matches!(g.mul(x, col), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_masked_examples() {
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::new(&[1, 3], vec![0., 0., 0.]).unwrap());
    let y = g.softmax_masked(s, &[true, true, true]).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let s = g.constant(Tensor::new(&[1, 3], vec![5., 5., 5.]).unwrap());
    let y = g.softmax_masked(s, &[true, true, false]).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.0]);

    let s = g.constant(Tensor::new(&[1, 3], vec![1., 2., 3.]).unwrap());
    let y = g.softmax_masked(s, &[true, true, true]).unwrap();
    let ex: Vec<f64> = [1., 2., 3.].iter().map(|&v| exp_series(v)).collect();
    let total: f64 = ex.iter().sum();
    for (got, e) in g.value(y).data().iter().zip(&ex) {
        assert!((got - e / total).abs() < 1e-12);
    }
    let expect = [0.090_030_57, 0.244_728_47, 0.665_240_96];
    for (got, e) in g.value(y).data().iter().zip(expect) {
        assert!((got - e).abs() < 1e-8);
    }
}

#[test]
fn softmax_all_masked_row_is_an_error() {
    let mut g = Graph::<f64>::new();
    let s = g.constant(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
    assert!(matches!(
        g.softmax_masked(s, &[true, false, false, false]),
        Err(Error::DegenerateMask { row: 1 })
    ));
}

#[test]
fn concat_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_vec(vec![1., 2.]));
    let b = g.constant(Tensor::from_vec(vec![3.]));
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.value(c).data(), &[1., 2., 3.]);

    let x = g.constant(Tensor::zeros(&[2, 200]));
    let y = g.constant(Tensor::zeros(&[2, 200]));
    let xy = g.concat(&[x, y], 1).unwrap();
    assert_eq!(g.shape(xy), &[2, 400]);

    let p = g.constant(Tensor::zeros(&[2, 3]));
    let q = g.constant(Tensor::zeros(&[4, 3]));
    assert!(matches!(g.concat(&[p, q], 1), Err(Error::Dimension { .. })));
}

#[test]
fn backward_square_and_accumulation() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 12.0);
    g.zero_grads();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn sigmoid_of_dot_matches_central_difference() {
    let w0 = vec![0.3, -0.7, 1.1];
    let x = vec![0.5, 0.25, -1.0];
    let loss = |w: &[f64]| {
        let mut g = Graph::<f64>::new();
        let wn = g.variable(Tensor::from_vec(w.to_vec()));
        let xn = g.constant(Tensor::from_vec(x.clone()));
        let p = g.mul(wn, xn).unwrap();
        let s = g.sum(p);
        let y = g.sigmoid(s);
        (g, wn, y)
    };
    let (mut g, wn, y) = loss(&w0);
    g.backward(y).unwrap();
    let ana = g.grad(wn).unwrap().data().to_vec();
    for k in 0..3 {
        let eps = 1e-5;
        let mut wp = w0.clone();
        wp[k] += eps;
        let mut wm = w0.clone();
        wm[k] -= eps;
        let (gp, _, yp) = loss(&wp);
        let (gm, _, ym) = loss(&wm);
        let num = (gp.value(yp).item() - gm.value(ym).item()) / (2.0 * eps);
        assert!(relative_error(ana[k], num) < 1e-6, "k={k}");
    }
}

#[test]
fn tree_graph_matches_product_of_local_jacobians() {
    let w = [[0.4, -1.2], [0.7, 0.3]];
    let xv = [0.9, -0.5];
    let c = [1.5, -2.0];
    let mut g = Graph::<f64>::new();
    let wn = g.constant(t2(&[&w[0], &w[1]]));
    let xn = g.variable(Tensor::new(&[2, 1], xv.to_vec()).unwrap());
    let u = g.matmul(wn, xn).unwrap();
    let y = g.sigmoid(u);
    let cn = g.constant(Tensor::new(&[2, 1], c.to_vec()).unwrap());
    let yc = g.mul(y, cn).unwrap();
    let l = g.sum(yc);
    g.backward(l).unwrap();

    // dL/dy = c; dy/du = diag(σ'(u)); du/dx = W
    let mut uu = [0.0; 2];
    for i in 0..2 {
        uu[i] = w[i][0] * xv[0] + w[i][1] * xv[1];
    }
    let sp: Vec<f64> = uu
        .iter()
        .map(|&v| {
            let s = 1.0 / (1.0 + (-v).exp());
            s * (1.0 - s)
        })
        .collect();
    let mut expect = [0.0; 2];
    for j in 0..2 {
        for i in 0..2 {
            expect[j] += w[i][j] * sp[i] * c[i];
        }
    }
    let got = g.grad(xn).unwrap().data();
    for j in 0..2 {
        assert!((got[j] - expect[j]).abs() < 1e-15);
    }
}

#[test]
fn grad_check_linear_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&[4, 1], &mut rng)).unwrap();
    let b = store.add("b", random(&[1], &mut rng)).unwrap();
    let x = random(&[6, 4], &mut rng);
    let report = grad_check(&mut store, &[w, b], 1e-5, 1e-8, |s, g| {
        let xn = g.constant(x.clone());
        let wn = g.param(s, w);
        let bn = g.param(s, b);
        let z = g.matmul(xn, wn)?;
        let z = g.add(z, bn)?;
        Ok(g.sum(z))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.max_rel_error < 1e-8);
}

#[test]
fn grad_check_catches_a_wrong_backward_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&[3], &mut rng)).unwrap();
    let report = grad_check(&mut store, &[w], 1e-5, 1e-4, |s, g| {
        let wn = g.param(s, w);
        let f = g.faulty_identity(wn);
        let t = g.tanh(f);
        Ok(g.sum(t))
    })
    .unwrap();
    assert!(!report.passed);
    assert_eq!(report.worst().unwrap().name, "w");
}

#[test]
fn grad_check_reports_non_finite_gradients() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::from_vec(vec![0.0])).unwrap();
    let err = grad_check(&mut store, &[p], 1e-5, 1e-4, |s, g| {
        let pn = g.param(s, p);
        g.bce_prob(pn, &[1.0])
    })
    .unwrap_err();
    assert!(err.to_string().contains("`p`"), "{err}");
}

#[test]
fn repeated_construction_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f64>::new();
        let a = g.variable(random(&[3, 4], &mut rng));
        let b = g.variable(random(&[4, 2], &mut rng));
        let m = g.matmul(a, b).unwrap();
        let t = g.tanh(m);
        let l = g.sum(t);
        g.backward(l).unwrap();
        (g.grad(a).unwrap().clone(), g.grad(b).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data(), a2.data());
    assert_eq!(b1.data(), b2.data());
}

#[test]
fn bce_prob_and_logits_agree() {
    let mut g = Graph::<f64>::new();
    let p = g.variable(Tensor::from_vec(vec![0.5]));
    let l = g.bce_prob(p, &[1.0]).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    let z = g.variable(Tensor::from_vec(vec![0.0]));
    let l = g.bce_with_logits(z, &[1.0]).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    let exact = g.variable(Tensor::from_vec(vec![1.0, 0.0]));
    let l = g.bce_prob(exact, &[1.0, 0.0]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn works_in_single_precision() {
    let mut g = Graph::<f32>::new();
    let x = g.variable(Tensor::scalar(3.0f32));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0f32);
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=8, 1usize..=8, 1usize..=8)
}

// Ten points per op with a fixed seed: at ε = 1e-5 a gradient entry that
// lands near 1e-5 by chance sits below f64 rounding at 1e-6 relative error,
// so an unpinned run would turn into an occasional false alarm.
proptest! {
    #![proptest_config(ProptestConfig {
        cases: 10,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x9e37_79b9),
        ..ProptestConfig::default()
    })]

    #[test]
    fn matmul_gradients((m, k, n) in dims(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = check_op(vec![random(&[m, k], &mut rng), random(&[k, n], &mut rng)], seed,
            |g, x| g.matmul(x[0], x[1]).unwrap());
        prop_assert!(r.passed, "{:?}", r.worst());
    }

    #[test]
    fn binary_gradients((m, n, _) in dims(), seed in 0u64..1000, which in 0usize..3, bcast: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rhs = if bcast { random(&[n], &mut rng) } else { random(&[m, n], &mut rng) };
        let op = [Binary::Add, Binary::Sub, Binary::Mul][which];
        let r = check_op(vec![random(&[m, n], &mut rng), rhs], seed,
            |g, x| g.binary(op, x[0], x[1]).unwrap());
        prop_assert!(r.passed, "{:?}", r.worst());
    }

    #[test]
    fn unary_gradients((m, n, _) in dims(), seed in 0u64..1000, which in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = [Unary::Sigmoid, Unary::Tanh, Unary::Relu][which];
        let r = check_op(vec![random(&[m, n], &mut rng)], seed, |g, x| {
            let a = g.affine(x[0], 1.3, 0.1);
            g.unary(op, a)
        });
        prop_assert!(r.passed, "{:?}", r.worst());
    }

    #[test]
    fn shape_op_gradients((m, n, k) in dims(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![random(&[m, n], &mut rng), random(&[m, k], &mut rng)];
        let r = check_op(inputs, seed, |g, x| {
            let c = g.concat(&[x[0], x[1]], 1).unwrap();
            let t = g.transpose(c).unwrap();
            let rs = g.reshape(t, &[m * (n + k)]).unwrap();
            g.reshape(rs, &[n + k, m]).unwrap()
        });
        prop_assert!(r.passed, "{:?}", r.worst());
    }

    #[test]
    fn row_op_gradients((m, n, _) in dims(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = (0..m + 2).map(|i| (i * 7 + seed as usize) % m).collect();
        let keep: Vec<bool> = (0..idx.len()).map(|i| !(i + seed as usize).is_multiple_of(3)).collect();
        let start = seed as usize % m;
        let inputs = vec![random(&[m, n], &mut rng), random(&[idx.len(), n], &mut rng)];
        let r = check_op(inputs, seed, |g, x| {
            let gathered = g.gather_rows(x[0], &idx, None).unwrap();
            let sel = g.select_rows(&keep, gathered, x[1]).unwrap();
            let sl = g.slice_rows(x[0], start, m - start).unwrap();
            let c = g.concat(&[sel, sl], 0).unwrap();
            g.tanh(c)
        });
        prop_assert!(r.passed, "{:?}", r.worst());
    }

    #[test]
    fn softmax_and_pool_gradients((n, steps, d) in dims(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lens: Vec<usize> = (0..n).map(|i| 1 + (i + seed as usize) % steps).collect();
        let mask: Vec<bool> = (0..n * steps).map(|k| k % steps < lens[k / steps]).collect();
        let inputs = vec![random(&[n, steps], &mut rng), random(&[steps * n, d], &mut rng)];
        let r = check_op(inputs, seed, |g, x| {
            let a = g.softmax_masked(x[0], &mask).unwrap();
            g.attention_pool(a, x[1]).unwrap()
        });
        prop_assert!(r.passed, "{:?}", r.worst());
    }

    #[test]
    fn batch_norm_gradients((m, d, _) in dims(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = m + 3;
        let valid: Vec<bool> = (0..rows).map(|r| r < 3 || !(r + seed as usize).is_multiple_of(3)).collect();
        // Spread ~0.1 so normalization scales input gradients up tenfold while
        // output rounding, fixed by the unit-variance outputs, stays put; the
        // fourth-order stencil absorbs the extra curvature that brings.
        let mut x = random(&[rows, d], &mut rng);
        x.scale(0.1);
        let inputs = vec![x, random(&[d], &mut rng), random(&[d], &mut rng)];
        let r = check_op_with(Stencil::FourthOrder, inputs, seed, |g, x| g.batch_norm(x[0], x[1], x[2], &valid, 1e-5).unwrap());
        prop_assert!(r.passed, "{:?}", r.worst());
    }

    #[test]
    fn loss_gradients(n in 1usize..=8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<f64> = (0..n).map(|i| ((i as u64 + seed) % 2) as f64).collect();
        let z = random(&[n], &mut rng);
        let r = check_op(vec![z.clone()], seed, |g, x| {
            let l = g.bce_with_logits(x[0], &labels).unwrap();
            let p = g.sigmoid(x[0]);
            let lp = g.bce_prob(p, &labels).unwrap();
            let m = g.mean(x[0]);
            let both = g.concat(&[l, lp, m], 0).unwrap();
            g.tanh(both)
        });
        prop_assert!(r.passed, "{:?}", r.worst());
    }

    #[test]
    fn softmax_rows_are_normalized_at_large_magnitudes(
        (n, steps, _) in dims(),
        scale in 1.0f64..1000.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n * steps).map(|_| rng.random_range(-scale..scale)).collect();
        let lens: Vec<usize> = (0..n).map(|_| rng.random_range(1..=steps)).collect();
        let mask: Vec<bool> = (0..n * steps).map(|k| k % steps < lens[k / steps]).collect();
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::new(&[n, steps], scores).unwrap());
        let y = g.softmax_masked(s, &mask).unwrap();
        let yv = g.value(y).data();
        for r in 0..n {
            let row = &yv[r * steps..(r + 1) * steps];
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for (c, &v) in row.iter().enumerate() {
                if mask[r * steps + c] { prop_assert!(v >= 0.0 && v.is_finite()); }
                else { prop_assert_eq!(v, 0.0); }
            }
        }
    }
}

#[test]
fn grad_check_steps_around_relu_kinks() {
    let mut store = ParamStore::new();
    let w = store
        .add("w", Tensor::new(&[2], vec![5e-6, -0.3]).unwrap())
        .unwrap();
    let report = grad_check(&mut store, &[w], 1e-4, 1e-6, |s, g| {
        let wn = g.param(s, w);
        let r = g.relu(wn);
        Ok(g.sum(r))
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
}
