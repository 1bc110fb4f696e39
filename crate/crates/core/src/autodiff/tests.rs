use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Central-difference oracle: perturbs each coordinate of each input and
/// re-evaluates the forward pass only. Returns the norm-scaled max error
/// `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)`.
fn fd_error(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let step = 1e-5;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).item()
    };

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (k, input) in inputs.iter().enumerate() {
        analytic.extend_from_slice(grads.wrt(vars[k]).data());
        for i in 0..input.numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += step;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * step;
            let down = eval(&xs);
            numeric.push((up - down) / (2.0 * step));
        }
    }
    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(1e-12_f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = random_matrix(rng, rows, cols);
    for r in 0..rows {
        let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v /= n);
    }
    t
}

// ---- matmul ----

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(2));
    let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let c = g.matmul(i, a).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_row_times_column() {
    let mut g = Graph::new();
    let a = g.constant(mat(&[&[1.0, 2.0]]));
    let b = g.constant(mat(&[&[3.0], &[4.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 1]);
    assert_eq!(g.value(c).item(), 11.0);
}

#[test]
fn matmul_inner_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
}

// ---- relu ----

#[test]
fn relu_sign_cases_and_subgradient() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(a);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(r);
    let grads = g.backward(s).unwrap();
    // derivative at exactly zero is zero
    assert_eq!(grads.wrt(a).data(), &[0.0, 0.0, 1.0]);

    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![-1.0, 2.0]));
    let r = g.relu(a);
    let s = g.sum(r);
    assert_eq!(g.backward(s).unwrap().wrt(a).data(), &[0.0, 1.0]);
}

#[test]
fn relu_positive_region_is_identity() {
    let mut g = Graph::new();
    let x = Tensor::vector(vec![0.1, 3.0, 7.5]);
    let a = g.constant(x.clone());
    let r = g.relu(a);
    assert_eq!(g.value(r), &x);
}

// ---- l2_normalize ----

#[test]
fn l2_normalize_examples() {
    let mut g = Graph::new();
    let a = g.constant(mat(&[&[1.0, 0.0], &[3.0, 4.0]]));
    let n = g.l2_normalize(a).unwrap();
    assert!(close(g.value(n).data(), &[1.0, 0.0, 0.6, 0.8], 1e-15));

    let z = g.constant(mat(&[&[0.0, 0.0]]));
    assert!(matches!(g.l2_normalize(z), Err(Error::DegenerateRepresentation { .. })));
}

// ---- squared_distance / batch_mean ----

#[test]
fn squared_distance_examples() {
    let mut g = Graph::new();
    let a = g.constant(mat(&[&[1.0, 0.0], &[0.3, -0.2], &[0.6, 0.8]]));
    let b = g.constant(mat(&[&[0.0, 1.0], &[0.3, -0.2], &[-0.6, -0.8]]));
    let d = g.squared_distance(a, b).unwrap();
    assert!(close(g.value(d).data(), &[2.0, 0.0, 4.0], 1e-15));

    let c = g.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(g.squared_distance(a, c), Err(Error::Dimension { .. })));
}

#[test]
fn batch_mean_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![2.0, 4.0]));
    let m = g.batch_mean(a).unwrap();
    assert_eq!(g.value(m).item(), 3.0);

    let c = g.constant(Tensor::vector(vec![-1.25]));
    let m = g.batch_mean(c).unwrap();
    assert_eq!(g.value(m).item(), -1.25);

    let e = g.constant(Tensor::vector(vec![]));
    assert!(matches!(g.batch_mean(e), Err(Error::EmptyBatch(_))));
}

// ---- exp / log ----

#[test]
fn exp_log_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::vector(vec![0.0]));
    let e = g.exp(z);
    assert_eq!(g.value(e).item(), 1.0);

    let one = g.constant(Tensor::vector(vec![1.0]));
    let l = g.log(one).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let x = g.constant(Tensor::vector(vec![(-8.0f64).exp()]));
    let l = g.log(x).unwrap();
    assert!((g.value(l).item() + 8.0).abs() < 1e-14);

    let bad = g.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(g.log(bad), Err(Error::Domain { .. })));
}

// ---- stop_gradient ----

#[test]
fn stop_gradient_blocks_backward() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.5, -2.0]));
    let s = g.stop_gradient(a);
    assert_eq!(g.value(s), g.value(a));
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(a).data(), &[0.0, 0.0]);
    assert!(grads.get(s).is_none());
}

#[test]
fn stop_gradient_freezes_one_factor() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![2.0]));
    let s = g.stop_gradient(a);
    let p = g.mul(a, s).unwrap();
    let loss = g.sum(p);
    assert_eq!(g.backward(loss).unwrap().wrt(a).data(), &[2.0]);
}

// ---- tangential ----

#[test]
fn tangential_filter_examples() {
    let z = mat(&[&[1.0, 0.0]]);
    let out = tangential_filter(&mat(&[&[1.0, 1.0]]), &z).unwrap();
    assert_eq!(out.data(), &[0.0, 1.0]);

    let out = tangential_filter(&mat(&[&[-3.0, 0.0]]), &z).unwrap();
    assert_eq!(out.data(), &[0.0, 0.0]);

    let out = tangential_filter(&mat(&[&[0.0, 2.5]]), &z).unwrap();
    assert_eq!(out.data(), &[0.0, 2.5]);

    let err = tangential_filter(&mat(&[&[1.0, 1.0]]), &mat(&[&[1.0, 1.0]]));
    assert!(matches!(err, Err(Error::Precondition(_))));
}

#[test]
fn tangential_node_filters_backward_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = random_unit_rows(&mut rng, 4, 3);
    let w = random_matrix(&mut rng, 4, 3);
    let mut g = Graph::new();
    let zv = g.param(z.clone());
    let t = g.tangential(zv).unwrap();
    assert_eq!(g.value(t), &z);
    let wv = g.constant(w.clone());
    let prod = g.mul(t, wv).unwrap();
    let loss = g.sum(prod);
    let grad = g.backward(loss).unwrap().wrt(zv).clone();
    let expected = tangential_filter(&w, &z).unwrap();
    assert!(close(grad.data(), expected.data(), 1e-15));
}

// ---- backward ----

#[test]
fn backward_linear_and_quadratic() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = g.sum(a);
    assert_eq!(g.backward(s).unwrap().wrt(a).data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(a, a).unwrap();
    let s = g.sum(sq);
    assert_eq!(g.backward(s).unwrap().wrt(a).data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(a), Err(Error::Contract(_))));
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_matrix(&mut rng, 5, 4);
    let w = random_matrix(&mut rng, 4, 3);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let wv = g.param(w);
    let h = g.matmul(xv, wv).unwrap();
    let r = g.relu(h);
    let n = g.l2_normalize(r).unwrap_or(h);
    let s = g.sum(n);
    let a = g.backward(s).unwrap().wrt(wv).clone();
    let b = g.backward(s).unwrap().wrt(wv).clone();
    assert_eq!(a.data(), b.data());
}

// ---- finite-difference oracle, one per primitive ----

const FD_TOL: f64 = 1e-4;

#[test]
fn fd_matmul_add_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 4, 2), Tensor::vector(vec![0.3, -0.7])];
    let err = fd_error(&inputs, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        let b = g.add_bias(m, v[2])?;
        let sq = g.mul(b, b)?;
        Ok(g.sum(sq))
    });
    assert!(err <= FD_TOL, "{err}");
}

#[test]
fn fd_elementwise_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_matrix(&mut rng, 3, 3);
    let b = random_matrix(&mut rng, 3, 3).map(|v| v.abs() + 0.5);
    let err = fd_error(&[a, b], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let q = g.div(d, v[1])?;
        let m = g.mul(q, v[0])?;
        let sc = g.scale(m, -1.7);
        Ok(g.sum(sc))
    });
    assert!(err <= FD_TOL, "{err}");
}

#[test]
fn fd_relu_exp_log() {
    // keep away from the relu kink so the central difference is valid
    let a = Tensor::vector(vec![-0.9, -0.2, 0.35, 1.2]);
    let err = fd_error(&[a], |g, v| {
        let r = g.relu(v[0]);
        let e = g.exp(r);
        let l = g.log(e)?;
        let e2 = g.exp(v[0]);
        let both = g.mul(l, e2)?;
        Ok(g.sum(both))
    });
    assert!(err <= FD_TOL, "{err}");
}

#[test]
fn fd_normalize_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_matrix(&mut rng, 4, 3);
    let w = random_matrix(&mut rng, 4, 3);
    let err = fd_error(&[a.clone(), w.clone()], |g, v| {
        let n = g.l2_normalize(v[0])?;
        let p = g.mul(n, v[1])?;
        Ok(g.sum(p))
    });
    assert!(err <= FD_TOL, "{err}");

    // detached mode: forward identical, backward drops the norm's dependence.
    let mut g = Graph::new();
    let av = g.param(a.clone());
    let wv = g.constant(w.clone());
    let n = g.l2_normalize_detached(av).unwrap();
    let p = g.mul(n, wv).unwrap();
    let s = g.sum(p);
    let grad = g.backward(s).unwrap().wrt(av).clone();
    for r in 0..4 {
        let norm = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..3 {
            assert!((grad.data()[r * 3 + c] - w.row(r)[c] / norm).abs() < 1e-15);
        }
    }
}

#[test]
fn fd_distances_dots_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_matrix(&mut rng, 4, 3);
    let b = random_matrix(&mut rng, 4, 3);
    let s = Tensor::vector(vec![0.5, -1.0, 2.0, 0.25]);
    let err = fd_error(&[a, b, s], |g, v| {
        let d = g.squared_distance(v[0], v[1])?;
        let dot = g.row_dot(v[0], v[1])?;
        let mr = g.mul_rows(v[0], v[2])?;
        let dd = g.squared_distance(mr, v[1])?;
        let t = g.add(d, dot)?;
        let t = g.mul(t, dd)?;
        g.batch_mean(t)
    });
    assert!(err <= FD_TOL, "{err}");
}

#[test]
fn fd_pairwise_off_diag() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_matrix(&mut rng, 5, 3);
    let err = fd_error(&[a], |g, v| {
        let d = g.pairwise_sq_dist(v[0])?;
        let s = g.scale(d, -2.0);
        let e = g.exp(s);
        let m = g.off_diag_mean(e)?;
        g.log(m)
    });
    assert!(err <= FD_TOL, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_rows_are_unit(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, rows, cols).map(|v| v + 1e-3);
        let mut g = Graph::new();
        let av = g.constant(a);
        if let Ok(n) = g.l2_normalize(av) {
            for r in 0..rows {
                let norm = g.value(n).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tangential_output_is_orthogonal(seed in any::<u64>(), rows in 1usize..6, cols in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_unit_rows(&mut rng, rows, cols);
        let gm = random_matrix(&mut rng, rows, cols).map(|v| 10.0 * v);
        let out = tangential_filter(&gm, &z).unwrap();
        for r in 0..rows {
            let dot: f64 = out.row(r).iter().zip(z.row(r)).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() <= 1e-10);
        }
    }

    #[test]
    fn stop_gradient_is_bit_identical_forward(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, 3, 4);
        let mut g = Graph::new();
        let av = g.param(a.clone());
        let s = g.stop_gradient(av);
        prop_assert_eq!(g.value(s), &a);
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.wrt(av).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composed_chain_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 4, 3);
        let w = random_matrix(&mut rng, 3, 5);
        let err = fd_error(&[x, w], |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let e = g.exp(h);
            let n = g.l2_normalize(e)?;
            let d = g.pairwise_sq_dist(n)?;
            let m = g.off_diag_mean(d)?;
            Ok(m)
        });
        prop_assert!(err <= FD_TOL, "{}", err);
    }
}
