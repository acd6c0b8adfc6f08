use diffcore::{
    categorical_kl, categorical_sample_st, cosine_sim, cosine_sim_eps, grad_check, grad_check_inputs, kl_balanced, Activation,
    DenseStack, Graph, GruCell, ParamStore, SampleMode, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.input(random(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w);
    g.sum(p)
}

fn check_unary(name: &str, lo: f64, hi: f64, op: impl Fn(&mut Graph<f64>, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[3, 4], lo, hi);
    let report = grad_check_inputs(&[x], EPS, |g, v| {
        let y = op(g, v[0]);
        Ok(weighted_sum(g, y, 5))
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{name}: {report:?}");
}

#[test]
fn elementwise_ops_match_finite_differences() {
    check_unary("relu", 0.1, 2.0, |g, x| g.relu(x));
    check_unary("relu-neg", -2.0, -0.1, |g, x| g.relu(x));
    check_unary("sigmoid", -3.0, 3.0, |g, x| g.sigmoid(x));
    check_unary("tanh", -3.0, 3.0, |g, x| g.tanh(x));
    check_unary("exp", -2.0, 2.0, |g, x| g.exp(x));
    check_unary("ln", 0.2, 3.0, |g, x| g.ln(x));
    check_unary("softplus", -4.0, 4.0, |g, x| g.softplus(x));
    check_unary("symlog", 0.05, 5.0, |g, x| g.symlog(x));
    check_unary("symlog-neg", -5.0, -0.05, |g, x| g.symlog(x));
    check_unary("symexp", -2.0, 2.0, |g, x| g.symexp(x));
    check_unary("square", -2.0, 2.0, |g, x| g.square(x));
    check_unary("sqrt", 0.2, 3.0, |g, x| g.sqrt(x));
    check_unary("recip", 0.3, 3.0, |g, x| g.recip(x));
    check_unary("max_scalar", -2.0, 2.0, |g, x| g.max_scalar(x, 5.0));
    check_unary("add_scalar", -2.0, 2.0, |g, x| g.add_scalar(x, 0.7));
    check_unary("scale", -2.0, 2.0, |g, x| g.scale(x, -1.3));
    check_unary("log_softmax", -2.0, 2.0, |g, x| g.log_softmax_groups(x, 2));
    check_unary("softmax", -2.0, 2.0, |g, x| g.softmax_groups(x, 4));
    check_unary("sum_cols", -2.0, 2.0, |g, x| g.sum_cols(x));
    check_unary("sum_rows", -2.0, 2.0, |g, x| g.sum_rows(x));
    check_unary("mean", -2.0, 2.0, |g, x| g.mean(x));
    check_unary("slice_cols", -2.0, 2.0, |g, x| g.slice_cols(x, 1, 2));
    check_unary("slice_rows", -2.0, 2.0, |g, x| g.slice_rows(x, 1, 2));
    check_unary("select_rows", -2.0, 2.0, |g, x| g.select_rows(x, &[2, 0, 2]));
}

#[test]
fn binary_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[3, 4], -1.0, 1.0);
    let m = random(&mut rng, &[4, 2], -1.0, 1.0);
    let row = random(&mut rng, &[1, 4], -1.0, 1.0);
    let col = random(&mut rng, &[3, 1], -1.0, 1.0);
    type Bin = fn(&mut Graph<f64>, Var, Var) -> Var;
    let cases: Vec<(&str, Tensor<f64>, Tensor<f64>, Bin)> = vec![
        ("add", a.clone(), b.clone(), |g, x, y| g.add(x, y)),
        ("sub", a.clone(), b.clone(), |g, x, y| g.sub(x, y)),
        ("mul", a.clone(), b.clone(), |g, x, y| g.mul(x, y)),
        ("matmul", a.clone(), m, |g, x, y| g.matmul(x, y)),
        ("add_row", a.clone(), row, |g, x, y| g.add_row(x, y)),
        ("mul_col", a.clone(), col, |g, x, y| g.mul_col(x, y)),
        ("concat_cols", a.clone(), b.clone(), |g, x, y| g.concat_cols(&[x, y])),
        ("concat_rows", a.clone(), b.clone(), |g, x, y| g.concat_rows(&[x, y])),
    ];
    for (name, x, y, op) in cases {
        let report = grad_check_inputs(&[x, y], EPS, |g, v| {
            let out = op(g, v[0], v[1]);
            Ok(weighted_sum(g, out, 9))
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "{name}: {report:?}");
    }
}

#[test]
fn quadratic_is_exact_to_rounding() {
    let mut store = ParamStore::<f64>::new();
    store.add("x", Tensor::from_f64(&[1, 3], &[0.5, -1.5, 2.0]).unwrap());
    let report = grad_check(&mut store, EPS, 1, |g, s| {
        let id = s.find("x").unwrap();
        let x = g.param(s, id);
        let sq = g.square(x);
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn dense_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::<f64>::new();
    let mlp = DenseStack::new(&mut store, "mlp", &[5, 8, 8, 3], Activation::Relu, &mut rng);
    let x = random(&mut rng, &[6, 5], -1.0, 1.0);
    let target = random(&mut rng, &[6, 3], -1.0, 1.0);
    let report = grad_check(&mut store, EPS, 1, |g, s| {
        let xv = g.input(x.clone());
        let y = mlp.forward(g, s, xv);
        let t = g.input(target.clone());
        let d = g.sub(y, t);
        let sq = g.square(d);
        Ok(g.mean(sq))
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn gru_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut store = ParamStore::<f64>::new();
    let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| random(&mut rng, &[2, 3], -1.0, 1.0)).collect();
    let report = grad_check(&mut store, EPS, 1, |g, s| {
        let mut h = g.input(Tensor::zeros(&[2, 4]));
        for x in &xs {
            let xv = g.input(x.clone());
            h = cell.forward(g, s, xv, h);
        }
        Ok(weighted_sum(g, h, 3))
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn balanced_kl_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let post = random(&mut rng, &[4, 6], -2.0, 2.0);
    let prior = random(&mut rng, &[4, 6], -2.0, 2.0);
    // Reference: the plain KL, whose value the balanced loss shares.
    let report = grad_check_inputs(&[post.clone(), prior.clone()], EPS, |g, v| {
        let k = categorical_kl(g, v[0], v[1], 3);
        Ok(g.mean(k))
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");

    let plain = {
        let mut g = Graph::<f64>::new();
        let (p, q) = (g.leaf(post.clone()), g.leaf(prior.clone()));
        let k = categorical_kl(&mut g, p, q, 3);
        let m = g.mean(k);
        let gr = g.backward(m).unwrap();
        (gr.wrt(p).unwrap().clone(), gr.wrt(q).unwrap().clone())
    };
    // Balancing splits that gradient: alpha to the prior, 1 - alpha to the posterior.
    for alpha in [0.2, 0.5, 0.8] {
        let mut g = Graph::<f64>::new();
        let (p, q) = (g.leaf(post.clone()), g.leaf(prior.clone()));
        let k = kl_balanced(&mut g, p, q, 3, alpha, 0.0);
        let gr = g.backward(k).unwrap();
        for (a, b) in gr.wrt(p).unwrap().data().iter().zip(plain.0.data()) {
            assert!((a - (1.0 - alpha) * b).abs() < 1e-12);
        }
        for (a, b) in gr.wrt(q).unwrap().data().iter().zip(plain.1.data()) {
            assert!((a - alpha * b).abs() < 1e-12);
        }
    }
}

#[test]
fn straight_through_surrogate_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let logits = random(&mut rng, &[3, 8], -2.0, 2.0);
    let report = grad_check_inputs(&[logits], EPS, |g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let s = categorical_sample_st(g, v[0], 4, SampleMode::Relaxed, &mut r);
        Ok(weighted_sum(g, s, 4))
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");

    // The sampled path must produce the same gradient as the surrogate.
    let logits = random(&mut rng, &[3, 8], -2.0, 2.0);
    let grad_of = |mode: SampleMode| {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(logits.clone());
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let s = categorical_sample_st(&mut g, l, 4, mode, &mut r);
        let out = weighted_sum(&mut g, s, 4);
        g.backward(out).unwrap().wrt(l).unwrap().clone()
    };
    assert_eq!(grad_of(SampleMode::Sample), grad_of(SampleMode::Relaxed));
}

#[test]
fn cosine_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let a = random(&mut rng, &[3, 5], -1.0, 1.0);
    let b = random(&mut rng, &[3, 5], -1.0, 1.0);
    let report = grad_check_inputs(&[a, b], EPS, |g, v| {
        let c = cosine_sim(g, v[0], v[1])?;
        Ok(weighted_sum(g, c, 6))
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn smoothed_cosine_matches_finite_differences_and_handles_zero_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let a = random(&mut rng, &[3, 5], -1.0, 1.0);
    let b = random(&mut rng, &[3, 5], -1.0, 1.0);
    let report = grad_check_inputs(&[a.clone(), b.clone()], EPS, |g, v| {
        let c = cosine_sim_eps(g, v[0], v[1], 1e-3);
        Ok(weighted_sum(g, c, 6))
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");

    let mut g = Graph::<f64>::new();
    let (va, vb) = (g.input(a), g.input(b));
    let exact = cosine_sim(&mut g, va, vb).unwrap();
    let smooth = cosine_sim_eps(&mut g, va, vb, 1e-12);
    for (x, y) in g.value(exact).data().iter().zip(g.value(smooth).data()) {
        assert!((x - y).abs() < 1e-9);
    }
    let zero = g.input(Tensor::zeros(&[3, 5]));
    assert!(cosine_sim(&mut g, zero, vb).is_err());
    let c = cosine_sim_eps(&mut g, zero, vb, 1e-8);
    assert!(g.value(c).data().iter().all(|&v| v == 0.0));
}

#[test]
fn symlog_round_trip_examples() {
    use diffcore::{symexp, symlog};
    assert_eq!(symlog(0.0f64), 0.0);
    assert!((symlog(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-15);
    assert!((symexp(symlog(-3.7f64)) + 3.7).abs() < 1e-12);
}
