//! Fits a small MLP to sin(3x) with Adam, after checking its gradients
//! against central finite differences in f64.
//!
//! cargo run --release -p diffcore --example fit_curve

use diffcore::{adam_step, grad_check, Activation, AdamConfig, DenseStack, Graph, OptimState, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(n: usize) -> (Tensor<f64>, Tensor<f64>) {
    let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let ys = xs.iter().map(|x| (3.0 * x).sin()).collect();
    (Tensor::from_vec(&[n, 1], xs).unwrap(), Tensor::from_vec(&[n, 1], ys).unwrap())
}

fn main() -> diffcore::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let net = DenseStack::new(&mut store, "mlp", &[1, 32, 32, 1], Activation::Tanh, &mut rng);
    let (x, y) = data(64);

    let loss = |g: &mut Graph<f64>, store: &ParamStore<f64>| {
        let xi = g.input(x.clone());
        let yi = g.input(y.clone());
        let pred = net.forward(g, store, xi);
        let d = g.sub(pred, yi);
        let sq = g.square(d);
        g.mean(sq)
    };

    let report = grad_check(&mut store, 1e-6, 7, |g, s| Ok(loss(g, s)))?;
    println!("gradient check: max relative error {:.2e} over {} parameters", report.max_rel_error, report.checked);

    let mut opt = OptimState::new(&store, AdamConfig { lr: 3e-3, ..Default::default() });
    for step in 0..=2000 {
        let mut g = Graph::new();
        let l = loss(&mut g, &store);
        let grads = g.backward(l)?;
        store.zero_grad();
        grads.accumulate_into(&mut store);
        adam_step(&mut store, &mut opt)?;
        if step % 400 == 0 {
            println!("step {step:>5}  mse {:.6}", g.scalar(l));
        }
    }
    Ok(())
}
