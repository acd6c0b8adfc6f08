//! Layer primitives built on [`Graph`] operations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Affine map `x @ W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng);
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[1, out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

/// Multi-layer perceptron: hidden layers use `activation`, the last layer is linear.
#[derive(Clone, Debug)]
pub struct DenseStack {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl DenseStack {
    /// `widths` lists every layer boundary, input first and output last.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "a stack needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    /// Σ (in + 1) · out over layers.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| (l.in_dim + 1) * l.out_dim).sum()
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i < last {
                h = self.activation.apply(g, h);
            }
        }
        h
    }
}

/// Gated recurrent unit.
///
/// `r = σ(x Wr + h Ur)`, `z = σ(x Wz + h Uz)`, `n = tanh(x Wn + r ⊙ (h Un))`,
/// `h' = n + z ⊙ (h − n)`. Every unit of `h'` is a convex combination of a
/// `tanh` output and the previous hidden value, so it stays in (−1, 1).
#[derive(Clone, Debug)]
pub struct GruCell {
    input: Dense,
    hidden: Dense,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let input = Dense::new(store, &format!("{name}.x"), in_dim, 3 * hidden_dim, rng);
        let hidden = Dense::new(store, &format!("{name}.h"), hidden_dim, 3 * hidden_dim, rng);
        Self { input, hidden, hidden_dim }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h: Var,
    ) -> Var {
        let hd = self.hidden_dim;
        let gx = self.input.forward(g, store, x);
        let gh = self.hidden.forward(g, store, h);
        let xr = g.slice_cols(gx, 0, hd);
        let xz = g.slice_cols(gx, hd, hd);
        let xn = g.slice_cols(gx, 2 * hd, hd);
        let hr = g.slice_cols(gh, 0, hd);
        let hz = g.slice_cols(gh, hd, hd);
        let hn = g.slice_cols(gh, 2 * hd, hd);
        let r_pre = g.add(xr, hr);
        let r = g.sigmoid(r_pre);
        let z_pre = g.add(xz, hz);
        let z = g.sigmoid(z_pre);
        let gated = g.mul(r, hn);
        let n_pre = g.add(xn, gated);
        let n = g.tanh(n_pre);
        let diff = g.sub(h, n);
        let keep = g.mul(z, diff);
        g.add(n, keep)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn dense_stack_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let stack = DenseStack::new(&mut store, "mlp", &[5, 7, 3], Activation::Relu, &mut rng);
        assert_eq!(stack.num_params(), 6 * 7 + 8 * 3);
        assert_eq!(store.num_scalars(), stack.num_params());
    }

    #[test]
    fn gru_hidden_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, "gru", 4, 6, &mut rng);
        let mut h = Tensor::zeros(&[2, 6]);
        for step in 0..200 {
            let mut g = Graph::new();
            let x = g.input(Tensor::full(&[2, 4], 3.0 * ((step % 7) as f64 - 3.0)));
            let hv = g.input(h.clone());
            let out = cell.forward(&mut g, &store, x, hv);
            h = g.value(out).clone();
            assert!(h.data().iter().all(|v| v.abs() < 1.0));
        }
    }
}
