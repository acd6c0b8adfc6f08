//! Categorical latents, balanced KL and cosine similarity.

use rand::Rng;

use crate::graph::softmax_in_place;
use crate::{Error, Graph, Real, Result, Tensor, Var};

/// How [`categorical_sample_st`] produces its forward value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// One-hot draw per group, straight-through gradient.
    Sample,
    /// One-hot argmax per group, straight-through gradient.
    Mode,
    /// Forward value is the probability vector itself. This is the surrogate
    /// whose exact derivative the straight-through backward pass reproduces,
    /// and it is what finite-difference checks differentiate.
    Relaxed,
}

/// Per-group one-hot sample of `logits` (`[rows, groups * classes]`) with a
/// straight-through gradient to the group probabilities.
pub fn categorical_sample_st<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    classes: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Var {
    let probs = g.softmax_groups(logits, classes);
    if mode == SampleMode::Relaxed {
        return probs;
    }
    let p = g.value(probs);
    let mut onehot = Tensor::zeros(p.shape());
    for (group, out) in p.data().chunks(classes).zip(onehot.data_mut().chunks_mut(classes)) {
        let pick = match mode {
            SampleMode::Mode => argmax(group),
            _ => {
                let u = T::lit(rng.random::<f64>());
                let mut acc = T::zero();
                let mut pick = classes - 1;
                for (i, &q) in group.iter().enumerate() {
                    acc = acc + q;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        };
        out[pick] = T::one();
    }
    g.straight_through(probs, onehot)
}

fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Row-wise `KL(p ‖ q)` summed over groups, from logits. Returns `[rows, 1]`.
pub fn categorical_kl<T: Real>(g: &mut Graph<T>, p_logits: Var, q_logits: Var, classes: usize) -> Var {
    let logp = g.log_softmax_groups(p_logits, classes);
    let logq = g.log_softmax_groups(q_logits, classes);
    let p = g.exp(logp);
    let diff = g.sub(logp, logq);
    let terms = g.mul(p, diff);
    g.sum_cols(terms)
}

/// Dynamics loss with KL balancing and a free-nats floor.
///
/// Value: mean over rows of `max(KL(post ‖ prior), free_nats)`.
/// Gradient: `alpha · KL(sg(post) ‖ prior) + (1 − alpha) · KL(post ‖ sg(prior))`,
/// zero for rows whose KL is below the floor.
pub fn kl_balanced<T: Real>(
    g: &mut Graph<T>,
    post_logits: Var,
    prior_logits: Var,
    classes: usize,
    alpha: T,
    free_nats: T,
) -> Var {
    let post_sg = g.stop_grad(post_logits);
    let prior_sg = g.stop_grad(prior_logits);
    let rows = if alpha >= T::one() {
        let k = categorical_kl(g, post_sg, prior_logits, classes);
        g.scale(k, alpha)
    } else if alpha <= T::zero() {
        let k = categorical_kl(g, post_logits, prior_sg, classes);
        g.scale(k, T::one() - alpha)
    } else {
        let to_prior = categorical_kl(g, post_sg, prior_logits, classes);
        let to_post = categorical_kl(g, post_logits, prior_sg, classes);
        let a = g.scale(to_prior, alpha);
        let b = g.scale(to_post, T::one() - alpha);
        g.add(a, b)
    };
    let clipped = g.max_scalar(rows, free_nats);
    g.mean(clipped)
}

/// Row-wise cosine similarity, `[rows, d] x [rows, d] -> [rows, 1]`.
pub fn cosine_sim<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    for v in [a, b] {
        let t = g.value(v);
        let c = t.cols();
        if t.data().chunks(c).any(|row| row.iter().all(|&x| x == T::zero())) {
            return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
        }
    }
    let ab = g.mul(a, b);
    let dot = g.sum_cols(ab);
    let aa = g.square(a);
    let na2 = g.sum_cols(aa);
    let bb = g.square(b);
    let nb2 = g.sum_cols(bb);
    let prod = g.mul(na2, nb2);
    let denom = g.sqrt(prod);
    let inv = g.recip(denom);
    Ok(g.mul(dot, inv))
}

/// Row-wise `a·b / sqrt((‖a‖² + eps)(‖b‖² + eps))`. Defined everywhere, so
/// training losses cannot fail on a row that happens to be all zeros.
pub fn cosine_sim_eps<T: Real>(g: &mut Graph<T>, a: Var, b: Var, eps: T) -> Var {
    let ab = g.mul(a, b);
    let dot = g.sum_cols(ab);
    let aa = g.square(a);
    let na2 = g.sum_cols(aa);
    let na2 = g.add_scalar(na2, eps);
    let bb = g.square(b);
    let nb2 = g.sum_cols(bb);
    let nb2 = g.add_scalar(nb2, eps);
    let prod = g.mul(na2, nb2);
    let denom = g.sqrt(prod);
    let inv = g.recip(denom);
    g.mul(dot, inv)
}

/// Probabilities of `logits` per group, outside of any graph.
pub fn group_probs<T: Real>(logits: &Tensor<T>, classes: usize) -> Tensor<T> {
    let mut out = logits.clone();
    for group in out.data_mut().chunks_mut(classes) {
        softmax_in_place(group);
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn saturated_logits_sample_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::from_f64(&[1, 3], &[20.0, -20.0, -20.0]).unwrap());
        let probs = group_probs(g.value(l), 3);
        assert!(probs.data()[0] > 1.0 - 1e-8);
        for _ in 0..100 {
            let s = categorical_sample_st(&mut g, l, 3, SampleMode::Sample, &mut rng);
            assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn uniform_logits_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let classes = 4;
        let draws = 10_000;
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::zeros(&[draws, classes]));
        let s = categorical_sample_st(&mut g, l, classes, SampleMode::Sample, &mut rng);
        let mut counts = vec![0usize; classes];
        for row in g.value(s).data().chunks(classes) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            counts[row.iter().position(|&v| v == 1.0).unwrap()] += 1;
        }
        let p = 1.0 / classes as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn identical_distributions_hit_floor() {
        let mut g = Graph::<f64>::new();
        let vals = [0.3, -1.2, 0.5, 2.0, 0.1, -0.4];
        let post = g.leaf(Tensor::from_f64(&[1, 6], &vals).unwrap());
        let prior = g.leaf(Tensor::from_f64(&[1, 6], &vals).unwrap());
        let loss = kl_balanced(&mut g, post, prior, 3, 0.8, 1.0);
        assert_eq!(g.scalar(loss), 1.0);
        let grads = g.backward(loss).unwrap();
        for v in [post, prior] {
            assert!(grads.wrt(v).map(|t| t.data().iter().all(|&x| x == 0.0)).unwrap_or(true));
        }
    }

    #[test]
    fn alpha_one_updates_prior_only() {
        let mut g = Graph::<f64>::new();
        let post = g.leaf(Tensor::from_f64(&[1, 3], &[2.0, 0.0, -1.0]).unwrap());
        let prior = g.leaf(Tensor::from_f64(&[1, 3], &[-1.0, 0.5, 1.0]).unwrap());
        let loss = kl_balanced(&mut g, post, prior, 3, 1.0, 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(post).is_none());
        assert!(grads.wrt(prior).unwrap().norm() > 0.0);
    }

    #[test]
    fn closed_form_kl() {
        let p: [f64; 3] = [0.2, 0.5, 0.3];
        let q: [f64; 3] = [0.6, 0.1, 0.3];
        let expected: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        let mut g = Graph::<f64>::new();
        let pl = g.input(Tensor::from_f64(&[1, 3], &p.map(f64::ln)).unwrap());
        let ql = g.input(Tensor::from_f64(&[1, 3], &q.map(f64::ln)).unwrap());
        let loss = kl_balanced(&mut g, pl, ql, 3, 0.8, 0.0);
        assert!((g.scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn cosine_cases() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_f64(&[3, 2], &[1.0, 2.0, 1.0, 0.0, 1.5, -0.5]).unwrap());
        let b = g.input(Tensor::from_f64(&[3, 2], &[1.0, 2.0, 0.0, 1.0, -1.5, 0.5]).unwrap());
        let c = cosine_sim(&mut g, a, b).unwrap();
        let v = g.value(c).data().to_vec();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
        assert!((v[2] + 1.0).abs() < 1e-12);
        let z = g.input(Tensor::zeros(&[1, 2]));
        let one = g.input(Tensor::full(&[1, 2], 1.0));
        assert!(cosine_sim(&mut g, z, one).is_err());
    }
}
