//! Central finite-difference verification of analytic gradients.

use crate::{Graph, ParamId, ParamStore, Result, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// `(f(θ+eps) − f(θ−eps)) / 2eps` for every parameter scalar in `store`.
///
/// The error per scalar is `|analytic − numeric| / max(1, |analytic|)`.
/// `stride` > 1 checks every `stride`-th scalar of each parameter to bound
/// the cost on larger models.
pub fn grad_check<F>(store: &mut ParamStore<f64>, eps: f64, stride: usize, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_owned(store, |s| s, eps, stride, |g, s| f(g, s))
}

/// [`grad_check`] for a value `owner` that holds its parameters; `store`
/// projects to the checked store and `f` builds the loss from the owner.
pub fn grad_check_owned<M, S, F>(owner: &mut M, mut store: S, eps: f64, stride: usize, mut f: F) -> Result<GradCheckReport>
where
    S: FnMut(&mut M) -> &mut ParamStore<f64>,
    F: FnMut(&mut Graph<f64>, &M) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, owner)?;
    let grads = g.backward(loss)?;
    let st = store(owner);
    st.zero_grad();
    grads.accumulate_into(st);
    let analytic: Vec<Tensor<f64>> = st.iter().map(|(_, p)| p.grad.clone()).collect();
    let ids: Vec<ParamId> = st.ids().collect();

    let mut eval = |owner: &M| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, owner)?;
        Ok(g.scalar(l))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    for id in ids {
        let n = store(owner).value(id).len();
        for k in (0..n).step_by(stride.max(1)) {
            let orig = store(owner).value(id).data()[k];
            store(owner).get_mut(id).value.data_mut()[k] = orig + eps;
            let up = eval(owner)?;
            store(owner).get_mut(id).value.data_mut()[k] = orig - eps;
            let down = eval(owner)?;
            store(owner).get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.index()].data()[k];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!(
                    "{}[{k}]: analytic {a:.6e}, numeric {numeric:.6e}",
                    store(owner).get(id).name
                );
            }
        }
    }
    Ok(report)
}

/// Same check with respect to free input tensors instead of parameters.
pub fn grad_check_inputs<F>(inputs: &[Tensor<f64>], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let build = |g: &mut Graph<f64>, xs: &[Tensor<f64>]| -> Vec<Var> {
        xs.iter().map(|x| g.leaf(x.clone())).collect()
    };
    let mut g = Graph::new();
    let vars = build(&mut g, inputs);
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut xs = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 };
    for i in 0..xs.len() {
        for k in 0..xs[i].len() {
            let orig = xs[i].data()[k];
            let mut value_at = |x: f64, xs: &mut Vec<Tensor<f64>>| -> Result<f64> {
                xs[i].data_mut()[k] = x;
                let mut g = Graph::new();
                let vars = build(&mut g, xs);
                let l = f(&mut g, &vars)?;
                Ok(g.scalar(l))
            };
            let up = value_at(orig + eps, &mut xs)?;
            let down = value_at(orig - eps, &mut xs)?;
            xs[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].data()[k];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("input {i}[{k}]: analytic {a:.6e}, numeric {numeric:.6e}");
            }
        }
    }
    Ok(report)
}
