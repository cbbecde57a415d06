use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::params::ParamStore;

/// Denominator floor of [`rel_error`].
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Worst relative error between analytic and central-difference gradients,
/// per checked input.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub epsilon: f64,
    pub entries: Vec<(String, f64)>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

fn scalar(v: Var<'_, f64>) -> f64 {
    v.value().item()
}

/// Checks `f` with respect to each tensor in `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    check_inputs(Graph::new, f, inputs, epsilon)
}

/// [`grad_check`] for functions that also read parameters from `store`
/// (held fixed).
pub fn grad_check_inputs<F>(store: &ParamStore<f64>, f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    check_inputs(|| store.graph(), f, inputs, epsilon)
}

fn check_inputs<F>(new_graph: impl Fn() -> Graph<f64>, f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = new_graph();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .map(|v| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    };
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = new_graph();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(scalar(f(&g, &vars)?))
    };

    let mut entries = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + epsilon;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = x0 - epsilon;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(rel_error(grad.data()[i], numeric));
        }
        entries.push((format!("input{k}"), worst));
    }
    Ok(GradReport { epsilon, entries })
}

/// Checks `f` with respect to every entry of every parameter in `store`.
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, epsilon: f64) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph<f64>) -> Result<Var<'g, f64>>,
{
    let g = store.graph();
    let loss = f(&g)?;
    let grads = g.backward(loss)?;
    let mut work = store.clone();
    let mut entries = Vec::with_capacity(store.len());
    for id in store.ids() {
        let analytic = grads.param(id).map(|t| t.data().to_vec());
        let mut worst: f64 = 0.0;
        for i in 0..store.value(id).numel() {
            let x0 = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = x0 + epsilon;
            let plus = scalar(f(&work.graph())?);
            work.value_mut(id).data_mut()[i] = x0 - epsilon;
            let minus = scalar(f(&work.graph())?);
            work.value_mut(id).data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            worst = worst.max(rel_error(a, numeric));
        }
        entries.push((store.get(id).name.clone(), worst));
    }
    Ok(GradReport { epsilon, entries })
}
