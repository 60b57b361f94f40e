use super::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{invalid, Tensor, TensorError};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences. `f` receives a graph and a leaf holding `x` and must return a
/// scalar node.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, Var) -> Result<Var, TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(invalid("gradcheck", format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |t: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::no_grad();
        let v = g.constant(t.clone());
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if !val.is_scalar() {
            return Err(TensorError::NotScalar(val.shape().to_vec()));
        }
        let y = val.item();
        if !y.is_finite() {
            return Err(TensorError::NonFinite("gradcheck objective".into()));
        }
        Ok(y)
    };
    eval(x)?;

    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt(v).expect("leaf gradient").clone();

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Like [`finite_diff_check`], but perturbs selected coordinates
/// `(parameter, flat index)` of a parameter store. Inputs to check can be
/// registered in the store alongside the model's parameters.
pub fn param_diff_check<F>(f: F, store: &ParamStore<f64>, coords: &[(ParamId, usize)], eps: f64) -> Result<f64, TensorError>
where
    F: for<'p> Fn(&mut Graph<'p, f64>, &'p ParamStore<f64>) -> Result<Var, TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(invalid("gradcheck", format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if let Some(&(id, _)) = coords.iter().find(|(id, _)| !store.is_trainable(*id)) {
        return Err(invalid("gradcheck", format!("`{}` is not trainable", store.name(id))));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::no_grad();
        let out = f(&mut g, s)?;
        let val = g.value(out);
        if !val.is_scalar() {
            return Err(TensorError::NotScalar(val.shape().to_vec()));
        }
        let y = val.item();
        if !y.is_finite() {
            return Err(TensorError::NonFinite("gradcheck objective".into()));
        }
        Ok(y)
    };
    let analytic = {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.backward(out)?.for_params(store)
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for &(id, i) in coords {
        let orig = store.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(id).data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
