use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences, returning `max_i |a_i − n_i| / max(1e-8, |a_i| + |n_i|)`.
///
/// `f` builds the function on the given graph from the input variable and
/// returns the scalar root.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("finite difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let root = f(&mut g, xv)?;
    let grads = g.backward(root)?;
    let analytic = match grads.get(xv) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.constant(probe);
        let r = f(&mut g, v)?;
        let out = g.value(r).item();
        if !out.is_finite() {
            return Err(Error::NonFinite("function value at a probe point".into()));
        }
        Ok(out)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let n = (up - down) / (2.0 * eps);
        worst = worst.max((a - n).abs() / (a.abs() + n.abs()).max(1e-8));
    }
    Ok(worst)
}
