use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Result, WegenError};

/// Magnitudes below this are treated as this when dividing, so central
/// difference round-off (about 1e-10 on losses of order 10) on vanishing
/// gradient entries does not read as a large relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

fn scalar_of(g: &Graph<'_>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(WegenError::InvalidArgument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences at `x`. Returns the largest per-coordinate relative error
/// `|analytic - fd| / max(|analytic|, |fd|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'static>, Var) -> Result<Var>,
{
    input_check(Graph::detached, f, x, eps)
}

/// [`grad_check`] for functions that also read parameters from `store`.
/// Only the input `x` is perturbed.
pub fn grad_check_input<'s, F>(store: &'s ParamStore, f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'s>, Var) -> Result<Var>,
{
    input_check(|| Graph::new(store), f, x, eps)
}

fn input_check<'s, G, F>(new_graph: G, f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    G: Fn() -> Graph<'s>,
    F: Fn(&mut Graph<'s>, Var) -> Result<Var>,
{
    let mut g = new_graph();
    let xv = g.variable(x.clone());
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    let analytic = g.grad_wrt(out, &[xv])?.remove(0);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut g = new_graph();
        let xv = g.variable(Tensor::new(x.shape(), values)?);
        let out = f(&mut g, xv)?;
        scalar_of(&g, out)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Parameter-space variant of [`grad_check`]: checks the listed
/// `(parameter, flat index)` coordinates of a loss built from `store`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    drop(g);

    let eval = |id: ParamId, index: usize, delta: f64| -> Result<f64> {
        let mut perturbed = store.clone();
        let mut values = store.get(id).data().to_vec();
        values[index] += delta;
        perturbed.set(id, Tensor::new(store.get(id).shape(), values)?)?;
        let mut g = Graph::new(&perturbed);
        let out = f(&mut g)?;
        scalar_of(&g, out)
    };

    let mut worst = 0.0f64;
    for &(id, index) in coords {
        let analytic = grads.get(&id).map_or(0.0, |t| t.data()[index]);
        let numeric = (eval(id, index, eps)? - eval(id, index, -eps)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}
