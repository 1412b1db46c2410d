use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WegenError};
use crate::tensor::{GradMap, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<ParamId, Tensor>,
    pub v: BTreeMap<ParamId, Tensor>,
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left alone; a gradient for a frozen parameter is an error.
pub fn adam_step(store: &mut ParamStore, grads: &GradMap, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for (&id, grad) in grads {
        if id.index() >= store.len() || !store.is_trainable(id) {
            return Err(WegenError::InvalidArgument(format!(
                "gradient supplied for frozen or unknown parameter #{}",
                id.index()
            )));
        }
        if grad.shape() != store.get(id).shape() {
            return Err(WegenError::shape("adam_step", store.get(id).shape(), grad.shape()));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for (&id, grad) in grads {
        let shape = grad.shape().to_vec();
        let m = state.m.entry(id).or_insert_with(|| Tensor::zeros(&shape));
        let m_new = m.zip_map(grad, |m, g| cfg.beta1 * m + (1.0 - cfg.beta1) * g)?;
        let v = state.v.entry(id).or_insert_with(|| Tensor::zeros(&shape));
        let v_new = v.zip_map(grad, |v, g| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g)?;
        let step = m_new.zip_map(&v_new, |m, v| cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))?;
        let updated = store.get(id).zip_map(&step, |p, s| p - s)?;
        store.set(id, updated)?;
        state.m.insert(id, m_new);
        state.v.insert(id, v_new);
    }
    Ok(())
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            *t = t.map(|v| v * scale);
        }
    }
    norm
}

/// Adds `src` into `dst` entrywise.
pub fn accumulate(dst: &mut GradMap, src: GradMap) -> Result<()> {
    for (id, g) in src {
        match dst.get_mut(&id) {
            Some(acc) => *acc = acc.zip_map(&g, |a, b| a + b)?,
            None => {
                dst.insert(id, g);
            }
        }
    }
    Ok(())
}

/// Builds one graph per item (in parallel when a rayon pool is available),
/// then sums losses and gradients in item order so results do not depend
/// on scheduling.
pub fn batch_gradients<T, F>(store: &ParamStore, items: &[T], loss_fn: F) -> Result<(f64, GradMap)>
where
    T: Sync,
    F: for<'a> Fn(&mut Graph<'a>, &T) -> Result<Var> + Sync,
{
    let per_item: Vec<Result<(f64, GradMap)>> = items
        .par_iter()
        .map(|item| {
            let mut g = Graph::new(store);
            let loss = loss_fn(&mut g, item)?;
            let value = g.value(loss).item();
            Ok((value, g.backward(loss)?))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = GradMap::new();
    for r in per_item {
        let (l, gm) = r?;
        total += l;
        accumulate(&mut grads, gm)?;
    }
    Ok((total, grads))
}
