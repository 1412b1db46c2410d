use rand::Rng;

use super::Linear;
use crate::error::{Result, WegenError};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(WegenError::Config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            d_model,
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, false, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, false, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, false, rng),
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.forward_with_weights(g, x).map(|(y, _)| y)
    }

    /// Also returns each head's `len × len` attention matrix.
    pub fn forward_with_weights(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Vec<Tensor>)> {
        let width = g.shape(x).get(1).copied().unwrap_or(0);
        if width != self.d_model {
            return Err(WegenError::shape("self_attention", g.shape(x), &[0, self.d_model]));
        }
        let head_dim = self.d_model / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * head_dim, head_dim)?;
            let kh = g.slice(k, 1, h * head_dim, head_dim)?;
            let vh = g.slice(v, 1, h * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.affine(scores, scale, 0.0);
            let attn = g.softmax(scores, 1)?;
            weights.push(g.value(attn).clone());
            outputs.push(g.matmul(attn, vh)?);
        }
        let joined = g.concat(&outputs, 1)?;
        Ok((self.output.forward(g, joined)?, weights))
    }
}
