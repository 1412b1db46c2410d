use rand::Rng;

use super::init::xavier;
use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// `y = x W + b` over the rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(&[d_in, d_out], d_in, d_out, rng), true);
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim]), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}
