use rand::Rng;

use super::init::xavier;
use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Gated linear unit over a same-padded 1-D convolution:
/// `(conv(x; W) + b) * sigmoid(conv(x; V) + c)`.
#[derive(Clone, Debug)]
pub struct GatedConv {
    pub linear_kernels: ParamId,
    pub linear_bias: ParamId,
    pub gate_kernels: ParamId,
    pub gate_bias: ParamId,
}

impl GatedConv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, width: usize, rng: &mut R) -> Self {
        let fan = dim * width;
        GatedConv {
            linear_kernels: store.add(format!("{name}.w"), xavier(&[width, dim, dim], fan, fan, rng), true),
            linear_bias: store.add(format!("{name}.b"), Tensor::zeros(&[dim]), true),
            gate_kernels: store.add(format!("{name}.v"), xavier(&[width, dim, dim], fan, fan, rng), true),
            gate_bias: store.add(format!("{name}.c"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.linear_kernels);
        let b = g.param(self.linear_bias);
        let v = g.param(self.gate_kernels);
        let c = g.param(self.gate_bias);
        let lin = g.conv1d(x, w)?;
        let lin = g.add_row(lin, b)?;
        let gate = g.conv1d(x, v)?;
        let gate = g.add_row(gate, c)?;
        let gate = g.sigmoid(gate);
        g.mul(lin, gate)
    }
}
