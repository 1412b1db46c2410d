//! Reusable neural blocks built on [`crate::tensor::Graph`].

mod attention;
mod conv;
mod embedding;
pub mod init;
mod linear;
mod lstm;
mod positional;

pub use attention::MultiHeadAttention;
pub use conv::GatedConv;
pub use embedding::EmbeddingTable;
pub use linear::{LayerNorm, Linear, LAYER_NORM_EPS};
pub use lstm::{BiLstm, LstmCell, LstmState};
pub use positional::positional_encoding;

use crate::error::{Result, WegenError};
use crate::tensor::{Graph, Var};

/// Post-norm residual wrapper: `layer_norm(x + f(x))`.
pub fn residual<'s, F>(g: &mut Graph<'s>, x: Var, norm: &LayerNorm, f: F) -> Result<Var>
where
    F: FnOnce(&mut Graph<'s>, Var) -> Result<Var>,
{
    let fx = f(g, x)?;
    if g.shape(fx) != g.shape(x) {
        return Err(WegenError::shape("residual", g.shape(x), g.shape(fx)));
    }
    let sum = g.add(x, fx)?;
    norm.forward(g, sum)
}
