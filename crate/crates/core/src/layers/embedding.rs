use super::positional_encoding;
use crate::error::{Result, WegenError};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Word-embedding matrix registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, matrix: Tensor, trainable: bool) -> Result<Self> {
        let &[vocab_size, dim] = matrix.shape() else {
            return Err(WegenError::shape("EmbeddingTable", matrix.shape(), &[0, 0]));
        };
        let param = store.add(name, matrix, trainable);
        Ok(EmbeddingTable {
            param,
            vocab_size,
            dim,
        })
    }

    /// Looks up `tokens` and optionally adds the sinusoidal position table.
    pub fn embed_sequence(&self, g: &mut Graph<'_>, tokens: &[usize], add_position: bool) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(WegenError::TokenOutOfRange {
                id: bad,
                size: self.vocab_size,
            });
        }
        let table = g.param(self.param);
        let rows = g.gather_rows(table, tokens)?;
        if !add_position || tokens.is_empty() {
            return Ok(rows);
        }
        let pe = g.constant(positional_encoding(tokens.len(), self.dim)?);
        g.add(rows, pe)
    }
}
