use crate::error::{Result, WegenError};
use crate::tensor::Tensor;

/// Sinusoidal position table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Result<Tensor> {
    if !d_model.is_multiple_of(2) {
        return Err(WegenError::InvalidArgument(format!(
            "positional encoding needs an even model width, got {d_model}"
        )));
    }
    let mut data = vec![0.0; seq_len * d_model];
    for pos in 0..seq_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[seq_len, d_model], data)
}
