use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Vocab;
use crate::error::{Result, WegenError};
use crate::tensor::Tensor;

/// Word vectors aligned to a [`Vocab`], with how many rows came from a file.
#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub matrix: Tensor,
    pub found: usize,
}

impl EmbeddingMatrix {
    /// Seeded `uniform(-0.1, 0.1)` rows for every id.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingMatrix {
            dim,
            matrix: Tensor::uniform(&[vocab_size, dim], -0.1, 0.1, &mut rng),
            found: 0,
        }
    }

    /// Fraction of vocabulary rows taken from the file.
    pub fn coverage(&self) -> f64 {
        match self.matrix.rows() {
            0 => 0.0,
            rows => self.found as f64 / rows as f64,
        }
    }
}

/// Reads a GloVe-style text file (`token v1 .. v_dim` per line). Vocabulary
/// tokens missing from the file, and the specials, keep seeded random rows.
pub fn load_embedding_file(path: &Path, vocab: &Vocab, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(|e| WegenError::io(path, e))?;
    let base = EmbeddingMatrix::random(vocab.len(), dim, seed);
    let mut data = base.matrix.into_vec();
    let mut seen = vec![false; vocab.len()];
    let mut found = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| WegenError::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            let message = if lineno == 0 {
                format!("embedding dimension mismatch: file has {} values per token, expected {dim}", values.len())
            } else {
                format!("malformed line: expected {dim} values after the token, found {}", values.len())
            };
            return Err(WegenError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            });
        }
        let Some(id) = vocab.id(token) else { continue };
        if seen[id] {
            continue;
        }
        for (j, v) in values.iter().enumerate() {
            data[id * dim + j] = v.parse::<f64>().map_err(|e| WegenError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("bad number {v:?}: {e}"),
            })?;
        }
        seen[id] = true;
        found += 1;
    }
    Ok(EmbeddingMatrix {
        dim,
        matrix: Tensor::new(&[vocab.len(), dim], data)?,
        found,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn vocab() -> Vocab {
        Vocab::from_content(["cat", "dog"]).unwrap()
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn handwritten_fixture_loads_exact_values() {
        let f = write("cat 0.5 -1.25 3\ndog 1e-3 2 0\n");
        let m = load_embedding_file(f.path(), &vocab(), 3, 0).unwrap();
        let v = vocab();
        assert_eq!(m.matrix.row(v.id("cat").unwrap()), &[0.5, -1.25, 3.0]);
        assert_eq!(m.matrix.row(v.id("dog").unwrap()), &[0.001, 2.0, 0.0]);
        assert_eq!(m.found, 2);
    }

    #[test]
    fn empty_file_is_all_random() {
        let f = write("");
        let m = load_embedding_file(f.path(), &vocab(), 3, 7).unwrap();
        assert_eq!(m.coverage(), 0.0);
        assert_eq!(m.matrix.shape(), &[6, 3]);
        assert!(m.matrix.data().iter().all(|v| (-0.1..0.1).contains(v)));
        assert!(m.matrix.bit_eq(&EmbeddingMatrix::random(6, 3, 7).matrix));
    }

    #[test]
    fn full_coverage_when_every_token_present() {
        let v = vocab();
        let text: String = v
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t} {i} {i}\n"))
            .collect();
        let f = write(&text);
        let m = load_embedding_file(f.path(), &v, 2, 0).unwrap();
        assert_eq!(m.coverage(), 1.0);
        for i in 0..v.len() {
            assert_eq!(m.matrix.row(i), &[i as f64, i as f64]);
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let f = write("cat 1 2 3\ndog 1 2\n");
        let err = load_embedding_file(f.path(), &vocab(), 3, 0).unwrap_err();
        assert!(matches!(err, WegenError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn dimension_mismatch_reported() {
        let f = write("cat 1 2 3 4\n");
        let err = load_embedding_file(f.path(), &vocab(), 3, 0).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"), "{err}");
    }
}
