//! Tokenization, vocabulary, embeddings, dataset readers and synthetic data.

mod embeddings;
mod readers;
mod synth;
mod tokenize;
mod vocab;

pub use embeddings::{load_embedding_file, EmbeddingMatrix};
pub use readers::{
    read_qg_jsonl, read_triplet_jsonl, write_jsonl, write_qg_jsonl, write_triplet_jsonl, QGExample, QgRecord,
    Triplet, TripletRecord,
};
pub(crate) use readers::{for_each_json_object, string_field};
pub use synth::{synth_corpus, synth_embeddings, synth_qg, synth_triplets, SynthDataset, SynthMode};
pub use tokenize::{detokenize, tokenize};
pub use vocab::*;
