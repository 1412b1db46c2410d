//! Answer-aware question generator: shared BiLSTM encoder, two interaction
//! channels merged by a control gate, and an attention LSTM decoder with a
//! copy head.

mod decode;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_source, encode_tokens, QGExample, SourceIds, Vocab, END_ID, START_ID, UNK_ID};
use crate::error::{Result, WegenError};
use crate::guider::{fuse_attended, similarity_matrix, two_way_attention, GuiderModel};
use crate::layers::init::xavier;
use crate::layers::{BiLstm, EmbeddingTable, LayerNorm, Linear, LstmCell, LstmState};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub use decode::{beam_search, greedy_decode, Hypothesis, StepModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Interaction units per channel.
    pub k_steps: usize,
    /// Per-direction size of the contextual BiLSTM; channel width is twice this.
    pub hidden: usize,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
    pub beam_size: usize,
    pub max_decode_len: usize,
    pub use_pretraining: bool,
    pub use_copy: bool,
    pub length_normalize: bool,
    pub vocab_cap: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            k_steps: 2,
            hidden: 32,
            decoder_hidden: 64,
            attention_dim: 64,
            beam_size: 5,
            max_decode_len: 20,
            use_pretraining: true,
            use_copy: true,
            length_normalize: false,
            vocab_cap: crate::data::DEFAULT_VOCAB_CAP,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(WegenError::Config(m.to_string()));
        if self.k_steps == 0 {
            return fail("k_steps must be at least 1");
        }
        if self.beam_size == 0 {
            return fail("beam size must be at least 1");
        }
        if self.max_decode_len == 0 {
            return fail("max decode length must be at least 1");
        }
        if self.hidden == 0 || self.decoder_hidden == 0 || self.attention_dim == 0 {
            return fail("hidden, decoder_hidden and attention_dim must be positive");
        }
        Ok(())
    }

    /// Channel width `d`.
    pub fn width(&self) -> usize {
        2 * self.hidden
    }
}

/// One interaction step: two-way attention fusion, a linear map back to
/// width `d` with ReLU, then a BiLSTM; both halves residual and normalized.
#[derive(Clone, Debug)]
pub struct InteractionUnit {
    pub w_s: ParamId,
    pub fuse: Linear,
    pub fuse_norm: LayerNorm,
    pub lstm: BiLstm,
    pub lstm_norm: LayerNorm,
}

impl InteractionUnit {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        InteractionUnit {
            w_s: store.add(format!("{name}.w_s"), xavier(&[3 * d], 3 * d, 1, rng), true),
            fuse: Linear::new(store, &format!("{name}.fuse"), 3 * d, d, true, rng),
            fuse_norm: LayerNorm::new(store, &format!("{name}.fuse_norm"), d),
            lstm: BiLstm::new(store, &format!("{name}.lstm"), d, d / 2, rng),
            lstm_norm: LayerNorm::new(store, &format!("{name}.lstm_norm"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, h_x: Var, h_a: Var) -> Result<Var> {
        let w_s = g.param(self.w_s);
        let s = similarity_matrix(g, h_x, h_a, w_s)?;
        let (x_hat, a_hat) = two_way_attention(g, h_x, h_a, s)?;
        let (x_bar, _) = fuse_attended(g, h_x, x_hat, h_a, a_hat)?;
        let fused = self.fuse.forward(g, x_bar)?;
        let fused = g.relu(fused);
        let sum = g.add(h_x, fused)?;
        let h1 = self.fuse_norm.forward(g, sum)?;
        let ctx = self.lstm.encode(g, h1)?;
        let sum = g.add(h1, ctx)?;
        self.lstm_norm.forward(g, sum)
    }
}

/// A QG record turned into ids. Targets use the extended vocabulary: a
/// question word absent from the vocabulary but present in the passage gets
/// id `V + k` (only when copying is enabled).
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub id: String,
    pub passage: Vec<usize>,
    pub answer: Vec<usize>,
    pub source: SourceIds,
    /// Gold question ids followed by `@END@`.
    pub target: Option<Vec<usize>>,
    /// Frozen guider features for the passage, `n × 3·d_guider`.
    pub features: Option<Tensor>,
}

/// Computes ids and, when a guider is given, its frozen passage features.
pub fn prepare_example(
    example: &QGExample,
    vocab: &Vocab,
    guider: Option<&GuiderModel>,
    use_copy: bool,
) -> Result<PreparedExample> {
    if example.passage.is_empty() || example.answer.is_empty() {
        return Err(WegenError::Empty("passage and answer must be nonempty"));
    }
    let source = encode_source(&example.passage, vocab);
    let passage = source.ids.clone();
    let answer = encode_tokens(&example.answer, vocab);
    let target = example.question.as_ref().map(|q| {
        let mut ids: Vec<usize> = q
            .iter()
            .map(|t| match vocab.id(t) {
                Some(id) => id,
                None if use_copy => source
                    .oov
                    .iter()
                    .position(|o| o == t)
                    .map_or(UNK_ID, |k| vocab.len() + k),
                None => UNK_ID,
            })
            .collect();
        ids.push(END_ID);
        ids
    });
    let features = guider.map(|m| m.passage_features(&passage, &answer)).transpose()?;
    Ok(PreparedExample {
        id: example.id.clone(),
        passage,
        answer,
        source,
        target,
        features,
    })
}

/// Encoder outputs the decoder reads at every step.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    /// Gated passage representation `G`, `n × d`.
    pub g_repr: Var,
    /// `G W_m + b_m`, precomputed for additive attention.
    pub keys: Var,
}

/// Variables produced by one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub p_gen: Var,
    /// Attention over source positions, `1 × n`.
    pub alpha: Var,
    /// Copy gate `λ`, `1 × 1`; absent without copying.
    pub lambda: Option<Var>,
    pub state: LstmState,
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub encoder: BiLstm,
    pub original: Vec<InteractionUnit>,
    pub transfer_proj: Option<Linear>,
    pub transferred: Vec<InteractionUnit>,
    pub gate: Option<Linear>,
    pub init_h: Linear,
    pub init_c: Linear,
    pub decoder: LstmCell,
    pub att_state: Linear,
    pub att_memory: Linear,
    pub att_v: ParamId,
    pub output: Linear,
    pub copy_gate: Option<Linear>,
}

impl GeneratorModel {
    /// `guider_feature_dim` is the width of the transferred features
    /// (`3·d_guider`); required when pretraining is enabled.
    pub fn new(config: GeneratorConfig, embeddings: Tensor, guider_feature_dim: Option<usize>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let embedding = EmbeddingTable::new(&mut store, "embedding", embeddings, false)?;
        let (e, d) = (embedding.dim, config.width());
        let (dh, att) = (config.decoder_hidden, config.attention_dim);
        let vocab_size = embedding.vocab_size;

        let encoder = BiLstm::new(&mut store, "gen.encoder", e, config.hidden, &mut rng);
        let original = (0..config.k_steps)
            .map(|k| InteractionUnit::new(&mut store, &format!("gen.orig{k}"), d, &mut rng))
            .collect();
        let (transfer_proj, transferred, gate) = if config.use_pretraining {
            let fd = guider_feature_dim.ok_or_else(|| {
                WegenError::Config("use_pretraining is set but no guider feature width was given".into())
            })?;
            let proj = Linear::new(&mut store, "gen.transfer", fd, d, true, &mut rng);
            let units = (0..config.k_steps)
                .map(|k| InteractionUnit::new(&mut store, &format!("gen.trans{k}"), d, &mut rng))
                .collect();
            let gate = Linear::new(&mut store, "gen.gate", 2 * d, d, true, &mut rng);
            (Some(proj), units, Some(gate))
        } else {
            (None, Vec::new(), None)
        };
        let init_h = Linear::new(&mut store, "gen.init_h", d, dh, true, &mut rng);
        let init_c = Linear::new(&mut store, "gen.init_c", d, dh, true, &mut rng);
        let decoder = LstmCell::new(&mut store, "gen.decoder", e + d, dh, &mut rng);
        let att_state = Linear::new(&mut store, "gen.att_state", dh, att, false, &mut rng);
        let att_memory = Linear::new(&mut store, "gen.att_memory", d, att, true, &mut rng);
        let att_v = store.add("gen.att_v", xavier(&[att, 1], att, 1, &mut rng), true);
        let output = Linear::new(&mut store, "gen.out", dh + d, vocab_size, true, &mut rng);
        let copy_gate = config
            .use_copy
            .then(|| Linear::new(&mut store, "gen.copy", dh + d + e, 1, true, &mut rng));
        Ok(GeneratorModel {
            config,
            store,
            embedding,
            encoder,
            original,
            transfer_proj,
            transferred,
            gate,
            init_h,
            init_c,
            decoder,
            att_state,
            att_memory,
            att_v,
            output,
            copy_gate,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.vocab_size
    }

    /// Shared BiLSTM over frozen embeddings for both passage and answer.
    pub fn contextual_encode(&self, g: &mut Graph<'_>, passage: &[usize], answer: &[usize]) -> Result<(Var, Var)> {
        if passage.is_empty() || answer.is_empty() {
            return Err(WegenError::Empty("passage and answer must be nonempty"));
        }
        let p = self.embedding.embed_sequence(g, passage, false)?;
        let a = self.embedding.embed_sequence(g, answer, false)?;
        Ok((self.encoder.encode(g, p)?, self.encoder.encode(g, a)?))
    }

    /// Runs both channels. The second value is `None` when pretraining is
    /// disabled. `features` are the frozen guider features of the passage and
    /// enter the graph as a constant.
    pub fn dual_channel_encode(
        &self,
        g: &mut Graph<'_>,
        passage: &[usize],
        answer: &[usize],
        features: Option<&Tensor>,
    ) -> Result<(Var, Option<Var>)> {
        let (h_p, h_a) = self.contextual_encode(g, passage, answer)?;
        let mut x = h_p;
        for unit in &self.original {
            x = unit.forward(g, x, h_a)?;
        }
        let Some(proj) = &self.transfer_proj else {
            return Ok((x, None));
        };
        let features = features.ok_or_else(|| {
            WegenError::Config("use_pretraining is set but no guider features were supplied".into())
        })?;
        if features.rows() != passage.len() {
            return Err(WegenError::shape("guider features", features.shape(), &[passage.len(), proj.d_in]));
        }
        let f = g.constant(features.clone());
        let mut y = proj.forward(g, f)?;
        for unit in &self.transferred {
            y = unit.forward(g, y, h_a)?;
        }
        Ok((x, Some(y)))
    }

    /// Encodes a prepared example into decoder memory and the initial state.
    pub fn encode(&self, g: &mut Graph<'_>, ex: &PreparedExample) -> Result<(Memory, LstmState)> {
        let (x, y) = self.dual_channel_encode(g, &ex.passage, &ex.answer, ex.features.as_ref())?;
        let g_repr = match (y, &self.gate) {
            (Some(y), Some(gate)) => {
                let w = g.param(gate.weight);
                let b = g.param(gate.bias.expect("gate has a bias"));
                control_gate(g, x, y, w, b)?
            }
            _ => x,
        };
        let state = self.init_decoder_state(g, g_repr)?;
        let keys = self.att_memory.forward(g, g_repr)?;
        Ok((Memory { g_repr, keys }, state))
    }

    /// Mean of `G` over positions, projected to the decoder's `h` and `c`.
    pub fn init_decoder_state(&self, g: &mut Graph<'_>, g_repr: Var) -> Result<LstmState> {
        if g.shape(g_repr).first() == Some(&0) {
            return Err(WegenError::Empty("gated representation"));
        }
        let pooled = g.mean_rows(g_repr)?;
        Ok(LstmState {
            h: self.init_h.forward(g, pooled)?,
            c: self.init_c.forward(g, pooled)?,
        })
    }

    /// Embedding of a previously emitted token; copied out-of-vocabulary ids
    /// are fed back as `@UNK@`.
    fn embed_prev(&self, g: &mut Graph<'_>, prev: usize, n_oov: usize) -> Result<Var> {
        let v = self.vocab_size();
        if prev >= v + n_oov {
            return Err(WegenError::TokenOutOfRange {
                id: prev,
                size: v + n_oov,
            });
        }
        let id = if prev < v { prev } else { UNK_ID };
        self.embedding.embed_sequence(g, &[id], false)
    }

    /// One decoder step: additive attention from the previous state over
    /// `G`, an LSTM update on `[emb(prev); context]`, then the generation
    /// softmax and the copy gate.
    pub fn step_graph(
        &self,
        g: &mut Graph<'_>,
        memory: &Memory,
        state: LstmState,
        prev: usize,
        n_oov: usize,
    ) -> Result<StepVars> {
        let emb = self.embed_prev(g, prev, n_oov)?;
        let query = self.att_state.forward(g, state.h)?;
        let mixed = g.add_row(memory.keys, query)?;
        let mixed = g.tanh(mixed);
        let v = g.param(self.att_v);
        let scores = g.matmul(mixed, v)?;
        let n = g.shape(scores)[0];
        let scores = g.reshape(scores, &[1, n])?;
        let alpha = g.softmax(scores, 1)?;
        let context = g.matmul(alpha, memory.g_repr)?;
        let input = g.concat(&[emb, context], 1)?;
        let state = self.decoder.step(g, input, Some(state))?;
        let readout = g.concat(&[state.h, context], 1)?;
        let logits = self.output.forward(g, readout)?;
        let p_gen = g.softmax(logits, 1)?;
        let lambda = match &self.copy_gate {
            Some(head) => {
                let features = g.concat(&[state.h, context, emb], 1)?;
                let z = head.forward(g, features)?;
                Some(g.sigmoid(z))
            }
            None => None,
        };
        Ok(StepVars {
            p_gen,
            alpha,
            lambda,
            state,
        })
    }

    /// Probability of extended id `target` under one step, as a `[1×1]` node.
    fn target_prob(&self, g: &mut Graph<'_>, step: &StepVars, extended: &[usize], target: usize) -> Result<Var> {
        let v = self.vocab_size();
        let gen = if target < v {
            Some(g.slice(step.p_gen, 1, target, 1)?)
        } else {
            None
        };
        let Some(lambda) = step.lambda else {
            return gen.ok_or(WegenError::TokenOutOfRange { id: target, size: v });
        };
        let indicator: Vec<f64> = extended.iter().map(|&e| f64::from(u8::from(e == target))).collect();
        let indicator = g.constant(Tensor::new(&[extended.len(), 1], indicator)?);
        let copied = g.matmul(step.alpha, indicator)?;
        let keep = g.affine(lambda, -1.0, 1.0);
        let copy_part = g.mul(keep, copied)?;
        match gen {
            Some(gen) => {
                let gen_part = g.mul(lambda, gen)?;
                g.add(gen_part, copy_part)
            }
            None => Ok(copy_part),
        }
    }

    /// Teacher-forced `-Σ_t log p(q_t | q_<t, P, A)` for one example.
    pub fn sequence_nll(&self, g: &mut Graph<'_>, ex: &PreparedExample) -> Result<Var> {
        let target = ex
            .target
            .as_ref()
            .filter(|t| t.len() > 1)
            .ok_or(WegenError::Empty("target question"))?;
        let (memory, mut state) = self.encode(g, ex)?;
        let n_oov = if self.config.use_copy { ex.source.oov.len() } else { 0 };
        let mut prev = START_ID;
        let mut log_probs = Vec::with_capacity(target.len());
        for &gold in target {
            let step = self.step_graph(g, &memory, state, prev, n_oov)?;
            let p = self.target_prob(g, &step, &ex.source.extended, gold)?;
            log_probs.push(g.log(p)?);
            state = step.state;
            prev = gold;
        }
        let joined = g.concat(&log_probs, 1)?;
        let total = g.sum(joined);
        Ok(g.affine(total, -1.0, 0.0))
    }

    /// Read-only decoding context for one example.
    pub fn decoder_for<'m>(&'m self, ex: &'m PreparedExample) -> Result<SourceDecoder<'m>> {
        let mut g = Graph::new(&self.store);
        let (memory, state) = self.encode(&mut g, ex)?;
        Ok(SourceDecoder {
            model: self,
            source: &ex.source,
            g_repr: g.value(memory.g_repr).clone(),
            keys: g.value(memory.keys).clone(),
            h0: g.value(state.h).clone(),
            c0: g.value(state.c).clone(),
        })
    }

    /// Beam search with the configured beam size and length limit.
    pub fn generate(&self, ex: &PreparedExample, beam: usize) -> Result<Hypothesis> {
        let dec = self.decoder_for(ex)?;
        beam_search(
            &dec,
            START_ID,
            END_ID,
            beam,
            self.config.max_decode_len,
            self.config.length_normalize,
        )
    }

    pub fn greedy(&self, ex: &PreparedExample) -> Result<Hypothesis> {
        let dec = self.decoder_for(ex)?;
        greedy_decode(&dec, START_ID, END_ID, self.config.max_decode_len)
    }

    /// Maps extended ids back to tokens.
    pub fn ids_to_tokens(&self, ids: &[usize], vocab: &Vocab, source: &SourceIds) -> Vec<String> {
        ids.iter()
            .map(|&id| match vocab.token(id) {
                Some(t) => t.to_string(),
                None => source
                    .oov
                    .get(id - vocab.len())
                    .cloned()
                    .unwrap_or_else(|| crate::data::UNK.to_string()),
            })
            .collect()
    }
}

/// `g = σ([x; y] W_g + b_g)`, `G = g ⊙ x + (1 − g) ⊙ y`.
pub fn control_gate(g: &mut Graph<'_>, x: Var, y: Var, w_g: Var, b_g: Var) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(WegenError::shape("control_gate", g.shape(x), g.shape(y)));
    }
    let xy = g.concat(&[x, y], 1)?;
    let z = g.matmul(xy, w_g)?;
    let z = g.add_row(z, b_g)?;
    let gate = g.sigmoid(z);
    let keep_x = g.mul(gate, x)?;
    let rest = g.affine(gate, -1.0, 1.0);
    let keep_y = g.mul(rest, y)?;
    g.add(keep_x, keep_y)
}

/// `p(w) = λ p_gen(w) + (1 − λ) Σ_{i: src_i = w} α_i` over `V + n_oov` ids.
pub fn mix_distribution(p_gen: &[f64], alpha: &[f64], lambda: f64, extended: &[usize], n_oov: usize) -> Vec<f64> {
    let mut dist: Vec<f64> = p_gen.iter().map(|p| lambda * p).collect();
    dist.resize(p_gen.len() + n_oov, 0.0);
    for (&a, &id) in alpha.iter().zip(extended) {
        dist[id] += (1.0 - lambda) * a;
    }
    dist
}

/// Decoder state for inference.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Encoder results for one source, cached so decoding steps only rebuild
/// the decoder part of the graph.
#[derive(Clone, Debug)]
pub struct SourceDecoder<'m> {
    model: &'m GeneratorModel,
    source: &'m SourceIds,
    g_repr: Tensor,
    keys: Tensor,
    h0: Tensor,
    c0: Tensor,
}

/// Result of a single inference step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub dist: Vec<f64>,
    pub p_gen: Vec<f64>,
    pub alpha: Vec<f64>,
    pub lambda: Option<f64>,
    pub state: DecoderState,
}

impl SourceDecoder<'_> {
    pub fn n_oov(&self) -> usize {
        if self.model.config.use_copy {
            self.source.oov.len()
        } else {
            0
        }
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState {
            h: self.h0.clone(),
            c: self.c0.clone(),
        }
    }

    /// Full distribution over the vocabulary plus copyable source words.
    pub fn decode_step(&self, state: &DecoderState, prev: usize) -> Result<StepOutput> {
        let mut g = Graph::new(&self.model.store);
        let memory = Memory {
            g_repr: g.constant(self.g_repr.clone()),
            keys: g.constant(self.keys.clone()),
        };
        let st = LstmState {
            h: g.constant(state.h.clone()),
            c: g.constant(state.c.clone()),
        };
        let step = self.model.step_graph(&mut g, &memory, st, prev, self.n_oov())?;
        let p_gen = g.value(step.p_gen).data().to_vec();
        let alpha = g.value(step.alpha).data().to_vec();
        let lambda = step.lambda.map(|l| g.value(l).item());
        let dist = match lambda {
            Some(l) => mix_distribution(&p_gen, &alpha, l, &self.source.extended, self.n_oov()),
            None => p_gen.clone(),
        };
        Ok(StepOutput {
            dist,
            p_gen,
            alpha,
            lambda,
            state: DecoderState {
                h: g.value(step.state.h).clone(),
                c: g.value(step.state.c).clone(),
            },
        })
    }
}

impl StepModel for SourceDecoder<'_> {
    type State = DecoderState;

    fn initial(&self) -> Result<DecoderState> {
        Ok(self.initial_state())
    }

    fn next(&self, state: &DecoderState, prev: usize) -> Result<(Vec<f64>, DecoderState)> {
        let out = self.decode_step(state, prev)?;
        Ok((out.dist, out.state))
    }
}

#[cfg(test)]
mod tests;
