//! Passage/answer relevance model pretrained on weakly labeled triplets.
//! Its fused passage features feed the generator's transferred channel.

mod pretrain;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_tokens, Triplet, Vocab};
use crate::error::{Result, WegenError};
use crate::layers::{
    positional_encoding, residual, EmbeddingTable, GatedConv, LayerNorm, Linear, MultiHeadAttention,
};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub use pretrain::{evaluate_triplets, pretrain_guider, GuiderEpoch, PretrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuiderConfig {
    /// Self-attention blocks.
    pub attention_layers: usize,
    /// Gated convolution blocks, applied before the attention blocks.
    pub conv_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub kernel_width: usize,
    pub margin: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for GuiderConfig {
    fn default() -> Self {
        GuiderConfig {
            attention_layers: 2,
            conv_layers: 2,
            d_model: 64,
            heads: 8,
            kernel_width: 7,
            margin: 0.5,
            lr: 1e-3,
            batch_size: 16,
            epochs: 20,
            validation_fraction: 0.1,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl GuiderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(WegenError::Config(m));
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return fail(format!("guider margin must lie in (0, 1), got {}", self.margin));
        }
        if self.attention_layers + self.conv_layers == 0 {
            return fail("guider needs at least one convolution or attention layer".into());
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail(format!("guider d_model must be positive and even, got {}", self.d_model));
        }
        if self.attention_layers > 0 && (self.heads == 0 || !self.d_model.is_multiple_of(self.heads)) {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.kernel_width.is_multiple_of(2) {
            return fail(format!("kernel width must be odd, got {}", self.kernel_width));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail(format!("validation fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        if !(self.lr > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Token ids of a triplet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedTriplet {
    pub answer: Vec<usize>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

pub fn encode_triplets(triplets: &[Triplet], vocab: &Vocab) -> Vec<EncodedTriplet> {
    triplets
        .iter()
        .map(|t| EncodedTriplet {
            answer: encode_tokens(&t.answer, vocab),
            positive: encode_tokens(&t.positive, vocab),
            negative: encode_tokens(&t.negative, vocab),
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Block<L> {
    layer: L,
    norm: LayerNorm,
}

/// All guider parameters live in `store`; the word embedding is registered
/// there frozen under the name `embedding`.
#[derive(Clone, Debug)]
pub struct GuiderModel {
    pub config: GuiderConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    input: Option<Linear>,
    convs: Vec<Block<GatedConv>>,
    attentions: Vec<Block<MultiHeadAttention>>,
    feed_forward: Linear,
    pub w_s: ParamId,
    pub w_pa: ParamId,
}

impl GuiderModel {
    /// A freshly initialized guider over a frozen embedding matrix. When the
    /// embedding width differs from `d_model` a bias-free projection is added.
    pub fn new(config: GuiderConfig, embeddings: Tensor) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let embedding = EmbeddingTable::new(&mut store, "embedding", embeddings, false)?;
        let d = config.d_model;
        let input =
            (embedding.dim != d).then(|| Linear::new(&mut store, "guider.input", embedding.dim, d, false, &mut rng));
        let convs = (0..config.conv_layers)
            .map(|i| Block {
                layer: GatedConv::new(&mut store, &format!("guider.conv{i}"), d, config.kernel_width, &mut rng),
                norm: LayerNorm::new(&mut store, &format!("guider.conv{i}.norm"), d),
            })
            .collect();
        let attentions = (0..config.attention_layers)
            .map(|i| {
                Ok(Block {
                    layer: MultiHeadAttention::new(&mut store, &format!("guider.attn{i}"), d, config.heads, &mut rng)?,
                    norm: LayerNorm::new(&mut store, &format!("guider.attn{i}.norm"), d),
                })
            })
            .collect::<Result<_>>()?;
        let feed_forward = Linear::new(&mut store, "guider.ff", d, d, true, &mut rng);
        // The product slab of the similarity weights starts as a scaled dot
        // product and the score head at zero (every score 0.5). Random signs
        // there let both scores sink into the flat tail of the sigmoid, where
        // the hinge stalls at exactly the margin.
        let bound = (6.0 / (2 * d + 1) as f64).sqrt();
        let dot = 1.0 / (d as f64).sqrt();
        let w_s_values = (0..3 * d)
            .map(|i| if i < 2 * d { rng.random_range(-bound..bound) } else { dot })
            .collect();
        let w_s = store.add("guider.w_s", Tensor::new(&[3 * d], w_s_values)?, true);
        let w_pa = store.add("guider.w_pa", Tensor::zeros(&[6 * d, 1]), true);
        Ok(GuiderModel {
            config,
            store,
            embedding,
            input,
            convs,
            attentions,
            feed_forward,
            w_s,
            w_pa,
        })
    }

    /// Word embeddings (projected to `d_model` if needed) plus positions.
    pub fn embed(&self, g: &mut Graph<'_>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(WegenError::Empty("guider input sequence"));
        }
        let mut x = self.embedding.embed_sequence(g, tokens, false)?;
        if let Some(proj) = &self.input {
            x = proj.forward(g, x)?;
        }
        let pe = g.constant(positional_encoding(tokens.len(), self.config.d_model)?);
        g.add(x, pe)
    }

    /// Convolution blocks, then attention blocks, then `relu(x W + b)`.
    /// Passage and answer share every layer.
    pub fn encode_stack(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.convs {
            h = residual(g, h, &block.norm, |g, v| block.layer.forward(g, v))?;
        }
        for block in &self.attentions {
            h = residual(g, h, &block.norm, |g, v| block.layer.forward(g, v))?;
        }
        let y = self.feed_forward.forward(g, h)?;
        Ok(g.relu(y))
    }

    pub fn encode_tokens(&self, g: &mut Graph<'_>, tokens: &[usize]) -> Result<Var> {
        let x = self.embed(g, tokens)?;
        self.encode_stack(g, x)
    }

    /// Fused passage and answer features `(p̄, ā)` for already-encoded inputs.
    pub fn fuse_encoded(&self, g: &mut Graph<'_>, p: Var, a: Var) -> Result<(Var, Var)> {
        let w_s = g.param(self.w_s);
        let s = similarity_matrix(g, p, a, w_s)?;
        let (p_hat, a_hat) = two_way_attention(g, p, a, s)?;
        fuse_attended(g, p, p_hat, a, a_hat)
    }

    /// Relevance score of an encoded answer against a passage.
    pub fn score_encoded(&self, g: &mut Graph<'_>, p: Var, a: Var) -> Result<Var> {
        let (p_bar, a_bar) = self.fuse_encoded(g, p, a)?;
        let w_pa = g.param(self.w_pa);
        score_pair(g, p_bar, a_bar, w_pa)
    }

    pub fn score_tokens(&self, g: &mut Graph<'_>, passage: &[usize], answer: &[usize]) -> Result<Var> {
        let p = self.encode_tokens(g, passage)?;
        let a = self.encode_tokens(g, answer)?;
        self.score_encoded(g, p, a)
    }

    /// Margin loss of one triplet; the answer is encoded once and reused.
    pub fn triplet_loss(&self, g: &mut Graph<'_>, t: &EncodedTriplet) -> Result<Var> {
        let a = self.encode_tokens(g, &t.answer)?;
        let pos = self.encode_tokens(g, &t.positive)?;
        let neg = self.encode_tokens(g, &t.negative)?;
        let s_pos = self.score_encoded(g, pos, a)?;
        let s_neg = self.score_encoded(g, neg, a)?;
        margin_loss(g, s_pos, s_neg, self.config.margin)
    }

    pub fn score(&self, passage: &[usize], answer: &[usize]) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let s = self.score_tokens(&mut g, passage, answer)?;
        Ok(g.value(s).item())
    }

    /// `p̄` for a passage/answer pair, `n × 3·d_model`. Read-only.
    pub fn passage_features(&self, passage: &[usize], answer: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let p = self.encode_tokens(&mut g, passage)?;
        let a = self.encode_tokens(&mut g, answer)?;
        let (p_bar, _) = self.fuse_encoded(&mut g, p, a)?;
        Ok(g.value(p_bar).clone())
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.config.d_model
    }
}

fn width_of(g: &Graph<'_>, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match *g.shape(v) {
        [rows, cols] => Ok((rows, cols)),
        _ => Err(WegenError::shape(op, g.shape(v), &[0, 0])),
    }
}

/// `S[i, j] = w_sᵀ [p_i; a_j; p_i ⊙ a_j]`, computed as one matrix product
/// `[p ⊙ w3, p·w1, 1] · [aᵀ; 1; (a·w2)ᵀ]`.
pub fn similarity_matrix(g: &mut Graph<'_>, p: Var, a: Var, w_s: Var) -> Result<Var> {
    let (n, d) = width_of(g, p, "similarity_matrix")?;
    let (m, da) = width_of(g, a, "similarity_matrix")?;
    if d != da {
        return Err(WegenError::shape("similarity_matrix", g.shape(p), g.shape(a)));
    }
    if g.value(w_s).numel() != 3 * d {
        return Err(WegenError::shape("similarity_matrix weight", g.shape(w_s), &[3 * d]));
    }
    let w = g.reshape(w_s, &[3 * d, 1])?;
    let w1 = g.slice(w, 0, 0, d)?;
    let w2 = g.slice(w, 0, d, d)?;
    let w3 = g.slice(w, 0, 2 * d, d)?;
    let pw3 = g.mul_row(p, w3)?;
    let pw1 = g.matmul(p, w1)?;
    let ones_n = g.constant(Tensor::ones(&[n, 1]));
    let left = g.concat(&[pw3, pw1, ones_n], 1)?;
    let at = g.transpose(a)?;
    let aw2 = g.matmul(a, w2)?;
    let aw2t = g.transpose(aw2)?;
    let ones_m = g.constant(Tensor::ones(&[1, m]));
    let right = g.concat(&[at, ones_m, aw2t], 0)?;
    g.matmul(left, right)
}

/// Row-softmax attends passage positions over the answer (`p̂`), and
/// column-softmax attends answer positions over the passage (`â`).
pub fn two_way_attention(g: &mut Graph<'_>, p: Var, a: Var, s: Var) -> Result<(Var, Var)> {
    let (n, _) = width_of(g, p, "two_way_attention")?;
    let (m, _) = width_of(g, a, "two_way_attention")?;
    if g.shape(s) != [n, m] {
        return Err(WegenError::shape("two_way_attention", g.shape(s), &[n, m]));
    }
    let rows = g.softmax(s, 1)?;
    let p_hat = g.matmul(rows, a)?;
    let cols = g.softmax(s, 0)?;
    let cols_t = g.transpose(cols)?;
    let a_hat = g.matmul(cols_t, p)?;
    Ok((p_hat, a_hat))
}

/// `p̄ = [p; p̂; p ⊙ mean(â)]` and `ā = [a; â; a ⊙ mean(p̂)]`.
pub fn fuse_attended(g: &mut Graph<'_>, p: Var, p_hat: Var, a: Var, a_hat: Var) -> Result<(Var, Var)> {
    if g.shape(p) != g.shape(p_hat) {
        return Err(WegenError::shape("fuse_attended", g.shape(p), g.shape(p_hat)));
    }
    if g.shape(a) != g.shape(a_hat) {
        return Err(WegenError::shape("fuse_attended", g.shape(a), g.shape(a_hat)));
    }
    let a_mean = g.mean_rows(a_hat)?;
    let p_mean = g.mean_rows(p_hat)?;
    let p_gated = g.mul_row(p, a_mean)?;
    let a_gated = g.mul_row(a, p_mean)?;
    let p_bar = g.concat(&[p, p_hat, p_gated], 1)?;
    let a_bar = g.concat(&[a, a_hat, a_gated], 1)?;
    Ok((p_bar, a_bar))
}

/// `sigmoid([mean p̄; mean ā] · w_pa)`, shape `[1, 1]`.
pub fn score_pair(g: &mut Graph<'_>, p_bar: Var, a_bar: Var, w_pa: Var) -> Result<Var> {
    let pooled_p = g.mean_rows(p_bar)?;
    let pooled_a = g.mean_rows(a_bar)?;
    let joined = g.concat(&[pooled_p, pooled_a], 1)?;
    let width = g.shape(joined)[1];
    let w = g.reshape(w_pa, &[width, 1])?;
    let logit = g.matmul(joined, w)?;
    Ok(g.sigmoid(logit))
}

/// `max(0, c + s_neg - s_pos)`.
pub fn margin_loss(g: &mut Graph<'_>, s_pos: Var, s_neg: Var, c: f64) -> Result<Var> {
    check_margin(c)?;
    let shifted = g.affine(s_neg, 1.0, c);
    let diff = g.sub(shifted, s_pos)?;
    let hinge = g.relu(diff);
    Ok(g.sum(hinge))
}

/// Plain-number version of [`margin_loss`], summed over pairs.
pub fn margin_loss_value(pairs: &[(f64, f64)], c: f64) -> Result<f64> {
    check_margin(c)?;
    Ok(pairs.iter().map(|&(pos, neg)| ((neg + c) - pos).max(0.0)).sum())
}

fn check_margin(c: f64) -> Result<()> {
    if c > 0.0 && c < 1.0 {
        Ok(())
    } else {
        Err(WegenError::InvalidArgument(format!("margin must lie in (0, 1), got {c}")))
    }
}

#[cfg(test)]
mod tests;
