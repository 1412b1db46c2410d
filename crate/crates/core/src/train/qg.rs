use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, batch_gradients, clip_global_norm, AdamConfig, AdamState};
use crate::data::Vocab;
use crate::error::{Result, WegenError};
use crate::eval::corpus_bleu;
use crate::generator::{GeneratorModel, PreparedExample};

/// How the dev set is decoded after each epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DevDecode {
    #[default]
    Greedy,
    Beam,
}

impl FromStr for DevDecode {
    type Err = WegenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DevDecode::Greedy),
            "beam" => Ok(DevDecode::Beam),
            other => Err(WegenError::Config(format!("dev decode must be greedy or beam, got {other:?}"))),
        }
    }
}

impl fmt::Display for DevDecode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DevDecode::Greedy => "greedy",
            DevDecode::Beam => "beam",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// `None` trains for `max_epochs` regardless of the dev metric.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Share of the training set used, for data-size sweeps.
    pub fraction: f64,
    pub clip_norm: Option<f64>,
    pub dev_decode: DevDecode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            max_epochs: 20,
            patience: Some(5),
            seed: 0,
            fraction: 1.0,
            clip_norm: Some(5.0),
            dev_decode: DevDecode::Greedy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(WegenError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if self.eps <= 0.0 {
            return fail("Adam eps must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if let Some(p) = self.patience {
            if p == 0 || p > self.max_epochs {
                return fail(format!("patience {p} must be in 1..={}", self.max_epochs));
            }
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return fail(format!("training fraction must be in (0, 1], got {}", self.fraction));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail("clip norm must be positive".into());
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// True once `patience` epochs have passed without beating the best value
/// (higher is better; ties do not count as improvement).
pub fn early_stop_check(history: &[f64], patience: usize) -> bool {
    let Some(first) = history.first() else {
        return false;
    };
    let mut best = (*first, 0);
    for (i, &v) in history.iter().enumerate().skip(1) {
        if v > best.0 {
            best = (v, i);
        }
    }
    history.len() - 1 - best.1 >= patience
}

/// `⌈fraction · n⌉` indices (at least one) chosen by a seeded shuffle.
pub fn select_fraction(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if fraction >= 1.0 {
        return idx;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f4ac_7105);
    idx.shuffle(&mut rng);
    let keep = ((fraction * n as f64).ceil() as usize).clamp(1.min(n), n);
    idx.truncate(keep);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_bleu4: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev BLEU-4.
    pub model: GeneratorModel,
    pub best_epoch: usize,
    pub best_bleu4: f64,
    pub log: Vec<EpochLog>,
    /// Optimizer state at the best epoch.
    pub adam: AdamState,
    pub stopped_early: bool,
}

/// Decodes every example (greedy or beam) into extended ids.
pub fn decode_all(model: &GeneratorModel, examples: &[PreparedExample], mode: DevDecode) -> Result<Vec<Vec<usize>>> {
    examples
        .par_iter()
        .map(|ex| {
            let h = match mode {
                DevDecode::Greedy => model.greedy(ex)?,
                DevDecode::Beam => model.generate(ex, model.config.beam_size)?,
            };
            Ok(h.tokens)
        })
        .collect()
}

/// Corpus BLEU-4 of decoded questions against the gold questions, compared
/// as surface tokens so copied words count.
pub fn bleu4_of(model: &GeneratorModel, vocab: &Vocab, examples: &[PreparedExample], mode: DevDecode) -> Result<f64> {
    let decoded = decode_all(model, examples, mode)?;
    let strip_end = |t: &Vec<usize>| t[..t.len().saturating_sub(1)].to_vec();
    let mut cands = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    for (ex, ids) in examples.iter().zip(&decoded) {
        let gold = ex.target.as_ref().ok_or(WegenError::Empty("dev example without a gold question"))?;
        cands.push(model.ids_to_tokens(ids, vocab, &ex.source));
        refs.push(model.ids_to_tokens(&strip_end(gold), vocab, &ex.source));
    }
    let pairs: Vec<(&[String], Vec<&[String]>)> =
        cands.iter().zip(&refs).map(|(c, r)| (c.as_slice(), vec![r.as_slice()])).collect();
    corpus_bleu(&pairs, 4)
}

/// Minimizes the batch-averaged sequence NLL with Adam, scoring dev BLEU-4
/// after each epoch and keeping the best parameters. Frozen tensors (the
/// embedding, and the guider whose features are cached in the examples)
/// are never written.
pub fn train_generator(
    model: GeneratorModel,
    vocab: &Vocab,
    train: &[PreparedExample],
    dev: &[PreparedExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(WegenError::Empty("training set"));
    }
    if dev.is_empty() {
        return Err(WegenError::Empty("dev set"));
    }
    if vocab.len() != model.vocab_size() {
        return Err(WegenError::Config(format!(
            "vocabulary has {} entries but the embedding has {} rows",
            vocab.len(),
            model.vocab_size()
        )));
    }
    let selected: Vec<&PreparedExample> = select_fraction(train.len(), cfg.fraction, cfg.seed)
        .into_iter()
        .map(|i| &train[i])
        .collect();
    let adam = cfg.adam();
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model;
    let mut order: Vec<usize> = (0..selected.len()).collect();
    let mut log = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::tensor::ParamStore, AdamState)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| selected[i]).collect();
            let (loss, mut grads) = batch_gradients(&model.store, &batch, |g, ex| model.sequence_nll(g, ex))
                .map_err(|e| match e {
                    WegenError::Domain { .. } | WegenError::NonFinite(_) => {
                        WegenError::NonFinite(format!("generator loss failed at epoch {epoch}, batch {}: {e}", b + 1))
                    }
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(WegenError::NonFinite(format!(
                    "generator loss is {loss} at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            total += loss;
            let scale = 1.0 / batch.len() as f64;
            for t in grads.values_mut() {
                *t = t.map(|v| v * scale);
            }
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            adam_step(&mut model.store, &grads, &mut state, &adam)?;
        }
        let dev_bleu4 = bleu4_of(&model, vocab, dev, cfg.dev_decode)?;
        log.push(EpochLog {
            epoch,
            train_loss: total / selected.len() as f64,
            dev_bleu4,
        });
        history.push(dev_bleu4);
        if best.as_ref().is_none_or(|b| dev_bleu4 > b.0) {
            best = Some((dev_bleu4, epoch, model.store.clone(), state.clone()));
        }
        if let Some(p) = cfg.patience {
            if early_stop_check(&history, p) {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    let (best_bleu4, best_epoch, store, adam_state) = match best {
        Some(b) => b,
        None => (0.0, 0, model.store.clone(), state),
    };
    model.store = store;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_bleu4,
        log,
        adam: adam_state,
        stopped_early,
    })
}

/// Writes `epoch,train_loss,dev_bleu4` rows.
pub fn write_metric_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,dev_bleu4\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.dev_bleu4));
    }
    let mut f = std::fs::File::create(path).map_err(|e| WegenError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| WegenError::io(path, e))
}
