use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{encode_triplets, EncodedTriplet, GuiderModel};
use crate::data::{Triplet, Vocab};
use crate::error::{Result, WegenError};
use crate::tensor::Graph;
use crate::train::{adam_step, batch_gradients, clip_global_norm, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GuiderEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters from the epoch with the lowest validation loss; epoch 0
    /// means the initialization won.
    pub model: GuiderModel,
    pub best_epoch: usize,
    pub log: Vec<GuiderEpoch>,
}

/// Mean margin loss and the fraction of triplets with `s_pos > s_neg`.
pub fn evaluate_triplets(model: &GuiderModel, triplets: &[EncodedTriplet]) -> Result<(f64, f64)> {
    if triplets.is_empty() {
        return Err(WegenError::Empty("triplet set"));
    }
    let scored: Vec<Result<(f64, f64)>> = triplets
        .par_iter()
        .map(|t| {
            let mut g = Graph::new(&model.store);
            let a = model.encode_tokens(&mut g, &t.answer)?;
            let pos = model.encode_tokens(&mut g, &t.positive)?;
            let neg = model.encode_tokens(&mut g, &t.negative)?;
            let s_pos = model.score_encoded(&mut g, pos, a)?;
            let s_neg = model.score_encoded(&mut g, neg, a)?;
            Ok((g.value(s_pos).item(), g.value(s_neg).item()))
        })
        .collect();
    let pairs = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let loss = super::margin_loss_value(&pairs, model.config.margin)? / pairs.len() as f64;
    let wins = pairs.iter().filter(|(p, n)| p > n).count();
    Ok((loss, wins as f64 / pairs.len() as f64))
}

/// Adam on the summed margin loss of matched triplets. A seeded share of
/// the triplets is held out, and the parameters with the lowest held-out
/// loss are returned. With fewer than two triplets the training set doubles
/// as the validation set.
pub fn pretrain_guider(model: GuiderModel, triplets: &[Triplet], vocab: &Vocab) -> Result<PretrainOutcome> {
    if triplets.is_empty() {
        return Err(WegenError::Empty("guider pretraining needs at least one triplet"));
    }
    if vocab.len() != model.embedding.vocab_size {
        return Err(WegenError::Config(format!(
            "vocabulary has {} entries but the embedding has {} rows",
            vocab.len(),
            model.embedding.vocab_size
        )));
    }
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut encoded = encode_triplets(triplets, vocab);
    encoded.shuffle(&mut rng);
    let n_val = if encoded.len() < 2 {
        0
    } else {
        ((cfg.validation_fraction * encoded.len() as f64).ceil() as usize).min(encoded.len() - 1)
    };
    let (val, train) = encoded.split_at(n_val);
    let val = if val.is_empty() { train } else { val };

    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::default();
    let mut model = model;
    let (init_loss, init_acc) = evaluate_triplets(&model, val)?;
    let mut log = vec![GuiderEpoch {
        epoch: 0,
        train_loss: evaluate_triplets(&model, train)?.0,
        val_loss: init_loss,
        val_accuracy: init_acc,
    }];
    let mut best = (init_loss, 0, model.store.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EncodedTriplet> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = batch_gradients(&model.store, &batch, |g, t| model.triplet_loss(g, t))?;
            if !loss.is_finite() {
                return Err(WegenError::NonFinite(format!(
                    "guider pretraining loss is {loss} at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            epoch_loss += loss;
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            adam_step(&mut model.store, &grads, &mut state, &adam)?;
        }
        let (val_loss, val_accuracy) = evaluate_triplets(&model, val)?;
        log.push(GuiderEpoch {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
            val_accuracy,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.store.clone());
        }
    }
    model.store = best.2;
    Ok(PretrainOutcome {
        model,
        best_epoch: best.1,
        log,
    })
}
