use serde_json::{json, Value};

use super::{AdamState, Checkpoint, TrainConfig};
use crate::error::{Result, WegenError};
use crate::generator::{GeneratorConfig, GeneratorModel};
use crate::guider::{GuiderConfig, GuiderModel};

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configs serialize")
}

fn from_value<T: serde::de::DeserializeOwned>(v: &Value, what: &str) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| WegenError::CorruptCheckpoint(format!("bad {what} config: {e}")))
}

fn kind(ckpt: &Checkpoint) -> Option<&str> {
    ckpt.config.get("kind").and_then(Value::as_str)
}

pub fn guider_checkpoint(model: &GuiderModel) -> Checkpoint {
    let mut c = Checkpoint::new(json!({ "kind": "guider", "guider": to_value(&model.config) }));
    c.add_store(&model.store);
    c
}

pub fn restore_guider(ckpt: &Checkpoint) -> Result<GuiderModel> {
    let cfg: GuiderConfig = match kind(ckpt) {
        Some("guider") | Some("generator") => from_value(&ckpt.config["guider"], "guider")?,
        _ => return Err(WegenError::CorruptCheckpoint("not a guider checkpoint".into())),
    };
    let embedding = ckpt
        .get("embedding")
        .ok_or_else(|| WegenError::CorruptCheckpoint("missing tensor \"embedding\"".into()))?;
    let mut model = GuiderModel::new(cfg, embedding.clone())?;
    ckpt.restore_store(&mut model.store)?;
    Ok(model)
}

/// Everything needed to rebuild a trained generator: its parameters, the
/// frozen guider (when pretraining is used) and optionally the optimizer.
pub fn generator_checkpoint(
    model: &GeneratorModel,
    guider: Option<&GuiderModel>,
    adam: Option<&AdamState>,
    train: Option<&TrainConfig>,
    best_metric: Option<f64>,
) -> Checkpoint {
    let mut c = Checkpoint::new(json!({
        "kind": "generator",
        "generator": to_value(&model.config),
        "guider": guider.map(|g| to_value(&g.config)),
        "feature_dim": guider.map(GuiderModel::feature_dim),
        "train": train.map(to_value),
    }));
    c.best_metric = best_metric;
    c.add_store(&model.store);
    if let Some(g) = guider {
        c.add_store(&g.store);
    }
    if let Some(a) = adam {
        c.add_adam(&model.store, a);
    }
    c
}

pub fn restore_generator(ckpt: &Checkpoint) -> Result<(GeneratorModel, Option<GuiderModel>)> {
    if kind(ckpt) != Some("generator") {
        return Err(WegenError::CorruptCheckpoint("not a generator checkpoint".into()));
    }
    let cfg: GeneratorConfig = from_value(&ckpt.config["generator"], "generator")?;
    let guider = if ckpt.config["guider"].is_null() {
        None
    } else {
        Some(restore_guider(ckpt)?)
    };
    let embedding = ckpt
        .get("embedding")
        .ok_or_else(|| WegenError::CorruptCheckpoint("missing tensor \"embedding\"".into()))?;
    let mut model = GeneratorModel::new(cfg, embedding.clone(), guider.as_ref().map(GuiderModel::feature_dim))?;
    ckpt.restore_store(&mut model.store)?;
    Ok((model, guider))
}

/// The training configuration stored alongside a generator, if any.
pub fn stored_train_config(ckpt: &Checkpoint) -> Result<Option<TrainConfig>> {
    match ckpt.config.get("train") {
        None | Some(Value::Null) => Ok(None),
        Some(v) => from_value(v, "train").map(Some),
    }
}
