use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{corpus_bleu, meteor_lite, rouge_l, sentence_bleu};
use crate::data::{for_each_json_object, string_field, tokenize};
use crate::error::{Result, WegenError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: String,
    /// Smoothed sentence BLEU-4.
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    /// Mean over examples.
    pub rouge_l: f64,
    /// Mean over examples.
    pub meteor: f64,
    pub examples: Vec<ExampleScores>,
}

impl EvalReport {
    /// Scores aligned `(id, candidate, reference)` triples.
    pub fn from_pairs(items: &[(String, Vec<String>, Vec<String>)]) -> Result<Self> {
        if items.is_empty() {
            return Err(WegenError::Empty("no predictions to evaluate"));
        }
        let examples = items
            .par_iter()
            .map(|(id, cand, reference)| {
                if reference.is_empty() {
                    return Err(WegenError::InvalidArgument(format!("reference for {id:?} is empty")));
                }
                Ok(ExampleScores {
                    id: id.clone(),
                    bleu4: sentence_bleu(cand, &[reference], 4, true)?,
                    rouge_l: rouge_l(cand, reference)?,
                    meteor: meteor_lite(cand, reference)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(&[String], Vec<&[String]>)> = items
            .iter()
            .map(|(_, c, r)| (c.as_slice(), vec![r.as_slice()]))
            .collect();
        let n = examples.len() as f64;
        Ok(EvalReport {
            count: examples.len(),
            bleu1: corpus_bleu(&pairs, 1)?,
            bleu2: corpus_bleu(&pairs, 2)?,
            bleu3: corpus_bleu(&pairs, 3)?,
            bleu4: corpus_bleu(&pairs, 4)?,
            rouge_l: examples.iter().map(|e| e.rouge_l).sum::<f64>() / n,
            meteor: examples.iter().map(|e| e.meteor).sum::<f64>() / n,
            examples,
        })
    }
}

fn read_keyed(path: &Path, keys: &[&str]) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for_each_json_object(path, |_, obj| {
        let id = string_field(obj, "id")?.ok_or("missing required field \"id\"")?;
        if !seen.insert(id.clone()) {
            return Err(format!("duplicate id {id:?}"));
        }
        let mut text = None;
        for k in keys {
            if let Some(t) = string_field(obj, k)? {
                text = Some(t);
                break;
            }
        }
        let text = text.ok_or_else(|| format!("missing field {:?}", keys[0]))?;
        out.push((id, tokenize(&text)));
        Ok(())
    })?;
    Ok(out)
}

/// `{"id", "question"}` lines.
pub fn read_predictions(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    read_keyed(path, &["question"])
}

/// `{"id", "reference"}` lines; a `"question"` field is accepted instead so
/// QG datasets can serve as references.
pub fn read_references(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    read_keyed(path, &["reference", "question"])
}

/// Scores a predictions file against a references file with the same ids.
pub fn corpus_evaluate(predictions: &Path, references: &Path) -> Result<EvalReport> {
    let preds = read_predictions(predictions)?;
    if preds.is_empty() {
        return Err(WegenError::Empty("predictions file has no records"));
    }
    let refs: HashMap<String, Vec<String>> = read_references(references)?.into_iter().collect();
    let pred_ids: HashSet<&String> = preds.iter().map(|(id, _)| id).collect();
    let mut missing: Vec<String> = preds
        .iter()
        .filter(|(id, _)| !refs.contains_key(id))
        .map(|(id, _)| id.clone())
        .collect();
    let mut unpredicted: Vec<String> = refs.keys().filter(|id| !pred_ids.contains(id)).cloned().collect();
    unpredicted.sort();
    missing.extend(unpredicted);
    if !missing.is_empty() {
        return Err(WegenError::MissingIds(missing));
    }
    let items: Vec<(String, Vec<String>, Vec<String>)> = preds
        .into_iter()
        .map(|(id, cand)| {
            let r = refs[&id].clone();
            (id, cand, r)
        })
        .collect();
    EvalReport::from_pairs(&items)
}

/// Writes the report as JSON and the per-example table as CSV.
pub fn write_report(report: &EvalReport, json_path: &Path, csv_path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| WegenError::InvalidArgument(format!("cannot serialize report: {e}")))?;
    std::fs::write(json_path, json + "\n").map_err(|e| WegenError::io(json_path, e))?;
    let file = File::create(csv_path).map_err(|e| WegenError::io(csv_path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| WegenError::io(csv_path, e);
    writeln!(w, "id,bleu4,rouge_l,meteor").map_err(io)?;
    for e in &report.examples {
        let id = if e.id.contains([',', '"', '\n']) {
            format!("\"{}\"", e.id.replace('"', "\"\""))
        } else {
            e.id.clone()
        };
        writeln!(w, "{id},{},{},{}", e.bleu4, e.rouge_l, e.meteor).map_err(io)?;
    }
    w.flush().map_err(io)
}
