use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use wegen::data::{
    build_vocab as collect_vocab, detokenize, load_embedding_file, read_qg_jsonl, read_triplet_jsonl, synth_corpus, tokenize,
    write_jsonl, write_qg_jsonl, write_triplet_jsonl, EmbeddingMatrix, QGExample, SynthDataset, SynthMode, Triplet,
    Vocab,
};
use wegen::eval::{corpus_evaluate, write_report, EvalReport};
use wegen::generator::{prepare_example, GeneratorModel, PreparedExample};
use wegen::gradsuite::run_gradient_suite;
use wegen::guider::{pretrain_guider as run_pretraining, GuiderModel};
use wegen::tensor::Tensor;
use wegen::train::{
    generator_checkpoint, guider_checkpoint, load_checkpoint, restore_generator, restore_guider, save_checkpoint,
    train_generator, write_metric_log, TrainConfig, TrainOutcome,
};
use wegen::WegenError;

use crate::config::{require, RunConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| WegenError::io(path, e).into())
}

/// Creates the run directory and echoes the effective config into it.
fn prepare_run_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.out_dir()?;
    let ckpts = dir.join("checkpoints");
    fs::create_dir_all(&ckpts).map_err(|e| WegenError::io(&ckpts, e))?;
    let text = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    write_text(&dir.join("config.json"), &text)?;
    Ok(dir)
}

enum Records {
    Qg(Vec<QGExample>),
    Triplets(Vec<Triplet>),
}

/// Reads a JSONL file as QG records, or as triplets when it is not one.
fn read_records(path: &Path) -> Result<Records> {
    match read_qg_jsonl(path) {
        Ok(v) => Ok(Records::Qg(v)),
        Err(qg_err @ WegenError::Parse { .. }) => read_triplet_jsonl(path).map(Records::Triplets).map_err(|_| qg_err.into()),
        Err(e) => Err(e.into()),
    }
}

pub fn build_vocab(inputs: &[std::path::PathBuf], out: &Path, cap: usize) -> Result<()> {
    let mut all = Vec::new();
    for path in inputs {
        all.push(read_records(path)?);
    }
    let mut seqs: Vec<&[String]> = Vec::new();
    for r in &all {
        match r {
            Records::Qg(v) => {
                for e in v {
                    seqs.push(&e.passage);
                    seqs.push(&e.answer);
                    if let Some(q) = &e.question {
                        seqs.push(q);
                    }
                }
            }
            Records::Triplets(v) => {
                for t in v {
                    seqs.extend([&t.answer[..], &t.positive[..], &t.negative[..]]);
                }
            }
        }
    }
    let vocab = collect_vocab(seqs, cap)?;
    vocab.save(out)?;
    println!("wrote {} entries to {}", vocab.len(), out.display());
    Ok(())
}

pub fn synth_data(mode: &str, n: usize, seed: u64, out: &Path) -> Result<()> {
    let mode: SynthMode = mode.parse()?;
    match synth_corpus(seed, n, mode)? {
        SynthDataset::Qg(v) => write_qg_jsonl(out, &v)?,
        SynthDataset::Triplets(v) => write_triplet_jsonl(out, &v)?,
    }
    println!("wrote {n} {mode} records to {}", out.display());
    Ok(())
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    Ok(Vocab::load(require(&cfg.paths.vocab, "vocab", "--vocab")?)?)
}

/// Word vectors from the configured file, or seeded random ones.
fn embeddings(cfg: &RunConfig, vocab: &Vocab) -> Result<Tensor> {
    let d = &cfg.data;
    Ok(match &cfg.paths.embeddings {
        Some(path) => {
            let m = load_embedding_file(path, vocab, d.embedding_dim, d.embedding_seed)?;
            eprintln!("embeddings: {:.1}% of the vocabulary found in {}", 100.0 * m.coverage(), path.display());
            m.matrix
        }
        None => EmbeddingMatrix::random(vocab.len(), d.embedding_dim, d.embedding_seed).matrix,
    })
}

fn check_rows(vocab: &Vocab, emb: &Tensor, what: &str) -> Result<()> {
    if emb.rows() != vocab.len() {
        return Err(CliError::Usage(format!(
            "{what} has {} embedding rows but the vocabulary has {} entries",
            emb.rows(),
            vocab.len()
        )));
    }
    Ok(())
}

/// Pretrains a guider, writing its per-epoch log to `dir/metrics_name`.
fn train_guider(cfg: &RunConfig, vocab: &Vocab, dir: &Path, metrics_name: &str) -> Result<GuiderModel> {
    let path = require(&cfg.paths.triplets, "triplets", "--triplets")?;
    let triplets = read_triplet_jsonl(path)?;
    let model = GuiderModel::new(cfg.guider.clone(), embeddings(cfg, vocab)?)?;
    let out = run_pretraining(model, &triplets, vocab)?;
    let mut csv = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for e in &out.log {
        csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.val_accuracy));
    }
    write_text(&dir.join(metrics_name), &csv)?;
    let ckpt = dir.join("checkpoints").join("guider.wgen");
    let mut c = guider_checkpoint(&out.model);
    c.best_metric = Some(out.log[out.best_epoch].val_accuracy);
    save_checkpoint(&ckpt, &c)?;
    println!(
        "guider: best epoch {} with held-out accuracy {:.4}; saved {}",
        out.best_epoch,
        out.log[out.best_epoch].val_accuracy,
        ckpt.display()
    );
    Ok(out.model)
}

pub fn pretrain_guider(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_run_dir(cfg)?;
    let vocab = load_vocab(cfg)?;
    train_guider(cfg, &vocab, dir, "metrics.csv")?;
    Ok(())
}

fn load_guider(path: &Path, vocab: &Vocab) -> Result<GuiderModel> {
    let g = restore_guider(&load_checkpoint(path)?)?;
    check_rows(vocab, &g.store.get(g.embedding.param).clone(), "the guider checkpoint")?;
    Ok(g)
}

fn prepare_all(
    examples: &[QGExample],
    vocab: &Vocab,
    guider: Option<&GuiderModel>,
    use_copy: bool,
) -> Result<Vec<PreparedExample>> {
    examples
        .par_iter()
        .map(|e| prepare_example(e, vocab, guider, use_copy))
        .collect::<wegen::Result<Vec<_>>>()
        .map_err(Into::into)
}

struct Splits {
    train: Vec<QGExample>,
    dev: Vec<QGExample>,
}

fn read_splits(cfg: &RunConfig) -> Result<Splits> {
    Ok(Splits {
        train: read_qg_jsonl(require(&cfg.paths.train, "train", "--train")?)?,
        dev: read_qg_jsonl(require(&cfg.paths.dev, "dev", "--dev")?)?,
    })
}

/// Builds and trains one generator. The guider, when given, supplies both
/// the features and the shared frozen embeddings.
fn fit(
    cfg: &RunConfig,
    train_cfg: &TrainConfig,
    vocab: &Vocab,
    splits: &Splits,
    guider: Option<&GuiderModel>,
    base_embeddings: &Tensor,
) -> Result<TrainOutcome> {
    let mut gen_cfg = cfg.generator.clone();
    gen_cfg.use_pretraining = guider.is_some();
    let emb = match guider {
        Some(g) => g.store.get(g.embedding.param).clone(),
        None => base_embeddings.clone(),
    };
    let model = GeneratorModel::new(gen_cfg.clone(), emb, guider.map(GuiderModel::feature_dim))?;
    let train = prepare_all(&splits.train, vocab, guider, gen_cfg.use_copy)?;
    let dev = prepare_all(&splits.dev, vocab, guider, gen_cfg.use_copy)?;
    Ok(train_generator(model, vocab, &train, &dev, train_cfg)?)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_run_dir(cfg)?;
    let vocab = load_vocab(cfg)?;
    let splits = read_splits(cfg)?;
    let guider = if cfg.generator.use_pretraining {
        let path = cfg.paths.guider.as_deref().ok_or_else(|| {
            CliError::Usage("use_pretraining needs paths.guider (pass --guider or --no-pretraining)".into())
        })?;
        Some(load_guider(path, &vocab)?)
    } else {
        None
    };
    let base = match &guider {
        Some(g) => g.store.get(g.embedding.param).clone(),
        None => embeddings(cfg, &vocab)?,
    };
    check_rows(&vocab, &base, "the embedding matrix")?;
    let out = fit(cfg, &cfg.train, &vocab, &splits, guider.as_ref(), &base)?;
    write_metric_log(&dir.join("metrics.csv"), &out.log)?;
    let ckpt = dir.join("checkpoints").join("generator.wgen");
    save_checkpoint(
        &ckpt,
        &generator_checkpoint(&out.model, guider.as_ref(), Some(&out.adam), Some(&cfg.train), Some(out.best_bleu4)),
    )?;
    println!(
        "best dev BLEU-4 {:.2} at epoch {} of {}{}; saved {}",
        100.0 * out.best_bleu4,
        out.best_epoch,
        out.log.len(),
        if out.stopped_early { " (stopped early)" } else { "" },
        ckpt.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    question: String,
    log_prob: f64,
}

pub fn generate(cfg: &RunConfig, beam: Option<usize>, max_len: Option<usize>) -> Result<()> {
    let dir = prepare_run_dir(cfg)?;
    let vocab = load_vocab(cfg)?;
    let ckpt = load_checkpoint(require(&cfg.paths.checkpoint, "checkpoint", "--checkpoint")?)?;
    let (mut model, guider) = restore_generator(&ckpt)?;
    check_rows(&vocab, &model.store.get(model.embedding.param).clone(), "the checkpoint")?;
    if let Some(b) = beam {
        model.config.beam_size = b;
    }
    if let Some(n) = max_len {
        model.config.max_decode_len = n;
    }
    model.config.validate()?;
    let examples = read_qg_jsonl(require(&cfg.paths.test, "test", "--in")?)?;
    let prepared = prepare_all(&examples, &vocab, guider.as_ref(), model.config.use_copy)?;
    let decoded = prepared
        .par_iter()
        .map(|p| {
            let h = model.generate(p, model.config.beam_size)?;
            Ok((detokenize(&model.ids_to_tokens(&h.tokens, &vocab, &p.source)), h.log_prob))
        })
        .collect::<wegen::Result<Vec<_>>>()?;
    let preds_path = dir.join("predictions.jsonl");
    write_jsonl(
        &preds_path,
        examples.iter().zip(&decoded).map(|(e, (q, lp))| Prediction {
            id: &e.id,
            question: q.clone(),
            log_prob: *lp,
        }),
    )?;
    println!("wrote {} predictions to {}", decoded.len(), preds_path.display());
    if examples.iter().all(|e| e.question.is_some()) {
        let items: Vec<_> = examples
            .iter()
            .zip(&decoded)
            .map(|(e, (q, _))| (e.id.clone(), tokenize(q), e.question.clone().unwrap_or_default()))
            .collect();
        let report = EvalReport::from_pairs(&items)?;
        write_report(&report, &dir.join("report.json"), &dir.join("metrics.csv"))?;
        print_report(&report);
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("examples  {}", r.count);
    for (name, v) in [
        ("BLEU-1", r.bleu1),
        ("BLEU-2", r.bleu2),
        ("BLEU-3", r.bleu3),
        ("BLEU-4", r.bleu4),
        ("ROUGE-L", r.rouge_l),
        ("METEOR", r.meteor),
    ] {
        println!("{name:<9} {:.2}", 100.0 * v);
    }
}

pub fn evaluate(pred: &Path, reference: &Path, out_dir: Option<&Path>) -> Result<()> {
    let report = corpus_evaluate(pred, reference)?;
    print_report(&report);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| WegenError::io(dir, e))?;
        write_report(&report, &dir.join("report.json"), &dir.join("metrics.csv"))?;
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig, fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(CliError::Usage(format!("fractions must lie in (0, 1], got {fractions:?}")));
    }
    let dir = prepare_run_dir(cfg)?;
    let vocab = load_vocab(cfg)?;
    let splits = read_splits(cfg)?;
    let guider = match (&cfg.paths.guider, &cfg.paths.triplets) {
        (Some(path), _) => load_guider(path, &vocab)?,
        (None, Some(_)) => train_guider(cfg, &vocab, dir, "guider_metrics.csv")?,
        (None, None) => {
            return Err(CliError::Usage(
                "ablate needs a guider: pass --guider CHECKPOINT or --triplets FILE".into(),
            ))
        }
    };
    let base = guider.store.get(guider.embedding.param).clone();
    let mut csv = String::from("fraction,variant,train_examples,best_epoch,epochs_run,dev_bleu4\n");
    println!("{:>8}  {:>12}  {:>14}", "fraction", "with guider", "without guider");
    for &f in fractions {
        let train_cfg = TrainConfig {
            fraction: f,
            ..cfg.train.clone()
        };
        let n = (f * splits.train.len() as f64).ceil() as usize;
        let mut scores = Vec::new();
        for (variant, g) in [("with_pretraining", Some(&guider)), ("without_pretraining", None)] {
            let out = fit(cfg, &train_cfg, &vocab, &splits, g, &base)?;
            csv.push_str(&format!(
                "{f},{variant},{n},{},{},{}\n",
                out.best_epoch,
                out.log.len(),
                out.best_bleu4
            ));
            scores.push(out.best_bleu4);
        }
        println!("{f:>8}  {:>12.2}  {:>14.2}", 100.0 * scores[0], 100.0 * scores[1]);
    }
    write_text(&dir.join("metrics.csv"), &csv)?;
    Ok(())
}

pub fn gradcheck(trials: usize, seed: u64) -> Result<()> {
    let report = run_gradient_suite(trials, seed)?;
    println!("{:<28} {:>8} {:>12}", "check", "trials", "max rel err");
    for op in &report.ops {
        let flag = if op.max_rel_error < report.tolerance { "" } else { "  FAIL" };
        println!("{:<28} {:>8} {:>12.3e}{flag}", op.name, op.trials, op.max_rel_error);
    }
    println!("tolerance {:e}, {:.1?}", report.tolerance, report.elapsed);
    if report.passed() {
        Ok(())
    } else {
        Err(WegenError::NonFinite("gradient check exceeded tolerance".into()).into())
    }
}
