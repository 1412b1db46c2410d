//! Automatic metrics for generated questions. Scores live in `[0, 1]`.

mod report;

use std::collections::HashMap;
use std::hash::Hash;

use rust_stemmers::{Algorithm, Stemmer};

use crate::error::{Result, WegenError};

pub use report::{corpus_evaluate, read_predictions, read_references, write_report, EvalReport, ExampleScores};

fn ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the candidate's n-gram total.
pub fn modified_precision<T: Eq + Hash>(candidate: &[T], references: &[&[T]], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let clipped = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (clipped, candidate.len().saturating_sub(n - 1))
}

/// `exp(1 − r/c)` when the candidate is shorter than the reference, else 1.
pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len<T>(c: usize, references: &[&[T]]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn check_order(max_n: usize) -> Result<()> {
    if (1..=4).contains(&max_n) {
        Ok(())
    } else {
        Err(WegenError::InvalidArgument(format!("BLEU order must be in 1..=4, got {max_n}")))
    }
}

fn geometric_bleu(matches: &[f64], totals: &[f64], c: usize, r: usize) -> f64 {
    let mut log_sum = 0.0;
    for (m, t) in matches.iter().zip(totals) {
        if *m <= 0.0 || *t <= 0.0 {
            return 0.0;
        }
        log_sum += (m / t).ln();
    }
    brevity_penalty(c, r) * (log_sum / matches.len() as f64).exp()
}

/// Sentence BLEU with uniform weights up to `max_n`. With `smooth`, counts
/// for n ≥ 2 get add-one smoothing.
pub fn sentence_bleu<T: Eq + Hash>(candidate: &[T], references: &[&[T]], max_n: usize, smooth: bool) -> Result<f64> {
    check_order(max_n)?;
    if candidate.is_empty() || references.is_empty() {
        return Ok(0.0);
    }
    let mut matches = Vec::with_capacity(max_n);
    let mut totals = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (m, t) = modified_precision(candidate, references, n);
        let add = if smooth && n >= 2 { 1.0 } else { 0.0 };
        matches.push(m as f64 + add);
        totals.push(t as f64 + add);
    }
    let r = closest_ref_len(candidate.len(), references);
    Ok(geometric_bleu(&matches, &totals, candidate.len(), r))
}

/// Corpus BLEU: clipped counts, totals and lengths are summed over all
/// pairs before the geometric mean and brevity penalty.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(&[T], Vec<&[T]>)], max_n: usize) -> Result<f64> {
    check_order(max_n)?;
    let mut matches = vec![0.0; max_n];
    let mut totals = vec![0.0; max_n];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in pairs {
        if refs.is_empty() {
            continue;
        }
        for n in 1..=max_n {
            let (m, t) = modified_precision(cand, refs, n);
            matches[n - 1] += m as f64;
            totals[n - 1] += t as f64;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    Ok(geometric_bleu(&matches, &totals, c, r))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure `(1+β²)PR / (R + β²P)` with β = 1.2.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(WegenError::Empty("ROUGE-L reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// Greedy one-to-one alignment: exact matches first, then matches on
/// Porter stems among the leftovers. Returns `(cand_pos, ref_pos)` pairs
/// sorted by candidate position.
fn align<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Vec<(usize, usize)> {
    let stemmer = Stemmer::create(Algorithm::English);
    let mut used_c = vec![false; candidate.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let exact = |s: &S| s.as_ref().to_string();
    let stem = |s: &S| stemmer.stem(&s.as_ref().to_lowercase()).into_owned();
    let stages: [&dyn Fn(&S) -> String; 2] = [&exact, &stem];
    for key in stages {
        let ref_keys: Vec<String> = reference.iter().map(key).collect();
        for (i, c) in candidate.iter().enumerate() {
            if used_c[i] {
                continue;
            }
            let k = key(c);
            if let Some(j) = (0..reference.len()).find(|&j| !used_r[j] && ref_keys[j] == k) {
                used_c[i] = true;
                used_r[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// METEOR without the synonym stage: `F_mean = 10PR / (R + 9P)` scaled by
/// `1 − 0.5·(chunks/matches)³`.
pub fn meteor_lite<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(WegenError::Empty("METEOR reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let pairs = align(candidate, reference);
    let m = pairs.len();
    if m == 0 {
        return Ok(0.0);
    }
    let chunks = 1 + pairs.windows(2).filter(|w| w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1).count();
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    Ok(f_mean * (1.0 - penalty))
}

/// Share of the `n` judges whose top pick was `model`.
pub fn turing_at_1<S: AsRef<str>>(top_picks: &[S], model: &str, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(WegenError::InvalidArgument("Turing@1 needs at least one participant".into()));
    }
    if top_picks.len() != n {
        return Err(WegenError::InvalidArgument(format!(
            "Turing@1 expected {n} rankings, got {}",
            top_picks.len()
        )));
    }
    let wins = top_picks.iter().filter(|p| p.as_ref() == model).count();
    Ok(wins as f64 / n as f64)
}
