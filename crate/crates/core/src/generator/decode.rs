use std::cmp::Ordering;

use crate::error::{Result, WegenError};

/// Anything that yields a next-token distribution from a state.
pub trait StepModel {
    type State: Clone;

    fn initial(&self) -> Result<Self::State>;

    /// Probabilities over the (extended) vocabulary after emitting `prev`.
    fn next(&self, state: &Self::State, prev: usize) -> Result<(Vec<f64>, Self::State)>;
}

/// A decoded sequence. `tokens` excludes the end marker; `finished` records
/// whether it was emitted.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of scored steps, counting the end marker.
    pub fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize && self.steps() > 0 {
            self.log_prob / self.steps() as f64
        } else {
            self.log_prob
        }
    }
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn check_dist(dist: &[f64]) -> Result<()> {
    if dist.is_empty() {
        return Err(WegenError::Empty("next-token distribution"));
    }
    if dist.iter().any(|p| !p.is_finite()) {
        return Err(WegenError::NonFinite("next-token distribution".into()));
    }
    Ok(())
}

/// Picks the most probable token; ties go to the lowest id.
fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode<M: StepModel>(model: &M, start: usize, end: usize, max_len: usize) -> Result<Hypothesis> {
    let mut state = model.initial()?;
    let mut prev = start;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let (dist, next) = model.next(&state, prev)?;
        check_dist(&dist)?;
        let tok = argmax(&dist);
        hyp.log_prob += ln(dist[tok]);
        if tok == end {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(tok);
        state = next;
        prev = tok;
    }
    Ok(hyp)
}

struct Live<S> {
    hyp: Hypothesis,
    state: S,
}

/// Beam search ranking by summed log-probability (divided by length when
/// `length_normalize`). Ties go to the earlier beam entry and then to the
/// lower token id. Hypotheses still open at `max_len` compete with finished
/// ones.
pub fn beam_search<M: StepModel>(
    model: &M,
    start: usize,
    end: usize,
    beam: usize,
    max_len: usize,
    length_normalize: bool,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(WegenError::Config("beam size must be at least 1".into()));
    }
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        state: model.initial()?,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        // (parent, token, log_prob, next state)
        let mut candidates: Vec<(usize, usize, f64, M::State)> = Vec::new();
        for (b, entry) in live.iter().enumerate() {
            let prev = entry.hyp.tokens.last().copied().unwrap_or(start);
            let (dist, next) = model.next(&entry.state, prev)?;
            check_dist(&dist)?;
            let mut ids: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
            ids.sort_by(|&x, &y| dist[y].partial_cmp(&dist[x]).unwrap_or(Ordering::Equal).then(x.cmp(&y)));
            ids.truncate(beam);
            for tok in ids {
                candidates.push((b, tok, entry.hyp.log_prob + dist[tok].ln(), next.clone()));
            }
        }
        let rank = |c: &(usize, usize, f64, M::State)| {
            let h = &live[c.0].hyp;
            let steps = h.tokens.len() + 1;
            if length_normalize {
                c.2 / steps as f64
            } else {
                c.2
            }
        };
        candidates.sort_by(|x, y| {
            rank(y)
                .partial_cmp(&rank(x))
                .unwrap_or(Ordering::Equal)
                .then(x.0.cmp(&y.0))
                .then(x.1.cmp(&y.1))
        });
        candidates.truncate(beam);

        let mut next_live = Vec::with_capacity(beam);
        for (b, tok, log_prob, state) in candidates {
            let mut tokens = live[b].hyp.tokens.clone();
            if tok == end {
                done.push(Hypothesis {
                    tokens,
                    log_prob,
                    finished: true,
                });
            } else {
                tokens.push(tok);
                next_live.push(Live {
                    hyp: Hypothesis {
                        tokens,
                        log_prob,
                        finished: false,
                    },
                    state,
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        // Without normalization scores only fall, so a finished hypothesis
        // at least as good as every open one cannot be overtaken.
        if !length_normalize {
            let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|l| l.hyp.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }
    done.extend(live.into_iter().map(|l| l.hyp));
    let mut best: Option<Hypothesis> = None;
    for h in done {
        let better = match &best {
            None => true,
            Some(b) => h.score(length_normalize) > b.score(length_normalize),
        };
        if better {
            best = Some(h);
        }
    }
    best.ok_or(WegenError::Empty("beam search produced no hypothesis"))
}
