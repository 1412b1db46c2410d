use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{tokenize, QGExample, Triplet};
use crate::error::{Result, WegenError};
use crate::tensor::Tensor;

const OBJECTS: [&str; 24] = [
    "apple", "ball", "book", "bottle", "candle", "clock", "coin", "cup", "doll", "fork", "hat", "key", "lamp",
    "letter", "map", "pen", "plate", "ring", "rope", "shoe", "spoon", "stone", "toy", "watch",
];

const PLACES: [&str; 20] = [
    "attic", "bag", "barn", "basket", "box", "cabinet", "car", "cellar", "chest", "closet", "crate", "desk",
    "drawer", "garage", "garden", "kitchen", "office", "pocket", "shed", "tent",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMode {
    Qg,
    Triplet,
}

impl FromStr for SynthMode {
    type Err = WegenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qg" => Ok(SynthMode::Qg),
            "triplet" => Ok(SynthMode::Triplet),
            other => Err(WegenError::InvalidArgument(format!(
                "unknown synthetic mode {other:?} (expected qg or triplet)"
            ))),
        }
    }
}

impl fmt::Display for SynthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthMode::Qg => "qg",
            SynthMode::Triplet => "triplet",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SynthDataset {
    Qg(Vec<QGExample>),
    Triplets(Vec<Triplet>),
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        match self {
            SynthDataset::Qg(v) => v.len(),
            SynthDataset::Triplets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn clause(object: &str, place: &str) -> String {
    format!("the {object} is in the {place} .")
}

/// Two distinct picks from `pool`, the first different from `avoid`.
fn two_distinct<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str], avoid: Option<&str>) -> (&'a str, &'a str) {
    let allowed: Vec<&str> = pool.iter().copied().filter(|p| Some(*p) != avoid).collect();
    let picks: Vec<&&str> = allowed.choose_multiple(rng, 2).collect();
    (picks[0], picks[1])
}

/// Passages of two shuffled clauses; the answer is the object of one of
/// them and the question asks what is in that clause's place.
pub fn synth_qg(seed: u64, n: usize) -> Vec<QGExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let objects: Vec<&&str> = OBJECTS.choose_multiple(&mut rng, 2).collect();
            let places: Vec<&&str> = PLACES.choose_multiple(&mut rng, 2).collect();
            let mut clauses = [clause(objects[0], places[0]), clause(objects[1], places[1])];
            clauses.shuffle(&mut rng);
            QGExample {
                id: format!("synth-{i}"),
                passage: tokenize(&clauses.join(" ")),
                answer: vec![objects[0].to_string()],
                question: Some(tokenize(&format!("what is in the {} ?", places[0]))),
            }
        })
        .collect()
}

/// Positives hold the answer clause plus a distractor; negatives are built
/// only from other objects, so they never contain the answer token.
pub fn synth_triplets(seed: u64, n: usize) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let answer = *OBJECTS.choose(&mut rng).expect("nonempty");
            let (d, _) = two_distinct(&mut rng, &OBJECTS, Some(answer));
            let (p1, p2) = two_distinct(&mut rng, &PLACES, None);
            let mut pos = [clause(answer, p1), clause(d, p2)];
            pos.shuffle(&mut rng);
            let (n1, n2) = two_distinct(&mut rng, &OBJECTS, Some(answer));
            let n2 = if n2 == answer { d } else { n2 };
            let (q1, q2) = two_distinct(&mut rng, &PLACES, None);
            let neg_order = rng.random_bool(0.5);
            let neg = if neg_order {
                [clause(n1, q1), clause(n2, q2)]
            } else {
                [clause(n2, q2), clause(n1, q1)]
            };
            Triplet {
                answer: vec![answer.to_string()],
                positive: tokenize(&pos.join(" ")),
                negative: tokenize(&neg.join(" ")),
            }
        })
        .collect()
}

/// Stand-in for pretrained word vectors: seeded `uniform(-0.3, 0.3)` rows,
/// roughly the per-coordinate spread of GloVe.
pub fn synth_embeddings(vocab_size: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[vocab_size, dim], -0.3, 0.3, &mut rng)
}

/// Deterministic synthetic dataset for tests and smoke runs.
pub fn synth_corpus(seed: u64, n: usize, mode: SynthMode) -> Result<SynthDataset> {
    if n == 0 {
        return Err(WegenError::InvalidArgument("synth_corpus needs n_examples >= 1".into()));
    }
    Ok(match mode {
        SynthMode::Qg => SynthDataset::Qg(synth_qg(seed, n)),
        SynthMode::Triplet => SynthDataset::Triplets(synth_triplets(seed, n)),
    })
}
