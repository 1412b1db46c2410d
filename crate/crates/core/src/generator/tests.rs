use proptest::prelude::*;

use super::*;
use crate::tensor::{grad_check_input, grad_check_params};
use crate::train::{adam_step, AdamConfig, AdamState};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn vocab() -> Vocab {
    Vocab::from_content(["the", "cat", "is", "on", "mat", "where", "?"]).unwrap()
}

fn small_config(pretrain: bool, copy: bool) -> GeneratorConfig {
    GeneratorConfig {
        k_steps: 1,
        hidden: 3,
        decoder_hidden: 5,
        attention_dim: 4,
        beam_size: 3,
        max_decode_len: 6,
        use_pretraining: pretrain,
        use_copy: copy,
        seed: 9,
        ..GeneratorConfig::default()
    }
}

const FEATURE_DIM: usize = 9;

fn model(pretrain: bool, copy: bool) -> GeneratorModel {
    let v = vocab();
    GeneratorModel::new(small_config(pretrain, copy), random(&[v.len(), 4], 1), Some(FEATURE_DIM)).unwrap()
}

fn example(pretrain: bool, copy: bool) -> PreparedExample {
    let ex = QGExample {
        id: "x".into(),
        passage: toks("the cat sat on the rug"),
        answer: toks("the rug"),
        question: Some(toks("where sat the cat ?")),
    };
    let mut p = prepare_example(&ex, &vocab(), None, copy).unwrap();
    if pretrain {
        p.features = Some(random(&[p.passage.len(), FEATURE_DIM], 2));
    }
    p
}

fn nll(m: &GeneratorModel, ex: &PreparedExample) -> f64 {
    let mut g = Graph::new(&m.store);
    let loss = m.sequence_nll(&mut g, ex).unwrap();
    g.value(loss).item()
}

#[test]
fn config_validation() {
    assert!(GeneratorConfig::default().validate().is_ok());
    for bad in [
        GeneratorConfig { k_steps: 0, ..GeneratorConfig::default() },
        GeneratorConfig { beam_size: 0, ..GeneratorConfig::default() },
        GeneratorConfig { max_decode_len: 0, ..GeneratorConfig::default() },
        GeneratorConfig { hidden: 0, ..GeneratorConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(WegenError::Config(_))), "{bad:?}");
    }
    assert_eq!(GeneratorConfig::default().width(), 64);
}

#[test]
fn pretraining_needs_feature_width() {
    let v = vocab();
    let err = GeneratorModel::new(small_config(true, true), random(&[v.len(), 4], 1), None);
    assert!(matches!(err, Err(WegenError::Config(_))));
    assert!(GeneratorModel::new(small_config(false, true), random(&[v.len(), 4], 1), None).is_ok());
}

#[test]
fn embeddings_frozen_and_channels_present() {
    let m = model(true, true);
    let emb = m.store.find("embedding").unwrap();
    assert!(!m.store.is_trainable(emb));
    assert!(m.store.find("gen.trans0.w_s").is_some());
    assert!(m.store.find("gen.gate.weight").is_some());
    let plain = model(false, false);
    assert!(plain.store.find("gen.trans0.w_s").is_none());
    assert!(plain.store.find("gen.copy.weight").is_none());
}

#[test]
fn prepare_maps_copyable_oov_targets() {
    let v = vocab();
    let ex = QGExample {
        id: "1".into(),
        passage: toks("the cat sat on the rug"),
        answer: toks("rug"),
        question: Some(toks("where sat the dog ?")),
    };
    let p = prepare_example(&ex, &v, None, true).unwrap();
    assert_eq!(p.source.oov, vec!["sat".to_string(), "rug".to_string()]);
    let the = v.id("the").unwrap();
    let q = v.id("?").unwrap();
    // "sat" is the first source OOV; "dog" is nowhere in the source.
    assert_eq!(
        p.target.as_deref().unwrap(),
        &[v.id("where").unwrap(), v.len(), the, UNK_ID, q, END_ID]
    );
    assert_eq!(p.answer, vec![UNK_ID]);
    let plain = prepare_example(&ex, &v, None, false).unwrap();
    assert_eq!(plain.target.as_deref().unwrap()[1], UNK_ID);
    assert!(prepare_example(&QGExample { answer: vec![], ..ex }, &v, None, true).is_err());
}

#[test]
fn mix_distribution_closed_form() {
    let p_gen = [0.1, 0.2, 0.3, 0.4];
    let alpha = [0.5, 0.25, 0.25];
    let extended = [2, 4, 2];
    let d = mix_distribution(&p_gen, &alpha, 0.6, &extended, 1);
    let want = [0.06, 0.12, 0.18 + 0.4 * 0.75, 0.24, 0.4 * 0.25];
    for (a, b) in d.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{d:?}");
    }
    assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(mix_distribution(&p_gen, &alpha, 1.0, &extended, 1), vec![0.1, 0.2, 0.3, 0.4, 0.0]);
    assert_eq!(mix_distribution(&p_gen, &alpha, 0.0, &extended, 1), vec![0.0, 0.0, 0.75, 0.0, 0.25]);
}

proptest! {
    #[test]
    fn mixture_is_a_distribution(
        raw in prop::collection::vec(0.01f64..1.0, 2..8),
        att in prop::collection::vec(0.01f64..1.0, 1..6),
        lambda in 0.0f64..=1.0,
        seed in 0u64..1000,
    ) {
        let z: f64 = raw.iter().sum();
        let p_gen: Vec<f64> = raw.iter().map(|r| r / z).collect();
        let za: f64 = att.iter().sum();
        let alpha: Vec<f64> = att.iter().map(|a| a / za).collect();
        let n_oov = 2;
        let extended: Vec<usize> = (0..alpha.len())
            .map(|i| (seed as usize + 7 * i) % (p_gen.len() + n_oov))
            .collect();
        let d = mix_distribution(&p_gen, &alpha, lambda, &extended, n_oov);
        prop_assert_eq!(d.len(), p_gen.len() + n_oov);
        prop_assert!(d.iter().all(|&p| p >= 0.0));
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_output_lies_between_inputs(seed in 0u64..500, bias in -5.0f64..5.0) {
        let mut g = Graph::detached();
        let x = g.constant(random(&[3, 4], seed));
        let y = g.constant(random(&[3, 4], seed + 1));
        let w = g.constant(random(&[8, 4], seed + 2));
        let b = g.constant(Tensor::full(&[4], bias));
        let out = control_gate(&mut g, x, y, w, b).unwrap();
        let (xv, yv, ov) = (g.value(x), g.value(y), g.value(out));
        for i in 0..12 {
            let (lo, hi) = (xv.data()[i].min(yv.data()[i]), xv.data()[i].max(yv.data()[i]));
            prop_assert!(ov.data()[i] >= lo - 1e-12 && ov.data()[i] <= hi + 1e-12);
        }
    }
}

#[test]
fn gate_examples() {
    let x = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
    let y = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
    let run = |bias: f64| {
        let mut g = Graph::detached();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        let b = g.constant(Tensor::full(&[2], bias));
        let out = control_gate(&mut g, xv, yv, w, b).unwrap();
        g.value(out).data().to_vec()
    };
    assert_eq!(run(0.0), vec![2.0, 1.0]);
    let open = run(60.0);
    assert!((open[0] - 1.0).abs() < 1e-12 && (open[1] + 2.0).abs() < 1e-12);
    let shut = run(-60.0);
    assert!((shut[0] - 3.0).abs() < 1e-12 && (shut[1] - 4.0).abs() < 1e-12);

    let mut g = Graph::detached();
    let (xv, yv) = (g.constant(x), g.constant(Tensor::zeros(&[2, 2])));
    let w = g.constant(Tensor::zeros(&[4, 2]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(control_gate(&mut g, xv, yv, w, b).is_err());
}

#[test]
fn step_distributions_sum_to_one() {
    for (pretrain, copy) in [(true, true), (true, false), (false, true), (false, false)] {
        let m = model(pretrain, copy);
        let ex = example(pretrain, copy);
        let dec = m.decoder_for(&ex).unwrap();
        let mut state = dec.initial_state();
        let mut prev = START_ID;
        for _ in 0..3 {
            let out = dec.decode_step(&state, prev).unwrap();
            let n_extra = if copy { ex.source.oov.len() } else { 0 };
            assert_eq!(out.dist.len(), m.vocab_size() + n_extra);
            assert!((out.dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((out.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(out.lambda.is_some(), copy);
            prev = out.dist.len() - 1;
            state = out.state;
        }
    }
}

#[test]
fn missing_features_rejected_when_pretraining() {
    let m = model(true, true);
    let mut ex = example(true, true);
    ex.features = None;
    let mut g = Graph::new(&m.store);
    assert!(matches!(m.sequence_nll(&mut g, &ex), Err(WegenError::Config(_))));
    ex.features = Some(random(&[2, FEATURE_DIM], 3));
    assert!(matches!(m.sequence_nll(&mut g, &ex), Err(WegenError::Shape { .. })));
}

/// Teacher forcing must score the gold sequence exactly as inference does.
#[test]
fn training_loss_matches_inference_distribution() {
    for (pretrain, copy) in [(true, true), (false, false), (false, true)] {
        let m = model(pretrain, copy);
        let ex = example(pretrain, copy);
        let dec = m.decoder_for(&ex).unwrap();
        let mut state = dec.initial_state();
        let mut prev = START_ID;
        let mut want = 0.0;
        for &gold in ex.target.as_ref().unwrap() {
            let out = dec.decode_step(&state, prev).unwrap();
            want -= out.dist[gold].ln();
            state = out.state;
            prev = gold;
        }
        let got = nll(&m, &ex);
        assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
    }
}

fn zero(m: &mut GeneratorModel, id: ParamId) {
    let shape = m.store.get(id).shape().to_vec();
    m.store.set(id, Tensor::zeros(&shape)).unwrap();
}

/// Uniform generation, uniform attention and `λ = ½`: every step puts
/// `1/8` on a word that appears once among four distinct source words
/// when only the four special tokens are in the vocabulary.
#[test]
fn uniform_model_loss_is_length_times_log_support() {
    let v = Vocab::from_content(Vec::<String>::new()).unwrap();
    assert_eq!(v.len(), 4);
    let cfg = small_config(false, true);
    let mut m = GeneratorModel::new(cfg, random(&[4, 4], 5), None).unwrap();
    for id in [m.output.weight, m.output.bias.unwrap(), m.att_v] {
        zero(&mut m, id);
    }
    let copy = m.copy_gate.clone().unwrap();
    zero(&mut m, copy.weight);
    zero(&mut m, copy.bias.unwrap());
    let ex = QGExample {
        id: "u".into(),
        passage: toks("w x y z"),
        answer: toks("x"),
        question: Some(toks("z y w")),
    };
    let p = prepare_example(&ex, &v, None, true).unwrap();
    assert_eq!(p.target.as_deref().unwrap(), &[7, 6, 4, END_ID]);
    // END is generated with probability 1/8 too: ½ · ¼.
    let got = nll(&m, &p);
    let want = 4.0 * 8f64.ln();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

/// Source `@END@` only, gold `@END@ @END@`, copy gate pushed to pure copying:
/// each target has probability one.
#[test]
fn certain_copy_has_zero_loss() {
    let v = vocab();
    let mut m = GeneratorModel::new(small_config(false, true), random(&[v.len(), 4], 5), None).unwrap();
    let copy = m.copy_gate.clone().unwrap();
    zero(&mut m, copy.weight);
    m.store.set(copy.bias.unwrap(), Tensor::full(&[1], -60.0)).unwrap();
    let ex = QGExample {
        id: "e".into(),
        passage: vec!["@END@".into()],
        answer: toks("the"),
        question: Some(vec!["@END@".into()]),
    };
    let p = prepare_example(&ex, &v, None, true).unwrap();
    assert_eq!(p.target.as_deref().unwrap(), &[END_ID, END_ID]);
    assert!(nll(&m, &p).abs() < 1e-12);
}

#[test]
fn forcing_lambda_selects_a_head() {
    let m0 = model(false, true);
    let ex = example(false, true);
    let mut probs = Vec::new();
    for bias in [60.0, -60.0] {
        let mut m = m0.clone();
        let copy = m.copy_gate.clone().unwrap();
        zero(&mut m, copy.weight);
        m.store.set(copy.bias.unwrap(), Tensor::full(&[1], bias)).unwrap();
        let dec = m.decoder_for(&ex).unwrap();
        probs.push(dec.decode_step(&dec.initial_state(), START_ID).unwrap());
    }
    // λ = 1: only the generator, no mass on source-only words.
    let gen = &probs[0];
    for (i, p) in gen.dist.iter().enumerate() {
        let want = gen.p_gen.get(i).copied().unwrap_or(0.0);
        assert!((p - want).abs() < 1e-12);
    }
    // λ = 0: only the copy head, so mass sits on source words.
    let cp = &probs[1];
    let mut want = vec![0.0; cp.dist.len()];
    for (&a, &id) in cp.alpha.iter().zip(&ex.source.extended) {
        want[id] += a;
    }
    for (p, w) in cp.dist.iter().zip(want) {
        assert!((p - w).abs() < 1e-12);
    }
}

fn weighted(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(random(g.shape(y), seed));
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

#[test]
fn contextual_encoder_gradcheck() {
    let m = model(false, false);
    let p = [4, 5, 6, 1];
    let a = [5, 6];
    let coords: Vec<(ParamId, usize)> = m
        .store
        .trainable_ids()
        .filter(|&id| m.store.name(id).starts_with("gen.encoder"))
        .flat_map(|id| (0..m.store.get(id).numel()).step_by(5).map(move |i| (id, i)))
        .collect();
    assert!(!coords.is_empty());
    let err = grad_check_params(
        &m.store,
        |g| {
            let (hp, ha) = m.contextual_encode(g, &p, &a)?;
            let l1 = weighted(g, hp, 3)?;
            let l2 = weighted(g, ha, 4)?;
            g.add(l1, l2)
        },
        &coords,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn interaction_unit_gradcheck() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let unit = InteractionUnit::new(&mut store, "u", 8, &mut rng);
    let answer = random(&[2, 8], 6);
    let err = grad_check_input(
        &store,
        |g, x| {
            let a = g.constant(answer.clone());
            let y = unit.forward(g, x, a)?;
            weighted(g, y, 7)
        },
        &random(&[3, 8], 5),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
    let coords: Vec<(ParamId, usize)> = store
        .trainable_ids()
        .flat_map(|id| (0..store.get(id).numel()).step_by(7).map(move |i| (id, i)))
        .collect();
    let x = random(&[3, 8], 5);
    let err = grad_check_params(
        &store,
        |g| {
            let xv = g.constant(x.clone());
            let a = g.constant(answer.clone());
            let y = unit.forward(g, xv, a)?;
            weighted(g, y, 7)
        },
        &coords,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn end_to_end_loss_gradcheck() {
    for (pretrain, copy) in [(true, true), (false, false)] {
        let m = model(pretrain, copy);
        let ex = example(pretrain, copy);
        let coords: Vec<(ParamId, usize)> = m
            .store
            .trainable_ids()
            .flat_map(|id| {
                let n = m.store.get(id).numel();
                [0, n / 2, n - 1].into_iter().map(move |i| (id, i))
            })
            .collect();
        let err = grad_check_params(&m.store, |g| m.sequence_nll(g, &ex), &coords, 1e-5).unwrap();
        assert!(err < 1e-5, "pretrain={pretrain} copy={copy}: {err}");
    }
}

#[test]
fn adam_reduces_single_example_loss() {
    let mut m = model(true, true);
    let ex = example(true, true);
    let before = nll(&m, &ex);
    let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
    let mut state = AdamState::default();
    for _ in 0..50 {
        let grads = {
            let mut g = Graph::new(&m.store);
            let loss = m.sequence_nll(&mut g, &ex).unwrap();
            g.backward(loss).unwrap()
        };
        adam_step(&mut m.store, &grads, &mut state, &cfg).unwrap();
    }
    let after = nll(&m, &ex);
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn ids_to_tokens_resolves_copies() {
    let m = model(false, true);
    let ex = example(false, true);
    let v = vocab();
    let ids = [v.id("where").unwrap(), v.len(), v.len() + 1, v.len() + 9];
    assert_eq!(m.ids_to_tokens(&ids, &v, &ex.source), vec!["where", "sat", "rug", "@UNK@"]);
}

/// Deterministic pseudo-random next-token table keyed by the prefix.
struct Toy {
    vocab: usize,
    seed: u64,
}

impl StepModel for Toy {
    type State = Vec<usize>;

    fn initial(&self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn next(&self, state: &Vec<usize>, prev: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        let mut prefix = state.clone();
        prefix.push(prev);
        let mut h = self.seed;
        for &t in &prefix {
            h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1442695040888963407);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let raw = Tensor::uniform(&[self.vocab], 0.05, 1.0, &mut rng).into_vec();
        let z: f64 = raw.iter().sum();
        Ok((raw.iter().map(|r| r / z).collect(), prefix))
    }
}

fn brute_force(toy: &Toy, end: usize) -> f64 {
    let (d0, s0) = toy.next(&Vec::new(), 0).unwrap();
    let mut best = d0[end].ln();
    for t in (0..toy.vocab).filter(|&t| t != end) {
        let (d1, _) = toy.next(&s0, t).unwrap();
        for u in 0..toy.vocab {
            best = best.max(d0[t].ln() + d1[u].ln());
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn full_beam_matches_enumeration(seed in 0u64..10_000, vocab in 2usize..6) {
        let toy = Toy { vocab, seed };
        let end = 1;
        let hyp = beam_search(&toy, 0, end, vocab, 2, false).unwrap();
        let want = brute_force(&toy, end);
        prop_assert!((hyp.log_prob - want).abs() < 1e-12, "{} vs {}", hyp.log_prob, want);
    }

    #[test]
    fn width_one_beam_is_greedy(seed in 0u64..10_000, vocab in 2usize..8) {
        let toy = Toy { vocab, seed };
        let greedy = greedy_decode(&toy, 0, 1, 5).unwrap();
        let beam = beam_search(&toy, 0, 1, 1, 5, false).unwrap();
        prop_assert_eq!(greedy, beam);
    }
}

#[test]
fn beam_one_matches_greedy_on_model() {
    let m = model(true, true);
    let ex = example(true, true);
    assert_eq!(m.generate(&ex, 1).unwrap(), m.greedy(&ex).unwrap());
    let wide = m.generate(&ex, 3).unwrap();
    assert!(wide.tokens.len() <= m.config.max_decode_len);
}

#[test]
fn beam_handles_ties_and_limits() {
    struct Flat;
    impl StepModel for Flat {
        type State = ();
        fn initial(&self) -> Result<()> {
            Ok(())
        }
        fn next(&self, _: &(), _: usize) -> Result<(Vec<f64>, ())> {
            Ok((vec![0.25; 4], ()))
        }
    }
    // All continuations tie, so the lowest id wins and ending at once is best.
    let h = beam_search(&Flat, 2, 0, 3, 4, false).unwrap();
    assert_eq!(h, Hypothesis { tokens: vec![], log_prob: 0.25f64.ln(), finished: true });
    let h = beam_search(&Flat, 2, 9, 2, 3, false).unwrap();
    assert_eq!(h.tokens, vec![0, 0, 0]);
    assert!(!h.finished);
    assert!(beam_search(&Flat, 2, 0, 0, 3, false).is_err());
    let g = greedy_decode(&Flat, 2, 9, 3).unwrap();
    assert_eq!(g.tokens, vec![0, 0, 0]);
}

#[test]
fn length_normalization_prefers_longer_when_per_step_better() {
    // Ending now costs ln 0.4; continuing gives 0.9 then a certain end.
    struct Two;
    impl StepModel for Two {
        type State = usize;
        fn initial(&self) -> Result<usize> {
            Ok(0)
        }
        fn next(&self, depth: &usize, _: usize) -> Result<(Vec<f64>, usize)> {
            let d = match depth {
                0 => vec![0.4, 0.35, 0.25],
                _ => vec![1.0, 0.0, 0.0],
            };
            Ok((d, depth + 1))
        }
    }
    let plain = beam_search(&Two, 2, 0, 2, 5, false).unwrap();
    assert!(plain.tokens.is_empty());
    let norm = beam_search(&Two, 2, 0, 2, 5, true).unwrap();
    assert_eq!(norm.tokens, vec![1]);
}

#[test]
fn shared_encoder_gives_identical_outputs() {
    let m = model(false, true);
    let mut g = Graph::new(&m.store);
    let (hp, ha) = m.contextual_encode(&mut g, &[4, 5, 6], &[4, 5, 6]).unwrap();
    assert!(g.value(hp).bit_eq(g.value(ha)));
    assert_eq!(g.shape(hp), &[3, 6]);
    assert!(m.contextual_encode(&mut g, &[], &[4]).is_err());
}

#[test]
fn gate_quarter_weighting() {
    let mut g = Graph::detached();
    let x = g.constant(Tensor::full(&[1, 1], 2.0));
    let y = g.constant(Tensor::full(&[1, 1], 4.0));
    let w = g.constant(Tensor::zeros(&[2, 1]));
    let b = g.constant(Tensor::full(&[1], (1.0f64 / 3.0).ln()));
    let out = control_gate(&mut g, x, y, w, b).unwrap();
    assert!((g.value(out).item() - 3.5).abs() < 1e-12);
}

#[test]
fn interaction_unit_with_zero_params_is_normalized_residual() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let unit = InteractionUnit::new(&mut store, "u", 8, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if !name.ends_with(".gain") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }
    let x = random(&[3, 8], 5);
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let a = g.constant(random(&[2, 8], 6));
    let out = unit.forward(&mut g, xv, a).unwrap();
    assert_eq!(g.shape(out), &[3, 8]);
    // Both branches vanish, so the output is layer_norm(layer_norm(x)).
    let ln = |t: &Tensor| {
        let rows: Vec<Vec<f64>> = (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                let mean = r.iter().sum::<f64>() / r.len() as f64;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64;
                r.iter().map(|v| (v - mean) / (var + crate::layers::LAYER_NORM_EPS).sqrt()).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let want = ln(&ln(&x));
    assert!(g.value(out).max_abs_diff(&want).unwrap() < 1e-9);
}

#[test]
fn decoder_state_from_constant_rows() {
    let m = model(false, false);
    let row = random(&[1, 6], 8);
    let tiled = Tensor::from_rows(&vec![row.data().to_vec(); 4]).unwrap();
    let mut g = Graph::new(&m.store);
    let gv = g.constant(tiled);
    let st = m.init_decoder_state(&mut g, gv).unwrap();
    let rv = g.constant(row);
    let h = m.init_h.forward(&mut g, rv).unwrap();
    let c = m.init_c.forward(&mut g, rv).unwrap();
    assert!(g.value(st.h).max_abs_diff(g.value(h)).unwrap() < 1e-12);
    assert!(g.value(st.c).max_abs_diff(g.value(c)).unwrap() < 1e-12);
    let empty = g.constant(Tensor::zeros(&[0, 6]));
    assert!(m.init_decoder_state(&mut g, empty).is_err());
}

#[test]
fn decode_loss_reaches_encoder() {
    let m = model(true, true);
    let ex = example(true, true);
    let mut g = Graph::new(&m.store);
    let loss = m.sequence_nll(&mut g, &ex).unwrap();
    let grads = g.backward(loss).unwrap();
    for name in ["gen.encoder.fwd.wx", "gen.orig0.w_s", "gen.trans0.w_s", "gen.transfer.weight", "gen.gate.weight"] {
        let id = m.store.find(name).unwrap();
        let norm: f64 = grads[&id].data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "{name}");
    }
    assert!(!grads.contains_key(&m.store.find("embedding").unwrap()));
}

#[test]
fn greedy_single_step_is_argmax() {
    let m = model(false, true);
    let ex = example(false, true);
    let dec = m.decoder_for(&ex).unwrap();
    let out = dec.decode_step(&dec.initial_state(), START_ID).unwrap();
    let best = (0..out.dist.len()).fold(0, |b, i| if out.dist[i] > out.dist[b] { i } else { b });
    let h = greedy_decode(&dec, START_ID, END_ID, 1).unwrap();
    assert!((h.log_prob - out.dist[best].ln()).abs() < 1e-12);
    assert_eq!(h.steps(), 1);
    if best == END_ID {
        assert!(h.finished);
    } else {
        assert_eq!(h.tokens, vec![best]);
    }
}

#[test]
fn invalid_previous_token_rejected() {
    let m = model(false, true);
    let ex = example(false, true);
    let dec = m.decoder_for(&ex).unwrap();
    let bad = m.vocab_size() + ex.source.oov.len();
    assert!(matches!(
        dec.decode_step(&dec.initial_state(), bad),
        Err(WegenError::TokenOutOfRange { .. })
    ));
}
