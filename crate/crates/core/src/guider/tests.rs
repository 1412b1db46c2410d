use proptest::prelude::*;

use super::*;
use crate::tensor::{grad_check_input, grad_check_params};

fn small_config(conv: usize, attn: usize) -> GuiderConfig {
    GuiderConfig {
        attention_layers: attn,
        conv_layers: conv,
        d_model: 8,
        heads: 2,
        kernel_width: 3,
        seed: 11,
        ..GuiderConfig::default()
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// Random score weights so every encoder parameter influences the score.
fn model(conv: usize, attn: usize) -> GuiderModel {
    let mut m = GuiderModel::new(small_config(conv, attn), random(&[12, 8], 3)).unwrap();
    let w = random(&[48, 1], 77).map(|v| v * 0.5);
    m.store.set(m.w_pa, w).unwrap();
    m
}

/// Weighted sum `Σ R ⊙ y` so no gradient is structurally tiny.
fn weighted(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(random(g.shape(y), seed));
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn config_validation() {
    assert!(GuiderConfig::default().validate().is_ok());
    for bad in [
        GuiderConfig { margin: 0.0, ..GuiderConfig::default() },
        GuiderConfig { margin: 1.0, ..GuiderConfig::default() },
        GuiderConfig { attention_layers: 0, conv_layers: 0, ..GuiderConfig::default() },
        GuiderConfig { heads: 7, ..GuiderConfig::default() },
        GuiderConfig { kernel_width: 4, ..GuiderConfig::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn empty_stacks_reduce_to_feed_forward() {
    let mut m = model(1, 1);
    m.convs.clear();
    m.attentions.clear();
    let mut g = Graph::new(&m.store);
    let x = g.constant(random(&[4, 8], 5));
    let y = m.encode_stack(&mut g, x).unwrap();
    let lin = m.feed_forward.forward(&mut g, x).unwrap();
    let f = g.relu(lin);
    assert!(g.value(y).bit_eq(g.value(f)));
}

#[test]
fn encode_stack_preserves_shape() {
    for (conv, attn) in [(1, 0), (0, 1), (2, 2)] {
        let m = model(conv, attn);
        let mut g = Graph::new(&m.store);
        let x = g.constant(random(&[5, 8], 1));
        let y = m.encode_stack(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[5, 8]);
    }
}

#[test]
fn encode_stack_gradients_match_finite_differences() {
    let m = model(1, 1);
    let x = random(&[4, 8], 21);
    let err = grad_check_input(
        &m.store,
        |g, xv| {
            let y = m.encode_stack(g, xv)?;
            weighted(g, y, 4)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let coords: Vec<_> = m
        .store
        .trainable_ids()
        .flat_map(|id| (0..m.store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    let err = grad_check_params(
        &m.store,
        |g| {
            let xv = g.constant(x.clone());
            let y = m.encode_stack(g, xv)?;
            weighted(g, y, 4)
        },
        &coords,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn similarity_zero_weights_give_zero_matrix() {
    let mut g = Graph::detached();
    let p = g.constant(random(&[3, 2], 1));
    let a = g.constant(random(&[4, 2], 2));
    let w = g.constant(Tensor::zeros(&[6]));
    let s = similarity_matrix(&mut g, p, a, w).unwrap();
    assert_eq!(g.shape(s), &[3, 4]);
    assert!(g.value(s).data().iter().all(|&v| v == 0.0));
}

#[test]
fn similarity_hand_example() {
    let mut g = Graph::detached();
    let p = g.constant(t(&[&[1.0, 0.0]]));
    let a = g.constant(t(&[&[0.0, 1.0]]));
    let w = g.constant(Tensor::ones(&[6]));
    let s = similarity_matrix(&mut g, p, a, w).unwrap();
    assert_eq!(g.value(s).data(), &[2.0]);
}

#[test]
fn similarity_matches_per_pair_concat() {
    let (pt, at, wt) = (random(&[3, 2], 7), random(&[3, 2], 8), random(&[6], 9));
    let mut g = Graph::detached();
    let (p, a, w) = (g.constant(pt.clone()), g.constant(at.clone()), g.constant(wt.clone()));
    let s = similarity_matrix(&mut g, p, a, w).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let (pi, aj) = (pt.row(i), at.row(j));
            let triple: Vec<f64> = pi
                .iter()
                .chain(aj)
                .copied()
                .chain(pi.iter().zip(aj).map(|(x, y)| x * y))
                .collect();
            let expected: f64 = triple.iter().zip(wt.data()).map(|(x, w)| x * w).sum();
            assert!((g.value(s).get(&[i, j]) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn similarity_rejects_wrong_weight_length() {
    let mut g = Graph::detached();
    let p = g.constant(random(&[3, 2], 1));
    let a = g.constant(random(&[2, 2], 2));
    let w = g.constant(Tensor::zeros(&[5]));
    assert!(similarity_matrix(&mut g, p, a, w).is_err());
}

#[test]
fn dominant_score_selects_answer_row() {
    let mut g = Graph::detached();
    let p = g.constant(random(&[2, 3], 1));
    let at = random(&[3, 3], 2);
    let a = g.constant(at.clone());
    let s = g.constant(t(&[&[0.0, 80.0, 0.0], &[0.0, 0.0, 80.0]]));
    let (p_hat, _) = two_way_attention(&mut g, p, a, s).unwrap();
    for (i, j) in [(0, 1), (1, 2)] {
        for (x, y) in g.value(p_hat).row(i).iter().zip(at.row(j)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_scores_average_rows() {
    let mut g = Graph::detached();
    let pt = random(&[2, 3], 1);
    let at = random(&[4, 3], 2);
    let (p, a) = (g.constant(pt.clone()), g.constant(at.clone()));
    let s = g.constant(Tensor::zeros(&[2, 4]));
    let (p_hat, a_hat) = two_way_attention(&mut g, p, a, s).unwrap();
    for c in 0..3 {
        let mean_a = (0..4).map(|j| at.get(&[j, c])).sum::<f64>() / 4.0;
        let mean_p = (0..2).map(|i| pt.get(&[i, c])).sum::<f64>() / 2.0;
        for i in 0..2 {
            assert!((g.value(p_hat).get(&[i, c]) - mean_a).abs() < 1e-12);
        }
        for j in 0..4 {
            assert!((g.value(a_hat).get(&[j, c]) - mean_p).abs() < 1e-12);
        }
    }
}

#[test]
fn two_way_attention_rejects_bad_score_shape() {
    let mut g = Graph::detached();
    let p = g.constant(random(&[2, 3], 1));
    let a = g.constant(random(&[4, 3], 2));
    let s = g.constant(Tensor::zeros(&[4, 2]));
    assert!(two_way_attention(&mut g, p, a, s).is_err());
}

proptest! {
    #[test]
    fn attended_rows_are_convex_combinations(seed in 0u64..10_000, n in 1usize..5, m in 1usize..5) {
        let mut g = Graph::detached();
        let pt = random(&[n, 3], seed);
        let at = random(&[m, 3], seed + 1);
        let st = random(&[n, m], seed + 2).map(|v| v * 20.0);
        let (p, a, s) = (g.constant(pt.clone()), g.constant(at.clone()), g.constant(st));
        let (p_hat, a_hat) = two_way_attention(&mut g, p, a, s).unwrap();
        for (attended, source, rows) in [(p_hat, &at, m), (a_hat, &pt, n)] {
            let out = g.value(attended);
            for c in 0..3 {
                let col: Vec<f64> = (0..rows).map(|r| source.get(&[r, c])).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for r in 0..out.rows() {
                    let v = out.get(&[r, c]);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn margin_loss_properties(pos in 0.0f64..1.0, neg in 0.0f64..1.0, c in 0.01f64..0.99) {
        let v = margin_loss_value(&[(pos, neg)], c).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, pos >= neg + c);
        let mut g = Graph::detached();
        let (p, n) = (g.constant(Tensor::scalar(pos)), g.constant(Tensor::scalar(neg)));
        let l = margin_loss(&mut g, p, n, c).unwrap();
        prop_assert_eq!(g.value(l).item(), v);
    }
}

#[test]
fn fuse_constant_case() {
    let mut g = Graph::detached();
    let pt = random(&[3, 2], 1);
    let p = g.constant(pt.clone());
    let at = random(&[2, 2], 2);
    let a = g.constant(at);
    let row = [0.5, -2.0];
    let a_hat = g.constant(Tensor::from_rows(&[row.to_vec(), row.to_vec()]).unwrap());
    let (p_bar, a_bar) = fuse_attended(&mut g, p, p, a, a_hat).unwrap();
    assert_eq!(g.shape(p_bar), &[3, 6]);
    assert_eq!(g.shape(a_bar), &[2, 6]);
    for i in 0..3 {
        let r = g.value(p_bar).row(i);
        assert_eq!(&r[0..2], pt.row(i));
        assert_eq!(&r[2..4], pt.row(i));
        assert_eq!(r[4], pt.get(&[i, 0]) * 0.5);
        assert_eq!(r[5], pt.get(&[i, 1]) * -2.0);
    }
}

#[test]
fn fuse_matches_direct_construction() {
    let ts: Vec<Tensor> = (0..4).map(|s| random(&[2, 2], 30 + s)).collect();
    let mut g = Graph::detached();
    let v: Vec<Var> = ts.iter().map(|x| g.constant(x.clone())).collect();
    let (p_bar, a_bar) = fuse_attended(&mut g, v[0], v[1], v[2], v[3]).unwrap();
    let (p, p_hat, a, a_hat) = (&ts[0], &ts[1], &ts[2], &ts[3]);
    for i in 0..2 {
        for k in 0..2 {
            let mean_a_hat = (a_hat.get(&[0, k]) + a_hat.get(&[1, k])) / 2.0;
            let mean_p_hat = (p_hat.get(&[0, k]) + p_hat.get(&[1, k])) / 2.0;
            let pb = g.value(p_bar);
            assert_eq!(pb.get(&[i, k]), p.get(&[i, k]));
            assert_eq!(pb.get(&[i, 2 + k]), p_hat.get(&[i, k]));
            assert!((pb.get(&[i, 4 + k]) - p.get(&[i, k]) * mean_a_hat).abs() < 1e-15);
            let ab = g.value(a_bar);
            assert_eq!(ab.get(&[i, k]), a.get(&[i, k]));
            assert_eq!(ab.get(&[i, 2 + k]), a_hat.get(&[i, k]));
            assert!((ab.get(&[i, 4 + k]) - a.get(&[i, k]) * mean_p_hat).abs() < 1e-15);
        }
    }
}

#[test]
fn score_zero_weights_is_half() {
    let mut g = Graph::detached();
    let p = g.constant(random(&[3, 6], 1));
    let a = g.constant(random(&[2, 6], 2));
    let w = g.constant(Tensor::zeros(&[12, 1]));
    let s = score_pair(&mut g, p, a, w).unwrap();
    assert_eq!(g.value(s).item(), 0.5);
}

#[test]
fn score_scalar_closed_form() {
    let (pb, ab) = ([0.3, -1.1, 2.0], [0.7, 0.25, -0.4]);
    let w = [0.2, -0.5, 1.5, -0.3, 0.9, 0.1];
    let mut g = Graph::detached();
    let p = g.constant(Tensor::new(&[1, 3], pb.to_vec()).unwrap());
    let a = g.constant(Tensor::new(&[1, 3], ab.to_vec()).unwrap());
    let wv = g.constant(Tensor::new(&[6, 1], w.to_vec()).unwrap());
    let s = score_pair(&mut g, p, a, wv).unwrap();
    let z: f64 = pb.iter().chain(&ab).zip(&w).map(|(x, w)| x * w).sum();
    assert!((g.value(s).item() - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
}

#[test]
fn scores_lie_strictly_inside_unit_interval() {
    let m = model(1, 1);
    for seed in 0..5 {
        let s = m.score(&[4 + seed, 5, 6], &[7]).unwrap();
        assert!(s > 0.0 && s < 1.0);
    }
    assert!(m.score(&[], &[1]).is_err());
}

#[test]
fn margin_loss_examples() {
    assert_eq!(margin_loss_value(&[(0.9, 0.1)], 0.5).unwrap(), 0.0);
    assert!((margin_loss_value(&[(0.6, 0.5)], 0.3).unwrap() - 0.2).abs() < 1e-15);
    assert_eq!(margin_loss_value(&[(0.4, 0.4)], 0.5).unwrap(), 0.5);
    assert!(margin_loss_value(&[(0.4, 0.4)], 1.5).is_err());
}

#[test]
fn passage_and_answer_share_weights() {
    let m = model(2, 2);
    let tokens = [4, 9, 10, 5];
    let mut g = Graph::new(&m.store);
    let as_passage = m.encode_tokens(&mut g, &tokens).unwrap();
    let as_answer = m.encode_tokens(&mut g, &tokens).unwrap();
    assert!(g.value(as_passage).bit_eq(g.value(as_answer)));
}

#[test]
fn full_loss_gradients_on_one_triplet() {
    let m = model(1, 1);
    let trip = EncodedTriplet {
        answer: vec![5, 6],
        positive: vec![4, 5, 6, 7],
        negative: vec![8, 9, 10],
    };
    let coords: Vec<_> = m
        .store
        .trainable_ids()
        .flat_map(|id| (0..m.store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    let mut g = Graph::new(&m.store);
    let l = m.triplet_loss(&mut g, &trip).unwrap();
    assert!(g.value(l).item() > 0.0, "hinge must be active for a meaningful check");
    let err = grad_check_params(&m.store, |g| m.triplet_loss(g, &trip), &coords, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn passage_features_shape_and_determinism() {
    let m = model(1, 1);
    let a = m.passage_features(&[4, 5, 6], &[5]).unwrap();
    let b = m.passage_features(&[4, 5, 6], &[5]).unwrap();
    assert_eq!(a.shape(), &[3, 24]);
    assert!(a.bit_eq(&b));
    assert_eq!(m.feature_dim(), 24);
}

#[test]
fn projection_added_when_widths_differ() {
    let m = GuiderModel::new(small_config(1, 0), random(&[12, 6], 3)).unwrap();
    assert!(m.store.find("guider.input.weight").is_some());
    let f = m.passage_features(&[4, 5], &[5]).unwrap();
    assert_eq!(f.shape(), &[2, 24]);
    assert!(model(1, 0).store.find("guider.input.weight").is_none());
}

#[test]
fn fresh_model_scores_one_half() {
    let m = GuiderModel::new(small_config(1, 1), random(&[12, 8], 3)).unwrap();
    assert_eq!(m.score(&[4, 5, 6], &[5]).unwrap(), 0.5);
}
