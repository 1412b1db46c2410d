use std::path::Path;

use wegen::eval::{corpus_evaluate, write_report, EvalReport};
use wegen::WegenError;

fn write(path: &Path, lines: &[&str]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

const PRED: [(&str, &str); 5] = [
    ("1", "what is in the box ?"),
    ("2", "where is the cat"),
    ("3", "the the the"),
    ("4", "a b c"),
    ("5", "x y z w"),
];
const REF: [(&str, &str); 5] = [
    ("1", "what is in the box ?"),
    ("2", "where is the dog"),
    ("3", "the cat"),
    ("4", "a b c d e f"),
    ("5", "w z y x"),
];

fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let p = dir.join("pred.jsonl");
    let r = dir.join("ref.jsonl");
    let pl: Vec<String> = PRED.iter().map(|(i, q)| format!(r#"{{"id":"{i}","question":"{q}"}}"#)).collect();
    let rl: Vec<String> = REF.iter().map(|(i, q)| format!(r#"{{"id":"{i}","reference":"{q}"}}"#)).collect();
    write(&p, &pl.iter().map(String::as_str).collect::<Vec<_>>());
    write(&r, &rl.iter().map(String::as_str).collect::<Vec<_>>());
    (p, r)
}

#[test]
fn five_pair_fixture_matches_hand_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = fixture(dir.path());
    let rep = corpus_evaluate(&p, &r).unwrap();
    assert_eq!(rep.count, 5);
    // Clipped n-gram matches / totals summed over the five pairs:
    // 1-gram 17/20, 2-gram 9/15, 3-gram 6/10, 4-gram 3/5; c = 20, r = 22.
    let bp = (-0.1f64).exp();
    let p = [17.0 / 20.0, 9.0 / 15.0, 6.0 / 10.0, 3.0 / 5.0];
    close(rep.bleu1, bp * p[0]);
    close(rep.bleu2, bp * (p[0] * p[1]).sqrt());
    close(rep.bleu3, bp * (p[0] * p[1] * p[2]).powf(1.0 / 3.0));
    close(rep.bleu4, bp * (p[0] * p[1] * p[2] * p[3]).powf(0.25));

    let f = |p: f64, r: f64| 2.44 * p * r / (r + 1.44 * p);
    let rouge = [1.0, 0.75, f(1.0 / 3.0, 0.5), f(1.0, 0.5), 0.25];
    for (e, want) in rep.examples.iter().zip(rouge) {
        close(e.rouge_l, want);
    }
    close(rep.rouge_l, rouge.iter().sum::<f64>() / 5.0);

    let fm = |p: f64, r: f64| 10.0 * p * r / (r + 9.0 * p);
    let meteor = [
        1.0 - 0.5 / 216.0,
        0.75 * (1.0 - 0.5 / 27.0),
        fm(1.0 / 3.0, 0.5) * 0.5,
        fm(1.0, 0.5) * (1.0 - 0.5 / 27.0),
        0.5,
    ];
    for (e, want) in rep.examples.iter().zip(meteor) {
        close(e.meteor, want);
    }
    close(rep.meteor, meteor.iter().sum::<f64>() / 5.0);
    assert_eq!(rep.examples[0].bleu4, 1.0);
}

#[test]
fn self_comparison_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (p, _) = fixture(dir.path());
    let rep = corpus_evaluate(&p, &p).unwrap();
    for v in [rep.bleu1, rep.bleu2, rep.bleu3, rep.bleu4, rep.rouge_l] {
        assert_eq!(v, 1.0);
    }
}

#[test]
fn mismatched_ids_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.jsonl");
    let r = dir.path().join("r.jsonl");
    write(&p, &[r#"{"id":"a","question":"x"}"#, r#"{"id":"b","question":"y"}"#]);
    write(&r, &[r#"{"id":"a","reference":"x"}"#, r#"{"id":"c","reference":"z"}"#]);
    match corpus_evaluate(&p, &r) {
        Err(WegenError::MissingIds(ids)) => assert_eq!(ids, vec!["b".to_string(), "c".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_predictions_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.jsonl");
    std::fs::write(&p, "").unwrap();
    assert!(matches!(corpus_evaluate(&p, &p), Err(WegenError::Empty(_))));
}

#[test]
fn report_roundtrips_as_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = fixture(dir.path());
    let rep = corpus_evaluate(&p, &r).unwrap();
    let json = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    write_report(&rep, &json, &csv).unwrap();
    let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(back, rep);
    let table = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "id,bleu4,rouge_l,meteor");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("1,1,1,"));
}
