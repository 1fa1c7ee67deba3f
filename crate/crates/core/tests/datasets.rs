//! Manifests, splits, accuracy and the synthetic corpus.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use miss::datasets::*;
use miss::error::MissError;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rec(id: usize, closed: bool) -> VqaRecord {
    VqaRecord {
        id: format!("r{id}"),
        image: PathBuf::from(format!("{id}.png")),
        question: "q".into(),
        answer: if closed { "yes".into() } else { "circle".into() },
        answer_type: if closed { AnswerType::Closed } else { AnswerType::Open },
    }
}

fn count(rs: &[VqaRecord], t: AnswerType) -> usize {
    rs.iter().filter(|r| r.answer_type == t).count()
}

proptest! {
    #[test]
    fn split_is_disjoint_exhaustive_and_stratified(kinds in prop::collection::vec(any::<bool>(), 1..120), seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let ratios = [lo, hi - lo, 1.0 - hi];
        let records: Vec<VqaRecord> = kinds.iter().enumerate().map(|(i, &c)| rec(i, c)).collect();
        let n = records.len();
        let s = split_vqa(records.clone(), ratios, seed).unwrap();
        let all: Vec<&VqaRecord> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        prop_assert_eq!(all.len(), n);
        let ids: BTreeSet<&str> = all.iter().map(|r| r.id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
        for (part, ratio) in [(&s.train, ratios[0]), (&s.val, ratios[1]), (&s.test, ratios[2])] {
            prop_assert!((part.len() as f64 - ratio * n as f64).abs() < 1.0 + 1e-9);
            for t in [AnswerType::Closed, AnswerType::Open] {
                let share = count(&records, t) as f64 / n as f64;
                let got = count(part, t) as f64;
                prop_assert!((got - share * part.len() as f64).abs() <= 1.0 + 1e-9, "{:?}: {} of {}", t, got, part.len());
            }
        }
        prop_assert_eq!(s.clone(), split_vqa(records, ratios, seed).unwrap());
    }

    #[test]
    fn accuracy_ignores_order(kinds in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40), seed in any::<u64>()) {
        let refs: Vec<VqaRecord> = kinds.iter().enumerate().map(|(i, &(c, _))| rec(i, c)).collect();
        let preds: Vec<(String, String)> = refs
            .iter()
            .zip(&kinds)
            .map(|(r, &(_, right))| (r.id.clone(), if right { r.answer.clone() } else { "no".into() }))
            .collect();
        let base = eval_accuracy(&preds, &refs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut p2, mut r2) = (preds.clone(), refs.clone());
        p2.shuffle(&mut rng);
        r2.shuffle(&mut rng);
        prop_assert_eq!(&eval_accuracy(&p2, &r2).unwrap(), &base);
        let hits = kinds.iter().filter(|k| k.1).count() as f64;
        prop_assert!((base.overall_acc.unwrap() - hits / kinds.len() as f64).abs() < 1e-12);
        prop_assert_eq!(base.closed_n + base.open_n, kinds.len());
    }

    #[test]
    fn normalization_is_idempotent(s in "[ -~]{0,40}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once.clone());
        prop_assert!(open_match(&s, &s) || once.is_empty());
    }
}

#[test]
fn bad_ratios_are_rejected() {
    let rs: Vec<VqaRecord> = (0..5).map(|i| rec(i, true)).collect();
    assert!(split_vqa(rs.clone(), [0.5, 0.5, 0.5], 0).is_err());
    assert!(split_vqa(rs, [1.2, -0.1, -0.1], 0).is_err());
}

#[test]
fn duplicate_predictions_are_rejected() {
    let refs = vec![rec(0, true)];
    let preds = vec![("r0".to_string(), "yes".to_string()), ("r0".to_string(), "no".to_string())];
    assert!(eval_accuracy(&preds, &refs).is_err());
}

fn synth(dir: &Path, n: usize, seed: u64) -> SynthOutput {
    synth_generate(&SyntheticSpec { n, image_size: 32, seed, ..Default::default() }, dir).unwrap()
}

#[test]
fn synthetic_corpus_is_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(dir.path(), 24, 3);
    let pairs = read_pairs(&out.pairs).unwrap();
    let vqa = read_vqa(&out.vqa).unwrap();
    assert_eq!(pairs.len(), 24);
    assert_eq!(vqa.len(), 24);
    let distinct: BTreeSet<_> = out.scenes.iter().map(|s| (&s.shape, &s.color, &s.size, &s.location)).collect();
    assert_eq!(distinct.len(), 24);
    for ((scene, pair), q) in out.scenes.iter().zip(&pairs).zip(&vqa) {
        assert_eq!(pair.image, q.image);
        let img = image::open(&pair.image).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
        for v in [&scene.shape, &scene.color, &scene.size, &scene.location] {
            assert!(pair.caption.contains(v.as_str()), "{} lacks {v}", pair.caption);
        }
        let truth = if q.question.starts_with("is there a ") {
            let asked = q.question.trim_start_matches("is there a ").trim_end_matches('?');
            if asked == scene.shape { "yes" } else { "no" }.to_string()
        } else if q.question.contains("color") {
            scene.color.clone()
        } else {
            assert!(q.question.contains(&scene.location));
            scene.shape.clone()
        };
        assert_eq!(q.answer, truth, "{}", q.question);
    }
    assert!(count(&vqa, AnswerType::Closed) > 0 && count(&vqa, AnswerType::Open) > 0);
}

#[test]
fn synthetic_corpus_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), 10, 7);
    synth(b.path(), 10, 7);
    for f in ["pairs.jsonl", "vqa.jsonl", "attrs.csv", "images/img_0003.png"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synthetic_spec_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth_generate(&SyntheticSpec { n: 0, ..Default::default() }, dir.path()).is_err());
    assert!(synth_generate(&SyntheticSpec { image_size: 4, ..Default::default() }, dir.path()).is_err());
}

#[test]
fn vqa_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.png"), b"").unwrap();
    let lines = vec![
        VqaLine { id: Some("x".into()), image: "a.png".into(), question: "is there a mass?".into(), answer: "no".into(), answer_type: AnswerType::Closed },
        VqaLine { id: None, image: "a.png".into(), question: "where?".into(), answer: "left lung".into(), answer_type: AnswerType::Open },
    ];
    let path = dir.path().join("vqa.jsonl");
    write_vqa(&path, &lines).unwrap();
    let got = read_vqa(&path).unwrap();
    assert_eq!(got[0].id, "x");
    assert_eq!(got[1].id, "line-2");
    for (g, l) in got.iter().zip(&lines) {
        assert_eq!((g.question.as_str(), g.answer.as_str(), g.answer_type), (l.question.as_str(), l.answer.as_str(), l.answer_type));
        assert_eq!(g.image, dir.path().join("a.png"));
    }
}

fn manifest_line(err: MissError) -> usize {
    match err {
        MissError::Manifest { line, .. } => line,
        other => panic!("{other}"),
    }
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.png"), b"").unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    fs::write(&pairs, "{\"image\":\"a.png\",\"caption\":\"ok\"}\n\n{\"image\":\"a.png\"}\n").unwrap();
    assert_eq!(manifest_line(read_pairs(&pairs).unwrap_err()), 3);
    fs::write(&pairs, "{\"image\":\"missing.png\",\"caption\":\"ok\"}\n").unwrap();
    assert_eq!(manifest_line(read_pairs(&pairs).unwrap_err()), 1);
    fs::write(&pairs, "{\"image\":\"a.png\",\"caption\":\"ok\"}\nnot json\n").unwrap();
    assert_eq!(manifest_line(read_pairs(&pairs).unwrap_err()), 2);

    let vqa = dir.path().join("vqa.jsonl");
    fs::write(&vqa, "{\"image\":\"a.png\",\"question\":\"q\",\"answer\":\"maybe\",\"answer_type\":\"closed\"}\n").unwrap();
    assert_eq!(manifest_line(read_vqa(&vqa).unwrap_err()), 1);
    fs::write(&vqa, "{\"image\":\"a.png\",\"question\":\"q\",\"answer\":\"yes\",\"answer_type\":\"closed\"}\n{\"image\":\"a.png\",\"question\":\"q\",\"answer\":\"the\",\"answer_type\":\"open\"}\n").unwrap();
    assert_eq!(manifest_line(read_vqa(&vqa).unwrap_err()), 2);
}

#[test]
fn load_vqa_splits_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(dir.path(), 20, 1);
    let s = load_vqa(&out.vqa, [0.6, 0.2, 0.2], 0).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (12, 4, 4));
}
