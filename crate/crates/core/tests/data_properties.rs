mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use sha2::{Digest, Sha256};

use mrn::data::{generate, Dataset, GenConfig, Object, Split};
use mrn::evaluation::{classify_answer_type, normalize_answer, AnswerType};
use mrn::Error;

#[test]
fn interpreter_agrees_on_a_thousand_examples() {
    let d = common::small_dataset(1000, 13);
    for (i, e) in d.examples.iter().enumerate() {
        let want = common::interpret(&e.scene, &e.question).unwrap_or_else(|| panic!("example {i} is ambiguous"));
        assert_eq!(e.answer, want, "example {i}: {}", e.question.text());
        assert_eq!(d.answers[e.answer_id], want);
        // The modal human answer is the ground truth.
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for h in &e.humans {
            *counts.entry(h.as_str()).or_default() += 1;
        }
        let (modal, _) = counts.iter().max_by_key(|(_, &c)| c).unwrap();
        assert_eq!(*modal, want);
        assert!(e.candidates.contains(&e.answer_id));
        assert_eq!(classify_answer_type(&e.answer), e.answer_type);
    }
}

fn digest(d: &Dataset) -> String {
    Sha256::digest(d.to_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[test]
fn file_hash_is_stable_across_runs() {
    let cfg = GenConfig {
        examples: 500,
        seed: 99,
        ..GenConfig::default()
    };
    let a = digest(&generate(&cfg).unwrap());
    let b = digest(&generate(&cfg).unwrap());
    assert_eq!(a, b);
    let other = digest(&generate(&GenConfig { seed: 100, ..cfg }).unwrap());
    assert_ne!(a, other);
}

#[test]
fn generation_ignores_thread_count() {
    let cfg = GenConfig {
        examples: 300,
        seed: 5,
        ..GenConfig::default()
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| generate(&cfg).unwrap());
    let b = four.install(|| generate(&cfg).unwrap());
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn question_types_are_balanced() {
    let d = common::small_dataset(3000, 3);
    let mut counts = [0usize; 3];
    for e in &d.examples {
        counts[e.answer_type as usize] += 1;
    }
    for t in AnswerType::ALL {
        let frac = counts[t as usize] as f64 / 3000.0;
        assert!((frac - 1.0 / 3.0).abs() <= 0.05, "{t:?}: {frac}");
    }
}

#[test]
fn other_answers_appear_in_captions() {
    let d = common::small_dataset(1500, 17);
    let mut other = 0;
    for e in &d.examples {
        let tokens: Vec<String> = e.caption.split_whitespace().map(normalize_answer).collect();
        if e.answer_type == AnswerType::Other {
            other += 1;
            assert!(
                tokens.contains(&normalize_answer(&e.answer)),
                "{:?} not in {:?}",
                e.answer,
                e.caption
            );
        }
        // Every object is described.
        assert_eq!(e.caption.matches(" and ").count() + 1, e.scene.objects.len());
    }
    assert!(other > 400);
}

#[test]
fn splits_share_no_scene() {
    let d = common::small_dataset(3000, 8);
    let mut owner: HashMap<Vec<Object>, Split> = HashMap::new();
    for e in &d.examples {
        if let Some(&s) = owner.get(&e.scene.layout()) {
            assert_eq!(s, e.split, "scene shared between {s:?} and {:?}", e.split);
        }
        owner.insert(e.scene.layout(), e.split);
    }
    for s in [Split::Train, Split::Val, Split::Test] {
        assert!(!d.indices(s).is_empty());
    }
}

#[test]
fn images_are_in_unit_range() {
    let d = common::small_dataset(50, 1);
    for i in 0..d.len() {
        let img = d.image(i);
        assert_eq!(img.shape(), &d.config.image_shape());
        assert!(img.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(d.examples[i].scene.is_valid());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_load_round_trips(seed in any::<u64>(), n in 1usize..40) {
        let d = common::small_dataset(n, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        d.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(back.to_bytes(), d.to_bytes());
    }

    #[test]
    fn truncation_is_a_parse_error(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let bytes = common::small_dataset(5, seed).to_bytes();
        let at = ((bytes.len() - 1) as f64 * cut) as usize;
        match Dataset::from_bytes(&bytes[..at]) {
            Err(Error::Parse { offset, .. }) => prop_assert!(offset <= at),
            other => prop_assert!(false, "expected a parse error, got {:?}", other.map(|d| d.len())),
        }
    }
}

#[test]
fn unknown_version_is_refused() {
    let mut bytes = common::small_dataset(3, 0).to_bytes();
    // An 8-byte magic, then the little-endian format version.
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
    match Dataset::from_bytes(&bytes) {
        Err(Error::Parse { offset, msg }) => {
            assert_eq!(offset, 8);
            assert!(msg.contains("version"), "{msg}");
        }
        other => panic!("expected a parse error, got {:?}", other.map(|d| d.len())),
    }
    bytes[0] = b'X';
    assert!(matches!(
        Dataset::from_bytes(&bytes),
        Err(Error::Parse { offset: 0, .. })
    ));
}
