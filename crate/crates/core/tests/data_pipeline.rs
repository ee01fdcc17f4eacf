use likra_core::data::{
    choice_topics, gen_synthetic_benchmark, load_mcq_jsonl, make_negatives, parse_mcq_jsonl, write_mcq_jsonl,
    NegativeKind, SyntheticSpec,
};
use proptest::prelude::*;

fn small(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_entities: 30,
        n_relations: 3,
        n_items: 60,
        n_test: 20,
        filler_docs: 50,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn jsonl_round_trip() {
    let b = gen_synthetic_benchmark(&small(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("test.jsonl");
    write_mcq_jsonl(&p, &b.test).unwrap();
    assert_eq!(load_mcq_jsonl(&p).unwrap(), b.test);
}

#[test]
fn loader_rejects_unknown_answer_key() {
    let line = r#"{"id":"q1","question":"Which is red?","choices":{"text":["apple","sky"],"label":["A","B"]},"answerKey":"C"}"#;
    let err = parse_mcq_jsonl(line).unwrap_err().to_string();
    assert!(err.contains("q1") || err.contains("line 1"), "{err}");
}

#[test]
fn topics_follow_relations() {
    let b = gen_synthetic_benchmark(&small(2)).unwrap();
    let topics = choice_topics(&b.test);
    for (i, a) in b.test.iter().enumerate() {
        for (j, c) in b.test.iter().enumerate() {
            let same_template = a.question.split(' ').next() == c.question.split(' ').next()
                && a.question.split(' ').nth(1) == c.question.split(' ').nth(1);
            if topics[i] != topics[j] {
                assert!(!same_template || a.choices.iter().all(|x| c.choices.iter().all(|y| x.text != y.text)));
            }
        }
    }
    let distinct: std::collections::HashSet<_> = topics.iter().collect();
    assert!(distinct.len() >= 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_negatives_respect_their_strategy(seed in 0u64..1000, kind in 0usize..3) {
        let b = gen_synthetic_benchmark(&small(seed)).unwrap();
        let kind = [NegativeKind::Incorrect, NegativeKind::Irrelevant, NegativeKind::Unrelated][kind];
        let negs = make_negatives(&b.train, kind, Some(&b.unrelated_pool), seed).unwrap();
        let topics = choice_topics(&b.train);
        for (i, (it, n)) in b.train.iter().zip(&negs).enumerate() {
            prop_assert_eq!(&n.question, &it.question);
            prop_assert_ne!(n.answer.as_str(), it.correct_text());
            if kind == NegativeKind::Irrelevant {
                prop_assert!(it.choices.iter().all(|c| c.text != n.answer));
                // Drawn from a question in another topic whenever one exists.
                let src = b.train.iter().position(|o| o.wrong_texts().any(|t| t == n.answer)).unwrap();
                prop_assert!(topics.iter().any(|t| *t != topics[i]));
                prop_assert!(b.train.iter().enumerate().any(|(j, o)| topics[j] != topics[i]
                    && o.wrong_texts().any(|t| t == n.answer)) || topics[src] != topics[i]);
            }
        }
        prop_assert_eq!(negs, make_negatives(&b.train, kind, Some(&b.unrelated_pool), seed).unwrap());
    }

    #[test]
    fn generation_is_a_function_of_the_seed(seed in 0u64..1000) {
        prop_assert_eq!(gen_synthetic_benchmark(&small(seed)).unwrap(), gen_synthetic_benchmark(&small(seed)).unwrap());
    }
}
