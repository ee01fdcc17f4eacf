use likra_core::data::{NegativeKind, Polarity, TrainExample};
use likra_core::eval::{compute_table, decide};
use likra_core::lm::tokenizer::{BOS, EOS};
use likra_core::lm::{token_loglik, tokenize, Head, LoraConfig, LoraTarget, ModelConfig};
use likra_core::train::{
    finetune_head, learning_curve, nested_prefix, pretrain, CurveMetrics, FinetuneConfig, PretrainConfig,
};
use proptest::prelude::*;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 48,
        ..ModelConfig::default()
    }
}

fn sentences() -> Vec<String> {
    [
        "The fox is red.",
        "The sky is blue.",
        "Grass is green.",
        "Snow is white.",
        "Coal is black.",
        "The sun is hot.",
        "Ice is cold.",
        "Sugar is sweet.",
        "Lemons are sour.",
        "Rocks are hard.",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn quiz() -> Vec<TrainExample> {
    sentences()
        .iter()
        .map(|s| {
            let (q, a) = s.rsplit_once(' ').unwrap();
            TrainExample::positive(format!("{q}?"), a)
        })
        .collect()
}

fn small_base() -> likra_core::lm::BaseWeights {
    pretrain(
        &sentences(),
        &tiny_model(),
        &PretrainConfig {
            steps: 60,
            batch_size: 4,
            lr: 3e-3,
            seed: 1,
        },
    )
    .unwrap()
    .weights
}

fn ft_config(seed: u64, epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        batch_size: 4,
        lr: 5e-3,
        epochs,
        seed,
        lora: LoraConfig {
            targets: vec![LoraTarget::Query, LoraTarget::Value],
            ..LoraConfig::default()
        },
        ..FinetuneConfig::default()
    }
}

/// Lowest achievable corpus NLL: where sentences share a prefix the next
/// byte is only predictable up to the empirical branching.
fn entropy_floor(docs: &[Vec<u32>]) -> f64 {
    let mut nll = 0.0;
    for d in docs {
        for t in 0..d.len() {
            let shared = docs.iter().filter(|o| o.len() >= t && o[..t] == d[..t]).count();
            let same = docs.iter().filter(|o| o.len() > t && o[..=t] == d[..=t]).count();
            nll -= (same as f64 / shared as f64).ln();
        }
    }
    nll
}

#[test]
fn pretraining_memorizes_a_tiny_corpus() {
    let out = pretrain(
        &sentences(),
        &tiny_model(),
        &PretrainConfig {
            steps: 1500,
            batch_size: 10,
            lr: 1e-2,
            seed: 0,
        },
    )
    .unwrap();
    let head = Head::base_only(&out.weights);
    let docs: Vec<Vec<u32>> = sentences()
        .iter()
        .map(|s| tokenize(s).into_iter().chain([EOS]).collect())
        .collect();
    let nll: f64 = docs.iter().map(|d| -token_loglik(&head, &[BOS], d).unwrap()).sum();
    let tokens: usize = docs.iter().map(Vec::len).sum();
    let excess = (nll - entropy_floor(&docs)) / tokens as f64;
    assert!(excess < 0.02, "per-token NLL {:.4} above the floor", excess);
}

#[test]
fn pretraining_is_deterministic() {
    let cfg = PretrainConfig {
        steps: 20,
        batch_size: 4,
        lr: 3e-3,
        seed: 9,
    };
    let a = pretrain(&sentences(), &tiny_model(), &cfg).unwrap();
    let b = pretrain(&sentences(), &tiny_model(), &cfg).unwrap();
    assert_eq!(a.weights.checksum(), b.weights.checksum());
}

#[test]
fn finetune_loss_falls_across_epochs() {
    let base = small_base();
    let out = finetune_head(&base, &quiz(), &ft_config(0, 6)).unwrap();
    let per_epoch = quiz().len().div_ceil(4);
    let first: f64 = out.log[..per_epoch].iter().map(|l| l.loss).sum();
    let last: f64 = out.log[out.log.len() - per_epoch..].iter().map(|l| l.loss).sum();
    assert!(last < first, "first epoch {first}, last epoch {last}");
}

#[test]
fn adapter_is_determined_by_seed() {
    let base = small_base();
    let a = finetune_head(&base, &quiz(), &ft_config(3, 1)).unwrap().adapter;
    let b = finetune_head(&base, &quiz(), &ft_config(3, 1)).unwrap().adapter;
    let c = finetune_head(&base, &quiz(), &ft_config(4, 1)).unwrap().adapter;
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn polarity_only_changes_the_label() {
    let base = small_base();
    let pos = quiz();
    let neg: Vec<TrainExample> = pos
        .iter()
        .map(|e| TrainExample::negative(&e.question, &e.answer, NegativeKind::Incorrect))
        .collect();
    let a = finetune_head(&base, &pos, &ft_config(0, 1)).unwrap();
    let b = finetune_head(&base, &neg, &ft_config(0, 1)).unwrap();
    assert_eq!(a.adapter.checksum(), b.adapter.checksum());
    assert_eq!(a.log, b.log);
}

#[test]
fn curve_points_match_standalone_training() {
    let base = small_base();
    let cfg = ft_config(2, 1);
    let pool = quiz();
    let items = vec![likra_core::data::McqItem {
        id: "q".into(),
        question: "The fox is?".into(),
        choices: ["red", "blue"]
            .iter()
            .zip(["A", "B"])
            .map(|(t, l)| likra_core::data::Choice {
                label: l.into(),
                text: (*t).into(),
            })
            .collect(),
        answer_key: "A".into(),
    }];
    let ctx = vec![likra_core::data::question_prompt("The fox is?")];
    let eval = |adapter: &likra_core::lm::LoraAdapter| {
        let head = Head::with_adapter(&base, adapter).unwrap();
        let r = decide(&items, &compute_table(&head, None, &items, &ctx, 1).unwrap(), 0.0).unwrap();
        CurveMetrics {
            acc: r.acc,
            acc_norm: r.acc_norm,
        }
    };
    let pts = learning_curve(&base, &pool, &[0, 1, 4], Polarity::Positive, &cfg, |_, a| Ok(eval(a))).unwrap();
    assert_eq!(pts.len(), 3);
    // n = 0 is the untouched base.
    let base_r = decide(&items, &compute_table(&Head::base_only(&base), None, &items, &ctx, 1).unwrap(), 0.0).unwrap();
    assert_eq!(pts[0].acc_norm, base_r.acc_norm);
    let single = finetune_head(&base, &nested_prefix(&pool, 1, cfg.seed).unwrap(), &cfg).unwrap().adapter;
    assert_eq!(pts[1].head_checksums, vec![single.checksum()]);
    assert_eq!(pts[1].acc_norm, eval(&single).acc_norm);
}

proptest! {
    #[test]
    fn size_n_subset_is_prefix_of_size_m(seed in any::<u64>(), n in 0usize..10, extra in 0usize..5) {
        let pool = quiz();
        let m = (n + extra).min(pool.len());
        let n = n.min(m);
        let small = nested_prefix(&pool, n, seed).unwrap();
        let big = nested_prefix(&pool, m, seed).unwrap();
        prop_assert_eq!(&big[..n], &small[..]);
    }
}
