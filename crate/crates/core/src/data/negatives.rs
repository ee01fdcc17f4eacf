use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, McqItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Where a negative answer comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    /// A wrong choice of the same question.
    Incorrect,
    /// A wrong choice of a different question in the same set.
    Irrelevant,
    /// Text from an unrelated pool.
    Unrelated,
}

impl NegativeKind {
    pub fn name(self) -> &'static str {
        match self {
            NegativeKind::Incorrect => "incorrect",
            NegativeKind::Irrelevant => "irrelevant",
            NegativeKind::Unrelated => "unrelated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub question: String,
    pub answer: String,
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_kind: Option<NegativeKind>,
}

impl TrainExample {
    pub fn positive(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
            polarity: Polarity::Positive,
            negative_kind: None,
        }
    }

    pub fn negative(question: impl Into<String>, answer: impl Into<String>, kind: NegativeKind) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
            polarity: Polarity::Negative,
            negative_kind: Some(kind),
        }
    }

    /// `negative_kind` is present exactly for negatives.
    pub fn is_consistent(&self) -> bool {
        (self.polarity == Polarity::Negative) == self.negative_kind.is_some()
    }
}

/// Topic id per item: items are in one topic when their choice sets are
/// linked, directly or through other items, by a shared answer text.
pub fn choice_topics(items: &[McqItem]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..items.len()).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut owner: HashMap<&str, usize> = HashMap::new();
    for (i, it) in items.iter().enumerate() {
        for c in &it.choices {
            if let Some(&j) = owner.get(c.text.as_str()) {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a] = b;
            } else {
                owner.insert(&c.text, i);
            }
        }
    }
    (0..items.len()).map(|i| root(&mut parent, i)).collect()
}

/// A wrong choice of another item, preferring items of another topic. Falls
/// back to any answer outside the item's own choices when every item shares
/// one topic.
pub fn irrelevant_answer<'a>(
    items: &'a [McqItem],
    topics: &[usize],
    i: usize,
    rng: &mut impl Rng,
) -> Option<&'a str> {
    let own: Vec<&str> = items[i].choices.iter().map(|c| c.text.as_str()).collect();
    let foreign: Vec<usize> = (0..items.len()).filter(|&j| topics[j] != topics[i]).collect();
    if let Some(&j) = foreign.choose(rng) {
        return items[j].wrong_texts().collect::<Vec<_>>().choose(rng).copied();
    }
    // Bounded rejection sampling so a degenerate set fails cleanly.
    for _ in 0..64 * items.len() {
        let j = rng.random_range(0..items.len());
        if j == i {
            continue;
        }
        let cands: Vec<&str> = items[j].wrong_texts().filter(|t| !own.contains(t)).collect();
        if let Some(t) = cands.choose(rng) {
            return Some(t);
        }
    }
    None
}

/// Each item paired with its correct answer.
pub fn positives(items: &[McqItem]) -> Vec<TrainExample> {
    items
        .iter()
        .map(|it| TrainExample::positive(&it.question, it.correct_text()))
        .collect()
}

/// One negative per item, in item order.
pub fn make_negatives(
    items: &[McqItem],
    strategy: NegativeKind,
    alt_pool: Option<&[String]>,
    seed: u64,
) -> Result<Vec<TrainExample>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fail = |msg: String| DataError::Contract(format!("{} negatives: {msg}", strategy.name()));
    let mut out = Vec::with_capacity(items.len());
    match strategy {
        NegativeKind::Incorrect => {
            for it in items {
                let wrong: Vec<&str> = it.wrong_texts().filter(|t| *t != it.correct_text()).collect();
                let pick = wrong
                    .choose(&mut rng)
                    .ok_or_else(|| fail(format!("item `{}` has no wrong choice", it.id)))?;
                out.push(TrainExample::negative(&it.question, *pick, strategy));
            }
        }
        NegativeKind::Irrelevant => {
            if items.len() < 2 {
                return Err(fail("need at least two items".into()));
            }
            let topics = choice_topics(items);
            for i in 0..items.len() {
                let it = &items[i];
                let t = irrelevant_answer(items, &topics, i, &mut rng).ok_or_else(|| {
                    fail(format!("no other item offers an answer foreign to `{}`", it.id))
                })?;
                out.push(TrainExample::negative(&it.question, t, strategy));
            }
        }
        NegativeKind::Unrelated => {
            let pool = alt_pool
                .filter(|p| !p.is_empty())
                .ok_or_else(|| fail("alt_pool must be non-empty".into()))?;
            for it in items {
                let cands: Vec<&String> = pool.iter().filter(|t| t.as_str() != it.correct_text()).collect();
                let t = cands
                    .choose(&mut rng)
                    .ok_or_else(|| fail(format!("alt_pool only holds the answer of `{}`", it.id)))?;
                out.push(TrainExample::negative(&it.question, t.as_str(), strategy));
            }
        }
    }
    Ok(out)
}
