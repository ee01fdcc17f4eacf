//! Deterministic fact-recall benchmark.
//!
//! Invented entities carry one value per relation. Values are drawn from a
//! Zipf popularity law, so a model that half-remembers a fact is pulled
//! towards popular values. The pretraining corpus states every fact; the
//! multiple-choice items ask for one fact each, with distractors drawn from
//! the same popularity law (near misses) or, with probability
//! `1 - distractor_plausibility`, replaced by random letter strings.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{format_example, Choice, DataError, McqItem};

pub struct Relation {
    pub name: &'static str,
    pub question: &'static str,
    pub statements: &'static [&'static str],
    pub values: &'static [&'static str],
}

pub const RELATIONS: &[Relation] = &[
    Relation {
        name: "color",
        question: "What color is {e}?",
        statements: &["The color of {e} is {v}.", "{e} is {v} in color."],
        values: &[
            "red", "blue", "green", "yellow", "purple", "orange", "black", "white", "brown",
            "pink", "gray", "teal",
        ],
    },
    Relation {
        name: "food",
        question: "What does {e} eat?",
        statements: &["{e} eats {v}.", "The food of {e} is {v}."],
        values: &[
            "bread", "rice", "apples", "fish", "cheese", "beans", "corn", "honey", "soup", "nuts",
            "eggs", "plums",
        ],
    },
    Relation {
        name: "home",
        question: "Where does {e} live?",
        statements: &["{e} lives in {v}.", "The home of {e} is {v}."],
        values: &[
            "a cave", "a tower", "a barn", "a forest", "a castle", "a boat", "a tent", "a cabin",
            "a village", "a desert", "a swamp", "a meadow",
        ],
    },
    Relation {
        name: "tool",
        question: "What tool does {e} use?",
        statements: &["{e} uses {v}.", "The tool of {e} is {v}."],
        values: &[
            "a hammer", "a saw", "a shovel", "a brush", "a needle", "a rope", "a ladder", "an axe",
            "a wrench", "a chisel", "a rake", "a drill",
        ],
    },
    Relation {
        name: "pet",
        question: "What animal does {e} keep?",
        statements: &["{e} keeps {v}.", "The pet of {e} is {v}."],
        values: &[
            "a goat", "a horse", "a cat", "a dog", "an owl", "a duck", "a sheep", "a fox", "a crow",
            "a pig", "a mule", "a hen",
        ],
    },
    Relation {
        name: "sport",
        question: "What sport does {e} play?",
        statements: &["{e} plays {v}.", "The sport of {e} is {v}."],
        values: &[
            "chess", "tennis", "golf", "rugby", "polo", "cricket", "hockey", "soccer", "darts",
            "squash", "bowling", "fencing",
        ],
    },
    Relation {
        name: "metal",
        question: "What metal does {e} mine?",
        statements: &["{e} mines {v}.", "The metal of {e} is {v}."],
        values: &[
            "iron", "gold", "silver", "copper", "tin", "lead", "zinc", "nickel", "cobalt", "bronze",
            "steel", "platinum",
        ],
    },
    Relation {
        name: "craft",
        question: "What does {e} build?",
        statements: &["{e} builds {v}.", "The craft of {e} is building {v}."],
        values: &[
            "boats", "chairs", "bridges", "fences", "wagons", "clocks", "tables", "walls", "roads",
            "kites", "drums", "bowls",
        ],
    },
];

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "kl", "sh",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

const SUBJECTS: &[&str] = &["A man", "A woman", "The boy", "The girl", "A child", "An old man"];
const ACTIVITIES: &[&str] = &[
    "is playing the piano",
    "is washing a car",
    "is riding a bike",
    "is mowing the lawn",
    "is painting a wall",
    "is tying a shoe",
    "is juggling balls",
    "is lifting weights",
    "is brushing a horse",
    "is folding laundry",
    "is skating on ice",
    "is climbing a rope",
    "is baking a cake",
    "is surfing a wave",
    "is shaving his face",
    "is raking leaves",
    "is playing the drums",
    "is walking a dog",
    "is cutting hair",
    "is sanding a board",
    "is kicking a ball",
    "is peeling an orange",
    "is fixing a tire",
    "is knitting a scarf",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    /// Train pool plus test items; each asks about a distinct fact.
    pub n_items: usize,
    pub n_test: usize,
    /// Probability that a distractor is another value of the same relation
    /// rather than a random letter string.
    pub distractor_plausibility: f64,
    pub seed: u64,
    /// Corpus statements per fact.
    pub mentions: usize,
    /// Zipf exponent of value popularity (0 = uniform).
    pub popularity_skew: f64,
    /// Fraction of fact mentions written in the question/answer template.
    pub qa_fraction: f64,
    /// Zipf exponent of the entities' own values. The default 0 makes
    /// correct answers uniform, so popularity carries no information.
    pub fact_skew: f64,
    /// Quiz lines about one-off entities whose answers follow the popularity
    /// law. They teach the model a prior without adding facts to remember.
    pub filler_docs: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_entities: 120,
            n_relations: 4,
            n_items: 480,
            n_test: 160,
            distractor_plausibility: 1.0,
            seed: 0,
            mentions: 3,
            popularity_skew: 1.5,
            qa_fraction: 0.5,
            fact_skew: 0.0,
            filler_docs: 2000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Contract(format!("synthetic spec: {m}")));
        if self.n_relations == 0 || self.n_relations > RELATIONS.len() {
            return fail(format!("n_relations must be in 1..={}", RELATIONS.len()));
        }
        if self.n_entities == 0 || self.n_entities > ONSETS.len().pow(3) * VOWELS.len().pow(3) {
            return fail("n_entities out of range".into());
        }
        if self.n_items > self.n_entities * self.n_relations {
            return fail(format!(
                "{} items need distinct facts but only {} exist",
                self.n_items,
                self.n_entities * self.n_relations
            ));
        }
        if self.n_test == 0 || self.n_test >= self.n_items {
            return fail("n_test must be in 1..n_items".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_plausibility)
            || !(0.0..=1.0).contains(&self.qa_fraction)
        {
            return fail("probabilities must lie in [0, 1]".into());
        }
        if self.mentions == 0 {
            return fail("mentions must be positive".into());
        }
        if ![self.popularity_skew, self.fact_skew].iter().all(|s| *s >= 0.0 && s.is_finite()) {
            return fail("skews must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub corpus: Vec<String>,
    pub train: Vec<McqItem>,
    pub test: Vec<McqItem>,
    /// Activity phrases unrelated to any question, for unrelated negatives.
    pub unrelated_pool: Vec<String>,
}

fn entity_names(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.random_range(2..=3);
        let mut s = String::new();
        for _ in 0..syl {
            s.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            s.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        let mut c = s.chars();
        let name: String = c.next().unwrap().to_uppercase().chain(c).collect();
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

fn random_string(len: usize, rng: &mut ChaCha8Rng) -> String {
    (0..len.max(3)).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn fill(template: &str, e: &str, v: &str) -> String {
    template.replace("{e}", e).replace("{v}", v)
}

/// Builds corpus, train pool, test set and unrelated pool from `spec`.
pub fn gen_synthetic_benchmark(spec: &SyntheticSpec) -> Result<SyntheticBenchmark, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let relations = &RELATIONS[..spec.n_relations];
    let names = entity_names(spec.n_entities, &mut rng);

    // Popularity rank of each value, permuted per relation.
    let ranks: Vec<Vec<usize>> = relations
        .iter()
        .map(|r| {
            let mut ranks: Vec<usize> = (0..r.values.len()).collect();
            ranks.shuffle(&mut rng);
            ranks
        })
        .collect();
    let zipf = |skew: f64| -> Vec<Vec<f64>> {
        ranks
            .iter()
            .map(|rk| rk.iter().map(|&k| 1.0 / ((k + 1) as f64).powf(skew)).collect())
            .collect()
    };
    let popularity = zipf(spec.popularity_skew);
    let sampler = |w: &[f64]| WeightedIndex::new(w).expect("positive weights");
    let pop_samplers: Vec<_> = popularity.iter().map(|w| sampler(w)).collect();
    let fact_samplers: Vec<_> = zipf(spec.fact_skew).iter().map(|w| sampler(w)).collect();

    // facts[e][r] = value index
    let facts: Vec<Vec<usize>> = (0..spec.n_entities)
        .map(|_| fact_samplers.iter().map(|s| s.sample(&mut rng)).collect())
        .collect();

    let mut corpus = Vec::new();
    for (e, name) in names.iter().enumerate() {
        for (r, rel) in relations.iter().enumerate() {
            let v = rel.values[facts[e][r]];
            for _ in 0..spec.mentions {
                if rng.random_bool(spec.qa_fraction) {
                    corpus.push(format_example(&fill(rel.question, name, v), v)?);
                } else {
                    let t = rel.statements[rng.random_range(0..rel.statements.len())];
                    corpus.push(fill(t, name, v));
                }
            }
        }
    }
    let known: HashSet<&String> = names.iter().collect();
    let mut fillers = 0;
    while fillers < spec.filler_docs {
        let name = &entity_names(1, &mut rng)[0];
        if known.contains(name) {
            continue;
        }
        let r = rng.random_range(0..relations.len());
        let v = relations[r].values[pop_samplers[r].sample(&mut rng)];
        corpus.push(format_example(&fill(relations[r].question, name, v), v)?);
        fillers += 1;
    }
    let mut unrelated_pool: Vec<String> = ACTIVITIES.iter().map(|s| s.to_string()).collect();
    unrelated_pool.shuffle(&mut rng);
    for act in &unrelated_pool {
        for s in SUBJECTS {
            corpus.push(format!("{s} {act}."));
        }
    }
    corpus.shuffle(&mut rng);

    let mut fact_ids: Vec<(usize, usize)> = (0..spec.n_entities)
        .flat_map(|e| (0..spec.n_relations).map(move |r| (e, r)))
        .collect();
    fact_ids.shuffle(&mut rng);
    let labels = ["A", "B", "C", "D"];
    let mut items = Vec::with_capacity(spec.n_items);
    for (k, &(e, r)) in fact_ids.iter().take(spec.n_items).enumerate() {
        let rel = &relations[r];
        let correct = facts[e][r];
        let mut texts = vec![rel.values[correct].to_string()];
        let mut used = vec![correct];
        while texts.len() < 4 {
            if rng.random_bool(spec.distractor_plausibility) {
                let mut w = popularity[r].clone();
                for &u in &used {
                    w[u] = 0.0;
                }
                let d = WeightedIndex::new(&w).expect("values left").sample(&mut rng);
                used.push(d);
                texts.push(rel.values[d].to_string());
            } else {
                let len = rel.values[rng.random_range(0..rel.values.len())].len();
                let s = random_string(len, &mut rng);
                if !texts.contains(&s) {
                    texts.push(s);
                }
            }
        }
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(&mut rng);
        let choices: Vec<Choice> = order
            .iter()
            .zip(labels)
            .map(|(&i, l)| Choice {
                label: l.to_string(),
                text: texts[i].clone(),
            })
            .collect();
        let answer_key = labels[order.iter().position(|&i| i == 0).unwrap()].to_string();
        items.push(McqItem {
            id: format!("syn-{}-{k:05}", rel.name),
            question: fill(rel.question, &names[e], ""),
            choices,
            answer_key,
        });
    }
    let train = items.split_off(spec.n_test);
    Ok(SyntheticBenchmark {
        corpus,
        train,
        test: items,
        unrelated_pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_entities: 40,
            n_relations: 3,
            n_items: 100,
            n_test: 30,
            seed: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_synthetic_benchmark(&small()).unwrap(), gen_synthetic_benchmark(&small()).unwrap());
        let other = SyntheticSpec { seed: 6, ..small() };
        assert_ne!(gen_synthetic_benchmark(&small()).unwrap(), gen_synthetic_benchmark(&other).unwrap());
    }

    #[test]
    fn structure() {
        let b = gen_synthetic_benchmark(&small()).unwrap();
        assert_eq!(b.test.len(), 30);
        assert_eq!(b.train.len(), 70);
        let test_q: HashSet<_> = b.test.iter().map(|i| &i.question).collect();
        let test_ids: HashSet<_> = b.test.iter().map(|i| &i.id).collect();
        for it in &b.train {
            assert!(!test_q.contains(&it.question));
            assert!(!test_ids.contains(&it.id));
        }
        for it in b.test.iter().chain(&b.train) {
            it.validate().unwrap();
            assert_eq!(it.choices.len(), 4);
            let texts: HashSet<_> = it.choices.iter().map(|c| &c.text).collect();
            assert_eq!(texts.len(), 4);
            // The entity in the question is stated with its answer somewhere.
            let entity = it.question.split(' ').find(|w| w.starts_with(char::is_uppercase) && *w != "What" && *w != "Where")
                .unwrap()
                .trim_end_matches('?');
            assert!(b.corpus.iter().any(|d| d.contains(entity) && d.contains(it.correct_text())));
        }
    }

    #[test]
    fn implausible_distractors_are_random_strings() {
        let spec = SyntheticSpec { distractor_plausibility: 0.0, ..small() };
        let b = gen_synthetic_benchmark(&spec).unwrap();
        for it in &b.test {
            for w in it.wrong_texts() {
                assert!(RELATIONS.iter().all(|r| !r.values.contains(&w)), "{w}");
            }
        }
        let spec = SyntheticSpec { distractor_plausibility: 1.0, ..small() };
        let b = gen_synthetic_benchmark(&spec).unwrap();
        for it in &b.test {
            for w in it.wrong_texts() {
                assert!(RELATIONS.iter().any(|r| r.values.contains(&w)), "{w}");
            }
        }
    }

    #[test]
    fn inconsistent_sizes_rejected() {
        let spec = SyntheticSpec { n_items: 10_000, ..small() };
        assert!(gen_synthetic_benchmark(&spec).is_err());
        let spec = SyntheticSpec { n_test: 100, ..small() };
        assert!(gen_synthetic_benchmark(&spec).is_err());
    }
}
