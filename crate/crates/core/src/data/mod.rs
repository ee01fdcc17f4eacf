//! Multiple-choice data, prompt formatting, negative construction and the
//! synthetic fact benchmark.

mod format;
mod mcq;
mod negatives;
mod synthetic;

pub use format::{few_shot_context, format_example, join_context, question_prompt, ANSWER_DELIM};
pub use mcq::{load_mcq_jsonl, parse_mcq_jsonl, write_mcq_jsonl, Choice, McqItem};
pub use negatives::{choice_topics, irrelevant_answer, make_negatives, positives, NegativeKind, Polarity, TrainExample};
pub use synthetic::{gen_synthetic_benchmark, SyntheticBenchmark, SyntheticSpec, RELATIONS};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid item `{id}`: {msg}")]
    Invalid { id: String, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
