use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, McqItem};

pub const ANSWER_DELIM: &str = "\nAnswer: ";

/// `"Question: {q}\nAnswer: "`, the scoring context for one question.
pub fn question_prompt(question: &str) -> String {
    format!("Question: {question}{ANSWER_DELIM}")
}

pub fn format_example(question: &str, answer: &str) -> Result<String, DataError> {
    if question.is_empty() || answer.is_empty() {
        return Err(DataError::Contract("question and answer must be non-empty".into()));
    }
    Ok(format!("{}{answer}", question_prompt(question)))
}

/// `k` correct demonstrations drawn without replacement from `pool`,
/// separated by blank lines.
pub fn few_shot_context(pool: &[McqItem], k: usize, seed: u64) -> Result<String, DataError> {
    if k > pool.len() {
        return Err(DataError::Contract(format!(
            "asked for {k} shots from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shots = sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| format_example(&pool[i].question, pool[i].correct_text()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(shots.join("\n\n"))
}

/// Few-shot block followed by the question prompt.
pub fn join_context(shots: &str, question: &str) -> String {
    if shots.is_empty() {
        question_prompt(question)
    } else {
        format!("{shots}\n\n{}", question_prompt(question))
    }
}
