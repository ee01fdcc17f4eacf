//! Conditional log-likelihoods of target spans.

use serde::{Deserialize, Serialize};

use super::forward::{forward, forward_graph, Bindings};
use super::tokenizer::{tokenize, TokenId, BOS};
use super::weights::Head;
use super::LmError;
use crate::tensor::{log_softmax_rows, Graph, Scalar, Var};

/// Log-likelihood of a target span, with both normalizations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceLoglik {
    pub total: f64,
    /// `total` divided by the number of Unicode scalar values in the target.
    pub per_char: f64,
    /// `total` divided by the UTF-8 byte length of the target.
    pub per_byte: f64,
}

/// `[BOS] + context` and the target bytes.
pub fn encode_pair(context: &str, target: &str) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut ctx = Vec::with_capacity(context.len() + 1);
    ctx.push(BOS);
    ctx.extend(tokenize(context));
    (ctx, tokenize(target))
}

/// `sum_t log p(target_t | context, target_<t)` at token level.
pub fn token_loglik<T: Scalar>(
    head: &Head<'_, T>,
    context: &[TokenId],
    target: &[TokenId],
) -> Result<f64, LmError> {
    if context.is_empty() {
        return Err(LmError::Contract("context must hold at least one token".into()));
    }
    if target.is_empty() {
        return Err(LmError::EmptyTarget);
    }
    let full: Vec<TokenId> = context.iter().chain(target).copied().collect();
    let inputs = &full[..full.len() - 1];
    let logits = forward(head, inputs)?;
    let vocab = head.config().vocab_size;
    // Only rows that predict target tokens are needed.
    let first = context.len() - 1;
    let rows = &logits.data()[first * vocab..];
    let logp = log_softmax_rows(rows, vocab)?;
    Ok(target
        .iter()
        .enumerate()
        .map(|(i, &t)| logp[i * vocab + t as usize].to_f64())
        .sum())
}

/// Log-likelihood of `target` following `context` under the byte tokenizer.
pub fn sequence_loglik<T: Scalar>(
    head: &Head<'_, T>,
    context: &str,
    target: &str,
) -> Result<SequenceLoglik, LmError> {
    if target.is_empty() {
        return Err(LmError::EmptyTarget);
    }
    if !head.config().supports_bytes() {
        return Err(LmError::Config(format!(
            "vocabulary of {} cannot hold byte tokens",
            head.config().vocab_size
        )));
    }
    let (ctx, tgt) = encode_pair(context, target);
    let total = token_loglik(head, &ctx, &tgt)?;
    Ok(SequenceLoglik {
        total,
        per_char: total / target.chars().count() as f64,
        per_byte: total / target.len() as f64,
    })
}

/// Next-token labels and the loss mask for `context ++ target`, where only
/// target positions count. Returns `(inputs, labels, mask)`.
pub fn answer_labels(context: &[TokenId], target: &[TokenId]) -> (Vec<TokenId>, Vec<usize>, Vec<bool>) {
    let full: Vec<TokenId> = context.iter().chain(target).copied().collect();
    let n = full.len() - 1;
    let inputs = full[..n].to_vec();
    let labels = full[1..].iter().map(|&t| t as usize).collect();
    let mask = (0..n).map(|i| i + 1 >= context.len()).collect();
    (inputs, labels, mask)
}

/// Records the summed masked negative log-likelihood of `labels` given
/// `inputs`. Labels at unmasked positions are ignored.
pub fn masked_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    head: &Head<'_, T>,
    inputs: &[TokenId],
    labels: &[usize],
    mask: &[bool],
) -> Result<(Var, Bindings), LmError> {
    let (logits, bindings) = forward_graph(g, head, inputs)?;
    let loss = g.masked_nll(logits, labels, mask)?;
    Ok((loss, bindings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{BaseWeights, ModelConfig};

    fn small_base() -> BaseWeights<f64> {
        BaseWeights::init(
            &ModelConfig {
                n_layers: 1,
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                max_seq_len: 32,
                ..ModelConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn empty_target_is_contract_error() {
        let base = small_base();
        let head = Head::base_only(&base);
        assert!(matches!(
            sequence_loglik(&head, "Question: q\nAnswer: ", ""),
            Err(LmError::EmptyTarget)
        ));
    }

    #[test]
    fn overlong_is_length_error() {
        let base = small_base();
        let head = Head::base_only(&base);
        let long = "x".repeat(40);
        assert!(matches!(
            sequence_loglik(&head, &long, "y"),
            Err(LmError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn uniform_model_gives_log_inverse_vocab() {
        let mut base = small_base();
        base.w_out.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let head = Head::base_only(&base);
        let ll = sequence_loglik(&head, "abc", "d").unwrap();
        assert!((ll.total - (1.0f64 / 259.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn per_char_is_total_over_chars() {
        let base = small_base();
        let head = Head::base_only(&base);
        let ll = sequence_loglik(&head, "Q ", "abcd").unwrap();
        assert_eq!(ll.per_char, ll.total / 4.0);
        assert_eq!(ll.per_byte, ll.per_char);
        let ll = sequence_loglik(&head, "Q ", "é").unwrap();
        assert_eq!(ll.per_char, ll.total);
        assert_eq!(ll.per_byte, ll.total / 2.0);
    }

    #[test]
    fn labels_mask_only_target() {
        let (inputs, labels, mask) = answer_labels(&[256, 1, 2], &[3, 4]);
        assert_eq!(inputs, vec![256, 1, 2, 3]);
        assert_eq!(labels, vec![1, 2, 3, 4]);
        assert_eq!(mask, vec![false, false, true, true]);
    }
}
