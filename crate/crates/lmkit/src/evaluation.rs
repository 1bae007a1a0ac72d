//! Backoff queries and corpus perplexity.

use rayon::prelude::*;

use crate::corpus::Sentence;
use crate::model::BackoffModel;
use crate::{BOS, EOS, UNK};

/// Log10 probability of `word` after `context` under the backoff recursion.
///
/// Tokens outside the vocabulary (context or target) are mapped to `<unk>`;
/// the context is truncated to the model's order minus one. On a model whose
/// vocabulary lacks `<unk>` (violating the model invariants), an OOV word
/// yields negative infinity.
pub fn query(model: &BackoffModel, context: &[&str], word: &str) -> f64 {
    let word = if model.contains_word(word) { word } else { UNK };
    if !model.contains_word(word) {
        return f64::NEG_INFINITY;
    }
    let start = context.len() - context.len().min(model.order() - 1);
    let mut gram: Vec<&str> = Vec::with_capacity(context.len() - start + 1);
    for &t in &context[start..] {
        gram.push(if model.contains_word(t) { t } else { UNK });
    }
    gram.push(word);
    model.raw_query(&gram)
}

/// Perplexity over a corpus: token counts, OOV count, total log10
/// probability, and 10^(−sum/tokens).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerplexityReport {
    /// Predicted positions: every sentence token plus one `</s>` each.
    pub tokens: u64,
    /// Positions scored through `<unk>`.
    pub oov_tokens: u64,
    pub log10_prob_sum: f64,
    pub perplexity: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty evaluation corpus")]
    EmptyCorpus,
}

/// Scores a corpus with an arbitrary conditional scorer. Sentences are
/// processed independently (in parallel) and reduced in corpus order, so
/// results do not depend on the thread count.
pub(crate) fn perplexity_with<S, O>(
    corpus: &[Sentence],
    score: S,
    is_oov: O,
) -> Result<PerplexityReport, EvalError>
where
    S: Fn(&[&str], &str) -> f64 + Sync,
    O: Fn(&str) -> bool + Sync,
{
    let per_sentence: Vec<(f64, u64, u64)> = corpus
        .par_iter()
        .filter(|s| !s.is_empty())
        .map(|sentence| {
            let mut sum = 0.0;
            let mut oov = 0u64;
            let mut context: Vec<&str> = Vec::with_capacity(sentence.len() + 1);
            context.push(BOS);
            for word in sentence {
                if is_oov(word) {
                    oov += 1;
                }
                sum += score(&context, word);
                context.push(word);
            }
            sum += score(&context, EOS);
            (sum, sentence.len() as u64 + 1, oov)
        })
        .collect();

    let mut log10_prob_sum = 0.0;
    let mut tokens = 0u64;
    let mut oov_tokens = 0u64;
    for (sum, n, oov) in per_sentence {
        log10_prob_sum += sum;
        tokens += n;
        oov_tokens += oov;
    }
    if tokens == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(PerplexityReport {
        tokens,
        oov_tokens,
        log10_prob_sum,
        perplexity: 10f64.powf(-log10_prob_sum / tokens as f64),
    })
}

/// Sums query log-probs over every predicted position (`<s>`-padded, final
/// `</s>`), skipping empty sentences.
pub fn perplexity(model: &BackoffModel, corpus: &[Sentence]) -> Result<PerplexityReport, EvalError> {
    perplexity_with(
        corpus,
        |context, word| query(model, context, word),
        |word| word == UNK || !model.contains_word(word),
    )
}
