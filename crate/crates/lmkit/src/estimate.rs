//! Model estimation: interpolated absolute discounting over thresholded
//! counts, with backoff weights solved so every context normalizes exactly.

use std::collections::BTreeSet;

use crate::counts::NGramCountTable;
use crate::model::{BackoffModel, ProbEntry, BOS_LOG10_PROB};
use crate::{BOS, EOS, UNK};

/// Only smoothing method offered: absolute discounting with full
/// interpolation against the next-lower order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothingMethod {
    #[default]
    AbsoluteDiscountInterpolated,
}

/// Per-order discount constants, or `Auto` for the count-of-counts rule
/// D = n₁/(n₁ + 2·n₂) clamped to [0.1, 0.9] (0.5 when undefined).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscountSpec {
    Auto,
    /// One value per order, each in (0,1).
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SmoothingConfig {
    pub method: SmoothingMethod,
    pub discount: DiscountSpec,
}

impl Default for SmoothingConfig {
    fn default() -> SmoothingConfig {
        SmoothingConfig {
            method: SmoothingMethod::AbsoluteDiscountInterpolated,
            discount: DiscountSpec::Auto,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EstimateError {
    #[error("degenerate vocabulary")]
    DegenerateVocabulary,
    #[error("discount {value} outside (0,1)")]
    InvalidDiscount { value: f64 },
    #[error("expected {expected} per-order discounts, got {got}")]
    DiscountCount { expected: usize, got: usize },
    #[error("zero-count context {context:?}")]
    ZeroCountContext { context: String },
    #[error("gram of length {len} exceeds table order {order}")]
    GramTooLong { len: usize, order: usize },
    #[error("context {context:?} missing from the table; apply_thresholds restores required contexts")]
    MissingContext { context: String },
}

/// Pure count ratio C(gram)/C(context); no smoothing. The empty context
/// counts all predicted positions, and C(`<s>`) is the sentence total.
pub fn mle_prob(table: &NGramCountTable, gram: &[&str]) -> Result<f64, EstimateError> {
    if gram.is_empty() || gram.len() > table.order() {
        return Err(EstimateError::GramTooLong {
            len: gram.len(),
            order: table.order(),
        });
    }
    let context = &gram[..gram.len() - 1];
    let denom = if context.is_empty() {
        table.total_tokens()
    } else if context == [BOS] {
        table.total_sentences()
    } else {
        table.get(context).unwrap_or(0)
    };
    if denom == 0 {
        return Err(EstimateError::ZeroCountContext {
            context: context.join(" "),
        });
    }
    Ok(table.get(gram).unwrap_or(0) as f64 / denom as f64)
}

/// Estimates a backoff model by interpolated absolute discounting:
///
/// P(w|h) = max(C(h·w) − D_m, 0)/C(h) + (D_m·N₁₊(h)/C(h))·P(w|h′)
///
/// where N₁₊(h) is the number of distinct retained continuations of h and h′
/// drops the oldest word. The unigram base interpolates with the uniform
/// distribution over the vocabulary (retained words plus `<unk>` and `</s>`).
/// Backoff weights are solved from the normalization identity, so every
/// context sums to one exactly over retained entries.
pub fn estimate_model(
    table: &NGramCountTable,
    cfg: &SmoothingConfig,
) -> Result<BackoffModel, EstimateError> {
    let order = table.order();
    if table.level(1).is_empty() {
        return Err(EstimateError::DegenerateVocabulary);
    }
    let discounts = resolve_discounts(table, cfg)?;
    let mut model = BackoffModel::new(order);

    // Unigram level. The denominator is the retained unigram mass so the
    // level stays normalized even under unigram thresholding.
    let d1 = discounts[0];
    let total: u64 = table
        .level(1)
        .iter()
        .filter(|(k, _)| k.as_ref() != BOS)
        .map(|(_, &c)| c)
        .sum();
    if total == 0 {
        return Err(EstimateError::DegenerateVocabulary);
    }
    let mut support: BTreeSet<&str> = table
        .level(1)
        .keys()
        .map(|k| k.as_ref())
        .filter(|k| *k != BOS)
        .collect();
    let n_types = support.len() as f64;
    support.insert(UNK);
    support.insert(EOS);
    let uniform = 1.0 / support.len() as f64;
    let lambda1 = d1 * n_types / total as f64;
    for w in support {
        let c = table.get(&[w]).unwrap_or(0) as f64;
        let p = (c - d1).max(0.0) / total as f64 + lambda1 * uniform;
        model.insert(1, Box::from(w), ProbEntry::prob(p.log10()));
    }
    model.insert(1, Box::from(BOS), ProbEntry::prob(BOS_LOG10_PROB));

    for m in 2..=order {
        let dm = discounts[m - 1];
        for (context, continuations) in context_groups(table, m) {
            let ctx_tokens: Vec<&str> = context.split(' ').collect();
            let c_h = if ctx_tokens == [BOS] {
                table.total_sentences()
            } else {
                table.get(&ctx_tokens).unwrap_or(0)
            };
            if c_h == 0 {
                return Err(EstimateError::MissingContext {
                    context: context.to_string(),
                });
            }
            let c_h = c_h as f64;
            let lambda = dm * continuations.len() as f64 / c_h;
            let mut explicit_sum = 0.0;
            let mut lower_sum = 0.0;
            let mut lower_gram: Vec<&str> = ctx_tokens[1..].to_vec();
            lower_gram.push("");
            for &(word, count) in &continuations {
                *lower_gram.last_mut().unwrap() = word;
                let p_lower = 10f64.powf(model.raw_query(&lower_gram));
                let p = (count as f64 - dm).max(0.0) / c_h + lambda * p_lower;
                explicit_sum += p;
                lower_sum += p_lower;
                let mut key = String::with_capacity(context.len() + word.len() + 1);
                key.push_str(context);
                key.push(' ');
                key.push_str(word);
                model.insert(m, key.into(), ProbEntry::prob(p.log10()));
            }
            // Solving α from Σ_w P(w|h) = 1 keeps normalization exact even
            // when thresholding removed part of the context's mass.
            let alpha = (1.0 - explicit_sum) / (1.0 - lower_sum);
            debug_assert!(alpha.is_finite() && alpha > 0.0, "context {context:?}");
            let entry = model
                .level_mut(m - 1)
                .get_mut(context)
                .unwrap_or_else(|| panic!("context {context:?} not in model"));
            entry.log10_backoff = Some(alpha.log10());
        }
    }
    Ok(model)
}

fn resolve_discounts(
    table: &NGramCountTable,
    cfg: &SmoothingConfig,
) -> Result<Vec<f64>, EstimateError> {
    match &cfg.discount {
        DiscountSpec::Fixed(values) => {
            if values.len() != table.order() {
                return Err(EstimateError::DiscountCount {
                    expected: table.order(),
                    got: values.len(),
                });
            }
            for &v in values {
                if !(v > 0.0 && v < 1.0) {
                    return Err(EstimateError::InvalidDiscount { value: v });
                }
            }
            Ok(values.clone())
        }
        DiscountSpec::Auto => Ok((1..=table.order())
            .map(|m| {
                let n1 = table.level(m).values().filter(|&&c| c == 1).count() as f64;
                let n2 = table.level(m).values().filter(|&&c| c == 2).count() as f64;
                if n1 + 2.0 * n2 == 0.0 {
                    0.5
                } else {
                    (n1 / (n1 + 2.0 * n2)).clamp(0.1, 0.9)
                }
            })
            .collect()),
    }
}

// Groups level-m keys by their (m−1)-token context. Keys sharing a context
// are bytewise-contiguous within a level, so one sorted walk suffices.
fn context_groups<'t>(
    table: &'t NGramCountTable,
    m: usize,
) -> Vec<(&'t str, Vec<(&'t str, u64)>)> {
    let mut groups: Vec<(&str, Vec<(&str, u64)>)> = Vec::new();
    for (key, &count) in table.level(m) {
        let cut = key.rfind(' ').expect("level-m key has m tokens");
        let (context, word) = (&key[..cut], &key[cut + 1..]);
        match groups.last_mut() {
            Some((current, items)) if *current == context => items.push((word, count)),
            _ => groups.push((context, vec![(word, count)])),
        }
    }
    groups
}
