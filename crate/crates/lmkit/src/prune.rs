//! Relative-entropy pruning: drop higher-order entries whose removal barely
//! perturbs the model, then rebuild backoff weights.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::model::{context_prob_groups, recompute_backoffs, BackoffModel};
use crate::{BOS, EOS};

/// Relative-entropy threshold, in log10 units. Nonnegative; infinity is the
/// prune-everything limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneThreshold(f64);

impl PruneThreshold {
    pub fn new(theta: f64) -> Result<PruneThreshold, PruneError> {
        if theta.is_nan() || theta < 0.0 {
            return Err(PruneError::InvalidTheta { theta });
        }
        Ok(PruneThreshold(theta))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PruneError {
    #[error("pruning threshold must be nonnegative, got {theta}")]
    InvalidTheta { theta: f64 },
    #[error("cannot rebuild backoff weights: {0}")]
    Rebuild(#[from] crate::model::BackoffRebuildError),
}

/// Model-derived marginal of a context: chain-rule product over its tokens,
/// with `<s>` factors replaced by the `</s>` unigram probability (the dummy
/// `<s>` probability would otherwise zero out every sentence-initial
/// context).
fn context_marginal(model: &BackoffModel, tokens: &[&str]) -> f64 {
    let mut p = 1.0;
    for i in 0..tokens.len() {
        if tokens[i] == BOS {
            p *= 10f64.powf(model.raw_query(&[EOS]));
        } else {
            p *= 10f64.powf(model.raw_query(&tokens[..=i]));
        }
    }
    p
}

/// Removes each entry (h,w) of order ≥ 2 that heads no surviving
/// higher-order entry and whose removal costs less than `theta` in weighted
/// relative entropy:
///
/// Δ = P(h)·[ P(w|h)·(log P(w|h) − log P(w|h′) − log α′(h))
///            + (log α(h) − log α′(h))·(1 − Σ_kept P(w′|h)) ]
///
/// where α′ is the backoff weight after removal. Δ is evaluated against the
/// original model, in one pass per order from the top down; unigrams are
/// never removed. All backoff weights are rebuilt afterwards, so the output
/// normalizes exactly.
pub fn prune(model: &BackoffModel, theta: PruneThreshold) -> Result<BackoffModel, PruneError> {
    let theta = theta.value();
    let mut result = model.clone();
    for m in (2..=model.order()).rev() {
        // Entries still needed as contexts of the (already pruned) level
        // above can't be touched.
        let heads: HashSet<Box<str>> = if m < model.order() {
            result
                .level(m + 1)
                .keys()
                .map(|k| Box::from(&k[..k.rfind(' ').expect("key has spaces")]))
                .collect()
        } else {
            HashSet::new()
        };

        let removals: Vec<Box<str>> = context_prob_groups(model.level(m))
            .par_iter()
            .flat_map(|(context, continuations)| {
                let ctx_tokens: Vec<&str> = context.split(' ').collect();
                let p_ctx = context_marginal(model, &ctx_tokens);
                let mut explicit = 0.0;
                let mut lower = 0.0;
                let mut lower_probs = Vec::with_capacity(continuations.len());
                let mut gram: Vec<&str> = ctx_tokens[1..].to_vec();
                gram.push("");
                for (word, log10_prob) in continuations {
                    *gram.last_mut().unwrap() = word;
                    let q = 10f64.powf(model.raw_query(&gram));
                    explicit += 10f64.powf(*log10_prob);
                    lower += q;
                    lower_probs.push(q);
                }
                let num = 1.0 - explicit;
                let den = 1.0 - lower;
                if num <= 0.0 || den <= 0.0 {
                    // Malformed (unnormalizable) context: leave it intact.
                    return Vec::new();
                }
                let log_alpha = num.log10() - den.log10();
                let mut out = Vec::new();
                for ((word, log10_prob), q) in continuations.iter().zip(&lower_probs) {
                    let key = format!("{context} {word}");
                    if heads.contains(key.as_str()) {
                        continue;
                    }
                    let p_hw = 10f64.powf(*log10_prob);
                    let log_alpha_new = (num + p_hw).log10() - (den + q).log10();
                    let delta = p_ctx
                        * (p_hw * (log10_prob - q.log10() - log_alpha_new)
                            + (log_alpha - log_alpha_new) * num);
                    // Exact-zero cost is kept: Δ < θ is strict, and float
                    // noise below zero must not defeat the θ=0 identity.
                    if delta.max(0.0) < theta {
                        out.push(Box::from(key.as_str()));
                    }
                }
                out
            })
            .collect();

        let level = result.level_mut(m);
        for key in removals {
            level.remove(&key);
        }
    }
    recompute_backoffs(&mut result)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counts::{count_ngrams, MIN_MEMORY_BUDGET};
    use crate::estimate::{estimate_model, DiscountSpec, SmoothingConfig, SmoothingMethod};
    use crate::evaluation::{perplexity, query};
    use crate::corpus::Sentence;

    /// Deterministic fixture: 60 sentences over 8 words, trigram model.
    fn fixture_corpus() -> Vec<Sentence> {
        let words = ["the", "cat", "dog", "sat", "ran", "on", "mat", "rug"];
        (0..60u64)
            .map(|i| {
                let len = (i % 6 + 2) as usize;
                (0..len)
                    .map(|j| words[((i * 7 + j as u64 * 13 + i * j as u64) % 8) as usize].to_string())
                    .collect()
            })
            .collect()
    }

    fn fixture_model() -> BackoffModel {
        let t = count_ngrams(fixture_corpus(), 3, MIN_MEMORY_BUDGET).unwrap();
        estimate_model(
            &t,
            &SmoothingConfig {
                method: SmoothingMethod::AbsoluteDiscountInterpolated,
                discount: DiscountSpec::Fixed(vec![0.5, 0.5, 0.5]),
            },
        )
        .unwrap()
    }

    fn entry_sets(m: &BackoffModel) -> Vec<Vec<String>> {
        (1..=m.order())
            .map(|l| m.level(l).keys().map(|k| k.to_string()).collect())
            .collect()
    }

    #[test]
    fn theta_zero_is_identity() {
        let model = fixture_model();
        let pruned = prune(&model, PruneThreshold::new(0.0).unwrap()).unwrap();
        assert_eq!(entry_sets(&model), entry_sets(&pruned));
        for m in 1..=model.order() {
            for (key, e) in model.level(m) {
                let p = &pruned.level(m)[key];
                assert_eq!(e.log10_prob, p.log10_prob, "{key}");
                let a = e.log10_backoff.unwrap_or(0.0);
                let b = p.log10_backoff.unwrap_or(0.0);
                assert!((a - b).abs() < 1e-9, "{key}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn theta_infinity_leaves_unigrams() {
        let model = fixture_model();
        let pruned = prune(&model, PruneThreshold::new(f64::INFINITY).unwrap()).unwrap();
        assert_eq!(pruned.entry_count(1), model.entry_count(1));
        assert_eq!(pruned.entry_count(2), 0);
        assert_eq!(pruned.entry_count(3), 0);
        assert!(pruned.level(1).values().all(|e| e.log10_backoff.is_none()));
        assert!(pruned.normalization_error() < 1e-6);
    }

    #[test]
    fn sweep_is_anti_monotone_and_normalized() {
        let model = fixture_model();
        let thetas = [0.0, 1e-9, 1e-7, 1e-5, 1e-4, 1e-3, 1e-2, 1.0];
        let mut last = usize::MAX;
        for theta in thetas {
            let pruned = prune(&model, PruneThreshold::new(theta).unwrap()).unwrap();
            let size = pruned.total_entries();
            assert!(size <= last, "θ={theta}: {size} > {last}");
            last = size;
            assert!(pruned.validate().is_ok(), "θ={theta}");
            assert!(pruned.normalization_error() < 1e-6, "θ={theta}");
        }
    }

    #[test]
    fn perplexity_degrades_gently() {
        let model = fixture_model();
        let corpus = fixture_corpus();
        let base = perplexity(&model, &corpus).unwrap().perplexity;
        let light = prune(&model, PruneThreshold::new(1e-7).unwrap()).unwrap();
        let light_ppl = perplexity(&light, &corpus).unwrap().perplexity;
        assert!(light_ppl >= base - 1e-9, "{light_ppl} vs {base}");
        assert!(light_ppl < base * 1.02, "light pruning must stay within 2%");
        let heavy = prune(&model, PruneThreshold::new(1e-3).unwrap()).unwrap();
        let heavy_ppl = perplexity(&heavy, &corpus).unwrap().perplexity;
        assert!(heavy_ppl >= light_ppl - 1e-9);
    }

    #[test]
    fn invalid_theta_rejected() {
        assert!(matches!(
            PruneThreshold::new(-1e-9),
            Err(PruneError::InvalidTheta { .. })
        ));
        assert!(matches!(
            PruneThreshold::new(f64::NAN),
            Err(PruneError::InvalidTheta { .. })
        ));
    }

    // Leave-one-out oracle: for each candidate, actually rebuild the model
    // without the entry (recomputing its context's backoff weight from the
    // normalization identity) and measure the context-weighted KL divergence
    // by summing over the whole vocabulary. The production code gets the
    // same quantity from a closed form without constructing the new model.
    fn oracle_delta(model: &BackoffModel, context: &str, word: &str) -> f64 {
        let ctx_tokens: Vec<&str> = context.split(' ').collect();
        let m = ctx_tokens.len() + 1;
        let key = format!("{context} {word}");

        let mut without = model.clone();
        without.level_mut(m).remove(key.as_str()).expect("entry exists");
        let mut explicit = 0.0;
        let mut lower = 0.0;
        for (ctx2, conts) in context_prob_groups(without.level(m)) {
            if ctx2 != context {
                continue;
            }
            for (w, lp) in conts {
                explicit += 10f64.powf(lp);
                let mut gram: Vec<&str> = ctx_tokens[1..].to_vec();
                gram.push(w);
                lower += 10f64.powf(without.raw_query(&gram));
            }
        }
        let alpha_new = ((1.0 - explicit) / (1.0 - lower)).log10();
        without
            .level_mut(m - 1)
            .get_mut(context)
            .unwrap()
            .log10_backoff = Some(alpha_new);

        // P(h) by the chain rule through the public query API.
        let mut p_ctx = 1.0;
        for i in 0..ctx_tokens.len() {
            p_ctx *= if ctx_tokens[i] == BOS {
                10f64.powf(query(model, &[], EOS))
            } else {
                10f64.powf(query(model, &ctx_tokens[..i], ctx_tokens[i]))
            };
        }

        let mut kl = 0.0;
        let vocab: Vec<&str> = model.vocab().collect();
        for w in vocab {
            let mut gram = ctx_tokens.clone();
            gram.push(w);
            let old = model.raw_query(&gram);
            let new = without.raw_query(&gram);
            kl += 10f64.powf(old) * (old - new);
        }
        p_ctx * kl
    }

    fn oracle_prune(model: &BackoffModel, theta: f64) -> BackoffModel {
        let mut result = model.clone();
        for m in (2..=model.order()).rev() {
            let heads: HashSet<String> = if m < model.order() {
                result
                    .level(m + 1)
                    .keys()
                    .map(|k| k[..k.rfind(' ').unwrap()].to_string())
                    .collect()
            } else {
                HashSet::new()
            };
            let mut removals = Vec::new();
            for key in model.level(m).keys() {
                if heads.contains(key.as_ref()) {
                    continue;
                }
                let cut = key.rfind(' ').unwrap();
                let delta = oracle_delta(model, &key[..cut], &key[cut + 1..]);
                if delta.max(0.0) < theta {
                    removals.push(key.clone());
                }
            }
            for key in removals {
                result.level_mut(m).remove(&key);
            }
        }
        recompute_backoffs(&mut result).unwrap();
        result
    }

    #[test]
    fn matches_leave_one_out_oracle() {
        let model = fixture_model();
        assert!(
            model.total_entries() <= 500,
            "fixture sized for the exhaustive oracle, got {}",
            model.total_entries()
        );
        for theta in [1e-8, 1e-6, 1e-5, 1e-4, 1e-3] {
            let fast = prune(&model, PruneThreshold::new(theta).unwrap()).unwrap();
            let slow = oracle_prune(&model, theta);
            assert_eq!(entry_sets(&fast), entry_sets(&slow), "θ={theta}");
            // Rebuilt weights agree as well.
            for m in 1..=fast.order() {
                for (key, e) in fast.level(m) {
                    let o = &slow.level(m)[key];
                    let a = e.log10_backoff.unwrap_or(0.0);
                    let b = o.log10_backoff.unwrap_or(0.0);
                    assert!((a - b).abs() < 1e-9, "θ={theta} {key}");
                }
            }
        }
    }

    #[test]
    fn sentence_initial_contexts_survive_light_pruning() {
        // With the <s> marginal substitution, light pruning must not wipe
        // out every sentence-initial bigram.
        let model = fixture_model();
        let pruned = prune(&model, PruneThreshold::new(1e-7).unwrap()).unwrap();
        let bos_bigrams = pruned
            .level(2)
            .keys()
            .filter(|k| k.starts_with("<s> "))
            .count();
        assert!(bos_bigrams > 0);
    }
}
