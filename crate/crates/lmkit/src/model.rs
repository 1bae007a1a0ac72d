//! In-memory backoff model: per-order entries of (n-gram, log10 probability,
//! optional log10 backoff weight).

use std::collections::BTreeMap;

use crate::UNK;

/// One n-gram entry. A missing backoff weight means log10 α = 0 (multiplier
/// 1), matching ARPA convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbEntry {
    pub log10_prob: f64,
    pub log10_backoff: Option<f64>,
}

impl ProbEntry {
    pub fn prob(log10_prob: f64) -> ProbEntry {
        ProbEntry {
            log10_prob,
            log10_backoff: None,
        }
    }
}

/// Backoff n-gram model over space-joined token keys.
///
/// The vocabulary is the set of unigram keys. Immutable once built; share it
/// freely across threads.
#[derive(Debug, Clone)]
pub struct BackoffModel {
    levels: Vec<BTreeMap<Box<str>, ProbEntry>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model has no unigrams")]
    Empty,
    #[error("vocabulary lacks {UNK}")]
    MissingUnk,
    #[error("non-finite log10 value on entry {key:?}")]
    NonFinite { key: String },
    #[error("entry {key:?} lacks its context at the next lower order")]
    MissingContext { key: String },
}

impl BackoffModel {
    pub fn new(order: usize) -> BackoffModel {
        assert!(order >= 1, "order must be at least 1");
        BackoffModel {
            levels: (0..order).map(|_| BTreeMap::new()).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.levels.len()
    }

    /// Entries of order `m`, 1-based.
    pub fn level(&self, m: usize) -> &BTreeMap<Box<str>, ProbEntry> {
        &self.levels[m - 1]
    }

    pub(crate) fn level_mut(&mut self, m: usize) -> &mut BTreeMap<Box<str>, ProbEntry> {
        &mut self.levels[m - 1]
    }

    pub fn entry(&self, key: &str) -> Option<&ProbEntry> {
        let order = key.split(' ').count();
        self.levels.get(order - 1).and_then(|l| l.get(key))
    }

    pub(crate) fn insert(&mut self, m: usize, key: Box<str>, entry: ProbEntry) {
        self.levels[m - 1].insert(key, entry);
    }

    pub fn entry_count(&self, m: usize) -> usize {
        self.levels[m - 1].len()
    }

    pub fn total_entries(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }

    /// Vocabulary size, i.e. number of unigram entries.
    pub fn vocab_size(&self) -> usize {
        self.levels[0].len()
    }

    pub fn contains_word(&self, word: &str) -> bool {
        self.levels[0].contains_key(word)
    }

    pub fn vocab(&self) -> impl Iterator<Item = &str> {
        self.levels[0].keys().map(|k| k.as_ref())
    }

    /// Backoff recursion over explicit tokens: stored log10 prob if the full
    /// key is present, else backoff weight of the context (0 when absent)
    /// plus the score of the shortened context.
    ///
    /// No OOV mapping and no truncation; `gram` must be at most `order` long
    /// and its final token must be in the vocabulary.
    pub fn raw_query(&self, gram: &[&str]) -> f64 {
        debug_assert!(!gram.is_empty() && gram.len() <= self.order());
        let key = gram.join(" ");
        if let Some(e) = self.levels[gram.len() - 1].get(key.as_str()) {
            return e.log10_prob;
        }
        debug_assert!(
            gram.len() > 1,
            "unigram {key:?} missing; callers must map OOV words first"
        );
        let context = &gram[..gram.len() - 1];
        let backoff = self.levels[context.len() - 1]
            .get(context.join(" ").as_str())
            .and_then(|e| e.log10_backoff)
            .unwrap_or(0.0);
        backoff + self.raw_query(&gram[1..])
    }

    /// Largest |1 − Σ_w P(w|h)| over every context in the model, summing over
    /// the full vocabulary via the backoff query. Cost is O(contexts × vocab);
    /// intended for validation on small models.
    pub fn normalization_error(&self) -> f64 {
        let vocab: Vec<&str> = self.vocab().collect();
        let mut contexts: Vec<Vec<&str>> = vec![Vec::new()];
        for m in 1..self.order() {
            contexts.extend(
                self.levels[m - 1]
                    .keys()
                    .map(|k| k.split(' ').collect::<Vec<&str>>()),
            );
        }
        let mut worst = 0.0f64;
        for ctx in &contexts {
            let mut gram: Vec<&str> = ctx.clone();
            gram.push("");
            let mut sum = 0.0;
            for w in &vocab {
                *gram.last_mut().unwrap() = w;
                sum += 10f64.powf(self.raw_query(&gram));
            }
            worst = worst.max((1.0 - sum).abs());
        }
        worst
    }

    /// Structural checks for models built by this crate: vocabulary present
    /// with finite `<unk>`, all values finite, every entry's context present
    /// one order down.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.levels[0].is_empty() {
            return Err(ModelError::Empty);
        }
        if !self.contains_word(UNK) {
            return Err(ModelError::MissingUnk);
        }
        for level in &self.levels {
            for (key, e) in level {
                let backoff_finite = e.log10_backoff.map_or(true, f64::is_finite);
                if !e.log10_prob.is_finite() || !backoff_finite {
                    return Err(ModelError::NonFinite {
                        key: key.to_string(),
                    });
                }
            }
        }
        for m in 2..=self.order() {
            for key in self.levels[m - 1].keys() {
                let context = &key[..key.rfind(' ').expect("m-gram key has spaces")];
                if !self.levels[m - 2].contains_key(context) {
                    return Err(ModelError::MissingContext {
                        key: key.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Log10 probability assigned to `<s>` as a standalone event; a conventional
/// placeholder, never used as a real probability.
pub const BOS_LOG10_PROB: f64 = -99.0;

/// Groups a level's keys by their context prefix, returning
/// (context, [(word, log10_prob)]) in sorted order. Keys sharing a context
/// are bytewise-contiguous, so one walk suffices.
pub(crate) fn context_prob_groups(
    level: &BTreeMap<Box<str>, ProbEntry>,
) -> Vec<(&str, Vec<(&str, f64)>)> {
    let mut groups: Vec<(&str, Vec<(&str, f64)>)> = Vec::new();
    for (key, entry) in level {
        let cut = key.rfind(' ').expect("higher-order key has spaces");
        let (context, word) = (&key[..cut], &key[cut + 1..]);
        match groups.last_mut() {
            Some((current, items)) if *current == context => {
                items.push((word, entry.log10_prob))
            }
            _ => groups.push((context, vec![(word, entry.log10_prob)])),
        }
    }
    groups
}

#[derive(Debug, thiserror::Error)]
#[error("context {context:?}: explicit mass leaves no room for backoff (residual {residual:.3e})")]
pub struct BackoffRebuildError {
    pub context: String,
    pub residual: f64,
}

/// Recomputes every backoff weight bottom-up from the normalization identity
/// α(h) = (1 − Σ_kept P(w|h)) / (1 − Σ_kept P(w|h′)). Entries heading no
/// higher-order n-grams lose their weight. Probabilities are untouched.
pub(crate) fn recompute_backoffs(model: &mut BackoffModel) -> Result<(), BackoffRebuildError> {
    for l in 1..model.order() {
        let computed: Result<Vec<(Box<str>, f64)>, BackoffRebuildError> =
            context_prob_groups(model.level(l + 1))
                .into_iter()
                .map(|(context, continuations)| {
                    let ctx_tokens: Vec<&str> = context.split(' ').collect();
                    let mut explicit = 0.0;
                    let mut lower = 0.0;
                    let mut gram: Vec<&str> = ctx_tokens[1..].to_vec();
                    gram.push("");
                    for (word, log10_prob) in continuations {
                        explicit += 10f64.powf(log10_prob);
                        *gram.last_mut().unwrap() = word;
                        lower += 10f64.powf(model.raw_query(&gram));
                    }
                    let numerator = 1.0 - explicit;
                    let denominator = 1.0 - lower;
                    // Probabilities serialized at 9 significant digits can
                    // re-sum to just over 1 for a context whose explicit
                    // continuations cover ~all mass: each value carries
                    // relative error up to ~1.15e-8 (5e-9 absolute on a
                    // log10 in [1,10), times ln 10), so the sum can
                    // overshoot by ~1e-8. Absorb that instead of failing.
                    // Genuinely negative mass, or leftover mass with no
                    // lower residual to spread it over, is still an error.
                    const NOISE: f64 = 1e-7;
                    if numerator <= -NOISE || (denominator <= NOISE && numerator > NOISE) {
                        return Err(BackoffRebuildError {
                            context: context.to_string(),
                            residual: numerator.min(denominator),
                        });
                    }
                    let alpha = if numerator <= NOISE && denominator <= NOISE {
                        0.0 // both residuals vanish: the weight is immaterial
                    } else {
                        (numerator.max(1e-12) / denominator).log10()
                    };
                    Ok((Box::from(context), alpha))
                })
                .collect();
        let mut alphas: std::collections::HashMap<Box<str>, f64> =
            computed?.into_iter().collect();
        for (key, entry) in model.level_mut(l).iter_mut() {
            entry.log10_backoff = alphas.remove(key.as_ref());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{BOS, EOS};

    fn toy() -> BackoffModel {
        // Hand-normalized bigram model over {a, b, </s>, <unk>, <s>}.
        let mut m = BackoffModel::new(2);
        let uni: [(&str, f64, Option<f64>); 5] = [
            ("a", 0.4, Some(-0.2)),
            ("b", 0.2, None),
            (EOS, 0.3, None),
            (UNK, 0.1, None),
            (BOS, 1e-99, Some(0.0)),
        ];
        for (w, p, bo) in uni {
            m.insert(
                1,
                w.into(),
                ProbEntry {
                    log10_prob: p.log10(),
                    log10_backoff: bo,
                },
            );
        }
        // Under context "a": explicit b at 0.5; the rest backs off with
        // α = 10^-0.2 scaled appropriately (not exactly normalized; fine for
        // query-mechanics tests).
        m.insert(2, "a b".into(), ProbEntry::prob(0.5f64.log10()));
        m
    }

    #[test]
    fn raw_query_prefers_exact_entry() {
        let m = toy();
        assert_eq!(m.raw_query(&["a", "b"]), 0.5f64.log10());
    }

    #[test]
    fn raw_query_backs_off_with_weight() {
        let m = toy();
        let expected = -0.2 + 0.3f64.log10();
        assert!((m.raw_query(&["a", EOS]) - expected).abs() < 1e-12);
    }

    #[test]
    fn raw_query_missing_backoff_means_zero() {
        let m = toy();
        // context "b" has no backoff weight: multiplier 1.
        assert!((m.raw_query(&["b", "a"]) - 0.4f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn validate_catches_missing_context() {
        let mut m = toy();
        m.insert(2, "zz b".into(), ProbEntry::prob(-0.5));
        assert!(matches!(
            m.validate(),
            Err(ModelError::MissingContext { .. })
        ));
    }

    #[test]
    fn validate_catches_missing_unk() {
        let mut m = BackoffModel::new(1);
        m.insert(1, "a".into(), ProbEntry::prob(0.0));
        assert!(matches!(m.validate(), Err(ModelError::MissingUnk)));
    }

    fn quarter_unigrams() -> BackoffModel {
        let mut m = BackoffModel::new(2);
        for w in ["a", "b", EOS, UNK] {
            m.insert(1, w.into(), ProbEntry::prob(0.25f64.log10()));
        }
        m.insert(1, BOS.into(), ProbEntry::prob(-99.0));
        m
    }

    #[test]
    fn backoff_rebuild_absorbs_serialization_noise() {
        // Probabilities rounded for text serialization can re-sum a hair
        // over 1; the rebuild must flatten that to a vanishing weight, not
        // fail.
        let mut m = quarter_unigrams();
        m.insert(2, "a a".into(), ProbEntry::prob(0.5f64.log10()));
        m.insert(2, "a b".into(), ProbEntry::prob(0.3f64.log10()));
        m.insert(2, "a </s>".into(), ProbEntry::prob((0.2f64 + 5e-8).log10()));
        recompute_backoffs(&mut m).unwrap();
        let alpha = m.level(1)["a"].log10_backoff.unwrap();
        assert!(alpha <= -11.0, "expected vanishing weight, got {alpha}");
    }

    #[test]
    fn backoff_rebuild_zeroes_weight_when_both_residuals_vanish() {
        // Explicit continuations cover all mass and so do their unigrams:
        // the weight multiplies nothing, so any finite value works. Pin 0.
        let mut m = quarter_unigrams();
        for w in ["a", "b", EOS, UNK] {
            m.insert(2, format!("b {w}").into(), ProbEntry::prob(0.25f64.log10()));
        }
        recompute_backoffs(&mut m).unwrap();
        assert_eq!(m.level(1)["b"].log10_backoff, Some(0.0));
    }

    #[test]
    fn backoff_rebuild_rejects_real_overflow() {
        let mut m = quarter_unigrams();
        m.insert(2, "a a".into(), ProbEntry::prob(0.7f64.log10()));
        m.insert(2, "a b".into(), ProbEntry::prob(0.7f64.log10()));
        let err = recompute_backoffs(&mut m).unwrap_err();
        assert_eq!(err.context, "a");
        assert!(err.residual < -0.35);
    }
}
