//! Statistical n-gram language model toolkit.
//!
//! The pipeline: filter and segment raw text against a fixed lexicon
//! ([`corpus`]), count n-grams under a memory budget ([`counts`]), estimate an
//! interpolated absolute-discounting backoff model ([`estimate`]), serialize
//! it as ARPA text ([`arpa`]), shrink it by relative-entropy pruning
//! ([`prune`]), and score held-out text ([`evaluation`]). Several models can
//! be combined by perplexity-optimized interpolation ([`merge`]), and corpora
//! can be reshaped toward keyword frequency targets ([`keyword`]).

pub mod arpa;
pub mod corpus;
pub mod counts;
pub mod estimate;
pub mod evaluation;
pub mod keyword;
pub mod merge;
pub mod model;
pub mod prune;

pub mod cli;

/// Sentence-start marker. Context only: never predicted, never a corpus token.
pub const BOS: &str = "<s>";
/// Sentence-end marker. Predicted at the end of every sentence.
pub const EOS: &str = "</s>";
/// Stand-in for tokens outside the model vocabulary.
pub const UNK: &str = "<unk>";

pub use arpa::{read_arpa, write_arpa};
pub use corpus::{filter_sentence, load_lexicon, segment_fmm, FilterDecision, Lexicon};
pub use counts::{apply_thresholds, count_ngrams, NGramCountTable, ThresholdConfig};
pub use estimate::{estimate_model, mle_prob, DiscountSpec, SmoothingConfig};
pub use evaluation::{perplexity, query, PerplexityReport};
pub use merge::{
    export_static, mixture_perplexity, mixture_query, optimize_weights_bo, optimize_weights_em,
    BoConfig, InterpolationWeights,
};
pub use model::{BackoffModel, ProbEntry};
pub use prune::{prune, PruneThreshold};
