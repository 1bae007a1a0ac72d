//! Keyword-frequency targeting: duplicate or remove sentences so that each
//! keyword's token-level occurrence count approaches a caller-supplied
//! target.

use crate::corpus::Sentence;

/// Cap on how many copies of one sentence duplication may append. Guards
/// against a model memorizing fixed word combinations.
pub const DEFAULT_MAX_DUP: usize = 20;

/// One keyword (a token sequence, possibly multi-word) and its desired
/// corpus frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordEntry {
    pub keyword: Vec<String>,
    pub target_count: u64,
}

/// Validated list of keyword targets: no empty keywords, no duplicates,
/// positive targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordSpec {
    entries: Vec<KeywordEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum KeywordError {
    #[error("empty keyword (line {line})")]
    EmptyKeyword { line: usize },
    #[error("duplicate keyword {keyword:?}")]
    DuplicateKeyword { keyword: String },
    #[error("line {line}: expected \"keyword\\ttarget_count\"")]
    MissingTab { line: usize },
    #[error("line {line}: target count {text:?} is not a positive integer")]
    BadTarget { line: usize, text: String },
}

impl KeywordSpec {
    pub fn new(entries: Vec<KeywordEntry>) -> Result<KeywordSpec, KeywordError> {
        let mut seen = std::collections::HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if e.keyword.is_empty() || e.keyword.iter().any(|t| t.is_empty()) {
                return Err(KeywordError::EmptyKeyword { line: i + 1 });
            }
            if e.target_count == 0 {
                return Err(KeywordError::BadTarget {
                    line: i + 1,
                    text: "0".into(),
                });
            }
            if !seen.insert(e.keyword.clone()) {
                return Err(KeywordError::DuplicateKeyword {
                    keyword: e.keyword.join(" "),
                });
            }
        }
        Ok(KeywordSpec { entries })
    }

    /// Parses "keyword \t target_count" lines; the keyword field may hold a
    /// space-separated token sequence. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<KeywordSpec, KeywordError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let (kw, target) = raw
                .split_once('\t')
                .ok_or(KeywordError::MissingTab { line })?;
            let keyword: Vec<String> = kw.split_whitespace().map(str::to_string).collect();
            if keyword.is_empty() {
                return Err(KeywordError::EmptyKeyword { line });
            }
            let target_count: u64 =
                target
                    .trim()
                    .parse()
                    .ok()
                    .filter(|&t| t > 0)
                    .ok_or_else(|| KeywordError::BadTarget {
                        line,
                        text: target.trim().to_string(),
                    })?;
            entries.push(KeywordEntry {
                keyword,
                target_count,
            });
        }
        KeywordSpec::new(entries)
    }

    pub fn entries(&self) -> &[KeywordEntry] {
        &self.entries
    }
}

/// Per-keyword outcome; `after` always equals a fresh recount of the
/// returned corpus.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct KeywordOutcome {
    pub keyword: String,
    pub target_count: u64,
    pub before: u64,
    pub after: u64,
    pub sentences_added: u64,
    pub sentences_removed: u64,
    /// Below target and duplication could not close the gap: the keyword is
    /// absent, only co-occurs with other spec keywords, or every eligible
    /// sentence hit the duplication cap. New sentences are never invented.
    pub unsatisfiable: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct KeywordReport {
    pub entries: Vec<KeywordOutcome>,
}

/// Sliding-window occurrence count of `keyword` in `sentence`.
fn occurrences(sentence: &[String], keyword: &[String]) -> u64 {
    if sentence.len() < keyword.len() {
        return 0;
    }
    (0..=sentence.len() - keyword.len())
        .filter(|&i| sentence[i..i + keyword.len()] == *keyword)
        .count() as u64
}

fn corpus_count(corpus: &[Sentence], keyword: &[String]) -> u64 {
    corpus.iter().map(|s| occurrences(s, keyword)).sum()
}

/// Reshapes the corpus toward the spec's frequency targets.
///
/// Keywords are processed in spec order against the evolving corpus. Below
/// target, sentences containing the keyword and no other spec keyword are
/// appended round-robin, at most `max_dup_per_sentence` copies each, until
/// the count reaches the target. Above target, sentences containing the
/// keyword are removed shortest-first until the count is at or below it.
pub fn augment_keywords(
    corpus: Vec<Sentence>,
    spec: &KeywordSpec,
    max_dup_per_sentence: usize,
) -> (Vec<Sentence>, KeywordReport) {
    let mut corpus = corpus;
    let mut outcomes: Vec<KeywordOutcome> = Vec::with_capacity(spec.entries.len());

    for entry in &spec.entries {
        let keyword = &entry.keyword;
        let before = corpus_count(&corpus, keyword);
        let mut count = before;
        let mut sentences_added = 0u64;
        let mut sentences_removed = 0u64;
        let mut unsatisfiable = false;

        if count < entry.target_count {
            // Eligible: contains this keyword and no other spec keyword.
            let eligible: Vec<(usize, u64)> = corpus
                .iter()
                .enumerate()
                .filter_map(|(idx, s)| {
                    let occ = occurrences(s, keyword);
                    if occ == 0 {
                        return None;
                    }
                    let clean = spec
                        .entries
                        .iter()
                        .all(|o| o.keyword == *keyword || occurrences(s, &o.keyword) == 0);
                    clean.then_some((idx, occ))
                })
                .collect();
            let mut copies = vec![0usize; eligible.len()];
            let mut appended: Vec<Sentence> = Vec::new();
            'fill: loop {
                let mut progressed = false;
                for (slot, &(idx, occ)) in eligible.iter().enumerate() {
                    if count >= entry.target_count {
                        break 'fill;
                    }
                    if copies[slot] < max_dup_per_sentence {
                        appended.push(corpus[idx].clone());
                        copies[slot] += 1;
                        count += occ;
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            sentences_added = appended.len() as u64;
            corpus.extend(appended);
            if count < entry.target_count {
                unsatisfiable = true;
            }
        } else if count > entry.target_count {
            let mut containing: Vec<(usize, usize, u64)> = corpus
                .iter()
                .enumerate()
                .filter_map(|(idx, s)| {
                    let occ = occurrences(s, keyword);
                    (occ > 0).then_some((s.len(), idx, occ))
                })
                .collect();
            containing.sort();
            let mut doomed = std::collections::HashSet::new();
            for (_, idx, occ) in containing {
                if count <= entry.target_count {
                    break;
                }
                doomed.insert(idx);
                count -= occ;
            }
            sentences_removed = doomed.len() as u64;
            let mut idx = 0;
            corpus.retain(|_| {
                let keep = !doomed.contains(&idx);
                idx += 1;
                keep
            });
        }

        outcomes.push(KeywordOutcome {
            keyword: keyword.join(" "),
            target_count: entry.target_count,
            before,
            after: 0,
            sentences_added,
            sentences_removed,
            unsatisfiable,
        });
    }

    // Final recount: a later entry's removals may touch earlier keywords.
    for (outcome, entry) in outcomes.iter_mut().zip(&spec.entries) {
        outcome.after = corpus_count(&corpus, &entry.keyword);
    }
    (corpus, KeywordReport { entries: outcomes })
}
