//! Lexicon loading, sentence filtering, and forward-maximum-matching
//! segmentation.

use std::collections::HashSet;
use std::path::Path;

use crate::UNK;

/// Closed vocabulary driving filtering and segmentation.
///
/// Immutable after load; share it freely across threads.
#[derive(Debug, Clone)]
pub struct Lexicon {
    words: HashSet<Box<str>>,
    chars: HashSet<char>,
    max_word_len: usize,
    duplicates_collapsed: usize,
}

impl Lexicon {
    /// Builds a lexicon from entries, collapsing duplicates.
    ///
    /// Entries must be non-empty and free of whitespace; the set must end up
    /// non-empty.
    pub fn new<I, S>(entries: I) -> Result<Lexicon, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: HashSet<Box<str>> = HashSet::new();
        let mut duplicates = 0usize;
        for entry in entries {
            let entry = entry.as_ref();
            if entry.is_empty() {
                return Err(CorpusError::EmptyEntry);
            }
            if entry.chars().any(char::is_whitespace) {
                return Err(CorpusError::WhitespaceInEntry {
                    entry: entry.to_string(),
                });
            }
            if !words.insert(Box::from(entry)) {
                duplicates += 1;
            }
        }
        if words.is_empty() {
            return Err(CorpusError::EmptyLexicon);
        }
        let chars = words.iter().flat_map(|w| w.chars()).collect();
        let max_word_len = words.iter().map(|w| w.chars().count()).max().unwrap_or(0);
        Ok(Lexicon {
            words,
            chars,
            max_word_len,
            duplicates_collapsed: duplicates,
        })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    /// True if `c` appears in at least one entry.
    pub fn covers_char(&self, c: char) -> bool {
        self.chars.contains(&c)
    }

    /// Character length of the longest entry.
    pub fn max_word_len(&self) -> usize {
        self.max_word_len
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// How many duplicate lines the source collapsed into existing entries.
    pub fn duplicates_collapsed(&self) -> usize {
        self.duplicates_collapsed
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(|w| w.as_ref())
    }
}

/// How lexicon lines are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LexiconColumns {
    /// The whole line is the entry.
    WordOnly,
    /// First whitespace-delimited field is the entry; the rest (pronunciation
    /// symbols) is ignored.
    WordPlusPronunciation,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("empty lexicon")]
    EmptyLexicon,
    #[error("empty lexicon entry")]
    EmptyEntry,
    #[error("lexicon entry contains whitespace: {entry:?} (use word+pronunciation mode for multi-column files)")]
    WhitespaceInEntry { entry: String },
    #[error("line {line} is not valid UTF-8")]
    InvalidUtf8 { line: usize },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Loads a lexicon file: UTF-8, one entry per line, blank lines skipped.
pub fn load_lexicon(path: &Path, columns: LexiconColumns) -> Result<Lexicon, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut entries = Vec::new();
    for (idx, raw_line) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(raw_line)
            .map_err(|_| CorpusError::InvalidUtf8 { line: idx + 1 })?
            .trim();
        if line.is_empty() {
            continue;
        }
        let entry = match columns {
            LexiconColumns::WordOnly => line,
            LexiconColumns::WordPlusPronunciation => {
                line.split_whitespace().next().unwrap_or("")
            }
        };
        entries.push(entry.to_string());
    }
    Lexicon::new(entries)
}

/// Outcome of the character-coverage filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    /// First character that appears in no lexicon entry.
    Drop { offending: char },
}

/// Keeps a sentence iff every non-whitespace character appears in some
/// lexicon entry. Whitespace is a segment boundary, not content, so it is
/// exempt from the coverage test.
pub fn filter_sentence(raw: &str, lexicon: &Lexicon) -> FilterDecision {
    for c in raw.chars() {
        if !c.is_whitespace() && !lexicon.covers_char(c) {
            return FilterDecision::Drop { offending: c };
        }
    }
    FilterDecision::Keep
}

/// A segmented sentence: lexicon entries or `<unk>`, never boundary markers.
pub type Sentence = Vec<String>;

/// Forward maximum matching: at each position emit the longest lexicon entry
/// matching a prefix of the remaining text, or `<unk>` for exactly one
/// uncovered character. Whitespace is a hard boundary and is not emitted.
pub fn segment_fmm(raw: &str, lexicon: &Lexicon) -> Sentence {
    let mut tokens = Vec::new();
    for run in raw.split_whitespace() {
        let chars: Vec<char> = run.chars().collect();
        let mut pos = 0;
        while pos < chars.len() {
            let limit = lexicon.max_word_len().min(chars.len() - pos);
            let mut matched = 0;
            let mut candidate = String::new();
            for len in (1..=limit).rev() {
                candidate.clear();
                candidate.extend(&chars[pos..pos + len]);
                if lexicon.contains(&candidate) {
                    matched = len;
                    break;
                }
            }
            if matched > 0 {
                tokens.push(chars[pos..pos + matched].iter().collect());
                pos += matched;
            } else {
                tokens.push(UNK.to_string());
                pos += 1;
            }
        }
    }
    tokens
}
