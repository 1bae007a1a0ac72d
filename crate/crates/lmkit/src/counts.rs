//! Memory-bounded exact n-gram counting and per-order frequency thresholds.
//!
//! Counts are exact regardless of the memory budget: when the in-memory maps
//! would exceed the budget, partial counts are flushed to sorted runs in a
//! temporary directory and merged back with a k-way heap merge that sums the
//! counts of equal keys.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use crate::corpus::Sentence;
use crate::{BOS, EOS};

/// Smallest accepted memory budget, in bytes.
pub const MIN_MEMORY_BUDGET: u64 = 16 * 1024 * 1024;

/// Largest supported n-gram order.
pub const MAX_ORDER: usize = 5;

// Rough per-entry cost beyond the key bytes: hash-map slot, boxed str header,
// count. Deliberately generous so the budget is respected.
const ENTRY_OVERHEAD: usize = 64;

/// Per-order n-gram counts over boundary-marked token streams.
///
/// Keys are space-joined tokens. Each sentence `w1..wN` contributes the
/// predicted positions `w1..wN,</s>` with `<s>` padding on the left; `<s>`
/// itself is context only and never counted as a unigram event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramCountTable {
    levels: Vec<BTreeMap<Box<str>, u64>>,
    total_sentences: u64,
    total_tokens: u64,
}

impl NGramCountTable {
    pub fn order(&self) -> usize {
        self.levels.len()
    }

    /// Count map for `m`-grams, 1-based.
    pub fn level(&self, m: usize) -> &BTreeMap<Box<str>, u64> {
        &self.levels[m - 1]
    }

    pub fn get(&self, gram: &[&str]) -> Option<u64> {
        self.levels
            .get(gram.len().wrapping_sub(1))
            .and_then(|lvl| lvl.get(gram.join(" ").as_str()))
            .copied()
    }

    /// Sentences that contributed events (empty sentences are skipped).
    pub fn total_sentences(&self) -> u64 {
        self.total_sentences
    }

    /// Predicted positions: per sentence, its tokens plus one `</s>`.
    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(|l| l.is_empty())
    }

    /// Writes the table as sorted UTF-8 lines `token1 .. tokenM\tcount`,
    /// orders ascending, keys bytewise within an order.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for level in &self.levels {
            for (key, count) in level {
                writeln!(out, "{key}\t{count}")?;
            }
        }
        Ok(())
    }
}

/// Per-order minimum counts. Orders not present default to 1 (keep all).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ThresholdConfig {
    pub min_count: BTreeMap<usize, u64>,
}

impl ThresholdConfig {
    pub fn new(min_count: BTreeMap<usize, u64>) -> ThresholdConfig {
        ThresholdConfig { min_count }
    }

    /// Same minimum for every order.
    pub fn uniform(order: usize, min: u64) -> ThresholdConfig {
        ThresholdConfig {
            min_count: (1..=order).map(|m| (m, min)).collect(),
        }
    }

    pub fn min_count_for(&self, order: usize) -> u64 {
        self.min_count.get(&order).copied().unwrap_or(1).max(1)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CountError {
    #[error("memory budget {budget} is below the {MIN_MEMORY_BUDGET}-byte floor")]
    BudgetBelowFloor { budget: u64 },
    #[error("order {order} outside supported range 1..={MAX_ORDER}")]
    OrderOutOfRange { order: usize },
    #[error("sentence contains reserved boundary token {token:?}")]
    ReservedToken { token: String },
    #[error("token contains whitespace: {token:?}")]
    TokenWhitespace { token: String },
    #[error("spill to {dir} failed: {source}")]
    Spill {
        dir: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("could not create spill directory: {0}")]
    TempDir(#[source] std::io::Error),
}

/// Counts all n-grams up to `order`, spilling to disk when the in-memory maps
/// would exceed `memory_budget` bytes. The result is identical to an
/// unbounded in-memory count.
pub fn count_ngrams<I>(
    sentences: I,
    order: usize,
    memory_budget: u64,
) -> Result<NGramCountTable, CountError>
where
    I: IntoIterator<Item = Sentence>,
{
    if memory_budget < MIN_MEMORY_BUDGET {
        return Err(CountError::BudgetBelowFloor {
            budget: memory_budget,
        });
    }
    count_with_spill_threshold(sentences, order, memory_budget as usize)
}

// Separated so tests can force spills with tiny thresholds.
pub(crate) fn count_with_spill_threshold<I>(
    sentences: I,
    order: usize,
    spill_threshold: usize,
) -> Result<NGramCountTable, CountError>
where
    I: IntoIterator<Item = Sentence>,
{
    if order == 0 || order > MAX_ORDER {
        return Err(CountError::OrderOutOfRange { order });
    }
    let mut counter = Counter::new(order, spill_threshold);
    let mut key = String::new();
    for sentence in sentences {
        if sentence.is_empty() {
            continue;
        }
        for token in &sentence {
            if token == BOS || token == EOS {
                return Err(CountError::ReservedToken {
                    token: token.clone(),
                });
            }
            if token.chars().any(char::is_whitespace) {
                return Err(CountError::TokenWhitespace {
                    token: token.clone(),
                });
            }
        }
        counter.total_sentences += 1;
        counter.total_tokens += sentence.len() as u64 + 1;
        let mut padded: Vec<&str> = Vec::with_capacity(sentence.len() + 2);
        padded.push(BOS);
        padded.extend(sentence.iter().map(|t| t.as_str()));
        padded.push(EOS);
        // Predicted positions are 1..=N+1; the bare <s> window is excluded.
        for t in 1..padded.len() {
            for m in 1..=order.min(t + 1) {
                key.clear();
                for (i, tok) in padded[t + 1 - m..=t].iter().enumerate() {
                    if i > 0 {
                        key.push(' ');
                    }
                    key.push_str(tok);
                }
                counter.add(m, &key)?;
            }
        }
    }
    counter.finish()
}

struct Counter {
    order: usize,
    maps: Vec<HashMap<Box<str>, u64>>,
    approx_bytes: usize,
    spill_threshold: usize,
    tmp: Option<tempfile::TempDir>,
    runs: Vec<PathBuf>,
    total_sentences: u64,
    total_tokens: u64,
}

impl Counter {
    fn new(order: usize, spill_threshold: usize) -> Counter {
        Counter {
            order,
            maps: (0..order).map(|_| HashMap::new()).collect(),
            approx_bytes: 0,
            spill_threshold,
            tmp: None,
            runs: Vec::new(),
            total_sentences: 0,
            total_tokens: 0,
        }
    }

    fn add(&mut self, m: usize, key: &str) -> Result<(), CountError> {
        match self.maps[m - 1].get_mut(key) {
            Some(count) => *count += 1,
            None => {
                self.approx_bytes += key.len() + ENTRY_OVERHEAD;
                self.maps[m - 1].insert(Box::from(key), 1);
            }
        }
        if self.approx_bytes >= self.spill_threshold {
            self.spill()?;
        }
        Ok(())
    }

    fn spill_dir(&mut self) -> Result<&tempfile::TempDir, CountError> {
        if self.tmp.is_none() {
            self.tmp = Some(tempfile::tempdir().map_err(CountError::TempDir)?);
        }
        Ok(self.tmp.as_ref().unwrap())
    }

    fn spill(&mut self) -> Result<(), CountError> {
        let run_idx = self.runs.len();
        let path = self.spill_dir()?.path().join(format!("run-{run_idx}.tsv"));
        let dir = path.parent().unwrap().to_path_buf();
        let io_err = |source| CountError::Spill {
            dir: dir.clone(),
            source,
        };

        let mut entries: Vec<(usize, Box<str>, u64)> = Vec::new();
        for (idx, map) in self.maps.iter_mut().enumerate() {
            entries.extend(map.drain().map(|(k, c)| (idx + 1, k, c)));
        }
        entries.sort_unstable_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));

        let file = std::fs::File::create(&path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        for (m, key, count) in entries {
            writeln!(w, "{m}\t{key}\t{count}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        self.runs.push(path);
        self.approx_bytes = 0;
        Ok(())
    }

    fn finish(mut self) -> Result<NGramCountTable, CountError> {
        let mut levels: Vec<BTreeMap<Box<str>, u64>> = Vec::with_capacity(self.order);
        if self.runs.is_empty() {
            for map in self.maps {
                levels.push(map.into_iter().collect());
            }
        } else {
            if self.maps.iter().any(|m| !m.is_empty()) {
                self.spill()?;
            }
            levels = merge_runs(self.order, &self.runs).map_err(|source| CountError::Spill {
                dir: self.tmp.as_ref().unwrap().path().to_path_buf(),
                source,
            })?;
        }
        // Dropping `tmp` removes the spill directory.
        Ok(NGramCountTable {
            levels,
            total_sentences: self.total_sentences,
            total_tokens: self.total_tokens,
        })
    }
}

fn merge_runs(
    order: usize,
    runs: &[PathBuf],
) -> Result<Vec<BTreeMap<Box<str>, u64>>, std::io::Error> {
    fn parse(line: &str) -> std::io::Result<(usize, Box<str>, u64)> {
        let bad = || std::io::Error::new(std::io::ErrorKind::InvalidData, "malformed spill line");
        let mut parts = line.splitn(3, '\t');
        let m = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let key = parts.next().ok_or_else(bad)?;
        let count = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        Ok((m, Box::from(key), count))
    }

    let mut readers: Vec<_> = Vec::with_capacity(runs.len());
    for path in runs {
        readers.push(BufReader::new(std::fs::File::open(path)?).lines());
    }

    let mut heap = BinaryHeap::new();
    for (idx, reader) in readers.iter_mut().enumerate() {
        if let Some(line) = reader.next() {
            let (m, key, count) = parse(&line?)?;
            heap.push(Reverse((m, key, count, idx)));
        }
    }

    let mut levels: Vec<BTreeMap<Box<str>, u64>> = (0..order).map(|_| BTreeMap::new()).collect();
    let mut current: Option<(usize, Box<str>, u64)> = None;
    while let Some(Reverse((m, key, count, idx))) = heap.pop() {
        match &mut current {
            Some((cm, ckey, ccount)) if *cm == m && **ckey == *key => *ccount += count,
            _ => {
                if let Some((cm, ckey, ccount)) = current.take() {
                    levels[cm - 1].insert(ckey, ccount);
                }
                current = Some((m, key, count));
            }
        }
        if let Some(line) = readers[idx].next() {
            let (m, key, count) = parse(&line?)?;
            heap.push(Reverse((m, key, count, idx)));
        }
    }
    if let Some((cm, ckey, ccount)) = current {
        levels[cm - 1].insert(ckey, ccount);
    }
    Ok(levels)
}

/// Keeps each m-gram iff its count reaches `cfg.min_count[m]`. Counts of
/// retained entries are unchanged; corpus totals carry over untouched.
///
/// If a retained m-gram's (m−1)-gram context fell below its own threshold,
/// the context is restored with its raw count: downstream estimation and the
/// ARPA format both require every entry's context to exist. This only fires
/// when a lower order has a stricter threshold than a higher one.
pub fn apply_thresholds(table: &NGramCountTable, cfg: &ThresholdConfig) -> NGramCountTable {
    let mut levels: Vec<BTreeMap<Box<str>, u64>> = table
        .levels
        .iter()
        .enumerate()
        .map(|(idx, level)| {
            let min = cfg.min_count_for(idx + 1);
            level
                .iter()
                .filter(|(_, &c)| c >= min)
                .map(|(k, &c)| (k.clone(), c))
                .collect()
        })
        .collect();
    for m in (2..=table.order()).rev() {
        let mut restore: Vec<Box<str>> = Vec::new();
        for key in levels[m - 1].keys() {
            let context = &key[..key.rfind(' ').expect("m-gram key has spaces")];
            if context != BOS && !levels[m - 2].contains_key(context) {
                restore.push(Box::from(context));
            }
        }
        for context in restore {
            if let Some(&count) = table.levels[m - 2].get(&context) {
                levels[m - 2].insert(context, count);
            }
        }
    }
    NGramCountTable {
        levels,
        total_sentences: table.total_sentences,
        total_tokens: table.total_tokens,
    }
}
