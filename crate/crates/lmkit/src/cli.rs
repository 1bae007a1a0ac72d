//! Command-line front end: wires the library modules into subcommands, maps
//! failures to exit codes (0 success, 1 usage, 2 data), and emits
//! machine-readable results on request.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::arpa::{read_arpa, write_arpa};
use crate::corpus::{
    filter_sentence, load_lexicon, segment_fmm, FilterDecision, Lexicon, LexiconColumns, Sentence,
};
use crate::counts::{apply_thresholds, count_ngrams, NGramCountTable, ThresholdConfig};
use crate::estimate::{estimate_model, DiscountSpec, SmoothingConfig, SmoothingMethod};
use crate::evaluation::perplexity;
use crate::keyword::{augment_keywords, KeywordSpec, DEFAULT_MAX_DUP};
use crate::merge::{
    export_static, mixture_perplexity, optimize_weights_bo, optimize_weights_em, BoConfig,
    InterpolationWeights,
};
use crate::model::BackoffModel;
use crate::prune::{prune, PruneThreshold};

#[derive(Debug)]
enum CliError {
    /// Bad invocation: flags, config values, parameter combinations.
    Usage(String),
    /// Bad world: unreadable files, malformed inputs, failed computation.
    Data(String),
}

fn data(err: impl std::fmt::Display) -> CliError {
    CliError::Data(err.to_string())
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser)]
#[command(
    name = "lmkit",
    version,
    about = "n-gram language model toolkit",
    max_term_width = 100
)]
struct Cli {
    /// Print machine-readable JSON results on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// TOML file supplying defaults for any flag; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Cap worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter raw text by lexicon coverage and segment it into tokens.
    Segment(SegmentArgs),
    /// Count n-grams in a segmented corpus under a memory budget.
    Count(CountArgs),
    /// Full training pipeline: (segment) -> count -> threshold -> estimate -> ARPA.
    Train(TrainArgs),
    /// Shrink an ARPA model by relative-entropy pruning.
    Prune(PruneArgs),
    /// Score a segmented corpus with an ARPA model.
    Ppl(PplArgs),
    /// Search mixture weights for several models against validation text.
    MergeOptimize(MergeOptimizeArgs),
    /// Collapse several models into one static ARPA mixture.
    MergeExport(MergeExportArgs),
    /// Duplicate or remove sentences to hit keyword frequency targets.
    KeywordAugment(KeywordAugmentArgs),
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long, value_name = "FILE")]
    lexicon: Option<PathBuf>,
    /// Treat each lexicon line as one entry instead of word + pronunciation.
    #[arg(long)]
    word_only: bool,
    /// Raw UTF-8 text, one sentence per line.
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    /// Segmented corpus: one sentence per line, tokens space-separated.
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    #[arg(long)]
    order: Option<usize>,
    /// Bytes, with optional B/KiB/MiB/GiB suffix (min 16MiB).
    #[arg(long, value_name = "SIZE")]
    memory_budget: Option<String>,
    /// Per-order minimum counts, e.g. "1,4,4"; omitted = keep everything.
    #[arg(long, value_name = "LIST")]
    min_count: Option<String>,
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// With --lexicon: raw text to filter and segment. Without: a segmented
    /// corpus.
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    word_only: bool,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long, value_name = "SIZE")]
    memory_budget: Option<String>,
    #[arg(long, value_name = "LIST")]
    min_count: Option<String>,
    /// "auto" or one value per order in (0,1), e.g. "0.5,0.5,0.5".
    #[arg(long, value_name = "SPEC")]
    discount: Option<String>,
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    theta: Option<f64>,
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PplArgs {
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Segmented corpus to score.
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct MergeOptimizeArgs {
    /// Comma-separated ARPA paths (at least two).
    #[arg(long, value_delimiter = ',', value_name = "FILES")]
    models: Vec<PathBuf>,
    #[arg(long, value_name = "FILE")]
    validation: Option<PathBuf>,
    /// "em" (convex baseline) or "bo" (Bayesian optimization).
    #[arg(long)]
    optimizer: Option<String>,
    /// EM convergence tolerance on weight change.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Total objective evaluations for bo.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    init_points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write every bo evaluation as a JSON line.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct MergeExportArgs {
    #[arg(long, value_delimiter = ',', value_name = "FILES")]
    models: Vec<PathBuf>,
    /// Comma-separated weights, one per model, summing to 1.
    #[arg(long, value_name = "LIST")]
    weights: Option<String>,
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct KeywordAugmentArgs {
    /// Segmented corpus to reshape.
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    /// Spec file: "keyword<TAB>target_count" per line.
    #[arg(long, value_name = "FILE")]
    keywords: Option<PathBuf>,
    #[arg(long)]
    max_dup: Option<usize>,
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

/// Config-file mirror of the flags; any field may be omitted.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    lexicon: Option<PathBuf>,
    word_only: Option<bool>,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    order: Option<usize>,
    memory_budget: Option<String>,
    min_count: Option<String>,
    discount: Option<String>,
    theta: Option<f64>,
    model: Option<PathBuf>,
    models: Option<Vec<PathBuf>>,
    validation: Option<PathBuf>,
    weights: Option<String>,
    optimizer: Option<String>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    budget: Option<usize>,
    init_points: Option<usize>,
    seed: Option<u64>,
    trace: Option<PathBuf>,
    keywords: Option<PathBuf>,
    max_dup: Option<usize>,
}

fn load_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn require<T>(flag: Option<T>, fallback: Option<T>, name: &str) -> Result<T, CliError> {
    flag.or(fallback)
        .ok_or_else(|| usage(format!("missing --{name} (flag or config)")))
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // Ignore failure: the global pool may already be initialized.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => FileConfig::default(),
    };
    let json = cli.json;
    match cli.command {
        Command::Segment(args) => cmd_segment(args, cfg, json),
        Command::Count(args) => cmd_count(args, cfg, json),
        Command::Train(args) => cmd_train(args, cfg, json),
        Command::Prune(args) => cmd_prune(args, cfg, json),
        Command::Ppl(args) => cmd_ppl(args, cfg, json),
        Command::MergeOptimize(args) => cmd_merge_optimize(args, cfg, json),
        Command::MergeExport(args) => cmd_merge_export(args, cfg, json),
        Command::KeywordAugment(args) => cmd_keyword_augment(args, cfg, json),
    }
}

/// One JSON line per pipeline stage on stderr, with wall-clock timing.
fn log_stage(stage: &str, started: Instant, detail: serde_json::Value) {
    let mut line = json!({
        "stage": stage,
        "elapsed_ms": started.elapsed().as_millis() as u64,
    });
    if let (Some(obj), Some(extra)) = (line.as_object_mut(), detail.as_object()) {
        for (k, v) in extra {
            obj.insert(k.clone(), v.clone());
        }
    }
    eprintln!("{line}");
}

fn emit(json: bool, value: serde_json::Value, human: String) {
    if json {
        println!("{value}");
    } else {
        println!("{human}");
    }
}

fn parse_memory(text: &str) -> Result<u64, CliError> {
    let text = text.trim();
    let (digits, multiplier) = if let Some(d) = text.strip_suffix("GiB") {
        (d, 1u64 << 30)
    } else if let Some(d) = text.strip_suffix("MiB") {
        (d, 1u64 << 20)
    } else if let Some(d) = text.strip_suffix("KiB") {
        (d, 1u64 << 10)
    } else if let Some(d) = text.strip_suffix('B') {
        (d, 1)
    } else {
        (text, 1)
    };
    let n: u64 = digits
        .trim()
        .parse()
        .map_err(|_| usage(format!("bad memory size {text:?} (e.g. 64MiB)")))?;
    n.checked_mul(multiplier)
        .ok_or_else(|| usage(format!("memory size {text:?} overflows")))
}

fn parse_f64_list(text: &str, name: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|_| usage(format!("bad --{name} {text:?}: expected comma-separated numbers")))
}

fn parse_min_count(text: &str, order: usize) -> Result<ThresholdConfig, CliError> {
    let values: Vec<u64> = text
        .split(',')
        .map(|v| v.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("bad --min-count {text:?}: expected positive integers")))?;
    if values.len() != order || values.iter().any(|&v| v == 0) {
        return Err(usage(format!(
            "--min-count needs {order} positive values, got {text:?}"
        )));
    }
    let map: BTreeMap<usize, u64> = values.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect();
    Ok(ThresholdConfig::new(map))
}

fn parse_discount(text: &str, order: usize) -> Result<DiscountSpec, CliError> {
    if text.trim() == "auto" {
        return Ok(DiscountSpec::Auto);
    }
    let values = parse_f64_list(text, "discount")?;
    if values.len() != order || values.iter().any(|&d| !(0.0 < d && d < 1.0)) {
        return Err(usage(format!(
            "--discount needs \"auto\" or {order} values in (0,1), got {text:?}"
        )));
    }
    Ok(DiscountSpec::Fixed(values))
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn read_token_lines(path: &Path) -> Result<Vec<Sentence>, CliError> {
    Ok(read_lines(path)?
        .iter()
        .map(|line| line.split_whitespace().map(str::to_string).collect())
        .collect())
}

fn write_token_lines(path: &Path, corpus: &[Sentence]) -> Result<(), CliError> {
    let file = fs::File::create(path)
        .map_err(|e| data(format!("cannot create {}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    for sentence in corpus {
        writeln!(out, "{}", sentence.join(" "))
            .map_err(|e| data(format!("cannot write {}: {e}", path.display())))?;
    }
    out.flush()
        .map_err(|e| data(format!("cannot write {}: {e}", path.display())))
}

fn load_lexicon_stage(
    path: &Path,
    word_only: bool,
) -> Result<Lexicon, CliError> {
    let started = Instant::now();
    let columns = if word_only {
        LexiconColumns::WordOnly
    } else {
        LexiconColumns::WordPlusPronunciation
    };
    let lexicon = load_lexicon(path, columns).map_err(data)?;
    log_stage("lexicon", started, json!({ "entries": lexicon.len() }));
    Ok(lexicon)
}

/// Filter + segment raw lines; returns (corpus, kept, dropped).
fn segment_corpus(raw: &[String], lexicon: &Lexicon) -> (Vec<Sentence>, usize, usize) {
    let mut corpus = Vec::with_capacity(raw.len());
    let mut dropped = 0usize;
    for line in raw {
        match filter_sentence(line, lexicon) {
            FilterDecision::Keep => corpus.push(segment_fmm(line, lexicon)),
            FilterDecision::Drop { .. } => dropped += 1,
        }
    }
    let kept = corpus.len();
    (corpus, kept, dropped)
}

fn read_model_stage(path: &Path) -> Result<BackoffModel, CliError> {
    let started = Instant::now();
    let file = fs::File::open(path)
        .map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
    let model = read_arpa(std::io::BufReader::new(file))
        .map_err(|e| data(format!("{}: {e}", path.display())))?;
    log_stage(
        "read-model",
        started,
        json!({ "path": path.display().to_string(), "order": model.order() }),
    );
    Ok(model)
}

fn write_model_stage(model: &BackoffModel, path: &Path) -> Result<u64, CliError> {
    let started = Instant::now();
    let file = fs::File::create(path)
        .map_err(|e| data(format!("cannot create {}: {e}", path.display())))?;
    let bytes = write_arpa(model, BufWriter::new(file))
        .map_err(|e| data(format!("{}: {e}", path.display())))?;
    log_stage(
        "write-model",
        started,
        json!({ "path": path.display().to_string(), "bytes": bytes }),
    );
    Ok(bytes)
}

fn entry_counts(model: &BackoffModel) -> Vec<usize> {
    (1..=model.order()).map(|m| model.entry_count(m)).collect()
}

fn table_counts(table: &NGramCountTable) -> Vec<usize> {
    (1..=table.order()).map(|m| table.level(m).len()).collect()
}

const DEFAULT_MEMORY_BUDGET: &str = "256MiB";

fn cmd_segment(args: SegmentArgs, cfg: FileConfig, json: bool) -> Result<(), CliError> {
    let lexicon_path = require(args.lexicon, cfg.lexicon, "lexicon")?;
    let input = require(args.input, cfg.input, "input")?;
    let output = require(args.output, cfg.output, "output")?;
    let word_only = args.word_only || cfg.word_only.unwrap_or(false);

    let lexicon = load_lexicon_stage(&lexicon_path, word_only)?;
    let started = Instant::now();
    let raw = read_lines(&input)?;
    let (corpus, kept, dropped) = segment_corpus(&raw, &lexicon);
    let tokens: usize = corpus.iter().map(Vec::len).sum();
    let unk_tokens: usize = corpus
        .iter()
        .map(|s| s.iter().filter(|t| t.as_str() == crate::UNK).count())
        .sum();
    write_token_lines(&output, &corpus)?;
    log_stage(
        "segment",
        started,
        json!({ "kept": kept, "dropped": dropped, "tokens": tokens }),
    );
    emit(
        json,
        json!({
            "sentences_in": raw.len(),
            "kept": kept,
            "dropped": dropped,
            "tokens": tokens,
            "unk_tokens": unk_tokens,
            "output": output.display().to_string(),
        }),
        format!(
            "segmented {kept} of {} sentences ({dropped} dropped, {tokens} tokens) -> {}",
            raw.len(),
            output.display()
        ),
    );
    Ok(())
}

/// Shared by `count` and `train`: count under the budget, then threshold.
fn count_stage(
    corpus: Vec<Sentence>,
    order: usize,
    budget: u64,
    min_count: Option<&str>,
) -> Result<NGramCountTable, CliError> {
    let started = Instant::now();
    let thresholds = match min_count {
        Some(text) => Some(parse_min_count(text, order)?),
        None => None,
    };
    let table = count_ngrams(corpus, order, budget).map_err(|e| match e {
        crate::counts::CountError::BudgetBelowFloor { .. }
        | crate::counts::CountError::OrderOutOfRange { .. } => usage(e.to_string()),
        other => data(other),
    })?;
    log_stage(
        "count",
        started,
        json!({ "entries": table_counts(&table), "total_tokens": table.total_tokens() }),
    );
    match thresholds {
        Some(cfg) => {
            let started = Instant::now();
            let kept = apply_thresholds(&table, &cfg);
            log_stage(
                "threshold",
                started,
                json!({ "entries": table_counts(&kept) }),
            );
            Ok(kept)
        }
        None => Ok(table),
    }
}

fn cmd_count(args: CountArgs, cfg: FileConfig, json: bool) -> Result<(), CliError> {
    let input = require(args.input, cfg.input, "input")?;
    let order = require(args.order, cfg.order, "order")?;
    let output = require(args.output, cfg.output, "output")?;
    let budget = parse_memory(
        &args
            .memory_budget
            .or(cfg.memory_budget)
            .unwrap_or_else(|| DEFAULT_MEMORY_BUDGET.into()),
    )?;
    let min_count = args.min_count.or(cfg.min_count);

    let corpus = read_token_lines(&input)?;
    let table = count_stage(corpus, order, budget, min_count.as_deref())?;
    let file = fs::File::create(&output)
        .map_err(|e| data(format!("cannot create {}: {e}", output.display())))?;
    table
        .write(BufWriter::new(file))
        .map_err(|e| data(format!("cannot write {}: {e}", output.display())))?;
    emit(
        json,
        json!({
            "order": table.order(),
            "total_sentences": table.total_sentences(),
            "total_tokens": table.total_tokens(),
            "entries": table_counts(&table),
            "output": output.display().to_string(),
        }),
        format!(
            "counted {:?} n-grams over {} tokens -> {}",
            table_counts(&table),
            table.total_tokens(),
            output.display()
        ),
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, cfg: FileConfig, json: bool) -> Result<(), CliError> {
    let input = require(args.input, cfg.input, "input")?;
    let order = require(args.order, cfg.order, "order")?;
    let output = require(args.output, cfg.output, "output")?;
    let budget = parse_memory(
        &args
            .memory_budget
            .or(cfg.memory_budget)
            .unwrap_or_else(|| DEFAULT_MEMORY_BUDGET.into()),
    )?;
    let min_count = args.min_count.or(cfg.min_count);
    let discount = parse_discount(
        args.discount.or(cfg.discount).as_deref().unwrap_or("auto"),
        order,
    )?;
    let lexicon_path = args.lexicon.or(cfg.lexicon);
    let word_only = args.word_only || cfg.word_only.unwrap_or(false);

    let corpus = match lexicon_path {
        Some(path) => {
            let lexicon = load_lexicon_stage(&path, word_only)?;
            let started = Instant::now();
            let raw = read_lines(&input)?;
            let (corpus, kept, dropped) = segment_corpus(&raw, &lexicon);
            log_stage(
                "segment",
                started,
                json!({ "kept": kept, "dropped": dropped }),
            );
            corpus
        }
        None => read_token_lines(&input)?,
    };
    let table = count_stage(corpus, order, budget, min_count.as_deref())?;

    let started = Instant::now();
    let smoothing = SmoothingConfig {
        method: SmoothingMethod::AbsoluteDiscountInterpolated,
        discount,
    };
    let model = estimate_model(&table, &smoothing).map_err(data)?;
    log_stage(
        "estimate",
        started,
        json!({ "entries": entry_counts(&model) }),
    );
    let bytes = write_model_stage(&model, &output)?;
    emit(
        json,
        json!({
            "order": model.order(),
            "entries": entry_counts(&model),
            "bytes": bytes,
            "output": output.display().to_string(),
        }),
        format!(
            "trained order-{} model, entries {:?} -> {}",
            model.order(),
            entry_counts(&model),
            output.display()
        ),
    );
    Ok(())
}

fn cmd_prune(args: PruneArgs, cfg: FileConfig, json: bool) -> Result<(), CliError> {
    let model_path = require(args.model, cfg.model, "model")?;
    let theta = require(args.theta, cfg.theta, "theta")?;
    let output = require(args.output, cfg.output, "output")?;

    let threshold = PruneThreshold::new(theta).map_err(|e| usage(e.to_string()))?;
    let model = read_model_stage(&model_path)?;
    let before = entry_counts(&model);
    let started = Instant::now();
    let pruned = prune(&model, threshold).map_err(data)?;
    let after = entry_counts(&pruned);
    log_stage(
        "prune",
        started,
        json!({ "theta": theta, "entries_before": before, "entries_after": after }),
    );
    write_model_stage(&pruned, &output)?;
    emit(
        json,
        json!({
            "theta": theta,
            "entries_before": before,
            "entries_after": after,
            "output": output.display().to_string(),
        }),
        format!("pruned {before:?} -> {after:?} at theta {theta} -> {}", output.display()),
    );
    Ok(())
}

fn cmd_ppl(args: PplArgs, cfg: FileConfig, json: bool) -> Result<(), CliError> {
    let model_path = require(args.model, cfg.model, "model")?;
    let input = require(args.input, cfg.input, "input")?;

    let model = read_model_stage(&model_path)?;
    let corpus = read_token_lines(&input)?;
    let started = Instant::now();
    let report = perplexity(&model, &corpus).map_err(data)?;
    log_stage(
        "evaluate",
        started,
        json!({ "tokens": report.tokens, "perplexity": report.perplexity }),
    );
    emit(
        json,
        serde_json::to_value(&report).expect("report serializes"),
        format!(
            "perplexity {:.4} over {} tokens ({} OOV)",
            report.perplexity, report.tokens, report.oov_tokens
        ),
    );
    Ok(())
}

fn read_models(paths: &[PathBuf]) -> Result<Vec<BackoffModel>, CliError> {
    paths.iter().map(|p| read_model_stage(p)).collect()
}

fn cmd_merge_optimize(
    args: MergeOptimizeArgs,
    cfg: FileConfig,
    json: bool,
) -> Result<(), CliError> {
    let model_paths = if args.models.is_empty() {
        cfg.models.unwrap_or_default()
    } else {
        args.models
    };
    if model_paths.len() < 2 {
        return Err(usage("merge-optimize needs at least two --models"));
    }
    let validation_path = require(args.validation, cfg.validation, "validation")?;
    let optimizer = args
        .optimizer
        .or(cfg.optimizer)
        .unwrap_or_else(|| "bo".into());

    let models = read_models(&model_paths)?;
    let validation = read_token_lines(&validation_path)?;
    let started = Instant::now();
    let k = models.len();

    let (weights, detail) = match optimizer.as_str() {
        "em" => {
            if args.trace.is_some() {
                return Err(usage("--trace is only produced by the bo optimizer"));
            }
            let tol = args.tol.or(cfg.tol).unwrap_or(1e-6);
            let max_iter = args.max_iter.or(cfg.max_iter).unwrap_or(200);
            let result = optimize_weights_em(&models, &validation, tol, max_iter).map_err(data)?;
            if !result.converged {
                eprintln!(
                    "warning: EM stopped after {} iterations without reaching tol {tol}",
                    result.iterations
                );
            }
            let detail = json!({
                "iterations": result.iterations,
                "converged": result.converged,
            });
            (result.weights, detail)
        }
        "bo" => {
            let budget = args.budget.or(cfg.budget).unwrap_or(50);
            // Default design size: a fifth of the budget, at least k+1.
            let init_points = args
                .init_points
                .or(cfg.init_points)
                .unwrap_or_else(|| (budget / 5).max(k + 1));
            let seed = args.seed.or(cfg.seed).unwrap_or(0);
            let bo = BoConfig {
                budget,
                init_points,
                seed,
            };
            let (weights, trace) = optimize_weights_bo(&models, &validation, &bo).map_err(|e| {
                match e {
                    crate::merge::MergeError::BudgetTooSmall { .. } => usage(e.to_string()),
                    other => data(other),
                }
            })?;
            if let Some(path) = args.trace.or(cfg.trace) {
                let file = fs::File::create(&path)
                    .map_err(|e| data(format!("cannot create {}: {e}", path.display())))?;
                let mut out = BufWriter::new(file);
                for point in &trace {
                    writeln!(
                        out,
                        "{}",
                        serde_json::to_string(point).expect("trace point serializes")
                    )
                    .map_err(|e| data(format!("cannot write {}: {e}", path.display())))?;
                }
                out.flush()
                    .map_err(|e| data(format!("cannot write {}: {e}", path.display())))?;
            }
            let detail = json!({ "evaluations": trace.len(), "seed": seed });
            (weights, detail)
        }
        other => return Err(usage(format!("unknown --optimizer {other:?} (em or bo)"))),
    };

    let report = mixture_perplexity(&models, &weights, &validation).map_err(data)?;
    log_stage(
        "optimize",
        started,
        json!({ "optimizer": optimizer, "perplexity": report.perplexity }),
    );
    let mut result = json!({
        "optimizer": optimizer,
        "weights": weights.as_slice(),
        "perplexity": report.perplexity,
    });
    if let (Some(obj), Some(extra)) = (result.as_object_mut(), detail.as_object()) {
        for (key, value) in extra {
            obj.insert(key.clone(), value.clone());
        }
    }
    emit(
        json,
        result,
        format!(
            "{optimizer} weights {:?}, validation perplexity {:.4}",
            weights.as_slice(),
            report.perplexity
        ),
    );
    Ok(())
}

fn cmd_merge_export(args: MergeExportArgs, cfg: FileConfig, json: bool) -> Result<(), CliError> {
    let model_paths = if args.models.is_empty() {
        cfg.models.unwrap_or_default()
    } else {
        args.models
    };
    if model_paths.is_empty() {
        return Err(usage("merge-export needs --models"));
    }
    let weights_text = require(args.weights, cfg.weights, "weights")?;
    let output = require(args.output, cfg.output, "output")?;
    let values = parse_f64_list(&weights_text, "weights")?;
    if values.len() != model_paths.len() {
        return Err(usage(format!(
            "{} models but {} weights",
            model_paths.len(),
            values.len()
        )));
    }
    let weights = InterpolationWeights::new(values).map_err(|e| usage(e.to_string()))?;

    let models = read_models(&model_paths)?;
    let started = Instant::now();
    let merged = export_static(&models, &weights).map_err(data)?;
    log_stage(
        "merge-export",
        started,
        json!({ "entries": entry_counts(&merged) }),
    );
    write_model_stage(&merged, &output)?;
    emit(
        json,
        json!({
            "models": models.len(),
            "order": merged.order(),
            "entries": entry_counts(&merged),
            "output": output.display().to_string(),
        }),
        format!(
            "merged {} models into order-{} ARPA -> {}",
            models.len(),
            merged.order(),
            output.display()
        ),
    );
    Ok(())
}

fn cmd_keyword_augment(
    args: KeywordAugmentArgs,
    cfg: FileConfig,
    json: bool,
) -> Result<(), CliError> {
    let input = require(args.input, cfg.input, "input")?;
    let spec_path = require(args.keywords, cfg.keywords, "keywords")?;
    let output = require(args.output, cfg.output, "output")?;
    let max_dup = args.max_dup.or(cfg.max_dup).unwrap_or(DEFAULT_MAX_DUP);

    let spec_text = fs::read_to_string(&spec_path)
        .map_err(|e| data(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec = KeywordSpec::parse(&spec_text)
        .map_err(|e| data(format!("{}: {e}", spec_path.display())))?;
    let corpus = read_token_lines(&input)?;
    let sentences_in = corpus.len();
    let started = Instant::now();
    let (augmented, report) = augment_keywords(corpus, &spec, max_dup);
    log_stage(
        "keyword-augment",
        started,
        json!({
            "sentences_in": sentences_in,
            "sentences_out": augmented.len(),
            "keywords": report.entries.len(),
        }),
    );
    write_token_lines(&output, &augmented)?;
    let unsatisfied: Vec<&str> = report
        .entries
        .iter()
        .filter(|e| e.unsatisfiable)
        .map(|e| e.keyword.as_str())
        .collect();
    emit(
        json,
        json!({
            "sentences_in": sentences_in,
            "sentences_out": augmented.len(),
            "report": serde_json::to_value(&report.entries).expect("report serializes"),
            "output": output.display().to_string(),
        }),
        format!(
            "adjusted {} keywords: {} -> {} sentences{} -> {}",
            report.entries.len(),
            sentences_in,
            augmented.len(),
            if unsatisfied.is_empty() {
                String::new()
            } else {
                format!(" (unsatisfiable: {})", unsatisfied.join(", "))
            },
            output.display()
        ),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn run_cli(args: &[&str]) -> i32 {
        let argv: Vec<String> = std::iter::once("lmkit".to_string())
            .chain(args.iter().map(|s| s.to_string()))
            .collect();
        run(argv)
    }

    fn p(dir: &tempfile::TempDir, name: &str) -> PathBuf {
        dir.path().join(name)
    }

    fn ps(path: &Path) -> String {
        path.display().to_string()
    }

    /// Deterministic segmented corpus: token lines over a small vocabulary.
    fn write_corpus(path: &Path, salt: u64, lines: u64) {
        let mut text = String::new();
        for i in 0..lines {
            let len = i % 6 + 1;
            let words: Vec<String> = (0..len)
                .map(|j| format!("w{}", (i * salt + j * 3 + 1) % 9))
                .collect();
            text.push_str(&words.join(" "));
            text.push('\n');
        }
        fs::write(path, text).unwrap();
    }

    #[test]
    fn memory_and_list_parsing() {
        assert_eq!(parse_memory("64MiB").unwrap(), 64 << 20);
        assert_eq!(parse_memory("1GiB").unwrap(), 1 << 30);
        assert_eq!(parse_memory("16KiB").unwrap(), 16 << 10);
        assert_eq!(parse_memory("123B").unwrap(), 123);
        assert_eq!(parse_memory("123").unwrap(), 123);
        assert!(parse_memory("lots").is_err());
        assert!(parse_memory("12Mb").is_err());

        let t = parse_min_count("1,4,4", 3).unwrap();
        assert_eq!(t.min_count_for(2), 4);
        assert!(parse_min_count("1,4", 3).is_err());
        assert!(parse_min_count("1,0,4", 3).is_err());

        assert_eq!(parse_discount("auto", 3).unwrap(), DiscountSpec::Auto);
        assert!(matches!(
            parse_discount("0.5,0.4", 2).unwrap(),
            DiscountSpec::Fixed(_)
        ));
        assert!(parse_discount("0.5", 2).is_err());
        assert!(parse_discount("0.5,1.5", 2).is_err());
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run_cli(&["no-such-command"]), 1);
        assert_eq!(run_cli(&["train", "--no-such-flag"]), 1);
        assert_eq!(run_cli(&["train"]), 1, "missing required values");
        assert_eq!(run_cli(&["--help"]), 0);

        let dir = tempfile::tempdir().unwrap();
        let seg = p(&dir, "seg.txt");
        write_corpus(&seg, 7, 30);
        let out = p(&dir, "out.arpa");
        assert_eq!(
            run_cli(&[
                "train", "--input", &ps(&seg), "--order", "2",
                "--min-count", "1", "--output", &ps(&out),
            ]),
            1,
            "min-count arity mismatch"
        );
        assert_eq!(
            run_cli(&[
                "count", "--input", &ps(&seg), "--order", "2",
                "--memory-budget", "1KiB", "--output", &ps(&out),
            ]),
            1,
            "budget below the floor"
        );
        assert_eq!(
            run_cli(&[
                "prune", "--model", &ps(&out), "--theta", "-0.5",
                "--output", &ps(&out),
            ]),
            1,
            "negative theta"
        );
    }

    #[test]
    fn data_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let out = p(&dir, "out");
        assert_eq!(
            run_cli(&[
                "count", "--input", "/nonexistent/corpus.txt", "--order", "2",
                "--output", &ps(&out),
            ]),
            2
        );

        let bad = p(&dir, "bad.txt");
        fs::write(&bad, "a <s> b\n").unwrap();
        assert_eq!(
            run_cli(&["count", "--input", &ps(&bad), "--order", "2", "--output", &ps(&out)]),
            2,
            "reserved token in the corpus"
        );

        let garbage = p(&dir, "garbage.arpa");
        fs::write(&garbage, "not an arpa file\n").unwrap();
        assert_eq!(
            run_cli(&["ppl", "--model", &ps(&garbage), "--input", &ps(&bad)]),
            2
        );
    }

    #[test]
    fn segment_pipeline_runs() {
        let dir = tempfile::tempdir().unwrap();
        let lex = p(&dir, "lexicon.txt");
        // word + pronunciation columns; "ab" outranks "a"+"b" under FMM.
        fs::write(&lex, "ab A B\na A\nb B\nc C\n").unwrap();
        let raw = p(&dir, "raw.txt");
        fs::write(&raw, "abc ab\ncab\nxyz\n").unwrap();
        let seg = p(&dir, "seg.txt");
        assert_eq!(
            run_cli(&[
                "segment", "--lexicon", &ps(&lex), "--input", &ps(&raw),
                "--output", &ps(&seg),
            ]),
            0
        );
        let text = fs::read_to_string(&seg).unwrap();
        assert_eq!(text, "ab c ab\nc ab\n", "xyz line dropped, FMM greedy");
    }

    #[test]
    fn full_pipeline_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let seg_a = p(&dir, "a.txt");
        let seg_b = p(&dir, "b.txt");
        write_corpus(&seg_a, 7, 60);
        write_corpus(&seg_b, 5, 60);

        let counts = p(&dir, "a.counts");
        assert_eq!(
            run_cli(&[
                "count", "--input", &ps(&seg_a), "--order", "2",
                "--memory-budget", "16MiB", "--min-count", "1,1",
                "--output", &ps(&counts),
            ]),
            0
        );
        assert!(fs::read_to_string(&counts).unwrap().contains('\t'));

        let arpa_a = p(&dir, "a.arpa");
        let arpa_b = p(&dir, "b.arpa");
        for (seg, arpa) in [(&seg_a, &arpa_a), (&seg_b, &arpa_b)] {
            assert_eq!(
                run_cli(&[
                    "train", "--input", &ps(seg), "--order", "2",
                    "--discount", "0.5,0.5", "--output", &ps(arpa),
                ]),
                0
            );
        }
        let model = read_arpa(fs::File::open(&arpa_a).unwrap()).unwrap();
        assert!(model.validate().is_ok());
        assert!(model.normalization_error() < 1e-6);

        let pruned = p(&dir, "a.pruned.arpa");
        assert_eq!(
            run_cli(&[
                "prune", "--model", &ps(&arpa_a), "--theta", "1e-5",
                "--output", &ps(&pruned),
            ]),
            0
        );
        let small = read_arpa(fs::File::open(&pruned).unwrap()).unwrap();
        assert!(small.total_entries() <= model.total_entries());

        assert_eq!(
            run_cli(&["ppl", "--model", &ps(&arpa_a), "--input", &ps(&seg_b), "--json"]),
            0
        );

        let kw = p(&dir, "kw.tsv");
        fs::write(&kw, "w1\t500\nw2 w5\t2\n").unwrap();
        let boosted = p(&dir, "boosted.txt");
        assert_eq!(
            run_cli(&[
                "keyword-augment", "--input", &ps(&seg_a), "--keywords", &ps(&kw),
                "--max-dup", "5", "--output", &ps(&boosted),
            ]),
            0
        );
        assert!(fs::read_to_string(&boosted).unwrap().lines().count() >= 60);

        let trace = p(&dir, "trace.jsonl");
        assert_eq!(
            run_cli(&[
                "merge-optimize", "--models", &format!("{},{}", ps(&arpa_a), ps(&arpa_b)),
                "--validation", &ps(&seg_a), "--optimizer", "bo",
                "--budget", "12", "--init-points", "4", "--seed", "3",
                "--trace", &ps(&trace),
            ]),
            0
        );
        let trace_lines: Vec<String> = fs::read_to_string(&trace)
            .unwrap()
            .lines()
            .map(str::to_string)
            .collect();
        assert_eq!(trace_lines.len(), 12);
        for line in &trace_lines {
            let point: crate::merge::BoTracePoint = serde_json::from_str(line).unwrap();
            assert!(point.ppl.is_finite());
        }

        assert_eq!(
            run_cli(&[
                "merge-optimize", "--models", &format!("{},{}", ps(&arpa_a), ps(&arpa_b)),
                "--validation", &ps(&seg_a), "--optimizer", "em",
            ]),
            0
        );

        let merged = p(&dir, "merged.arpa");
        assert_eq!(
            run_cli(&[
                "merge-export", "--models", &format!("{},{}", ps(&arpa_a), ps(&arpa_b)),
                "--weights", "0.6,0.4", "--output", &ps(&merged),
            ]),
            0
        );
        let mixture = read_arpa(fs::File::open(&merged).unwrap()).unwrap();
        assert!(mixture.validate().is_ok());
        assert!(mixture.normalization_error() < 1e-6);
    }

    #[test]
    fn config_file_supplies_defaults_and_flags_override() {
        let dir = tempfile::tempdir().unwrap();
        let seg = p(&dir, "seg.txt");
        write_corpus(&seg, 7, 40);
        let out3 = p(&dir, "m3.arpa");
        let config = p(&dir, "lmkit.toml");
        fs::write(
            &config,
            format!(
                "input = {:?}\norder = 3\ndiscount = \"0.5,0.5,0.5\"\noutput = {:?}\n",
                ps(&seg),
                ps(&out3),
            ),
        )
        .unwrap();
        assert_eq!(run_cli(&["train", "--config", &ps(&config)]), 0);
        let m3 = read_arpa(fs::File::open(&out3).unwrap()).unwrap();
        assert_eq!(m3.order(), 3);

        // Flag wins over the config value (and needs a matching discount).
        let out2 = p(&dir, "m2.arpa");
        assert_eq!(
            run_cli(&[
                "train", "--config", &ps(&config), "--order", "2",
                "--discount", "auto", "--output", &ps(&out2),
            ]),
            0
        );
        let m2 = read_arpa(fs::File::open(&out2).unwrap()).unwrap();
        assert_eq!(m2.order(), 2);

        let bad = p(&dir, "bad.toml");
        fs::write(&bad, "orderr = 3\n").unwrap();
        assert_eq!(
            run_cli(&["train", "--config", &ps(&bad)]),
            1,
            "unknown config key is a usage error"
        );
    }
}
