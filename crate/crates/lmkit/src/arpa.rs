//! ARPA text serialization: `\data\` header, per-order `\m-grams:` sections,
//! `\end\` terminator. Lines are `log10prob<TAB>tokens[<TAB>log10backoff]`
//! with log values printed to 7 significant digits.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Bound;

use crate::model::{BackoffModel, ProbEntry};

#[derive(Debug, thiserror::Error)]
pub enum ArpaError {
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {kind}")]
    Parse { line: usize, kind: ParseErrorKind },
}

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum ParseErrorKind {
    #[error("expected \\data\\ header")]
    MissingData,
    #[error("malformed ngram count declaration")]
    BadHeader,
    #[error("header orders must be contiguous from 1")]
    NonContiguousOrders,
    #[error("unexpected section or line {found:?}")]
    UnexpectedSection { found: String },
    #[error("malformed entry")]
    BadEntry,
    #[error("non-finite log value")]
    NonFinite,
    #[error("duplicate {order}-gram {key:?}")]
    Duplicate { order: usize, key: String },
    #[error("section {order} has {got} entries but header declared {declared}")]
    CountMismatch {
        order: usize,
        got: usize,
        declared: usize,
    },
    #[error("missing \\end\\")]
    MissingEnd,
}

fn parse_err(line: usize, kind: ParseErrorKind) -> ArpaError {
    ArpaError::Parse { line, kind }
}

/// Formats like C's `printf("%.9g", x)`: 9 significant digits, fixed or
/// scientific depending on magnitude, trailing zeros stripped. Nine digits
/// keep any log10 value down to -99 faithful to within 5e-8.
fn format_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.8e}", x);
    let epos = sci.find('e').expect("scientific format has exponent");
    let exp: i32 = sci[epos + 1..].parse().expect("exponent parses");
    if exp < -4 || exp >= 9 {
        let mantissa = sci[..epos].trim_end_matches('0').trim_end_matches('.');
        let (sign, magnitude) = if exp < 0 { ('-', -exp) } else { ('+', exp) };
        format!("{mantissa}e{sign}{magnitude:02}")
    } else {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string()
        } else {
            fixed
        }
    }
}

struct CountingWriter<W: Write> {
    inner: W,
    bytes: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.bytes += n as u64;
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

// α with log10 weight exactly 0 is only worth writing when the entry heads
// higher-order n-grams; otherwise readers reconstruct it implicitly.
fn heads_higher_order(model: &BackoffModel, m: usize, key: &str) -> bool {
    if m >= model.order() {
        return false;
    }
    let prefix = format!("{key} ");
    model
        .level(m + 1)
        .range::<str, _>((Bound::Included(prefix.as_str()), Bound::Unbounded))
        .next()
        .is_some_and(|(k, _)| k.starts_with(&prefix))
}

/// Writes the model as ARPA text; returns the number of bytes emitted.
/// Output is deterministic: entries are bytewise-sorted within each order.
pub fn write_arpa<W: Write>(model: &BackoffModel, sink: W) -> Result<u64, ArpaError> {
    let mut out = BufWriter::new(CountingWriter {
        inner: sink,
        bytes: 0,
    });
    writeln!(out, "\\data\\")?;
    for m in 1..=model.order() {
        writeln!(out, "ngram {m}={}", model.entry_count(m))?;
    }
    for m in 1..=model.order() {
        writeln!(out, "\n\\{m}-grams:")?;
        for (key, entry) in model.level(m) {
            match entry.log10_backoff {
                Some(b) if b != 0.0 || heads_higher_order(model, m, key) => {
                    writeln!(out, "{}\t{key}\t{}", format_g9(entry.log10_prob), format_g9(b))?
                }
                _ => writeln!(out, "{}\t{key}", format_g9(entry.log10_prob))?,
            }
        }
    }
    writeln!(out, "\n\\end\\")?;
    out.flush()?;
    Ok(out.into_inner().map_err(|e| e.into_error())?.bytes)
}

/// Parses ARPA text. Lines before `\data\` are treated as comments. Section
/// entry counts are validated against the header; duplicates, malformed
/// entries, and a missing `\end\` are reported with their line number.
///
/// A missing backoff field reads as "no weight" (log10 α = 0). Prefix
/// closure is not enforced, since ecosystem files occasionally omit unused
/// contexts; queries treat those like absent backoffs.
pub fn read_arpa<R: Read>(source: R) -> Result<BackoffModel, ArpaError> {
    let reader = BufReader::new(source);
    let mut lines = Vec::new();
    for line in reader.lines() {
        lines.push(line?);
    }

    let mut lineno = 0usize;
    // Preamble: skip until \data\.
    let mut found_data = false;
    while lineno < lines.len() {
        let line = lines[lineno].trim();
        lineno += 1;
        if line == "\\data\\" {
            found_data = true;
            break;
        }
    }
    if !found_data {
        return Err(parse_err(lines.len(), ParseErrorKind::MissingData));
    }

    // Header: ngram m=N declarations until the first section.
    let mut declared: BTreeMap<usize, usize> = BTreeMap::new();
    let mut section: Option<usize> = None;
    while lineno < lines.len() {
        let line = lines[lineno].trim();
        lineno += 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("ngram ") {
            let (m, n) = rest
                .split_once('=')
                .and_then(|(m, n)| Some((m.trim().parse().ok()?, n.trim().parse().ok()?)))
                .ok_or_else(|| parse_err(lineno, ParseErrorKind::BadHeader))?;
            declared.insert(m, n);
        } else if let Some(m) = section_order(line) {
            section = Some(m);
            break;
        } else {
            return Err(parse_err(lineno, ParseErrorKind::BadHeader));
        }
    }
    let order = declared.len();
    if order == 0 || !(1..=order).all(|m| declared.contains_key(&m)) {
        return Err(parse_err(lineno, ParseErrorKind::NonContiguousOrders));
    }
    let mut current = match section {
        Some(1) => 1usize,
        _ => {
            return Err(parse_err(
                lineno,
                ParseErrorKind::UnexpectedSection {
                    found: lines.get(lineno - 1).cloned().unwrap_or_default(),
                },
            ))
        }
    };

    let mut model = BackoffModel::new(order);
    let mut in_section = 0usize;
    let mut ended = false;
    while lineno < lines.len() {
        let line = lines[lineno].trim();
        lineno += 1;
        if line.is_empty() {
            continue;
        }
        if line == "\\end\\" || section_order(line).is_some() {
            let got = in_section;
            let want = declared[&current];
            if got != want {
                return Err(parse_err(
                    lineno,
                    ParseErrorKind::CountMismatch {
                        order: current,
                        got,
                        declared: want,
                    },
                ));
            }
            if line == "\\end\\" {
                if current != order {
                    return Err(parse_err(
                        lineno,
                        ParseErrorKind::UnexpectedSection {
                            found: line.to_string(),
                        },
                    ));
                }
                ended = true;
                break;
            }
            let next = section_order(line).expect("checked above");
            if next != current + 1 || next > order {
                return Err(parse_err(
                    lineno,
                    ParseErrorKind::UnexpectedSection {
                        found: line.to_string(),
                    },
                ));
            }
            current = next;
            in_section = 0;
            continue;
        }

        // Entry line: prob, m tokens, optional backoff.
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || parse_err(lineno, ParseErrorKind::BadEntry);
        if fields.len() != current + 1 && fields.len() != current + 2 {
            return Err(bad());
        }
        let log10_prob: f64 = fields[0].parse().map_err(|_| bad())?;
        let log10_backoff = if fields.len() == current + 2 {
            if current == order {
                return Err(bad());
            }
            Some(fields[current + 1].parse::<f64>().map_err(|_| bad())?)
        } else {
            None
        };
        if !log10_prob.is_finite() || log10_backoff.is_some_and(|b| !b.is_finite()) {
            return Err(parse_err(lineno, ParseErrorKind::NonFinite));
        }
        let key = fields[1..=current].join(" ");
        if model.level(current).contains_key(key.as_str()) {
            return Err(parse_err(
                lineno,
                ParseErrorKind::Duplicate {
                    order: current,
                    key,
                },
            ));
        }
        model.insert(
            current,
            key.into(),
            ProbEntry {
                log10_prob,
                log10_backoff,
            },
        );
        in_section += 1;
    }
    if !ended {
        return Err(parse_err(lines.len(), ParseErrorKind::MissingEnd));
    }
    Ok(model)
}

fn section_order(line: &str) -> Option<usize> {
    line.strip_prefix('\\')?
        .strip_suffix("-grams:")?
        .parse()
        .ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counts::{count_ngrams, MIN_MEMORY_BUDGET};
    use crate::estimate::{estimate_model, DiscountSpec, SmoothingConfig, SmoothingMethod};
    use crate::{BOS, EOS, UNK};
    use proptest::prelude::*;

    #[test]
    fn g9_matches_c_printf() {
        // Reference strings are printf("%.9g", x) outputs.
        let cases: [(f64, &str); 13] = [
            (0.0, "0"),
            (-0.3010299956639812, "-0.301029996"),
            (-99.0, "-99"),
            (0.5, "0.5"),
            (-12.3456789, "-12.3456789"),
            (1234567.0, "1234567"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.000123, "0.000123"),
            (-1.23456784e-5, "-1.23456784e-05"),
            (100.0, "100"),
            (1e-99, "1e-99"),
            (-1.5e300, "-1.5e+300"),
        ];
        for (x, want) in cases {
            assert_eq!(format_g9(x), want, "input {x}");
        }
    }

    fn toy_model() -> BackoffModel {
        let sentences = vec![
            vec!["a".to_string(), "b".to_string()],
            vec!["a".to_string()],
        ];
        let t = count_ngrams(sentences, 2, MIN_MEMORY_BUDGET).unwrap();
        estimate_model(
            &t,
            &SmoothingConfig {
                method: SmoothingMethod::AbsoluteDiscountInterpolated,
                discount: DiscountSpec::Fixed(vec![0.75, 0.75]),
            },
        )
        .unwrap()
    }

    fn write_to_string(model: &BackoffModel) -> String {
        let mut buf = Vec::new();
        let bytes = write_arpa(model, &mut buf).unwrap();
        assert_eq!(bytes as usize, buf.len());
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn unigram_only_structure() {
        let mut m = BackoffModel::new(1);
        m.insert(1, "a".into(), ProbEntry::prob(-0.30103));
        m.insert(1, EOS.into(), ProbEntry::prob(-0.60206));
        m.insert(1, UNK.into(), ProbEntry::prob(-0.60206));
        let text = write_to_string(&m);
        assert!(text.starts_with("\\data\\\nngram 1=3\n"));
        assert_eq!(text.lines().filter(|l| l.contains('\t')).count(), 3);
        assert!(text.trim_end().ends_with("\\end\\"));
    }

    #[test]
    fn writes_are_deterministic() {
        let m = toy_model();
        assert_eq!(write_to_string(&m), write_to_string(&m));
    }

    fn assert_models_close(a: &BackoffModel, b: &BackoffModel, tol: f64) {
        assert_eq!(a.order(), b.order());
        for m in 1..=a.order() {
            assert_eq!(a.entry_count(m), b.entry_count(m), "order {m}");
            for (key, ea) in a.level(m) {
                let eb = &b.level(m)[key];
                assert!(
                    (ea.log10_prob - eb.log10_prob).abs() <= tol,
                    "{key}: {} vs {}",
                    ea.log10_prob,
                    eb.log10_prob
                );
                let ba = ea.log10_backoff.unwrap_or(0.0);
                let bb = eb.log10_backoff.unwrap_or(0.0);
                assert!((ba - bb).abs() <= tol, "{key} backoff");
            }
        }
    }

    #[test]
    fn round_trip_toy_model() {
        let m = toy_model();
        let back = read_arpa(write_to_string(&m).as_bytes()).unwrap();
        assert_models_close(&m, &back, 1e-6);
    }

    #[test]
    fn reader_accepts_leading_comments_and_spaces() {
        let text = "built by some toolkit\nfile v1\n\n\\data\\\nngram 1=2\nngram 2=1\n\n\\1-grams:\n-0.5 a -0.2\n-0.4 </s>\n\n\\2-grams:\n-0.3 a </s>\n\n\\end\\\n";
        let m = read_arpa(text.as_bytes()).unwrap();
        assert_eq!(m.entry_count(1), 2);
        assert_eq!(m.level(1)["a"].log10_prob, -0.5);
        assert_eq!(m.level(1)["a"].log10_backoff, Some(-0.2));
        assert_eq!(m.level(1)[EOS].log10_backoff, None);
        assert_eq!(m.level(2)["a </s>"].log10_prob, -0.3);
    }

    #[test]
    fn reader_rejects_count_mismatch() {
        let text = "\\data\\\nngram 1=3\nngram 2=5\n\n\\1-grams:\n-0.5\ta\n-0.4\tb\n-0.4\t</s>\n\n\\2-grams:\n-0.3\ta b\n-0.2\ta </s>\n-0.2\tb a\n-0.5\tb b\n\n\\end\\\n";
        match read_arpa(text.as_bytes()).unwrap_err() {
            ArpaError::Parse { line, kind } => {
                assert_eq!(
                    kind,
                    ParseErrorKind::CountMismatch {
                        order: 2,
                        got: 4,
                        declared: 5
                    }
                );
                assert_eq!(line, 16, "reported at the \\end\\ line");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn reader_rejects_duplicates_missing_end_and_garbage() {
        let dup = "\\data\\\nngram 1=2\n\n\\1-grams:\n-0.5 a\n-0.5 a\n\n\\end\\\n";
        assert!(matches!(
            read_arpa(dup.as_bytes()).unwrap_err(),
            ArpaError::Parse {
                line: 6,
                kind: ParseErrorKind::Duplicate { .. }
            }
        ));

        let unterminated = "\\data\\\nngram 1=1\n\n\\1-grams:\n-0.5 a\n";
        assert!(matches!(
            read_arpa(unterminated.as_bytes()).unwrap_err(),
            ArpaError::Parse {
                kind: ParseErrorKind::MissingEnd,
                ..
            }
        ));

        let no_data = "just some text\nwithout a header\n";
        assert!(matches!(
            read_arpa(no_data.as_bytes()).unwrap_err(),
            ArpaError::Parse {
                kind: ParseErrorKind::MissingData,
                ..
            }
        ));

        let bad_entry = "\\data\\\nngram 1=1\n\n\\1-grams:\nnot_a_number a\n\n\\end\\\n";
        assert!(matches!(
            read_arpa(bad_entry.as_bytes()).unwrap_err(),
            ArpaError::Parse {
                line: 5,
                kind: ParseErrorKind::BadEntry
            }
        ));

        let inf_entry = "\\data\\\nngram 1=1\n\n\\1-grams:\ninf a\n\n\\end\\\n";
        assert!(matches!(
            read_arpa(inf_entry.as_bytes()).unwrap_err(),
            ArpaError::Parse {
                line: 5,
                kind: ParseErrorKind::NonFinite
            }
        ));
    }

    #[test]
    fn reader_rejects_backoff_on_highest_order() {
        let text = "\\data\\\nngram 1=1\n\n\\1-grams:\n-0.5 a -0.2\n\n\\end\\\n";
        assert!(matches!(
            read_arpa(text.as_bytes()).unwrap_err(),
            ArpaError::Parse {
                kind: ParseErrorKind::BadEntry,
                ..
            }
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn round_trip_random_models(
            corpus in proptest::collection::vec(
                proptest::collection::vec("[abcd]{1,2}", 0..6), 1..20),
            order in 1usize..=3,
            d in 0.1f64..0.9,
        ) {
            let t = count_ngrams(corpus, order, MIN_MEMORY_BUDGET).unwrap();
            if t.level(1).is_empty() {
                return Ok(());
            }
            let m = estimate_model(
                &t,
                &SmoothingConfig {
                    method: SmoothingMethod::AbsoluteDiscountInterpolated,
                    discount: DiscountSpec::Fixed(vec![d; order]),
                },
            ).unwrap();
            let text = write_to_string(&m);
            let back = read_arpa(text.as_bytes()).unwrap();
            assert_models_close(&m, &back, 1e-6);
            // Second trip is exact: parse(print(x)) is a fixed point.
            let text2 = write_to_string(&back);
            prop_assert_eq!(text, text2);
        }

        // Arbitrary bytes must never panic the parser.
        #[test]
        fn parser_never_panics(input in "[\\PC\n\t]{0,300}") {
            let _ = read_arpa(input.as_bytes());
        }

        #[test]
        fn parser_never_panics_near_valid(
            prefix in "(\\\\data\\\\\n)?(ngram [0-9]=[0-9]\n){0,3}",
            body in "(\\\\[0-9]-grams:|-?[0-9.]{1,6}([ \t][ab</s>]{1,4}){1,3})*",
        ) {
            let text = format!("{prefix}{body}\n\\end\\\n");
            let _ = read_arpa(text.as_bytes());
        }
    }

    #[test]
    fn bos_word_survives_round_trip() {
        let m = toy_model();
        let back = read_arpa(write_to_string(&m).as_bytes()).unwrap();
        assert!(back.contains_word(BOS));
        assert_eq!(back.level(1)[BOS].log10_prob, -99.0);
    }
}
