//! NIST-style scoring: weighted edit-distance word alignment, WER with a
//! substitution/deletion/insertion breakdown, optional hesitation words and
//! error-analysis tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::FormatError;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("no alignments to tabulate")]
    NoAlignments,
    #[error("hypothesis for unknown utterance {0}")]
    UnknownUtterance(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub const DEFAULT_OPTIONAL: [&str; 3] = ["%hesitation", "uh", "um"];
pub const BACKCHANNELS: [&str; 3] = ["uh-huh", "mhm", "%bcack"];

pub fn default_optional_set() -> BTreeSet<String> {
    DEFAULT_OPTIONAL.iter().map(|s| s.to_string()).collect()
}

/// Lowercase and trim, dropping tokens that become empty.
pub fn normalize<S: AsRef<str>>(words: &[S]) -> Vec<String> {
    words
        .iter()
        .map(|w| w.as_ref().trim().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Removes every optional token from a hypothesis.
pub fn strip_optional<S: AsRef<str>>(hyp: &[S], optional: &BTreeSet<String>) -> Vec<String> {
    normalize(hyp).into_iter().filter(|w| !optional.contains(w)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Match,
    Sub,
    Del,
    Ins,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub op: EditOp,
    pub ref_word: Option<String>,
    pub hyp_word: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub ops: Vec<AlignedPair>,
}

impl WordAlignment {
    pub fn ref_words(&self) -> Vec<&str> {
        self.ops.iter().filter_map(|p| p.ref_word.as_deref()).collect()
    }

    pub fn hyp_words(&self) -> Vec<&str> {
        self.ops.iter().filter_map(|p| p.hyp_word.as_deref()).collect()
    }

    pub fn counts(&self) -> ErrorCounts {
        let mut c = ErrorCounts::default();
        for p in &self.ops {
            match p.op {
                EditOp::Match => c.matches += 1,
                EditOp::Sub => c.subs += 1,
                EditOp::Del => c.dels += 1,
                EditOp::Ins => c.ins += 1,
            }
        }
        c.ref_words = c.matches + c.subs + c.dels;
        c
    }

    pub fn cost(&self, costs: &EditCosts) -> u64 {
        let c = self.counts();
        c.subs * costs.sub as u64 + c.dels * costs.del as u64 + c.ins * costs.ins as u64
    }
}

/// Integer edit costs. The default is the sclite weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCosts {
    pub sub: u32,
    pub ins: u32,
    pub del: u32,
}

impl Default for EditCosts {
    fn default() -> Self {
        Self { sub: 4, ins: 3, del: 3 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub ref_words: u64,
    pub matches: u64,
    pub subs: u64,
    pub dels: u64,
    pub ins: u64,
}

impl ErrorCounts {
    pub fn errors(&self) -> u64 {
        self.subs + self.dels + self.ins
    }

    fn add(&mut self, o: &Self) {
        self.ref_words += o.ref_words;
        self.matches += o.matches;
        self.subs += o.subs;
        self.dels += o.dels;
        self.ins += o.ins;
    }
}

/// Rates in percent of reference words, plus per-word tallies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub counts: ErrorCounts,
    pub sub_rate: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub wer: f64,
    /// `(ref, hyp)` substitution tallies.
    pub substitutions: BTreeMap<(String, String), u64>,
    pub deletions: BTreeMap<String, u64>,
    pub insertions: BTreeMap<String, u64>,
}

impl ErrorReport {
    pub fn from_alignment(a: &WordAlignment) -> Self {
        let mut r = Self::default();
        r.add_alignment(a);
        r
    }

    fn add_alignment(&mut self, a: &WordAlignment) {
        for p in &a.ops {
            match p.op {
                EditOp::Sub => {
                    let key = (p.ref_word.clone().unwrap_or_default(), p.hyp_word.clone().unwrap_or_default());
                    *self.substitutions.entry(key).or_default() += 1;
                }
                EditOp::Del => *self.deletions.entry(p.ref_word.clone().unwrap_or_default()).or_default() += 1,
                EditOp::Ins => *self.insertions.entry(p.hyp_word.clone().unwrap_or_default()).or_default() += 1,
                EditOp::Match => {}
            }
        }
        self.counts.add(&a.counts());
        self.update_rates();
    }

    fn update_rates(&mut self) {
        let n = self.counts.ref_words as f64;
        let pct = |x: u64| if n > 0.0 { 100.0 * x as f64 / n } else { 0.0 };
        self.sub_rate = pct(self.counts.subs);
        self.del_rate = pct(self.counts.dels);
        self.ins_rate = pct(self.counts.ins);
        self.wer = pct(self.counts.errors());
    }

    /// Adds another report's counts and tallies into this one.
    pub fn merge(&mut self, other: &ErrorReport) {
        self.counts.add(&other.counts);
        for (k, v) in &other.substitutions {
            *self.substitutions.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.deletions {
            *self.deletions.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.insertions {
            *self.insertions.entry(k.clone()).or_default() += v;
        }
        self.update_rates();
    }
}

/// Minimum-cost alignment. On equal total cost the backtrace prefers a
/// match, then deletion, insertion and substitution.
pub fn align(reference: &[String], hyp: &[String], costs: &EditCosts) -> WordAlignment {
    let (n, m) = (reference.len(), hyp.len());
    let (cs, ci, cd) = (costs.sub as u64, costs.ins as u64, costs.del as u64);
    let mut d = vec![vec![0u64; m + 1]; n + 1];
    for i in 1..=n {
        d[i][0] = d[i - 1][0] + cd;
    }
    for j in 1..=m {
        d[0][j] = d[0][j - 1] + ci;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + if reference[i - 1] == hyp[j - 1] { 0 } else { cs };
            d[i][j] = diag.min(d[i - 1][j] + cd).min(d[i][j - 1] + ci);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i][j];
        if i > 0 && j > 0 && reference[i - 1] == hyp[j - 1] && here == d[i - 1][j - 1] {
            ops.push(AlignedPair { op: EditOp::Match, ref_word: Some(reference[i - 1].clone()), hyp_word: Some(hyp[j - 1].clone()) });
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[i - 1][j] + cd {
            ops.push(AlignedPair { op: EditOp::Del, ref_word: Some(reference[i - 1].clone()), hyp_word: None });
            i -= 1;
        } else if j > 0 && here == d[i][j - 1] + ci {
            ops.push(AlignedPair { op: EditOp::Ins, ref_word: None, hyp_word: Some(hyp[j - 1].clone()) });
            j -= 1;
        } else {
            ops.push(AlignedPair { op: EditOp::Sub, ref_word: Some(reference[i - 1].clone()), hyp_word: Some(hyp[j - 1].clone()) });
            i -= 1;
            j -= 1;
        }
    }
    ops.reverse();
    WordAlignment { ops }
}

/// Aligns normalised `reference` and `hyp` with the default costs.
pub fn align_and_score<S: AsRef<str>>(reference: &[S], hyp: &[S]) -> Result<(WordAlignment, ErrorReport), ScoreError> {
    align_and_score_with(reference, hyp, &EditCosts::default())
}

pub fn align_and_score_with<S: AsRef<str>>(
    reference: &[S],
    hyp: &[S],
    costs: &EditCosts,
) -> Result<(WordAlignment, ErrorReport), ScoreError> {
    let r = normalize(reference);
    if r.is_empty() {
        return Err(ScoreError::EmptyReference);
    }
    let a = align(&r, &normalize(hyp), costs);
    let report = ErrorReport::from_alignment(&a);
    Ok((a, report))
}

/// Scoring settings applied to a whole corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub costs: EditCosts,
    pub optional: BTreeSet<String>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { costs: EditCosts::default(), optional: default_optional_set() }
    }
}

/// Scores one utterance after stripping optional words from the hypothesis.
pub fn score_utterance<S: AsRef<str>>(
    reference: &[S],
    hyp: &[S],
    config: &ScoreConfig,
) -> Result<(WordAlignment, ErrorReport), ScoreError> {
    let r = normalize(reference);
    let stripped = strip_optional(hyp, &config.optional);
    align_and_score_with(&r, &stripped, &config.costs)
}

/// Scores every reference utterance; a missing hypothesis counts as empty.
pub fn score_corpus(
    refs: &BTreeMap<String, Vec<String>>,
    hyps: &BTreeMap<String, Vec<String>>,
    config: &ScoreConfig,
) -> Result<(Vec<(String, WordAlignment)>, ErrorReport), ScoreError> {
    if let Some(extra) = hyps.keys().find(|k| !refs.contains_key(*k)) {
        return Err(ScoreError::UnknownUtterance(extra.clone()));
    }
    let mut total = ErrorReport::default();
    let mut alignments = Vec::with_capacity(refs.len());
    for (utt, r) in refs {
        let empty = Vec::new();
        let (a, rep) = score_utterance(r, hyps.get(utt).unwrap_or(&empty), config)?;
        total.merge(&rep);
        alignments.push((utt.clone(), a));
    }
    Ok((alignments, total))
}

/// Reads `utt_id word word ...` lines. Blank lines are skipped.
pub fn read_transcripts<R: BufRead>(input: R) -> Result<BTreeMap<String, Vec<String>>, FormatError> {
    let mut out = BTreeMap::new();
    for (ln, line) in input.lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        let Some(id) = it.next() else { continue };
        if out.insert(id.to_string(), it.map(str::to_string).collect()).is_some() {
            return Err(FormatError::Malformed(format!("line {}: duplicate utterance {}", ln + 1, id)));
        }
    }
    Ok(out)
}

pub fn write_transcripts<W: Write>(mut out: W, t: &BTreeMap<String, Vec<String>>) -> Result<(), FormatError> {
    for (id, words) in t {
        if words.is_empty() {
            writeln!(out, "{}", id)?;
        } else {
            writeln!(out, "{} {}", id, words.join(" "))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Error tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTables {
    pub substitutions: Vec<(u64, String, String)>,
    pub deletions: Vec<(u64, String)>,
    pub insertions: Vec<(u64, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Substitutions,
    Deletions,
    Insertions,
}

impl ErrorTables {
    pub fn is_empty(&self) -> bool {
        self.substitutions.is_empty() && self.deletions.is_empty() && self.insertions.is_empty()
    }

    /// Formatted entries, `count: ref / hyp` for substitutions and
    /// `count: word` otherwise.
    pub fn lines(&self, kind: TableKind) -> Vec<String> {
        match kind {
            TableKind::Substitutions => self.substitutions.iter().map(|(c, r, h)| format!("{}: {} / {}", c, r, h)).collect(),
            TableKind::Deletions => self.deletions.iter().map(|(c, w)| format!("{}: {}", c, w)).collect(),
            TableKind::Insertions => self.insertions.iter().map(|(c, w)| format!("{}: {}", c, w)).collect(),
        }
    }
}

impl fmt::Display for ErrorTables {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (title, kind) in [
            ("substitutions", TableKind::Substitutions),
            ("deletions", TableKind::Deletions),
            ("insertions", TableKind::Insertions),
        ] {
            writeln!(f, "{}", title)?;
            for l in self.lines(kind) {
                writeln!(f, "  {}", l)?;
            }
        }
        Ok(())
    }
}

fn top_k<K: Clone + Ord>(m: &BTreeMap<K, u64>, k: usize) -> Vec<(u64, K)> {
    let mut v: Vec<(u64, K)> = m.iter().map(|(key, &c)| (c, key.clone())).collect();
    v.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    v.truncate(k);
    v
}

/// Top-`k` substitutions, deletions and insertions by descending count,
/// ties broken lexicographically.
pub fn error_tables(alignments: &[WordAlignment], k: usize) -> Result<ErrorTables, ScoreError> {
    if alignments.is_empty() {
        return Err(ScoreError::NoAlignments);
    }
    let mut rep = ErrorReport::default();
    for a in alignments {
        rep.add_alignment(a);
    }
    Ok(tables_from_report(&rep, k))
}

pub fn tables_from_report(rep: &ErrorReport, k: usize) -> ErrorTables {
    ErrorTables {
        substitutions: top_k(&rep.substitutions, k).into_iter().map(|(c, (r, h))| (c, r, h)).collect(),
        deletions: top_k(&rep.deletions, k),
        insertions: top_k(&rep.insertions, k),
    }
}

fn render_grid(f: &mut fmt::Formatter<'_>, header: &[String], rows: &[Vec<String>]) -> fmt::Result {
    let ncol = header.len();
    let mut width = header.iter().map(|h| h.len()).collect::<Vec<_>>();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |f: &mut fmt::Formatter<'_>, cells: &[String]| -> fmt::Result {
        let parts: Vec<String> = (0..ncol)
            .map(|i| format!("{:<w$}", cells.get(i).map(String::as_str).unwrap_or(""), w = width[i]))
            .collect();
        writeln!(f, "| {} |", parts.join(" | "))
    };
    line(f, header)?;
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    writeln!(f, "|-{}-|", rule.join("-|-"))?;
    for r in rows {
        line(f, r)?;
    }
    Ok(())
}

/// Side-by-side top-k lists, one column per labelled table. Two systems
/// scored on two test subsets give the usual four-column comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<String>>,
}

impl ComparisonTable {
    pub fn new(kind: TableKind, columns: &[(String, &ErrorTables)]) -> Self {
        Self {
            headers: columns.iter().map(|(h, _)| h.clone()).collect(),
            columns: columns.iter().map(|(_, t)| t.lines(kind)).collect(),
        }
    }

    pub fn num_columns(&self) -> usize {
        self.headers.len()
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let depth = self.columns.iter().map(Vec::len).max().unwrap_or(0);
        let rows: Vec<Vec<String>> = (0..depth)
            .map(|i| self.columns.iter().map(|c| c.get(i).cloned().unwrap_or_default()).collect())
            .collect();
        render_grid(f, &self.headers, &rows)
    }
}

/// Overall sub/del/ins/all rates, one column per labelled report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub columns: Vec<RateColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateColumn {
    pub label: String,
    pub sub: f64,
    pub del: f64,
    pub ins: f64,
    pub all: f64,
    pub ref_words: u64,
}

pub const RATE_ROWS: [&str; 4] = ["sub", "del", "ins", "all"];

impl RateTable {
    pub fn new(columns: &[(String, &ErrorReport)]) -> Self {
        Self {
            columns: columns
                .iter()
                .map(|(label, r)| RateColumn {
                    label: label.clone(),
                    sub: r.sub_rate,
                    del: r.del_rate,
                    ins: r.ins_rate,
                    all: r.wer,
                    ref_words: r.counts.ref_words,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String, FormatError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for RateTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut header = vec![String::new()];
        header.extend(self.columns.iter().map(|c| c.label.clone()));
        let rows: Vec<Vec<String>> = RATE_ROWS
            .iter()
            .map(|&name| {
                let mut row = vec![name.to_string()];
                row.extend(self.columns.iter().map(|c| {
                    let v = match name {
                        "sub" => c.sub,
                        "del" => c.del,
                        "ins" => c.ins,
                        _ => c.all,
                    };
                    format!("{:.1}", v)
                }));
                row
            })
            .collect();
        render_grid(f, &header, &rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn crafted_fixtures() {
        let (a, r) = align_and_score(&w("a b c"), &w("a b c")).unwrap();
        assert_eq!(r.wer, 0.0);
        assert!(a.ops.iter().all(|p| p.op == EditOp::Match));

        let (_, r) = align_and_score(&w("a b c"), &w("a x c")).unwrap();
        assert_eq!(r.counts.subs, 1);
        assert_eq!(r.wer, 100.0 / 3.0);

        let (_, r) = align_and_score(&w("a b"), &w("a b c")).unwrap();
        assert_eq!((r.counts.ins, r.wer), (1, 50.0));

        let (_, r) = align_and_score(&w("a b c"), &w("a c")).unwrap();
        assert_eq!((r.counts.dels, r.wer), (1, 100.0 / 3.0));
    }

    #[test]
    fn empty_reference_rejected() {
        assert!(matches!(align_and_score(&w(""), &w("a")), Err(ScoreError::EmptyReference)));
        assert!(matches!(align_and_score(&w("  "), &w("a")), Err(ScoreError::EmptyReference)));
    }

    #[test]
    fn normalisation_is_case_insensitive() {
        let (_, r) = align_and_score(&w("Hello World"), &w("hello WORLD")).unwrap();
        assert_eq!(r.wer, 0.0);
    }

    #[test]
    fn weighted_costs_prefer_ins_del_over_two_subs() {
        // with sub=4, del+ins=6 > 4 so a single sub wins; but two subs (8)
        // lose against del+ins (6) when the words shift by one position
        let (a, _) = align_and_score(&w("x a"), &w("a y")).unwrap();
        let c = a.counts();
        assert_eq!((c.subs, c.dels, c.ins, c.matches), (0, 1, 1, 1));
    }

    #[test]
    fn tie_break_prefers_deletion_then_insertion() {
        // ref "a b", hyp "b": deleting "a" costs 3; other paths cost more
        let (a, _) = align_and_score(&w("a b"), &w("b")).unwrap();
        assert_eq!(a.ops[0].op, EditOp::Del);
        // ref "a a", hyp "a": either "a" can be deleted; the backtrace keeps
        // the last match and deletes the first
        let (a, _) = align_and_score(&w("a a"), &w("a")).unwrap();
        assert_eq!(a.ops.iter().map(|p| p.op).collect::<Vec<_>>(), vec![EditOp::Del, EditOp::Match]);
    }

    #[test]
    fn strip_optional_examples() {
        let opt: BTreeSet<String> = ["um", "uh"].iter().map(|s| s.to_string()).collect();
        assert_eq!(strip_optional(&w("um yes"), &opt), w("yes"));
        assert!(strip_optional(&Vec::<String>::new(), &opt).is_empty());
        let d = default_optional_set();
        for b in BACKCHANNELS {
            assert!(!d.contains(b));
        }
        assert!(!d.contains("hmm"));
    }

    #[test]
    fn hesitation_backchannel_asymmetry() {
        let cfg = ScoreConfig::default();
        // hesitation in the reference, backchannel in the output: substitution
        let (_, r) = score_utterance(&w("%hesitation i know"), &w("%bcack i know"), &cfg).unwrap();
        assert_eq!(r.substitutions.get(&("%hesitation".into(), "%bcack".into())), Some(&1));
        // the reverse never shows up as a substitution: the hesitation is
        // stripped from the output first
        let (_, r) = score_utterance(&w("%bcack i know"), &w("%hesitation i know"), &cfg).unwrap();
        assert!(r.substitutions.is_empty());
        assert_eq!(r.counts.dels, 1);
    }

    #[test]
    fn tables_from_constructed_corpus() {
        let mut al = Vec::new();
        for _ in 0..3 {
            al.push(align_and_score(&w("he was here"), &w("he is here")).unwrap().0);
        }
        al.push(align_and_score(&w("a dog"), &w("the dog")).unwrap().0);
        let t = error_tables(&al, 10).unwrap();
        assert_eq!(t.lines(TableKind::Substitutions)[0], "3: was / is");
        assert_eq!(t.lines(TableKind::Substitutions)[1], "1: a / the");

        let clean = vec![align_and_score(&w("a b"), &w("a b")).unwrap().0];
        assert!(error_tables(&clean, 10).unwrap().is_empty());
        assert!(matches!(error_tables(&[], 10), Err(ScoreError::NoAlignments)));
    }

    #[test]
    fn ties_sorted_lexicographically() {
        let al = vec![
            align_and_score(&w("b c"), &w("x y")).unwrap().0,
            align_and_score(&w("a"), &w("z")).unwrap().0,
        ];
        let t = error_tables(&al, 2).unwrap();
        assert_eq!(t.lines(TableKind::Substitutions), vec!["1: a / z", "1: b / x"]);
    }

    #[test]
    fn four_column_layout() {
        let t1 = error_tables(&[align_and_score(&w("was"), &w("is")).unwrap().0], 5).unwrap();
        let t2 = error_tables(&[align_and_score(&w("a"), &w("the")).unwrap().0], 5).unwrap();
        let cols = vec![
            ("CH sys1".to_string(), &t1),
            ("CH sys2".to_string(), &t2),
            ("SWB sys1".to_string(), &t1),
            ("SWB sys2".to_string(), &t2),
        ];
        let table = ComparisonTable::new(TableKind::Substitutions, &cols);
        assert_eq!(table.num_columns(), 4);
        let text = table.to_string();
        assert!(text.lines().next().unwrap().contains("SWB sys2"));
        assert!(text.contains("1: was / is"));
    }

    #[test]
    fn rate_table_rows() {
        let (_, r) = align_and_score(&w("a b c d"), &w("a x c d e")).unwrap();
        let t = RateTable::new(&[("eval".to_string(), &r)]);
        let text = t.to_string();
        let names: Vec<&str> = text.lines().skip(2).map(|l| l.trim_start_matches("| ").split(' ').next().unwrap()).collect();
        assert_eq!(names, RATE_ROWS);
        assert!(text.contains("50.0"));
        let back: RateTable = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn transcripts_round_trip() {
        let text = "u1 hello world\nu2\n\nu3 a\n";
        let t = read_transcripts(text.as_bytes()).unwrap();
        assert_eq!(t["u2"], Vec::<String>::new());
        let mut out = Vec::new();
        write_transcripts(&mut out, &t).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "u1 hello world\nu2\nu3 a\n");
        assert!(read_transcripts("u1 a\nu1 b\n".as_bytes()).is_err());
    }

    #[test]
    fn merge_matches_concatenation() {
        let (_, a) = align_and_score(&w("a b c"), &w("a x")).unwrap();
        let (_, b) = align_and_score(&w("d e"), &w("d e f")).unwrap();
        let mut m = a.clone();
        m.merge(&b);
        assert_eq!(m.counts.ref_words, 5);
        assert_eq!(m.counts.errors(), 3);
        assert!((m.wer - 60.0).abs() < 1e-12);
    }

    fn words(max: usize) -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from), 0..max)
    }

    proptest! {
        #[test]
        fn self_alignment_is_perfect(r in words(12)) {
            prop_assume!(!r.is_empty());
            let (_, rep) = align_and_score(&r, &r).unwrap();
            prop_assert_eq!(rep.wer, 0.0);
        }

        #[test]
        fn alignment_reconstructs_and_counts(r in words(10), h in words(10)) {
            prop_assume!(!r.is_empty());
            let (a, rep) = align_and_score(&r, &h).unwrap();
            prop_assert_eq!(a.ref_words(), r.iter().map(String::as_str).collect::<Vec<_>>());
            prop_assert_eq!(a.hyp_words(), h.iter().map(String::as_str).collect::<Vec<_>>());
            let c = rep.counts;
            prop_assert_eq!(c.subs + c.dels + c.matches, r.len() as u64);
            prop_assert_eq!(c.matches + c.subs + c.ins, h.len() as u64);
            let sum = rep.sub_rate + rep.del_rate + rep.ins_rate;
            prop_assert!((sum - rep.wer).abs() < 1e-9);
        }

        #[test]
        fn renaming_invariance(r in words(10), h in words(10)) {
            prop_assume!(!r.is_empty());
            let rename = |v: &[String]| -> Vec<String> { v.iter().map(|x| format!("w_{}", x)).collect() };
            let (_, a) = align_and_score(&r, &h).unwrap();
            let (_, b) = align_and_score(&rename(&r), &rename(&h)).unwrap();
            prop_assert_eq!(a.counts, b.counts);
        }
    }
}
