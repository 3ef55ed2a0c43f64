//! Scoring: character error rate with a deterministic alignment backtrace,
//! percentage-point "Rel." reporting against a baseline row, and
//! row-normalized tone-substitution confusion matrices.

use std::collections::BTreeMap;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::orthography::{han_to_tailo, tone_sequence, HanTailoLexicon, OrthoError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference is empty: CER is undefined")]
    EmptyReference,
    #[error("reference and hypothesis lists differ in length: {refs} vs {hyps}")]
    PairCountMismatch { refs: usize, hyps: usize },
    #[error("Han input requires a lexicon for tone extraction")]
    MissingLexicon,
    #[error("baseline row '{name}' not found in the report rows")]
    MissingBaseline { name: String },
    #[error("row '{name}' has {got} values for {want} columns")]
    RowWidth {
        name: String,
        got: usize,
        want: usize,
    },
    #[error("report needs at least one row")]
    NoRows,
    #[error("utterance {index}: {source}")]
    AtPair {
        index: usize,
        #[source]
        source: OrthoError,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One step of the edit script, with positions into the reference and
/// hypothesis symbol sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Substitute { r: usize, h: usize },
    Delete { r: usize },
    Insert { h: usize },
}

/// Substitution/deletion/insertion counts plus the backtraced edit script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentStats {
    pub matches: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ops: Vec<EditOp>,
}

impl AlignmentStats {
    /// Reference length: matches + substitutions + deletions.
    pub fn ref_len(&self) -> usize {
        self.matches + self.substitutions + self.deletions
    }

    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / C`, as a percentage.
    pub fn cer_percent(&self) -> f64 {
        100.0 * self.distance() as f64 / self.ref_len() as f64
    }
}

/// Unit-cost Levenshtein alignment. At equal cost the backtrace prefers
/// match over substitution over deletion over insertion, which makes the
/// edit script (and everything counted from it) deterministic.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> AlignmentStats {
    let (m, n) = (reference.len(), hypothesis.len());
    let width = n + 1;
    let mut dp = vec![0usize; (m + 1) * width];
    for j in 0..=n {
        dp[j] = j;
    }
    for i in 1..=m {
        dp[i * width] = i;
        for j in 1..=n {
            let same = reference[i - 1] == hypothesis[j - 1];
            let diag = dp[(i - 1) * width + j - 1] + usize::from(!same);
            let up = dp[(i - 1) * width + j] + 1;
            let left = dp[i * width + j - 1] + 1;
            dp[i * width + j] = diag.min(up).min(left);
        }
    }

    let mut ops = Vec::with_capacity(m.max(n));
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = dp[i * width + j];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && dp[(i - 1) * width + j - 1] == here {
            ops.push(EditOp::Match { r: i - 1, h: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && dp[(i - 1) * width + j - 1] + 1 == here {
            ops.push(EditOp::Substitute { r: i - 1, h: j - 1 });
            i -= 1;
            j -= 1;
        } else if i > 0 && dp[(i - 1) * width + j] + 1 == here {
            ops.push(EditOp::Delete { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insert { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();

    let mut stats = AlignmentStats {
        matches: 0,
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        ops,
    };
    for op in &stats.ops {
        match op {
            EditOp::Match { .. } => stats.matches += 1,
            EditOp::Substitute { .. } => stats.substitutions += 1,
            EditOp::Delete { .. } => stats.deletions += 1,
            EditOp::Insert { .. } => stats.insertions += 1,
        }
    }
    stats
}

/// Character error rate in percent, comparing Unicode scalars after NFC
/// normalization. The reference must be non-empty.
pub fn cer(reference: &str, hypothesis: &str) -> Result<(f64, AlignmentStats), EvalError> {
    let ref_chars: Vec<char> = reference.nfc().collect();
    let hyp_chars: Vec<char> = hypothesis.nfc().collect();
    if ref_chars.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let stats = align(&ref_chars, &hyp_chars);
    Ok((stats.cer_percent(), stats))
}

/// The "Rel." column arithmetic: baseline CER minus model CER, in
/// percentage points (an absolute reduction, not a ratio of the baseline).
pub fn relative_reduction(baseline_cer: f64, model_cer: f64) -> f64 {
    baseline_cer - model_cer
}

/// Tone labels indexing the confusion matrix.
pub const TONE_LABELS: [u8; 7] = [1, 2, 3, 4, 5, 7, 8];

fn tone_index(tone: u8) -> Option<usize> {
    TONE_LABELS.iter().position(|&t| t == tone)
}

/// 7×7 substitution counts over tone labels; rows are reference tones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToneConfusion {
    counts: [[u64; 7]; 7],
}

impl ToneConfusion {
    pub fn record(&mut self, ref_tone: u8, hyp_tone: u8) {
        if let (Some(r), Some(h)) = (tone_index(ref_tone), tone_index(hyp_tone)) {
            self.counts[r][h] += 1;
        }
    }

    pub fn counts(&self) -> &[[u64; 7]; 7] {
        &self.counts
    }

    pub fn count(&self, ref_tone: u8, hyp_tone: u8) -> u64 {
        self.counts[tone_index(ref_tone).expect("tone label")]
            [tone_index(hyp_tone).expect("tone label")]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Row-stochastic view; rows with no events are `None`.
    pub fn normalized(&self) -> [Option<[f64; 7]>; 7] {
        let mut out = [None; 7];
        for (r, row) in self.counts.iter().enumerate() {
            let sum: u64 = row.iter().sum();
            if sum > 0 {
                let mut norm = [0.0; 7];
                for (n, &c) in norm.iter_mut().zip(row) {
                    *n = c as f64 / sum as f64;
                }
                out[r] = Some(norm);
            }
        }
        out
    }

    fn matrix_csv<F: Fn(usize, usize) -> String>(&self, cell: F) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["ref\\hyp".to_string()];
        header.extend(TONE_LABELS.iter().map(|t| t.to_string()));
        w.write_record(&header).expect("csv write");
        for (r, tone) in TONE_LABELS.iter().enumerate() {
            let mut record = vec![tone.to_string()];
            record.extend((0..7).map(|h| cell(r, h)));
            w.write_record(&record).expect("csv write");
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8 csv")
    }

    pub fn counts_csv(&self) -> String {
        self.matrix_csv(|r, h| self.counts[r][h].to_string())
    }

    /// Normalized matrix as CSV; empty rows render as empty cells.
    pub fn normalized_csv(&self) -> String {
        let normalized = self.normalized();
        self.matrix_csv(|r, h| match normalized[r] {
            Some(row) => format!("{:.6}", row[h]),
            None => String::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextForm {
    Tailo,
    Han,
}

/// Aligns per-pair tone sequences and counts substitution events only;
/// deletions and insertions contribute nothing. Han inputs are converted
/// with the lexicon first (unknown characters drop out of the statistics).
pub fn tone_confusion<R: AsRef<str>, H: AsRef<str>>(
    refs: &[R],
    hyps: &[H],
    form: TextForm,
    lexicon: Option<&HanTailoLexicon>,
) -> Result<ToneConfusion, EvalError> {
    if refs.len() != hyps.len() {
        return Err(EvalError::PairCountMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let to_tones = |text: &str, index: usize| -> Result<Vec<u8>, EvalError> {
        let tailo = match form {
            TextForm::Tailo => text.to_string(),
            TextForm::Han => {
                let lex = lexicon.ok_or(EvalError::MissingLexicon)?;
                han_to_tailo(text, lex).tailo
            }
        };
        tone_sequence(&tailo).map_err(|source| EvalError::AtPair { index, source })
    };

    let mut confusion = ToneConfusion::default();
    for (index, (r, h)) in refs.iter().zip(hyps).enumerate() {
        let ref_tones = to_tones(r.as_ref(), index)?;
        let hyp_tones = to_tones(h.as_ref(), index)?;
        let stats = align(&ref_tones, &hyp_tones);
        for op in &stats.ops {
            if let EditOp::Substitute { r, h } = op {
                confusion.record(ref_tones[*r], hyp_tones[*h]);
            }
        }
    }
    Ok(confusion)
}

/// One model row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub cers: Vec<f64>,
}

/// CER table with a designated baseline row for the Rel. columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSpec {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub baseline: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    pub csv: String,
    pub text: String,
}

const REL_FOOTNOTE: &str =
    "Rel. = baseline CER - model CER, in percentage points (an absolute difference, not a ratio of the baseline).";

/// Renders the CER/Rel. table as CSV and aligned text. Every Rel. value is
/// the baseline row's CER minus the row's CER in the same column, formatted
/// at two decimals.
pub fn render_report(spec: &ReportSpec) -> Result<RenderedReport, EvalError> {
    if spec.rows.is_empty() {
        return Err(EvalError::NoRows);
    }
    for row in &spec.rows {
        if row.cers.len() != spec.columns.len() {
            return Err(EvalError::RowWidth {
                name: row.name.clone(),
                got: row.cers.len(),
                want: spec.columns.len(),
            });
        }
    }
    let baseline = spec
        .rows
        .iter()
        .find(|r| r.name == spec.baseline)
        .ok_or_else(|| EvalError::MissingBaseline {
            name: spec.baseline.clone(),
        })?
        .clone();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string()];
    for col in &spec.columns {
        header.push(format!("{col} CER"));
        header.push(format!("{col} Rel."));
    }
    w.write_record(&header)?;
    let mut text_rows: Vec<Vec<String>> = vec![header.clone()];
    for row in &spec.rows {
        let mut record = vec![row.name.clone()];
        for (cer, base) in row.cers.iter().zip(&baseline.cers) {
            record.push(format!("{cer:.2}"));
            if row.name == spec.baseline {
                record.push("-".to_string());
            } else {
                record.push(format!("{:.2}", relative_reduction(*base, *cer)));
            }
        }
        w.write_record(&record)?;
        text_rows.push(record);
    }
    let csv_out = String::from_utf8(w.into_inner().expect("csv flush")).expect("utf8 csv");

    // Aligned text rendering with the footnote.
    let widths: Vec<usize> = (0..text_rows[0].len())
        .map(|c| text_rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for row in &text_rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:>width$}", width = widths[c]))
            .collect();
        text.push_str(&line.join("  "));
        text.push('\n');
    }
    text.push('\n');
    text.push_str(REL_FOOTNOTE);
    text.push('\n');
    Ok(RenderedReport { csv: csv_out, text })
}

/// Corpus-level CER over id-paired reference and hypothesis texts:
/// total errors over total reference length.
pub fn corpus_cer(
    refs: &BTreeMap<String, String>,
    hyps: &BTreeMap<String, String>,
) -> Result<(f64, Vec<(String, AlignmentStats)>), EvalError> {
    let mut per_utt = Vec::with_capacity(refs.len());
    let (mut errors, mut ref_len) = (0usize, 0usize);
    for (id, reference) in refs {
        let hypothesis = hyps.get(id).map(String::as_str).unwrap_or("");
        let (_, stats) = cer(reference, hypothesis)?;
        errors += stats.distance();
        ref_len += stats.ref_len();
        per_utt.push((id.clone(), stats));
    }
    if ref_len == 0 {
        return Err(EvalError::EmptyReference);
    }
    Ok((100.0 * errors as f64 / ref_len as f64, per_utt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_strings_score_zero() {
        let (value, stats) = cer("今仔日", "今仔日").unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(stats.matches, 3);
        assert_eq!(stats.distance(), 0);
    }

    #[test]
    fn single_deletion_worked_example() {
        let (value, stats) = cer("今仔日", "今日").unwrap();
        assert_eq!(stats.deletions, 1);
        assert_eq!(stats.substitutions, 0);
        assert_eq!(stats.insertions, 0);
        assert_eq!(stats.ref_len(), 3);
        assert_eq!(format!("{value:.2}"), "33.33");
    }

    #[test]
    fn dp_matches_exhaustive_search() {
        // Memo-free recursive oracle, fine for lengths up to 8.
        fn brute(r: &[u8], h: &[u8]) -> usize {
            if r.is_empty() {
                return h.len();
            }
            if h.is_empty() {
                return r.len();
            }
            let sub = brute(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
            let del = brute(&r[1..], h) + 1;
            let ins = brute(r, &h[1..]) + 1;
            sub.min(del).min(ins)
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let rl = rng.gen_range(0..=8);
            let hl = rng.gen_range(0..=8);
            let r: Vec<u8> = (0..rl).map(|_| rng.gen_range(0..6)).collect();
            let h: Vec<u8> = (0..hl).map(|_| rng.gen_range(0..6)).collect();
            let stats = align(&r, &h);
            assert_eq!(stats.distance(), brute(&r, &h), "r={r:?} h={h:?}");
            assert_eq!(stats.ref_len(), r.len());
        }
    }

    #[test]
    fn distance_symmetric_ratio_not() {
        let (v_ab, s_ab) = cer("abcd", "ab").unwrap();
        let (v_ba, s_ba) = cer("ab", "abcd").unwrap();
        assert_eq!(s_ab.distance(), s_ba.distance());
        assert!((v_ab - 50.0).abs() < 1e-12);
        assert!((v_ba - 100.0).abs() < 1e-12);
    }

    #[test]
    fn nfc_normalization_unifies_encodings() {
        // "tâi" composed vs decomposed.
        let (value, _) = cer("t\u{00E2}i", "ta\u{0302}i").unwrap();
        assert_eq!(value, 0.0);
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert!(matches!(cer("", "x"), Err(EvalError::EmptyReference)));
    }

    #[test]
    fn relative_reduction_reproduces_published_arithmetic() {
        let cases = [
            (45.82, 20.94, "24.88"),
            (48.57, 22.37, "26.20"),
            (15.69, 15.62, "0.07"),
            (15.69, 8.06, "7.63"),
        ];
        for (baseline, model, expect) in cases {
            let rel = relative_reduction(baseline, model);
            assert_eq!(format!("{rel:.2}"), expect);
        }
    }

    #[test]
    fn confusion_trivial_cases() {
        let refs = ["tai5"];
        let hyps = ["tai5"];
        let conf = tone_confusion(&refs, &hyps, TextForm::Tailo, None).unwrap();
        assert_eq!(conf.total(), 0);
        assert!(conf.normalized().iter().all(Option::is_none));

        let hyps = ["tai7"];
        let conf = tone_confusion(&refs, &hyps, TextForm::Tailo, None).unwrap();
        assert_eq!(conf.count(5, 7), 1);
        assert_eq!(conf.total(), 1);
        let row5 = conf.normalized()[tone_index(5).unwrap()].unwrap();
        assert_eq!(row5[tone_index(7).unwrap()], 1.0);
        assert_eq!(row5.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn deletions_and_insertions_do_not_count() {
        let refs = ["tai5-uan5 lang5"];
        let hyps = ["tai5"];
        let conf = tone_confusion(&refs, &hyps, TextForm::Tailo, None).unwrap();
        assert_eq!(conf.total(), 0);

        let refs = ["tai5"];
        let hyps = ["tai5-uan5 lang5"];
        let conf = tone_confusion(&refs, &hyps, TextForm::Tailo, None).unwrap();
        assert_eq!(conf.total(), 0);
    }

    #[test]
    fn confusion_totals_match_per_pair_substitutions() {
        let refs = ["tai5-uan5 lang5", "kin1-a2-jit8"];
        let hyps = ["tai5-uan7 lang1", "kin2-a2-jit4"];
        let conf = tone_confusion(&refs, &hyps, TextForm::Tailo, None).unwrap();
        let mut expected = 0;
        for (r, h) in refs.iter().zip(&hyps) {
            let rt = crate::orthography::tone_sequence(r).unwrap();
            let ht = crate::orthography::tone_sequence(h).unwrap();
            expected += align(&rt, &ht).substitutions as u64;
        }
        assert_eq!(conf.total(), expected);
        for row in conf.normalized().into_iter().flatten() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn confusion_over_han_uses_lexicon() {
        let lex = HanTailoLexicon::from_tsv("日\tjit8\n天\tthinn1\n今\tkin1\n").unwrap();
        let refs = ["今日"];
        let hyps = ["今天"];
        let conf = tone_confusion(&refs, &hyps, TextForm::Han, Some(&lex)).unwrap();
        assert_eq!(conf.count(8, 1), 1);
        assert_eq!(conf.total(), 1);
        assert!(matches!(
            tone_confusion(&refs, &hyps, TextForm::Han, None),
            Err(EvalError::MissingLexicon)
        ));
    }

    #[test]
    fn report_reproduces_rel_columns() {
        let spec = ReportSpec {
            columns: vec!["dev".into(), "test".into(), "clean".into()],
            rows: vec![
                ReportRow {
                    name: "baseline".into(),
                    cers: vec![48.57, 45.82, 15.69],
                },
                ReportRow {
                    name: "two-stage".into(),
                    cers: vec![22.37, 20.94, 8.06],
                },
            ],
            baseline: "baseline".into(),
        };
        let report = render_report(&spec).unwrap();
        assert!(report.csv.contains("26.20"), "csv: {}", report.csv);
        assert!(report.csv.contains("24.88"));
        assert!(report.csv.contains("7.63"));
        assert!(report.text.contains("percentage points"));

        // The CSV round-trips through a standard parser.
        let mut reader = csv::Reader::from_reader(report.csv.as_bytes());
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[1][0], "two-stage");
        assert_eq!(&rows[1][4], "24.88");
    }

    #[test]
    fn single_row_self_baseline() {
        let spec = ReportSpec {
            columns: vec!["test".into()],
            rows: vec![ReportRow {
                name: "only".into(),
                cers: vec![10.0],
            }],
            baseline: "only".into(),
        };
        let report = render_report(&spec).unwrap();
        // The baseline row marks its own Rel. as "-"; a second run of the
        // same numbers under another name shows 0.00.
        assert!(report.csv.lines().nth(1).unwrap().ends_with('-'));

        let spec2 = ReportSpec {
            columns: vec!["test".into()],
            rows: vec![
                ReportRow { name: "only".into(), cers: vec![10.0] },
                ReportRow { name: "same".into(), cers: vec![10.0] },
            ],
            baseline: "only".into(),
        };
        let report2 = render_report(&spec2).unwrap();
        assert!(report2.csv.contains("0.00"));
    }

    #[test]
    fn report_validation_errors() {
        let row = ReportRow { name: "m".into(), cers: vec![1.0] };
        assert!(matches!(
            render_report(&ReportSpec {
                columns: vec!["a".into()],
                rows: vec![row.clone()],
                baseline: "missing".into(),
            }),
            Err(EvalError::MissingBaseline { .. })
        ));
        assert!(matches!(
            render_report(&ReportSpec {
                columns: vec!["a".into(), "b".into()],
                rows: vec![row],
                baseline: "m".into(),
            }),
            Err(EvalError::RowWidth { .. })
        ));
    }

    #[test]
    fn confusion_csv_shapes() {
        let mut conf = ToneConfusion::default();
        conf.record(5, 7);
        conf.record(5, 5);
        let counts = conf.counts_csv();
        let mut reader = csv::Reader::from_reader(counts.as_bytes());
        assert_eq!(reader.records().count(), 7);
        let normalized = conf.normalized_csv();
        assert!(normalized.contains("0.5"));
    }

    #[test]
    fn corpus_cer_aggregates() {
        let refs: BTreeMap<String, String> = [
            ("a".to_string(), "今仔日".to_string()),
            ("b".to_string(), "好天".to_string()),
        ]
        .into();
        let hyps: BTreeMap<String, String> = [
            ("a".to_string(), "今日".to_string()),
            ("b".to_string(), "好天".to_string()),
        ]
        .into();
        let (value, per_utt) = corpus_cer(&refs, &hyps).unwrap();
        // 1 error over 5 reference characters.
        assert!((value - 20.0).abs() < 1e-12);
        assert_eq!(per_utt.len(), 2);
    }
}
