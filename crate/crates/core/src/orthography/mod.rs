//! Tai-lo syllable parsing, mixed-orthography text normalization, and
//! Han-to-romanization conversion.
//!
//! Tone marks are driven by a versioned data table shipped with the crate
//! (`data/tailo_tone_marks.tsv`); mapping tables and lexica load from
//! two-column TSV files with `#` comments.

pub mod numerals;
mod tailo;

pub use tailo::{
    han_to_tailo, parse_tailo, parse_tailo_with, split_syllables, tone_sequence,
    tone_sequence_with, HanConversion, HanTailoLexicon, TailoOptions, TailoSyllable,
    UNKNOWN_SYLLABLE,
};

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum OrthoError {
    #[error("empty syllable")]
    EmptySyllable,
    #[error("syllable '{syllable}': unexpected character '{ch}'")]
    BadChar { syllable: String, ch: char },
    #[error("syllable '{syllable}': unknown combining mark U+{mark:04X}")]
    UnknownMark { syllable: String, mark: u32 },
    #[error("syllable '{syllable}': conflicting tone annotations (digit plus diacritic, or several diacritics)")]
    ConflictingTone { syllable: String },
    #[error("syllable '{syllable}': bad tone digit '{digit}'")]
    BadDigit { syllable: String, digit: char },
    #[error("syllable '{syllable}': tone {tone} is nonstandard (enable the permissive flag to accept it)")]
    NonstandardTone { syllable: String, tone: u8 },
    #[error("syllable '{syllable}': tone {tone} is invalid for a {}", if *checked { "checked final (p/t/k/h codas take 4 or 8)" } else { "non-checked final (open/nasal finals take 1, 2, 3, 5 or 7)" })]
    ToneClassMismatch {
        syllable: String,
        tone: u8,
        checked: bool,
    },
    #[error("syllable '{syllable}': cannot split into initial and final")]
    Unsplittable { syllable: String },
    #[error("syllable {index}: {source}")]
    AtSyllable {
        index: usize,
        #[source]
        source: Box<OrthoError>,
    },
    #[error("table line {lineno}: expected two tab-separated columns")]
    BadTableLine { lineno: usize },
    #[error("table key '{key}' duplicated after case-folding")]
    DuplicateKey { key: String },
    #[error("table key '{key}' has an empty value")]
    EmptyValue { key: String },
    #[error("variant entry '{key}' must map one character to one character")]
    BadVariant { key: String },
    #[error("variant chain starting at '{key}' forms a cycle")]
    VariantCycle { key: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Two-column TSV: `key<TAB>value`, `#` comments and blank lines ignored.
pub fn load_tsv_pairs(text: &str) -> Result<Vec<(String, String)>, OrthoError> {
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('\t')
            .ok_or(OrthoError::BadTableLine { lineno: idx + 1 })?;
        if v.is_empty() {
            return Err(OrthoError::EmptyValue { key: k.to_string() });
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

/// Romanized-segment and variant-character mapping used by
/// [`normalize_text`]. Romanized keys are case-folded and NFC-normalized;
/// variant chains are resolved at load so application is idempotent.
#[derive(Debug, Clone, Default)]
pub struct MappingTable {
    segments: HashMap<String, String>,
    max_segment_chars: usize,
    variants: HashMap<char, char>,
}

impl MappingTable {
    pub fn from_tsv(text: &str) -> Result<Self, OrthoError> {
        let mut table = MappingTable::default();
        let mut raw_variants: HashMap<char, char> = HashMap::new();
        for (key, value) in load_tsv_pairs(text)? {
            if key.is_empty() {
                return Err(OrthoError::EmptyValue { key });
            }
            if key.chars().all(is_roman_char) {
                let folded: String = key.to_lowercase().nfc().collect();
                if table.segments.contains_key(&folded) {
                    return Err(OrthoError::DuplicateKey { key });
                }
                table.max_segment_chars = table.max_segment_chars.max(folded.chars().count());
                table.segments.insert(folded, value);
            } else {
                let mut kc = key.chars();
                let mut vc = value.chars();
                match (kc.next(), kc.next(), vc.next(), vc.next()) {
                    (Some(k), None, Some(v), None) => {
                        if raw_variants.contains_key(&k) {
                            return Err(OrthoError::DuplicateKey { key });
                        }
                        raw_variants.insert(k, v);
                    }
                    _ => return Err(OrthoError::BadVariant { key }),
                }
            }
        }
        // Resolve chains (a -> b, b -> c becomes a -> c); reject cycles.
        for (&start, _) in &raw_variants {
            let mut cur = start;
            let mut hops = 0;
            while let Some(&next) = raw_variants.get(&cur) {
                if next == cur {
                    break;
                }
                cur = next;
                hops += 1;
                if hops > raw_variants.len() {
                    return Err(OrthoError::VariantCycle {
                        key: start.to_string(),
                    });
                }
            }
            if cur != start {
                table.variants.insert(start, cur);
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, OrthoError> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn variant_count(&self) -> usize {
        self.variants.len()
    }
}

/// Counters from one [`normalize_text_with_report`] pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NormalizeReport {
    pub segments_replaced: usize,
    /// Maximal romanized runs left untouched (no table hit).
    pub unknown_segments: usize,
    pub digit_runs_converted: usize,
    pub variants_applied: usize,
}

/// Latin-script letters (including combining marks) as used in romanized
/// segments; excludes CJK, which is alphabetic but lives above U+2E80.
fn is_roman_letter(c: char) -> bool {
    (c as u32) < 0x2E80 && (c.is_alphabetic() || is_combining_mark(c))
}

fn is_roman_char(c: char) -> bool {
    c.is_ascii_digit() || c == '-' || is_roman_letter(c)
}

/// Word characters for segment-boundary purposes; hyphen is a boundary.
fn is_word_char(c: char) -> bool {
    c.is_ascii_digit() || is_roman_letter(c)
}

/// Hàn-Lô normalization: romanized segments found in the table become Han
/// (longest match first, case-folded, at word boundaries), standalone Arabic
/// digit runs become Chinese numerals (digit-wise for leading zeros or more
/// than eight digits), and variant characters collapse to their canonical
/// forms. Idempotent; unknown romanized segments pass through and are
/// counted.
pub fn normalize_text(text: &str, table: &MappingTable) -> String {
    normalize_text_with_report(text, table).0
}

pub fn normalize_text_with_report(text: &str, table: &MappingTable) -> (String, NormalizeReport) {
    let mut report = NormalizeReport::default();
    let chars: Vec<char> = text.nfc().collect();
    let mut out: Vec<char> = Vec::with_capacity(chars.len());

    // Pass 1: romanized segments -> Han.
    let mut i = 0;
    let mut run_has_letter = false;
    let close_run = |report: &mut NormalizeReport, has_letter: &mut bool| {
        if *has_letter {
            report.unknown_segments += 1;
            *has_letter = false;
        }
    };
    while i < chars.len() {
        let at_boundary = i == 0 || !is_word_char(chars[i - 1]);
        let mut matched = false;
        if at_boundary && is_word_char(chars[i]) && table.max_segment_chars > 0 {
            let limit = table.max_segment_chars.min(chars.len() - i);
            for len in (1..=limit).rev() {
                let after_ok = i + len >= chars.len() || !is_word_char(chars[i + len]);
                if !after_ok {
                    continue;
                }
                let candidate: String = chars[i..i + len].iter().collect::<String>().to_lowercase();
                if let Some(replacement) = table.segments.get(&candidate) {
                    close_run(&mut report, &mut run_has_letter);
                    out.extend(replacement.chars());
                    report.segments_replaced += 1;
                    i += len;
                    matched = true;
                    break;
                }
            }
        }
        if !matched {
            let c = chars[i];
            if is_roman_letter(c) || c == '-' || c.is_ascii_digit() {
                if is_roman_letter(c) {
                    run_has_letter = true;
                }
            } else {
                close_run(&mut report, &mut run_has_letter);
            }
            out.push(c);
            i += 1;
        }
    }
    close_run(&mut report, &mut run_has_letter);

    // Pass 2: standalone digit runs -> Chinese numerals. Runs touching a
    // letter are tone digits or ids inside romanized tokens and stay put.
    let chars = out;
    let mut out: Vec<char> = Vec::with_capacity(chars.len());
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let before_letter = start > 0 && is_roman_letter(chars[start - 1]);
            let after_letter = i < chars.len() && is_roman_letter(chars[i]);
            let run: String = chars[start..i].iter().collect();
            if before_letter || after_letter {
                out.extend(run.chars());
            } else {
                let rendered = if run.len() > 8 || (run.len() >= 2 && run.starts_with('0')) {
                    numerals::digitwise(&run)
                } else {
                    numerals::chinese_numeral(run.parse::<u64>().expect("digit run"))
                };
                out.extend(rendered.chars());
                report.digit_runs_converted += 1;
            }
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }

    // Pass 3: variant characters.
    let result: String = out
        .into_iter()
        .map(|c| match table.variants.get(&c) {
            Some(&canon) => {
                report.variants_applied += 1;
                canon
            }
            None => c,
        })
        .collect();
    (result, report)
}
