//! Tai-lo syllable parsing with tone extraction, plus Han-to-Tai-lo
//! conversion over a lexicon.

use std::collections::HashMap;
use std::sync::OnceLock;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use super::{load_tsv_pairs, OrthoError};

/// Placeholder emitted for characters absent from a Han-to-Tai-lo lexicon;
/// excluded from tone statistics.
pub const UNKNOWN_SYLLABLE: &str = "*";

/// Initial consonants, longest first so prefix matching is unambiguous.
const INITIALS: [&str; 18] = [
    "tsh", "ts", "ph", "th", "kh", "ng", "p", "b", "m", "t", "n", "l", "k", "g", "h", "s", "j",
    "r",
];

/// Syllabic-nasal finals: syllables with no vowel nucleus.
const NASAL_FINALS: [&str; 4] = ["ngh", "ng", "mh", "m"];

const STANDARD_TONES: [u8; 7] = [1, 2, 3, 4, 5, 7, 8];

/// Tone-mark table shipped as `data/tailo_tone_marks.tsv`.
fn tone_marks() -> &'static HashMap<char, u8> {
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let raw = include_str!("../../data/tailo_tone_marks.tsv");
        load_tsv_pairs(raw)
            .expect("shipped tone-mark table parses")
            .into_iter()
            .map(|(k, v)| {
                let cp = u32::from_str_radix(&k, 16).expect("hex codepoint");
                let mark = char::from_u32(cp).expect("valid codepoint");
                let tone: u8 = v.parse().expect("tone digit");
                (mark, tone)
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TailoOptions {
    /// Accept tones 6 and 9 and skip the checked/open tone-class validation.
    pub permissive: bool,
}

/// One parsed syllable. `final_` is the rime with tone marks stripped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TailoSyllable {
    pub initial: String,
    pub final_: String,
    pub tone: u8,
    pub raw: String,
}

impl TailoSyllable {
    /// Syllable with the tone written as a trailing digit.
    pub fn render_digits(&self) -> String {
        format!("{}{}{}", self.initial, self.final_, self.tone)
    }

    /// Finals ending in p/t/k/h carry the checked (entering) tones 4 and 8.
    pub fn is_checked(&self) -> bool {
        ends_checked(&self.final_)
    }
}

fn ends_checked(final_: &str) -> bool {
    matches!(final_.chars().last(), Some('p' | 't' | 'k' | 'h'))
}

pub fn parse_tailo(token: &str) -> Result<TailoSyllable, OrthoError> {
    parse_tailo_with(token, &TailoOptions::default())
}

pub fn parse_tailo_with(token: &str, opts: &TailoOptions) -> Result<TailoSyllable, OrthoError> {
    if token.is_empty() {
        return Err(OrthoError::EmptySyllable);
    }
    let syl = || token.to_string();

    // Decompose so diacritics become standalone combining marks.
    let mut base = String::new();
    let mut marks: Vec<u8> = Vec::new();
    let mut digit: Option<char> = None;
    let decomposed: Vec<char> = token.nfd().collect();
    for (pos, &c) in decomposed.iter().enumerate() {
        if c.is_ascii_alphabetic() {
            if digit.is_some() {
                // letters after the tone digit
                return Err(OrthoError::BadChar {
                    syllable: syl(),
                    ch: c,
                });
            }
            base.push(c.to_ascii_lowercase());
        } else if c.is_ascii_digit() {
            if digit.is_some() || pos + 1 != decomposed.len() {
                return Err(OrthoError::BadDigit {
                    syllable: syl(),
                    digit: c,
                });
            }
            digit = Some(c);
        } else if is_combining_mark(c) {
            match tone_marks().get(&c) {
                Some(&tone) => marks.push(tone),
                None => {
                    return Err(OrthoError::UnknownMark {
                        syllable: syl(),
                        mark: c as u32,
                    })
                }
            }
        } else {
            return Err(OrthoError::BadChar {
                syllable: syl(),
                ch: c,
            });
        }
    }
    if base.is_empty() {
        return Err(OrthoError::EmptySyllable);
    }
    if marks.len() > 1 || (digit.is_some() && !marks.is_empty()) {
        return Err(OrthoError::ConflictingTone { syllable: syl() });
    }

    let checked = ends_checked(&base);
    let tone = if let Some(d) = digit {
        let t = d.to_digit(10).unwrap() as u8;
        if t == 0 {
            return Err(OrthoError::BadDigit {
                syllable: syl(),
                digit: d,
            });
        }
        t
    } else if let Some(&t) = marks.first() {
        t
    } else if checked {
        4
    } else {
        1
    };

    if !STANDARD_TONES.contains(&tone) {
        if !opts.permissive {
            return Err(OrthoError::NonstandardTone {
                syllable: syl(),
                tone,
            });
        }
    } else if !opts.permissive {
        let class_ok = if checked {
            matches!(tone, 4 | 8)
        } else {
            matches!(tone, 1 | 2 | 3 | 5 | 7)
        };
        if !class_ok {
            return Err(OrthoError::ToneClassMismatch {
                syllable: syl(),
                tone,
                checked,
            });
        }
    }

    let (initial, final_) = split_base(&base).ok_or(OrthoError::Unsplittable { syllable: syl() })?;
    Ok(TailoSyllable {
        initial: initial.to_string(),
        final_: final_.to_string(),
        tone,
        raw: token.to_string(),
    })
}

fn has_vowel(s: &str) -> bool {
    s.chars().any(|c| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u'))
}

/// Splits a lowercased, mark-free base into (initial, final). The final must
/// be non-empty and either contain a vowel nucleus or be a syllabic nasal.
fn split_base(base: &str) -> Option<(&str, &str)> {
    if NASAL_FINALS.contains(&base) {
        return Some(("", base));
    }
    for init in INITIALS {
        if let Some(rest) = base.strip_prefix(init) {
            if !rest.is_empty() && (has_vowel(rest) || NASAL_FINALS.contains(&rest)) {
                return Some((init, rest));
            }
        }
    }
    if has_vowel(base) && base.starts_with(|c| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')) {
        return Some(("", base));
    }
    None
}

/// Splits running Tai-lo text into syllable tokens on whitespace and hyphens.
pub fn split_syllables(text: &str) -> Vec<&str> {
    text.split(|c: char| c.is_whitespace() || c == '-')
        .filter(|s| !s.is_empty())
        .collect()
}

/// Surface tones of a Tai-lo string, one per syllable, no sandhi applied.
/// Unknown-syllable placeholders (from [`han_to_tailo`]) are skipped.
pub fn tone_sequence(text: &str) -> Result<Vec<u8>, OrthoError> {
    tone_sequence_with(text, &TailoOptions::default())
}

pub fn tone_sequence_with(text: &str, opts: &TailoOptions) -> Result<Vec<u8>, OrthoError> {
    let mut tones = Vec::new();
    for (index, token) in split_syllables(text).iter().enumerate() {
        if *token == UNKNOWN_SYLLABLE {
            continue;
        }
        let syllable = parse_tailo_with(token, opts).map_err(|e| OrthoError::AtSyllable {
            index,
            source: Box::new(e),
        })?;
        tones.push(syllable.tone);
    }
    Ok(tones)
}

/// Han-string-to-Tai-lo lexicon with greedy longest-match segmentation.
#[derive(Debug, Clone, Default)]
pub struct HanTailoLexicon {
    entries: HashMap<String, String>,
    max_key_chars: usize,
}

impl HanTailoLexicon {
    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(
        pairs: I,
    ) -> Result<Self, OrthoError> {
        let mut lex = HanTailoLexicon::default();
        for (k, v) in pairs {
            if v.is_empty() {
                return Err(OrthoError::EmptyValue { key: k });
            }
            let key: String = k.nfc().collect();
            if lex.entries.contains_key(&key) {
                return Err(OrthoError::DuplicateKey { key });
            }
            lex.max_key_chars = lex.max_key_chars.max(key.chars().count());
            lex.entries.insert(key, v);
        }
        Ok(lex)
    }

    pub fn from_tsv(text: &str) -> Result<Self, OrthoError> {
        Self::from_pairs(load_tsv_pairs(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, OrthoError> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Result of Han-to-Tai-lo conversion; unmatched characters become
/// [`UNKNOWN_SYLLABLE`] tokens and are counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HanConversion {
    pub tailo: String,
    pub unknown: usize,
}

/// Greedy longest-match segmentation of Han text over the lexicon; output
/// tokens are space-separated.
pub fn han_to_tailo(text: &str, lexicon: &HanTailoLexicon) -> HanConversion {
    let chars: Vec<char> = text.nfc().collect();
    let mut tokens: Vec<String> = Vec::new();
    let mut unknown = 0;
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let limit = lexicon.max_key_chars.min(chars.len() - i);
        let mut matched = false;
        for len in (1..=limit).rev() {
            let candidate: String = chars[i..i + len].iter().collect();
            if let Some(tailo) = lexicon.entries.get(&candidate) {
                tokens.push(tailo.clone());
                i += len;
                matched = true;
                break;
            }
        }
        if !matched {
            tokens.push(UNKNOWN_SYLLABLE.to_string());
            unknown += 1;
            i += 1;
        }
    }
    HanConversion {
        tailo: tokens.join(" "),
        unknown,
    }
}
