//! Deterministic generator for a toy tonal language with dual orthographies
//! and synthetic acoustic features, plus a related source language for
//! emulating cross-lingual encoder initialization.
//!
//! Tone identity is carried by exactly two feature dimensions (a pitch
//! contour value and its slope); the remaining dimensions hold a fixed random
//! embedding of the syllable's segmental identity. Everything is a pure
//! function of the spec and its seed.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Utterance;
use crate::numerics::Tensor;

const FEATURE_MAGIC: &[u8; 4] = b"CLFF";
const FEATURE_VERSION: u32 = 1;

/// Tone labels of the toy language.
pub const TONES: [u8; 7] = [1, 2, 3, 4, 5, 7, 8];

// RNG stream assignments under the corpus seed.
const STREAM_LEXICON: u64 = 0;
const STREAM_HAN: u64 = 1;
const STREAM_PHONEMES: u64 = 2;
const STREAM_UTTERANCES: u64 = 3; // + split index
const STREAM_SOURCE_LEXICON: u64 = 16;
const STREAM_SOURCE_HAN: u64 = 17;
const STREAM_SOURCE_PHONEMES: u64 = 18;
const STREAM_SOURCE_UTTERANCES: u64 = 19;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("config: {0}")]
    Config(String),
    #[error("syllable inventory too small: needed {needed} distinct words, built {built}")]
    InventoryTooSmall { needed: usize, built: usize },
    #[error("feature file {path}: {detail}")]
    FeatureFormat { path: String, detail: String },
    #[error("manifest line {lineno}: {0}", lineno = .1)]
    ManifestFormat(#[source] serde_json::Error, usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Pitch-contour templates per tone, rendered as (value, slope) pairs after
/// resampling to a syllable's frame count.
#[derive(Debug, Clone)]
pub struct ToneContourBank {
    tones: Vec<u8>,
    templates: Vec<Vec<f64>>,
}

impl ToneContourBank {
    /// The seven-tone bank: level tones at distinct heights, rising, falling
    /// and dipping contours, with the checked tones (4, 8) short by
    /// convention in the generator.
    pub fn standard() -> Self {
        ToneContourBank {
            tones: TONES.to_vec(),
            templates: vec![
                vec![0.95; 8],                                        // 1: high level
                ramp(0.40, 0.90),                                     // 2: rising
                ramp(0.45, 0.02),                                     // 3: low falling
                vec![0.20; 8],                                        // 4: short low
                vec![0.62, 0.45, 0.30, 0.30, 0.38, 0.52, 0.68, 0.85], // 5: dipping-rising
                vec![0.50; 8],                                        // 7: mid level
                vec![0.72; 8],                                        // 8: short high
            ],
        }
    }

    /// Four-tone bank for the source language (level, rising, dipping,
    /// falling), reusing the target templates so shared acoustics stay
    /// plausible.
    pub fn source() -> Self {
        let std = Self::standard();
        ToneContourBank {
            tones: vec![1, 2, 3, 5],
            templates: vec![
                std.templates[0].clone(),
                std.templates[1].clone(),
                std.templates[2].clone(),
                std.templates[4].clone(),
            ],
        }
    }

    pub fn tones(&self) -> &[u8] {
        &self.tones
    }

    fn template(&self, tone: u8) -> &[f64] {
        let idx = self
            .tones
            .iter()
            .position(|&t| t == tone)
            .expect("tone in bank");
        &self.templates[idx]
    }

    /// Template resampled to `frames` points with centered-difference slopes.
    pub fn contour(&self, tone: u8, frames: usize) -> Vec<(f64, f64)> {
        let values = resample(self.template(tone), frames);
        (0..frames)
            .map(|j| {
                let hi = values[(j + 1).min(frames - 1)];
                let lo = values[j.saturating_sub(1)];
                (values[j], (hi - lo) / 2.0)
            })
            .collect()
    }

    /// Smallest pairwise L2 distance between template values resampled to
    /// `frames` points.
    pub fn min_pairwise_distance(&self, frames: usize) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.templates.len() {
            for j in i + 1..self.templates.len() {
                let a = resample(&self.templates[i], frames);
                let b = resample(&self.templates[j], frames);
                let d: f64 = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        min
    }

    /// Nearest-template tone for observed (value, slope) frames.
    pub fn classify(&self, pitch: &[(f64, f64)]) -> u8 {
        let frames = pitch.len();
        let mut best = (f64::INFINITY, self.tones[0]);
        for &tone in &self.tones {
            let template = self.contour(tone, frames);
            let dist: f64 = template
                .iter()
                .zip(pitch)
                .map(|((tv, ts), (pv, ps))| (tv - pv) * (tv - pv) + (ts - ps) * (ts - ps))
                .sum();
            if dist < best.0 {
                best = (dist, tone);
            }
        }
        best.1
    }
}

fn ramp(from: f64, to: f64) -> Vec<f64> {
    (0..8).map(|i| from + (to - from) * i as f64 / 7.0).collect()
}

fn resample(template: &[f64], frames: usize) -> Vec<f64> {
    assert!(frames >= 1);
    if frames == 1 {
        return vec![template[template.len() / 2]];
    }
    let last = (template.len() - 1) as f64;
    (0..frames)
        .map(|j| {
            let x = j as f64 * last / (frames - 1) as f64;
            let i = (x.floor() as usize).min(template.len() - 2);
            let frac = x - i as f64;
            template[i] * (1.0 - frac) + template[i + 1] * frac
        })
        .collect()
}

/// Generator parameters for the toy language.
#[derive(Debug, Clone)]
pub struct ToyLanguageSpec {
    pub initials: Vec<String>,
    pub open_finals: Vec<String>,
    pub checked_finals: Vec<String>,
    pub lexicon_size: usize,
    /// Fraction of words with a second Han rendering.
    pub han_ambiguity_rate: f64,
    /// Fraction of words with no Han rendering at all: their character-form
    /// text keeps the romanized spelling, as in mixed Hàn-Lô orthography.
    pub hanlo_roman_rate: f64,
    pub frames_lo: usize,
    pub frames_hi: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub words_lo: usize,
    pub words_hi: usize,
    pub speakers: usize,
    pub seed: u64,
}

impl Default for ToyLanguageSpec {
    fn default() -> Self {
        ToyLanguageSpec {
            initials: ["", "p", "ph", "m", "b", "t", "th", "n", "l", "k", "kh", "g", "h", "ts", "tsh", "s", "j"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            open_finals: ["a", "i", "u", "e", "oo", "ai", "au", "ia", "iu", "ua", "am", "an", "ang", "im", "in", "ing", "ong", "un"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            checked_finals: ["ap", "at", "ak", "ah", "ip", "it", "ik", "ok", "ut", "uh"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            lexicon_size: 50,
            han_ambiguity_rate: 0.15,
            hanlo_roman_rate: 0.25,
            frames_lo: 4,
            frames_hi: 8,
            feature_dim: 16,
            noise_sigma: 0.05,
            words_lo: 2,
            words_hi: 6,
            speakers: 12,
            seed: 0,
        }
    }
}

impl ToyLanguageSpec {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.feature_dim < 3 {
            return Err(CorpusError::Config(
                "feature_dim must be at least 3 (2 pitch dims + segments)".into(),
            ));
        }
        if self.frames_lo < 2 || self.frames_hi < self.frames_lo {
            return Err(CorpusError::Config(format!(
                "bad frame range [{}, {}]",
                self.frames_lo, self.frames_hi
            )));
        }
        if self.words_lo == 0 || self.words_hi < self.words_lo {
            return Err(CorpusError::Config(format!(
                "bad words-per-utterance range [{}, {}]",
                self.words_lo, self.words_hi
            )));
        }
        if self.initials.is_empty() || self.open_finals.is_empty() || self.checked_finals.is_empty()
        {
            return Err(CorpusError::Config("empty syllable inventory".into()));
        }
        if self.lexicon_size == 0 || self.speakers < 3 {
            return Err(CorpusError::Config(
                "need lexicon_size >= 1 and speakers >= 3".into(),
            ));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyllableSpec {
    pub initial: usize,
    /// Index into open finals, or `open_finals.len() + i` for checked final i.
    pub final_idx: usize,
    pub tone: u8,
}

#[derive(Debug, Clone)]
pub struct Word {
    pub tailo: String,
    pub syllables: Vec<SyllableSpec>,
    /// One or two Han renderings; utterances pick per occurrence.
    pub han: Vec<String>,
}

/// A fully sampled language: lexicon plus acoustic parameter tables.
pub struct Language {
    pub spec: ToyLanguageSpec,
    pub words: Vec<Word>,
    pub bank: ToneContourBank,
    /// Segment embeddings, one row of `feature_dim - 2` values per
    /// (initial, final) pair.
    pub phoneme_table: Vec<Vec<f64>>,
    id_prefix: &'static str,
    utterance_stream: u64,
}

impl Language {
    pub fn target(spec: &ToyLanguageSpec) -> Result<Self, CorpusError> {
        spec.validate()?;
        let bank = ToneContourBank::standard();
        let words = sample_lexicon(
            spec,
            &bank,
            spec.rng(STREAM_LEXICON),
            spec.rng(STREAM_HAN),
            0x4E00,
            &[],
        )?;
        let phoneme_table = sample_phoneme_table(spec, spec.rng(STREAM_PHONEMES));
        Ok(Language {
            spec: spec.clone(),
            words,
            bank,
            phoneme_table,
            id_prefix: "",
            utterance_stream: STREAM_UTTERANCES,
        })
    }

    /// The related source language: `overlap` of the phoneme-embedding rows
    /// are shared with the target, the contour bank holds four tones, and
    /// lexicon plus Han renderings are disjoint from the target's.
    pub fn source(spec: &ToyLanguageSpec, overlap: f64) -> Result<Self, CorpusError> {
        spec.validate()?;
        if !(0.0..=1.0).contains(&overlap) {
            return Err(CorpusError::Config(format!(
                "overlap {overlap} outside [0, 1]"
            )));
        }
        let target = Language::target(spec)?;
        let taken: Vec<String> = target.words.iter().map(|w| w.tailo.clone()).collect();
        let bank = ToneContourBank::source();
        let words = sample_lexicon(
            spec,
            &bank,
            spec.rng(STREAM_SOURCE_LEXICON),
            spec.rng(STREAM_SOURCE_HAN),
            0x7000,
            &taken,
        )?;
        let mut phoneme_table = sample_phoneme_table(spec, spec.rng(STREAM_SOURCE_PHONEMES));
        let shared = ((phoneme_table.len() as f64) * overlap).round() as usize;
        for (row, target_row) in phoneme_table
            .iter_mut()
            .zip(&target.phoneme_table)
            .take(shared)
        {
            row.clone_from(target_row);
        }
        Ok(Language {
            spec: spec.clone(),
            words,
            bank,
            phoneme_table,
            id_prefix: "src_",
            utterance_stream: STREAM_SOURCE_UTTERANCES,
        })
    }

    fn final_count(&self) -> usize {
        self.spec.open_finals.len() + self.spec.checked_finals.len()
    }

    fn is_checked(&self, final_idx: usize) -> bool {
        final_idx >= self.spec.open_finals.len()
    }

    /// Frame count range per tone class: checked tones sit at the short end.
    fn frame_range(&self, checked: bool) -> (usize, usize) {
        let (lo, hi) = (self.spec.frames_lo, self.spec.frames_hi);
        if checked {
            (lo, (lo + 1).min(hi))
        } else {
            ((lo + 2).min(hi), hi)
        }
    }

    /// Synthesizes the feature rows of one syllable: segment embedding in the
    /// leading dims, pitch (value, slope) in the last two, Gaussian noise on
    /// everything.
    fn syllable_frames<R: Rng>(&self, syl: &SyllableSpec, frames: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let d = self.spec.feature_dim;
        let noise = Normal::new(0.0, self.spec.noise_sigma).expect("sigma >= 0");
        let segment = &self.phoneme_table[syl.initial * self.final_count() + syl.final_idx];
        let contour = self.bank.contour(syl.tone, frames);
        contour
            .into_iter()
            .map(|(value, slope)| {
                let mut row = Vec::with_capacity(d);
                row.extend_from_slice(segment);
                row.push(value);
                row.push(slope);
                if self.spec.noise_sigma > 0.0 {
                    for v in &mut row {
                        *v += noise.sample(rng);
                    }
                }
                row
            })
            .collect()
    }

    /// Samples one utterance (word sequence, transcripts, features).
    fn sample_utterance<R: Rng>(&self, id: String, rng: &mut R) -> Utterance {
        let n_words = rng.gen_range(self.spec.words_lo..=self.spec.words_hi);
        let mut tailo_parts = Vec::with_capacity(n_words);
        let mut han = String::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for _ in 0..n_words {
            let word = &self.words[rng.gen_range(0..self.words.len())];
            tailo_parts.push(word.tailo.clone());
            let rendering = if word.han.len() > 1 {
                &word.han[rng.gen_range(0..word.han.len())]
            } else {
                &word.han[0]
            };
            // Romanized segments are space-delimited in the mixed text.
            let roman = rendering.bytes().any(|b| b.is_ascii_alphanumeric());
            let prev_roman = han
                .chars()
                .last()
                .is_some_and(|c| c.is_ascii_alphanumeric());
            if !han.is_empty() && (roman || prev_roman) {
                han.push(' ');
            }
            han.push_str(rendering);
            for syl in &word.syllables {
                let (lo, hi) = self.frame_range(self.is_checked(syl.final_idx));
                let frames = rng.gen_range(lo..=hi);
                rows.extend(self.syllable_frames(syl, frames, rng));
            }
        }
        let features = Tensor::from_rows(&rows).expect("uniform feature rows");
        Utterance {
            id,
            features,
            tailo_text: tailo_parts.join(" "),
            han_text: han,
        }
    }

    /// Han-rendering-to-Tai-lo lexicon lines for this language.
    pub fn lexicon_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        for word in &self.words {
            for rendering in &word.han {
                pairs.push((rendering.clone(), word.tailo.clone()));
            }
        }
        pairs
    }
}

fn sample_phoneme_table(spec: &ToyLanguageSpec, mut rng: ChaCha8Rng) -> Vec<Vec<f64>> {
    let rows = spec.initials.len() * (spec.open_finals.len() + spec.checked_finals.len());
    let d = spec.feature_dim - 2;
    (0..rows)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn sample_lexicon(
    spec: &ToyLanguageSpec,
    bank: &ToneContourBank,
    mut word_rng: ChaCha8Rng,
    mut han_rng: ChaCha8Rng,
    han_base: u32,
    exclude: &[String],
) -> Result<Vec<Word>, CorpusError> {
    let finals = spec.open_finals.len() + spec.checked_finals.len();
    let open_tones: Vec<u8> = bank.tones().iter().copied().filter(|t| *t != 4 && *t != 8).collect();
    let checked_tones: Vec<u8> = bank
        .tones()
        .iter()
        .copied()
        .filter(|t| *t == 4 || *t == 8)
        .collect();

    // Shuffled pool of Han characters; every rendering draws fresh characters,
    // so renderings are globally unique and the reverse lexicon is a function.
    let mut han_pool: Vec<char> = (0..6 * spec.lexicon_size as u32 + 64)
        .filter_map(|i| char::from_u32(han_base + i))
        .collect();
    han_pool.shuffle(&mut han_rng);
    let mut han_next = 0usize;
    let mut draw_han = |count: usize| -> String {
        let s: String = han_pool[han_next..han_next + count].iter().collect();
        han_next += count;
        s
    };

    // Words come in tone-minimal-pair groups: one segmental shape yields a
    // few lexicon words that differ only in their tone pattern (each with
    // unrelated Han renderings), so tone identity is decisive for
    // recognition rather than incidental. Word lengths, group sizes,
    // romanized-rendering and ambiguity quotas follow fixed schedules so
    // corpus difficulty stays comparable across seeds.
    const LENGTH_CYCLE: [usize; 5] = [2, 1, 2, 3, 2];
    const GROUP_CYCLE: [usize; 2] = [2, 3];
    let mut words: Vec<Word> = Vec::with_capacity(spec.lexicon_size);
    let mut seen: std::collections::HashSet<String> = exclude.iter().cloned().collect();
    let mut attempts = 0;
    let mut group_idx = 0;
    let roman_every = if spec.hanlo_roman_rate > 0.0 {
        (1.0 / spec.hanlo_roman_rate).round().max(1.0) as usize
    } else {
        usize::MAX
    };
    let ambiguous_every = if spec.han_ambiguity_rate > 0.0 {
        (1.0 / spec.han_ambiguity_rate).round().max(1.0) as usize
    } else {
        usize::MAX
    };
    while words.len() < spec.lexicon_size {
        attempts += 1;
        if attempts > 200 * spec.lexicon_size {
            return Err(CorpusError::InventoryTooSmall {
                needed: spec.lexicon_size,
                built: words.len(),
            });
        }
        let n_syll = LENGTH_CYCLE[group_idx % LENGTH_CYCLE.len()];
        let shape: Vec<(usize, usize)> = (0..n_syll)
            .map(|_| {
                let initial = word_rng.gen_range(0..spec.initials.len());
                let final_idx = if checked_tones.is_empty() {
                    // Source banks lack checked tones; stay on open finals.
                    word_rng.gen_range(0..spec.open_finals.len())
                } else {
                    word_rng.gen_range(0..finals)
                };
                (initial, final_idx)
            })
            .collect();
        let variants =
            GROUP_CYCLE[group_idx % GROUP_CYCLE.len()].min(spec.lexicon_size - words.len());
        group_idx += 1;
        for _ in 0..variants {
            let syllables: Vec<SyllableSpec> = shape
                .iter()
                .map(|&(initial, final_idx)| {
                    let checked = final_idx >= spec.open_finals.len();
                    let tone = if checked {
                        checked_tones[word_rng.gen_range(0..checked_tones.len())]
                    } else {
                        open_tones[word_rng.gen_range(0..open_tones.len())]
                    };
                    SyllableSpec {
                        initial,
                        final_idx,
                        tone,
                    }
                })
                .collect();
            let tailo = syllables
                .iter()
                .map(|s| {
                    let final_str = if s.final_idx < spec.open_finals.len() {
                        &spec.open_finals[s.final_idx]
                    } else {
                        &spec.checked_finals[s.final_idx - spec.open_finals.len()]
                    };
                    format!("{}{}{}", spec.initials[s.initial], final_str, s.tone)
                })
                .collect::<Vec<_>>()
                .join("-");
            if !seen.insert(tailo.clone()) {
                continue;
            }
            let index = words.len();
            let han = if roman_every != usize::MAX && index % roman_every == roman_every - 1 {
                // No Han rendering exists: the character-form text keeps the
                // romanized spelling (mixed Hàn-Lô).
                vec![tailo.clone()]
            } else {
                // Han renderings run shorter than the syllable count (as
                // with real contractions), so character targets
                // under-segment the audio.
                let han_len =
                    word_rng.gen_range(syllables.len().div_ceil(2)..=syllables.len());
                let mut han = vec![draw_han(han_len)];
                if ambiguous_every != usize::MAX && index % ambiguous_every == 0 {
                    han.push(draw_han(han_len));
                }
                han
            };
            words.push(Word {
                tailo,
                syllables,
                han,
            });
        }
    }
    Ok(words)
}

/// One manifest record; `feature_path` is relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: String,
    pub tailo_text: String,
    pub han_text: String,
    pub num_frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Paths and entries produced by one generation run.
pub struct CorpusSummary {
    pub manifests: Vec<(String, PathBuf)>,
    pub entries: Vec<(String, Vec<ManifestEntry>)>,
    pub lexicon_path: PathBuf,
}

/// Generates the target-language corpus: split manifests (JSON-lines),
/// binary feature files, and the Han-to-Tai-lo lexicon TSV.
///
/// Splits are disjoint by a speaker-like grouping key baked into the ids;
/// the key has no acoustic effect.
pub fn gen_corpus(
    spec: &ToyLanguageSpec,
    sizes: &SplitSizes,
    out_dir: &Path,
) -> Result<CorpusSummary, CorpusError> {
    let lang = Language::target(spec)?;
    write_corpus(&lang, sizes, out_dir)
}

/// Generates the source-language corpus (see [`Language::source`]).
pub fn gen_source_corpus(
    spec: &ToyLanguageSpec,
    overlap: f64,
    sizes: &SplitSizes,
    out_dir: &Path,
) -> Result<CorpusSummary, CorpusError> {
    let lang = Language::source(spec, overlap)?;
    write_corpus(&lang, sizes, out_dir)
}

fn write_corpus(
    lang: &Language,
    sizes: &SplitSizes,
    out_dir: &Path,
) -> Result<CorpusSummary, CorpusError> {
    if sizes.train == 0 || sizes.dev == 0 || sizes.test == 0 {
        return Err(CorpusError::Config("every split needs at least 1 utterance".into()));
    }
    let feature_dir = out_dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(io_err(&feature_dir))?;

    // Disjoint speaker sets: half for train, a quarter each for dev/test.
    let n = lang.spec.speakers;
    let speaker_sets = [
        (0, n / 2),
        (n / 2, n * 3 / 4),
        (n * 3 / 4, n),
    ];

    let mut summary = CorpusSummary {
        manifests: Vec::new(),
        entries: Vec::new(),
        lexicon_path: out_dir.join(format!("{}lexicon.tsv", lang.id_prefix)),
    };
    for (split_idx, (split, count)) in [
        ("train", sizes.train),
        ("dev", sizes.dev),
        ("test", sizes.test),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = lang.spec.rng(lang.utterance_stream + split_idx as u64);
        let (spk_lo, spk_hi) = speaker_sets[split_idx];
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let speaker = rng.gen_range(spk_lo..spk_hi);
            let id = format!("{}{}_s{:02}_{:05}", lang.id_prefix, split, speaker, i);
            let utt = lang.sample_utterance(id.clone(), &mut rng);
            let feature_path = format!("features/{id}.clff");
            write_features(&out_dir.join(&feature_path), &utt.features)?;
            entries.push(ManifestEntry {
                id,
                feature_path,
                tailo_text: utt.tailo_text,
                han_text: utt.han_text,
                num_frames: utt.features.shape()[0],
            });
        }
        let manifest_path = out_dir.join(format!("{}{split}.jsonl", lang.id_prefix));
        write_manifest(&manifest_path, &entries)?;
        summary.manifests.push((split.to_string(), manifest_path));
        summary.entries.push((split.to_string(), entries));
    }

    let mut lexicon = String::new();
    for (han, tailo) in lang.lexicon_pairs() {
        lexicon.push_str(&format!("{han}\t{tailo}\n"));
    }
    fs::write(&summary.lexicon_path, lexicon).map_err(io_err(&summary.lexicon_path))?;
    Ok(summary)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for entry in entries {
        serde_json::to_writer(&mut w, entry).map_err(|e| CorpusError::ManifestFormat(e, 0))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| CorpusError::ManifestFormat(e, idx + 1))
        })
        .collect()
}

/// Loads manifest entries and their feature files into utterances; feature
/// paths resolve relative to the manifest's directory.
pub fn load_utterances(manifest: &Path) -> Result<Vec<Utterance>, CorpusError> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|entry| {
            let path = base.join(&entry.feature_path);
            let features = read_features(&path)?;
            if features.shape()[0] != entry.num_frames {
                return Err(CorpusError::FeatureFormat {
                    path: path.display().to_string(),
                    detail: format!(
                        "num_frames {} in manifest, {} in file",
                        entry.num_frames,
                        features.shape()[0]
                    ),
                });
            }
            Ok(Utterance {
                id: entry.id,
                features,
                tailo_text: entry.tailo_text,
                han_text: entry.han_text,
            })
        })
        .collect()
}

/// Binary feature file: magic "CLFF", version, T, d (u32 LE each), then
/// T·d little-endian f32 values.
pub fn write_features(path: &Path, features: &Tensor) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    let write = |w: &mut BufWriter<fs::File>, bytes: &[u8]| -> Result<(), CorpusError> {
        w.write_all(bytes).map_err(io_err(path))
    };
    write(&mut w, FEATURE_MAGIC)?;
    write(&mut w, &FEATURE_VERSION.to_le_bytes())?;
    write(&mut w, &(features.shape()[0] as u32).to_le_bytes())?;
    write(&mut w, &(features.shape()[1] as u32).to_le_bytes())?;
    for v in features.data() {
        write(&mut w, &(*v as f32).to_le_bytes())?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor, CorpusError> {
    let format_err = |detail: &str| CorpusError::FeatureFormat {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut r = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err("truncated magic"))?;
    if &magic != FEATURE_MAGIC {
        return Err(format_err("bad magic (want CLFF)"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<fs::File>, what: &str| -> Result<u32, CorpusError> {
        r.read_exact(&mut u32buf)
            .map_err(|_| format_err(&format!("truncated {what}")))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r, "version")?;
    if version != FEATURE_VERSION {
        return Err(format_err(&format!("unsupported version {version}")));
    }
    let frames = read_u32(&mut r, "frame count")? as usize;
    let dim = read_u32(&mut r, "feature dim")? as usize;
    let mut data = Vec::with_capacity(frames * dim);
    let mut f32buf = [0u8; 4];
    for _ in 0..frames * dim {
        r.read_exact(&mut f32buf)
            .map_err(|_| format_err("truncated feature data"))?;
        data.push(f32::from_le_bytes(f32buf) as f64);
    }
    Tensor::new(vec![frames, dim], data)
        .map_err(|_| format_err("length mismatch"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orthography::{parse_tailo, split_syllables};

    fn tiny_spec() -> ToyLanguageSpec {
        ToyLanguageSpec {
            lexicon_size: 20,
            ..ToyLanguageSpec::default()
        }
    }

    fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<PathBuf> = walk(dir);
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                (rel, fs::read(&p).unwrap())
            })
            .collect()
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let sizes = SplitSizes { train: 6, dev: 2, test: 2 };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        gen_corpus(&spec, &sizes, d1.path()).unwrap();
        gen_corpus(&spec, &sizes, d2.path()).unwrap();
        assert_eq!(dir_digest(d1.path()), dir_digest(d2.path()));
    }

    #[test]
    fn zero_noise_repeats_syllable_frames() {
        let spec = ToyLanguageSpec {
            noise_sigma: 0.0,
            ..tiny_spec()
        };
        let lang = Language::target(&spec).unwrap();
        let syl = lang.words[0].syllables[0];
        let mut rng_a = spec.rng(101);
        let mut rng_b = spec.rng(202);
        let a = lang.syllable_frames(&syl, 5, &mut rng_a);
        let b = lang.syllable_frames(&syl, 5, &mut rng_b);
        assert_eq!(a, b, "zero-noise features must not depend on the rng");
    }

    #[test]
    fn generated_tailo_parses_cleanly() {
        let spec = tiny_spec();
        let sizes = SplitSizes { train: 20, dev: 4, test: 4 };
        let dir = tempfile::tempdir().unwrap();
        let summary = gen_corpus(&spec, &sizes, dir.path()).unwrap();
        let mut syllables = 0;
        for (_, entries) in &summary.entries {
            for entry in entries {
                for token in split_syllables(&entry.tailo_text) {
                    let syl = parse_tailo(token).expect("generated syllable parses");
                    // Checked/open tone-class constraint holds by construction.
                    if syl.is_checked() {
                        assert!(matches!(syl.tone, 4 | 8));
                    } else {
                        assert!(matches!(syl.tone, 1 | 2 | 3 | 5 | 7));
                    }
                    syllables += 1;
                }
            }
        }
        assert!(syllables > 0);
    }

    #[test]
    fn manifest_invariants_and_round_trip() {
        let spec = tiny_spec();
        let sizes = SplitSizes { train: 8, dev: 3, test: 3 };
        let dir = tempfile::tempdir().unwrap();
        let summary = gen_corpus(&spec, &sizes, dir.path()).unwrap();

        let mut ids = std::collections::HashSet::new();
        for (split, manifest_path) in &summary.manifests {
            let entries = read_manifest(manifest_path).unwrap();
            let expected = summary
                .entries
                .iter()
                .find(|(s, _)| s == split)
                .map(|(_, e)| e.clone())
                .unwrap();
            assert_eq!(entries, expected);
            for entry in &entries {
                assert!(ids.insert(entry.id.clone()), "duplicate id {}", entry.id);
                assert!(!entry.tailo_text.is_empty() && !entry.han_text.is_empty());
            }
            let utts = load_utterances(manifest_path).unwrap();
            for (utt, entry) in utts.iter().zip(&entries) {
                assert_eq!(utt.duration_frames(), entry.num_frames);
                assert_eq!(utt.features.shape()[1], spec.feature_dim);
            }
        }
    }

    #[test]
    fn feature_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.clff");
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        write_features(&path, &t).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.shape(), &[2, 2]);
        // f32 round trip loses nothing on small integers.
        assert_eq!(back.data(), t.data());

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(CorpusError::FeatureFormat { .. })
        ));

        let bytes = {
            write_features(&path, &t).unwrap();
            fs::read(&path).unwrap()
        };
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(CorpusError::FeatureFormat { .. })
        ));
    }

    #[test]
    fn contour_bank_templates_are_distinct() {
        let bank = ToneContourBank::standard();
        let min = bank.min_pairwise_distance(6);
        assert!(min > 0.3, "min pairwise distance {min}");
    }

    #[test]
    fn tones_are_separable_at_sigma_point_one() {
        let spec = ToyLanguageSpec {
            noise_sigma: 0.1,
            ..ToyLanguageSpec::default()
        };
        let lang = Language::target(&spec).unwrap();
        let mut rng = spec.rng(777);
        let mut correct = 0;
        let total = 1000;
        for i in 0..total {
            let tone = TONES[i % TONES.len()];
            let checked = matches!(tone, 4 | 8);
            let (lo, hi) = lang.frame_range(checked);
            let frames = rng.gen_range(lo..=hi);
            // Pitch dims only: synthesize a syllable and read the last two.
            let syl = SyllableSpec {
                initial: 0,
                final_idx: if checked { spec.open_finals.len() } else { 0 },
                tone,
            };
            let rows = lang.syllable_frames(&syl, frames, &mut rng);
            let pitch: Vec<(f64, f64)> = rows
                .iter()
                .map(|r| (r[spec.feature_dim - 2], r[spec.feature_dim - 1]))
                .collect();
            if lang.bank.classify(&pitch) == tone {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / total as f64;
        assert!(accuracy >= 0.95, "tone recovery {accuracy}");
    }

    #[test]
    fn source_language_overlap() {
        let spec = tiny_spec();
        let full = Language::source(&spec, 1.0).unwrap();
        let none = Language::source(&spec, 0.0).unwrap();
        let target = Language::target(&spec).unwrap();
        assert_eq!(full.phoneme_table, target.phoneme_table);
        let shared_rows = none
            .phoneme_table
            .iter()
            .zip(&target.phoneme_table)
            .filter(|(a, b)| a == b)
            .count();
        assert_eq!(shared_rows, 0);

        // Lexicon and Han renderings are disjoint from the target's.
        let target_words: std::collections::HashSet<_> =
            target.words.iter().map(|w| w.tailo.clone()).collect();
        for word in &none.words {
            assert!(!target_words.contains(&word.tailo));
        }
        let target_han: std::collections::HashSet<_> = target
            .words
            .iter()
            .flat_map(|w| w.han.iter().cloned())
            .collect();
        for word in &none.words {
            for han in &word.han {
                assert!(!target_han.contains(han));
            }
        }

        // Source text parses and uses only the four source tones.
        let dir = tempfile::tempdir().unwrap();
        let sizes = SplitSizes { train: 6, dev: 2, test: 2 };
        let summary = gen_source_corpus(&spec, 0.6, &sizes, dir.path()).unwrap();
        for (_, entries) in &summary.entries {
            for entry in entries {
                for token in split_syllables(&entry.tailo_text) {
                    let syl = parse_tailo(token).expect("source syllable parses");
                    assert!(matches!(syl.tone, 1 | 2 | 3 | 5 | 4 | 8));
                }
            }
        }
    }
}
