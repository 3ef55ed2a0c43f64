//! Byte-level BPE shared across both transcript forms.
//!
//! The base vocabulary is the 256 single bytes (ids 1..=256; id 0 is the
//! blank/BOS sentinel and never produced by encoding), so any UTF-8 input is
//! encodable with no OOV. Merges are learned greedily by pair frequency and
//! applied in training order at encode time.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

const BASE_TOKENS: usize = 256;
/// Reserved ids below the byte tokens: just the blank/BOS sentinel.
const RESERVED: usize = 1;
const FILE_HEADER_PREFIX: &str = "clft-bpe v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target vocab {given} too small: need at least {min} (256 bytes + reserved blank)")]
    VocabTooSmall { given: usize, min: usize },
    #[error("token id {id} out of range [1, {vocab}] in decode")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Decoded text plus a flag set when the byte stream was not valid UTF-8 and
/// replacement characters were substituted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    pub lossy: bool,
}

/// Trained byte-level BPE model. Token ids: 0 reserved, 1..=256 single
/// bytes, 257.. merge products in training order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    /// Byte sequences per id, starting at id 1.
    vocab: Vec<Vec<u8>>,
    /// Merge pairs by id, in training order.
    merges: Vec<(u32, u32)>,
}

impl BpeModel {
    /// Learns merges until the total id count (including the reserved blank)
    /// reaches `target_vocab` or no adjacent pair occurs at least twice.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_vocab: usize) -> Result<Self, TokenizerError> {
        let min = RESERVED + BASE_TOKENS;
        if target_vocab < min + 1 {
            return Err(TokenizerError::VocabTooSmall {
                given: target_vocab,
                min: min + 1,
            });
        }
        let mut sequences: Vec<Vec<u32>> = corpus
            .iter()
            .map(|line| line.as_ref().bytes().map(|b| b as u32 + 1).collect())
            .filter(|seq: &Vec<u32>| !seq.is_empty())
            .collect();
        if sequences.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        let mut model = BpeModel {
            vocab: (0..=255u16).map(|b| vec![b as u8]).collect(),
            merges: Vec::new(),
        };
        let max_merges = target_vocab - min;
        for _ in 0..max_merges {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for seq in &sequences {
                for pair in seq.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_insert(0) += 1;
                }
            }
            // Highest count wins; ties go to the lexicographically smallest
            // (left bytes, right bytes), which makes training order a pure
            // function of the corpus bytes.
            let best = counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .map(|(&pair, &c)| (c, pair))
                .max_by(|(ca, pa), (cb, pb)| {
                    ca.cmp(cb).then_with(|| {
                        let ka = (model.token_bytes_ref(pa.0), model.token_bytes_ref(pa.1));
                        let kb = (model.token_bytes_ref(pb.0), model.token_bytes_ref(pb.1));
                        kb.cmp(&ka) // reversed: smaller byte sequences win ties
                    })
                });
            let Some((_, (left, right))) = best else {
                break;
            };
            let mut merged = model.token_bytes_ref(left).to_vec();
            merged.extend_from_slice(model.token_bytes_ref(right));
            model.vocab.push(merged);
            model.merges.push((left, right));
            let new_id = (RESERVED + model.vocab.len() - 1) as u32;
            for seq in &mut sequences {
                apply_merge(seq, left, right, new_id);
            }
        }
        Ok(model)
    }

    /// V_bpe: count of real token ids (1..=vocab_size).
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    fn token_bytes_ref(&self, id: u32) -> &[u8] {
        &self.vocab[id as usize - RESERVED]
    }

    pub fn token_bytes(&self, id: u32) -> Result<&[u8], TokenizerError> {
        if id == 0 || id as usize > self.vocab.len() {
            return Err(TokenizerError::IdOutOfRange {
                id,
                vocab: self.vocab.len(),
            });
        }
        Ok(self.token_bytes_ref(id))
    }

    /// UTF-8 bytes to ids; total by construction, so it cannot fail.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut seq: Vec<u32> = text.bytes().map(|b| b as u32 + 1).collect();
        for (k, &(left, right)) in self.merges.iter().enumerate() {
            let new_id = (RESERVED + BASE_TOKENS + k) as u32;
            apply_merge(&mut seq, left, right, new_id);
        }
        seq
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Decoded, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend_from_slice(self.token_bytes(id)?);
        }
        match String::from_utf8(bytes) {
            Ok(text) => Ok(Decoded { text, lossy: false }),
            Err(err) => Ok(Decoded {
                text: String::from_utf8_lossy(err.as_bytes()).into_owned(),
                lossy: true,
            }),
        }
    }

    /// Text serialization: header line `clft-bpe v1 <V_bpe>`, then one merge
    /// per line as hex-encoded left and right byte sequences, tab-separated.
    pub fn to_text(&self) -> String {
        let mut out = format!("{FILE_HEADER_PREFIX} {}\n", self.vocab_size());
        for &(left, right) in &self.merges {
            out.push_str(&hex_encode(self.token_bytes_ref(left)));
            out.push('\t');
            out.push_str(&hex_encode(self.token_bytes_ref(right)));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| TokenizerError::Format("missing header line".into()))?;
        let declared: usize = header
            .strip_prefix(FILE_HEADER_PREFIX)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| {
                TokenizerError::Format(format!("bad header '{header}' (want '{FILE_HEADER_PREFIX} <V>')"))
            })?;

        let mut model = BpeModel {
            vocab: (0..=255u16).map(|b| vec![b as u8]).collect(),
            merges: Vec::new(),
        };
        let mut bytes_to_id: HashMap<Vec<u8>, u32> = model
            .vocab
            .iter()
            .enumerate()
            .map(|(i, b)| (b.clone(), (i + RESERVED) as u32))
            .collect();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line.split_once('\t').ok_or_else(|| {
                TokenizerError::Format(format!("merge line {} lacks a tab", lineno + 2))
            })?;
            let (lb, rb) = (hex_decode(l)?, hex_decode(r)?);
            let to_id = |b: &[u8], map: &HashMap<Vec<u8>, u32>| {
                map.get(b).copied().ok_or_else(|| {
                    TokenizerError::Format(format!(
                        "merge line {} references unknown token {}",
                        lineno + 2,
                        hex_encode(b)
                    ))
                })
            };
            let (lid, rid) = (to_id(&lb, &bytes_to_id)?, to_id(&rb, &bytes_to_id)?);
            let mut merged = lb;
            merged.extend_from_slice(&rb);
            model.merges.push((lid, rid));
            model.vocab.push(merged.clone());
            bytes_to_id.insert(merged, (RESERVED + model.vocab.len() - 1) as u32);
        }
        if model.vocab_size() != declared {
            return Err(TokenizerError::Format(format!(
                "header declares vocab {declared} but merges produce {}",
                model.vocab_size()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Left-to-right greedy replacement of an adjacent id pair.
fn apply_merge(seq: &mut Vec<u32>, left: u32, right: u32, new_id: u32) {
    let mut write = 0;
    let mut read = 0;
    while read < seq.len() {
        if read + 1 < seq.len() && seq[read] == left && seq[read + 1] == right {
            seq[write] = new_id;
            read += 2;
        } else {
            seq[write] = seq[read];
            read += 1;
        }
        write += 1;
    }
    seq.truncate(write);
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>, TokenizerError> {
    if s.len() % 2 != 0 || s.is_empty() {
        return Err(TokenizerError::Format(format!("bad hex field '{s}'")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|_| TokenizerError::Format(format!("bad hex field '{s}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_corpus() {
        let model = BpeModel::train(&["aaaa"], 258).unwrap();
        assert_eq!(model.num_merges(), 1);
        assert_eq!(model.token_bytes(257).unwrap(), b"aa");
        assert_eq!(model.encode("aaaa"), vec![257, 257]);
    }

    #[test]
    fn merge_order_follows_pair_frequency() {
        let model = BpeModel::train(&["abab abab"], 259).unwrap();
        assert_eq!(model.num_merges(), 2);
        assert_eq!(model.token_bytes(257).unwrap(), b"ab");
        assert_eq!(model.token_bytes(258).unwrap(), b"abab");
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["kin1-a2-jit8 thau5", "今仔日 好天", "tai5-uan5"];
        let a = BpeModel::train(&corpus, 300).unwrap();
        let b = BpeModel::train(&corpus, 300).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn round_trip_mixed_scripts() {
        let corpus = ["kin1-a2-jit8", "今仔日", "pa̍t-lâng 0912"];
        let model = BpeModel::train(&corpus, 280).unwrap();
        for text in [
            "kin1-a2-jit8 thau5",
            "今仔日好天",
            "tâi-uân lâng",
            "mixed 今仔日 with tai5 and 123",
            "",
        ] {
            let decoded = model.decode(&model.encode(text)).unwrap();
            assert_eq!(decoded.text, text);
            assert!(!decoded.lossy);
        }
    }

    #[test]
    fn unseen_bytes_fall_back_to_byte_tokens() {
        let model = BpeModel::train(&["aaaa"], 258).unwrap();
        let ids = model.encode("z");
        assert_eq!(ids, vec![b'z' as u32 + 1]);
    }

    #[test]
    fn han_word_token_count_bounds() {
        let model = BpeModel::train(&["今仔日今仔日"], 300).unwrap();
        let n = model.encode("今仔日").len();
        assert!(n >= 1 && n <= 9, "token count {n}");
    }

    #[test]
    fn decode_rejects_blank_and_out_of_range() {
        let model = BpeModel::train(&["aaaa"], 258).unwrap();
        assert!(matches!(
            model.decode(&[0]),
            Err(TokenizerError::IdOutOfRange { id: 0, .. })
        ));
        assert!(matches!(
            model.decode(&[9999]),
            Err(TokenizerError::IdOutOfRange { id: 9999, .. })
        ));
    }

    #[test]
    fn lossy_decode_is_flagged() {
        let model = BpeModel::train(&["aaaa"], 258).unwrap();
        // 0xff alone is not valid UTF-8; its byte token has id 256.
        let decoded = model.decode(&[256]).unwrap();
        assert!(decoded.lossy);
        assert!(decoded.text.contains('\u{FFFD}'));
    }

    #[test]
    fn file_round_trip_and_errors() {
        let corpus = ["abab abab", "今仔日"];
        let model = BpeModel::train(&corpus, 262).unwrap();
        let text = model.to_text();
        assert!(text.starts_with("clft-bpe v1 "));
        let loaded = BpeModel::from_text(&text).unwrap();
        assert_eq!(model, loaded);

        assert!(BpeModel::from_text("").is_err());
        assert!(BpeModel::from_text("clft-bpe v2 300\n").is_err());
        // Header vocab inconsistent with merge count.
        assert!(BpeModel::from_text("clft-bpe v1 999\n6162\t63\n").is_err());
    }

    #[test]
    fn vocab_floor_enforced() {
        assert!(matches!(
            BpeModel::train(&["aa"], 257),
            Err(TokenizerError::VocabTooSmall { .. })
        ));
        assert!(matches!(
            BpeModel::train(&[] as &[&str], 300),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn encode_decode_round_trip(text in "\\PC{0,40}") {
                let model = BpeModel::train(&["abab abab", "今仔日"], 300).unwrap();
                let decoded = model.decode(&model.encode(&text)).unwrap();
                prop_assert_eq!(decoded.text, text);
                prop_assert!(!decoded.lossy);
            }
        }
    }
}
