//! Byte-pair-encoding text tokenizer producing the text segment, with
//! padding support for the unconditional (empty-text) stream.
//!
//! Byte-level base alphabet: no unicode normalization, so decode(encode(s))
//! reproduces s exactly whenever the encoding fits the fixed segment length.
//! Special tokens occupy the lowest ids; byte tokens follow; learned merges
//! extend the id space upward.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS_TEXT: u32 = 1;
pub const BOS_SCENE: u32 = 2;
pub const BOS_IMAGE: u32 = 3;
pub const NUM_SPECIAL: usize = 4;
/// id of byte b is BYTE_BASE + b
pub const BYTE_BASE: usize = NUM_SPECIAL;
/// Smallest legal vocabulary: specials plus the byte alphabet.
pub const MIN_VOCAB: usize = BYTE_BASE + 256;

/// Ordered merge list over byte-string tokens plus the fixed base alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    /// (left id, right id) per merge; merge k produces id MIN_VOCAB + k.
    merges: Vec<(u32, u32)>,
    /// Byte content of every id; specials are empty.
    token_bytes: Vec<Vec<u8>>,
}

impl Default for BpeVocab {
    fn default() -> Self {
        BpeVocab::base()
    }
}

impl BpeVocab {
    /// Vocabulary with no learned merges.
    pub fn base() -> BpeVocab {
        let mut token_bytes = vec![Vec::new(); NUM_SPECIAL];
        for b in 0..=255u8 {
            token_bytes.push(vec![b]);
        }
        BpeVocab {
            merges: Vec::new(),
            token_bytes,
        }
    }

    pub fn size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.token_bytes[left as usize].clone();
        bytes.extend_from_slice(&self.token_bytes[right as usize]);
        self.merges.push((left, right));
        self.token_bytes.push(bytes);
        (self.token_bytes.len() - 1) as u32
    }

    /// One merge per line as hex byte strings, with a version header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("MASBPE 1\n");
        for &(l, r) in &self.merges {
            out.push_str(&hex(&self.token_bytes[l as usize]));
            out.push(' ');
            out.push_str(&hex(&self.token_bytes[r as usize]));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<BpeVocab> {
        let mut lines = text.lines();
        match lines.next() {
            Some("MASBPE 1") => {}
            other => {
                return Err(Error::format(format!(
                    "vocab: bad header {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut vocab = BpeVocab::base();
        // merged byte strings are unique by construction, so the reverse
        // map resolves each side to exactly one token
        let mut by_bytes: BTreeMap<Vec<u8>, u32> = vocab
            .token_bytes
            .iter()
            .enumerate()
            .skip(NUM_SPECIAL)
            .map(|(i, b)| (b.clone(), i as u32))
            .collect();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::format(format!("vocab line {}: no separator", lineno + 2)))?;
            let (lb, rb) = (unhex(l)?, unhex(r)?);
            let lid = *by_bytes
                .get(&lb)
                .ok_or_else(|| Error::format(format!("vocab line {}: unknown left token", lineno + 2)))?;
            let rid = *by_bytes
                .get(&rb)
                .ok_or_else(|| Error::format(format!("vocab line {}: unknown right token", lineno + 2)))?;
            let new_id = vocab.push_merge(lid, rid);
            by_bytes.insert(vocab.token_bytes[new_id as usize].clone(), new_id);
        }
        Ok(vocab)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::format("vocab: odd hex length"));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::format("vocab: bad hex"))
        })
        .collect()
}

fn to_byte_ids(text: &str) -> Vec<u32> {
    text.bytes().map(|b| (BYTE_BASE + b as usize) as u32).collect()
}

/// Greedy highest-frequency pair merging until `target_vocab` is reached or
/// no adjacent pair repeats. Ties break to the lexicographically smallest
/// pair of byte strings. A pair whose concatenation collides with an
/// existing token's bytes is skipped, which keeps byte strings unique and
/// the merge file unambiguous.
pub fn bpe_train(corpus: &[String], target_vocab: usize) -> Result<BpeVocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if target_vocab < MIN_VOCAB {
        return Err(Error::invalid(format!(
            "target vocab {} below base alphabet {}",
            target_vocab, MIN_VOCAB
        )));
    }
    let mut vocab = BpeVocab::base();
    let mut seqs: Vec<Vec<u32>> = corpus.iter().map(|s| to_byte_ids(s)).collect();
    let mut banned: std::collections::BTreeSet<(u32, u32)> = Default::default();

    while vocab.size() < target_vocab {
        let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for seq in &seqs {
            for pair in seq.windows(2) {
                *counts.entry((pair[0], pair[1])).or_insert(0) += 1;
            }
        }
        let mut best: Option<((u32, u32), usize)> = None;
        for (&pair, &count) in &counts {
            if count < 2 || banned.contains(&pair) {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    count > bc
                        || (count == bc
                            && pair_bytes(&vocab, pair) < pair_bytes(&vocab, bp))
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some((pair, _)) = best else { break };
        let merged: Vec<u8> = {
            let (l, r) = pair_bytes(&vocab, pair);
            let mut b = l.to_vec();
            b.extend_from_slice(r);
            b
        };
        if vocab.token_bytes[BYTE_BASE..].iter().any(|t| *t == merged) {
            banned.insert(pair);
            continue;
        }
        let new_id = vocab.push_merge(pair.0, pair.1);
        for seq in &mut seqs {
            apply_merge(seq, pair, new_id);
        }
    }
    Ok(vocab)
}

fn pair_bytes(vocab: &BpeVocab, pair: (u32, u32)) -> (&[u8], &[u8]) {
    (
        &vocab.token_bytes[pair.0 as usize],
        &vocab.token_bytes[pair.1 as usize],
    )
}

/// Left-to-right replacement of one merge rule.
fn apply_merge(seq: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// Token ids for `text` without padding or truncation.
pub fn bpe_encode_raw(text: &str, vocab: &BpeVocab) -> Vec<u32> {
    let mut seq = to_byte_ids(text);
    for (k, &pair) in vocab.merges.iter().enumerate() {
        apply_merge(&mut seq, pair, (MIN_VOCAB + k) as u32);
    }
    seq
}

/// Fixed-length encoding: greedy merges, then truncate to `n_x` or
/// right-pad with PAD. The empty string maps to all-PAD — the empty text
/// stream used for unconditional sampling.
pub fn bpe_encode(text: &str, vocab: &BpeVocab, n_x: usize) -> Vec<u32> {
    let mut seq = bpe_encode_raw(text, vocab);
    seq.truncate(n_x);
    seq.resize(n_x, PAD);
    seq
}

/// Concatenates token byte content; PAD and the other specials carry none.
pub fn bpe_decode(tokens: &[u32], vocab: &BpeVocab) -> Result<String> {
    let mut bytes = Vec::new();
    for &t in tokens {
        match vocab.token(t) {
            Some(b) => bytes.extend_from_slice(b),
            None => {
                return Err(Error::TokenOutOfRange {
                    value: t,
                    limit: vocab.size(),
                })
            }
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_repeat_learns_one_merge() {
        let vocab = bpe_train(&corpus(&["aaaa"]), MIN_VOCAB + 1).unwrap();
        assert_eq!(vocab.merges().len(), 1);
        let (l, r) = vocab.merges()[0];
        assert_eq!(vocab.token(l).unwrap(), b"a");
        assert_eq!(vocab.token(r).unwrap(), b"a");
    }

    #[test]
    fn target_at_alphabet_learns_nothing() {
        let vocab = bpe_train(&corpus(&["abcabc"]), MIN_VOCAB).unwrap();
        assert!(vocab.merges().is_empty());
    }

    #[test]
    fn target_below_alphabet_errors() {
        assert!(bpe_train(&corpus(&["x"]), MIN_VOCAB - 1).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let c = corpus(&["red circle left", "blue square right", "red bar middle"]);
        let a = bpe_train(&c, MIN_VOCAB + 20).unwrap();
        let b = bpe_train(&c, MIN_VOCAB + 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_string_is_all_pad() {
        let vocab = BpeVocab::base();
        let toks = bpe_encode("", &vocab, 8);
        assert_eq!(toks, vec![PAD; 8]);
    }

    #[test]
    fn round_trip_short_text() {
        let c = corpus(&["green circle middle", "green square left"]);
        let vocab = bpe_train(&c, MIN_VOCAB + 30).unwrap();
        let text = "green circle left";
        let toks = bpe_encode(text, &vocab, 16);
        assert!(bpe_encode_raw(text, &vocab).len() <= 16);
        assert_eq!(bpe_decode(&toks, &vocab).unwrap(), text);
    }

    #[test]
    fn decode_all_pad_is_empty() {
        let vocab = BpeVocab::base();
        assert_eq!(bpe_decode(&[PAD; 4], &vocab).unwrap(), "");
    }

    #[test]
    fn single_byte_token_decodes_to_that_byte() {
        let vocab = BpeVocab::base();
        let id = (BYTE_BASE + b'z' as usize) as u32;
        assert_eq!(bpe_decode(&[id], &vocab).unwrap(), "z");
    }

    #[test]
    fn unknown_id_errors() {
        let vocab = BpeVocab::base();
        assert!(bpe_decode(&[vocab.size() as u32], &vocab).is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let c = corpus(&["the quick brown fox", "the quick red fox", "the slow fox"]);
        let vocab = bpe_train(&c, MIN_VOCAB + 40).unwrap();
        assert!(!vocab.merges().is_empty());
        let text = vocab.to_text();
        let back = BpeVocab::from_text(&text).unwrap();
        assert_eq!(vocab, back);
    }

    #[test]
    fn from_text_rejects_bad_header() {
        assert!(BpeVocab::from_text("nope\n").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(s in "[a-z ]{0,12}") {
            let c = corpus(&["abcdefghijklm nopqrstuvwxyz", "aa bb cc dd ee"]);
            let vocab = bpe_train(&c, MIN_VOCAB + 16).unwrap();
            let n_x = 16;
            prop_assume!(bpe_encode_raw(&s, &vocab).len() <= n_x);
            let toks = bpe_encode(&s, &vocab, n_x);
            prop_assert_eq!(toks.len(), n_x);
            prop_assert_eq!(bpe_decode(&toks, &vocab).unwrap(), s);
        }

        #[test]
        fn padding_is_always_a_suffix(s in "\\PC{0,24}") {
            let vocab = BpeVocab::base();
            let toks = bpe_encode(&s, &vocab, 12);
            let first_pad = toks.iter().position(|&t| t == PAD).unwrap_or(12);
            prop_assert!(toks[first_pad..].iter().all(|&t| t == PAD));
        }
    }
}
