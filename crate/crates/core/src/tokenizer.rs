//! Word-level tokenizer with a fixed, corpus-derived vocabulary.
//!
//! The caption language here is closed (templates over a finite taxonomy),
//! so whole words are the right unit; there is nothing for subword merges to
//! gain. Captions are lowercased, split on whitespace and punctuation, and
//! clamped to a fixed context of [`CONTEXT_LEN`] ids including BOS/EOS.
//! Commas survive as their own token so multi-organ lists keep their
//! structure.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED: usize = 4;

/// Fixed context length, counting BOS and EOS.
pub const CONTEXT_LEN: usize = 76;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    // index = id - RESERVED
    id_to_token: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: [u32; CONTEXT_LEN],
    pub true_length: usize,
}

/// Lowercase and split into tokens: runs of alphanumerics are words, commas
/// are their own token, all other punctuation and whitespace separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if c == ',' {
                out.push(",".to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// The canonical text a caption round-trips to: lowercase, single spaces,
/// punctuation policy applied.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

impl Vocabulary {
    /// Rank corpus tokens by (frequency desc, lexicographic asc), keep at
    /// most `max_size - 4`, and assign contiguous ids after the reserved
    /// block. Permutation-invariant over corpus order.
    pub fn build(corpus: &[String], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut freq: HashMap<String, u64> = HashMap::new();
        for caption in corpus {
            for tok in tokenize(caption) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size.saturating_sub(RESERVED));
        let id_to_token: Vec<String> = ranked.into_iter().map(|(t, _)| t).collect();
        Ok(Self::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + RESERVED) as u32))
            .collect();
        Vocabulary { token_to_id, id_to_token }
    }

    /// Total id count including the 4 reserved ids.
    pub fn len(&self) -> usize {
        self.id_to_token.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always exist
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some("<pad>"),
            BOS_ID => Some("<bos>"),
            EOS_ID => Some("<eos>"),
            UNK_ID => Some("<unk>"),
            _ => self.id_to_token.get(id as usize - RESERVED).map(|s| s.as_str()),
        }
    }

    /// One corpus token per line; line number = id - 4. Reserved ids are
    /// implicit and never written.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.id_to_token.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_lines(&text))
    }

    pub fn from_lines(text: &str) -> Self {
        let tokens: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(|l| l.to_string()).collect();
        Self::from_tokens(tokens)
    }

    pub fn to_lines(&self) -> String {
        let mut body = self.id_to_token.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        body
    }

    /// Encode to exactly [`CONTEXT_LEN`] ids: BOS + content + EOS, unknown
    /// words mapped to UNK, over-long captions trimmed to the first
    /// `CONTEXT_LEN - 2` content tokens (EOS always survives), short ones
    /// zero-padded.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = [PAD_ID; CONTEXT_LEN];
        ids[0] = BOS_ID;
        let mut n = 1;
        for tok in tokenize(text) {
            if n == CONTEXT_LEN - 1 {
                break;
            }
            ids[n] = self.id_of(&tok).unwrap_or(UNK_ID);
            n += 1;
        }
        ids[n] = EOS_ID;
        n += 1;
        TokenSequence { ids, true_length: n }
    }

    /// Space-joined tokens, excluding PAD/BOS/EOS; UNK renders as `<unk>`.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let mut parts: Vec<&str> = Vec::new();
        for &id in &seq.ids {
            if id as usize >= self.len() {
                return Err(Error::Index {
                    op: "decode",
                    index: id as usize,
                    size: self.len(),
                });
            }
            match id {
                PAD_ID | BOS_ID | EOS_ID => {}
                _ => parts.push(self.token_of(id).unwrap()),
            }
        }
        Ok(parts.join(" "))
    }
}

impl TokenSequence {
    /// Ids as tape-friendly indices.
    pub fn as_indices(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }

    /// 1.0 at non-PAD positions, 0.0 at PAD; drives attention masking and
    /// pooled mean weights.
    pub fn content_mask(&self) -> Vec<f32> {
        self.ids
            .iter()
            .map(|&i| if i == PAD_ID { 0.0 } else { 1.0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(strings: &[&str]) -> Vec<String> {
        strings.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocabulary::build(&corpus(&["a b", "a"]), 100).unwrap();
        assert!(v.id_of("a").unwrap() < v.id_of("b").unwrap());
        assert_eq!(v.id_of("a").unwrap(), 4);
    }

    #[test]
    fn truncation_keeps_exactly_budgeted_tokens() {
        let text: Vec<String> = (0..10).map(|i| format!("tok{i}")).collect();
        let v = Vocabulary::build(&[text.join(" ")], 5).unwrap();
        assert_eq!(v.len(), 5);
        assert!(v.id_of("tok0").is_some()); // lexicographically first among equal counts
    }

    #[test]
    fn build_is_permutation_invariant() {
        let base = corpus(&["liver kidney", "liver", "brain, neck", "axial mr t1"]);
        let v0 = Vocabulary::build(&base, 64).unwrap();
        let mut rotated = base.clone();
        for _ in 0..10 {
            rotated.rotate_left(1);
            assert_eq!(Vocabulary::build(&rotated, 64).unwrap(), v0);
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocabulary::build(&[], 10), Err(Error::Input(_))));
    }

    #[test]
    fn empty_caption_is_bos_eos_pad() {
        let v = Vocabulary::build(&corpus(&["x"]), 10).unwrap();
        let s = v.encode("");
        assert_eq!(s.true_length, 2);
        assert_eq!(s.ids[0], BOS_ID);
        assert_eq!(s.ids[1], EOS_ID);
        assert!(s.ids[2..].iter().all(|&i| i == PAD_ID));
    }

    #[test]
    fn long_caption_trimmed_to_context_with_eos() {
        let words: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let v = Vocabulary::build(&[words.join(" ")], 200).unwrap();
        let s = v.encode(&words.join(" "));
        assert_eq!(s.true_length, CONTEXT_LEN);
        assert_eq!(s.ids[CONTEXT_LEN - 1], EOS_ID);
        assert_eq!(s.ids[0], BOS_ID);
        // first 74 content tokens kept
        assert_eq!(v.token_of(s.ids[1]).unwrap(), "w0");
        assert_eq!(v.token_of(s.ids[74]).unwrap(), "w73");
    }

    #[test]
    fn boundary_lengths() {
        let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let v = Vocabulary::build(&[words.join(" ")], 300).unwrap();
        for n in [1usize, 74, 75, 76, 77, 200] {
            let s = v.encode(&words[..n].join(" "));
            let expect = (n + 2).min(CONTEXT_LEN);
            assert_eq!(s.true_length, expect, "n={n}");
            assert_eq!(s.ids[s.true_length - 1], EOS_ID);
            assert!(s.ids[s.true_length..].iter().all(|&i| i == PAD_ID));
        }
    }

    #[test]
    fn comma_is_its_own_token() {
        let v = Vocabulary::build(&corpus(&["liver, intestine"]), 10).unwrap();
        assert_eq!(
            tokenize("liver, intestine"),
            vec!["liver", ",", "intestine"]
        );
        let s = v.encode("liver, intestine");
        assert_eq!(v.decode(&s).unwrap(), "liver , intestine");
    }

    #[test]
    fn table_style_caption_round_trips() {
        let text = "An image of axial CT scan consisting of liver, intestine organs";
        let v = Vocabulary::build(&corpus(&[text]), 100).unwrap();
        let s = v.encode(text);
        assert_eq!(v.decode(&s).unwrap(), normalize(text));
    }

    #[test]
    fn unknown_words_become_unk() {
        let v = Vocabulary::build(&corpus(&["known"]), 10).unwrap();
        let s = v.encode("known mystery");
        assert_eq!(s.ids[1], v.id_of("known").unwrap());
        assert_eq!(s.ids[2], UNK_ID);
        assert_eq!(v.decode(&s).unwrap(), "known <unk>");
    }

    #[test]
    fn decode_out_of_range_id_is_index_error() {
        let v = Vocabulary::build(&corpus(&["a"]), 10).unwrap();
        let mut s = v.encode("a");
        s.ids[1] = 999;
        assert!(matches!(v.decode(&s), Err(Error::Index { .. })));
    }

    #[test]
    fn save_load_round_trip(){
        let v = Vocabulary::build(&corpus(&["liver kidney brain", "liver, spleen"]), 64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn content_mask_matches_true_length() {
        let v = Vocabulary::build(&corpus(&["a b c"]), 10).unwrap();
        let s = v.encode("a b");
        let m = s.content_mask();
        assert_eq!(m.iter().filter(|&&x| x == 1.0).count(), s.true_length);
        assert!(m[..s.true_length].iter().all(|&x| x == 1.0));
    }

    proptest! {
        #[test]
        fn encode_decode_encode_idempotent(words in proptest::collection::vec("[a-z]{1,8}", 0..120)) {
            // half the alphabet is deliberately out-of-vocab
            let vocab_corpus = corpus(&["alpha beta gamma delta, liver kidney axial mr t1"]);
            let v = Vocabulary::build(&vocab_corpus, 64).unwrap();
            let caption = words.join(" ");
            let once = v.encode(&caption);
            let again = v.encode(&v.decode(&once).unwrap());
            prop_assert_eq!(once, again);
        }

        #[test]
        fn encode_always_exact_context(words in proptest::collection::vec("[a-z]{1,8}", 0..200)) {
            let v = Vocabulary::build(&corpus(&["seed"]), 16).unwrap();
            let s = v.encode(&words.join(" "));
            prop_assert_eq!(s.ids.len(), CONTEXT_LEN);
            prop_assert!(s.true_length >= 2 && s.true_length <= CONTEXT_LEN);
            let first_pad = s.ids.iter().position(|&i| i == PAD_ID);
            prop_assert_eq!(first_pad.unwrap_or(CONTEXT_LEN), s.true_length);
        }
    }
}
