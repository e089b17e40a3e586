//! Vocabulary construction and caption token sequences.
//!
//! Captions are lowercased, stripped of punctuation, and whitespace-tokenized.
//! Token id 0 is PAD so that unused sequence positions are literally zero;
//! START/END bracket every caption and UNK absorbs out-of-vocabulary words.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

pub const PAD_WORD: &str = "<pad>";
pub const START_WORD: &str = "<start>";
pub const END_WORD: &str = "<end>";
pub const UNK_WORD: &str = "<unk>";

const VOCAB_HEADER: &str = "CHG2CAP-VOCAB v1";

/// Immutable word <-> id mapping with the four reserved specials.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
}

impl Vocabulary {
    /// Build from tokenized captions. Words with corpus frequency below
    /// `min_freq` are dropped (they encode as UNK). Ids are assigned in
    /// descending frequency, ties broken lexicographically, after the four
    /// specials.
    pub fn build(captions: &[Vec<String>], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Config("build_vocab: min_freq must be >= 1".into()));
        }
        if captions.is_empty() || captions.iter().all(|c| c.is_empty()) {
            return Err(Error::Vocabulary("empty caption corpus".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for caption in captions {
            for word in caption {
                *freq.entry(word.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(_, count)| count >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_word: Vec<String> = vec![
            PAD_WORD.to_string(),
            START_WORD.to_string(),
            END_WORD.to_string(),
            UNK_WORD.to_string(),
        ];
        id_to_word.extend(kept.iter().map(|(w, _)| w.to_string()));
        Ok(Self::from_words(id_to_word))
    }

    fn from_words(id_to_word: Vec<String>) -> Self {
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary {
            word_to_id,
            id_to_word,
        }
    }

    /// Vocabulary size `m`, specials included.
    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the four specials are always present
    }

    pub fn id(&self, word: &str) -> usize {
        self.word_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.id_to_word.get(id).map(String::as_str)
    }

    /// Non-special words in id order, for persistence.
    pub fn words(&self) -> &[String] {
        &self.id_to_word[4..]
    }

    /// Rebuild from the persisted word list (ids 4..m in order).
    pub fn from_word_list(words: Vec<String>) -> Self {
        let mut id_to_word = vec![
            PAD_WORD.to_string(),
            START_WORD.to_string(),
            END_WORD.to_string(),
            UNK_WORD.to_string(),
        ];
        id_to_word.extend(words);
        Self::from_words(id_to_word)
    }

    /// Write the vocabulary file: a header line, then one word per line in
    /// id order starting at id 4.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        writeln!(text, "{VOCAB_HEADER}").ok();
        for word in self.words() {
            writeln!(text, "{word}").ok();
        }
        std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut lines = text.lines();
        match lines.next() {
            Some(header) if header == VOCAB_HEADER => {}
            other => {
                return Err(Error::Parse(format!(
                    "vocabulary file: expected header {VOCAB_HEADER:?}, got {other:?}"
                )))
            }
        }
        Ok(Self::from_word_list(
            lines.map(str::to_string).collect(),
        ))
    }
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .filter_map(|raw| {
            let word: String = raw
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect();
            (!word.is_empty()).then_some(word)
        })
        .collect()
}

/// Fixed-length caption token buffer: `[START, w1..wk, END, PAD...]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub valid_len: usize,
}

impl TokenSequence {
    /// Validate a raw id buffer: START first, exactly one END, only PAD after.
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.first() != Some(&START) {
            return Err(Error::Vocabulary(
                "token sequence must begin with START".into(),
            ));
        }
        let Some(end_pos) = ids.iter().position(|&t| t == END) else {
            return Err(Error::Vocabulary("token sequence has no END".into()));
        };
        if ids[end_pos + 1..].iter().any(|&t| t != PAD) {
            return Err(Error::Vocabulary(
                "non-PAD token after END in token sequence".into(),
            ));
        }
        if ids[1..end_pos].iter().any(|&t| t == PAD || t == START) {
            return Err(Error::Vocabulary(
                "PAD or START inside the caption body".into(),
            ));
        }
        let valid_len = end_pos + 1;
        Ok(TokenSequence { ids, valid_len })
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Encode words into a fixed-length sequence of `n` token slots.
pub fn encode_caption(words: &[String], vocab: &Vocabulary, n: usize) -> Result<TokenSequence> {
    if words.len() + 2 > n {
        return Err(Error::CaptionTooLong {
            words: words.len(),
            max_len: n,
        });
    }
    let mut ids = Vec::with_capacity(n);
    ids.push(START);
    ids.extend(words.iter().map(|w| vocab.id(w)));
    ids.push(END);
    ids.resize(n, PAD);
    TokenSequence::new(ids)
}

/// Words recovered from a decoded id buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub words: Vec<String>,
    /// Set when no END was found; everything non-PAD after START is returned.
    pub truncated: bool,
}

/// Decode ids back to words: everything strictly between START and the first
/// END. A sequence that never reaches END is flagged as truncated.
pub fn decode_caption(ids: &[usize], vocab: &Vocabulary) -> Decoded {
    let body = if ids.first() == Some(&START) {
        &ids[1..]
    } else {
        ids
    };
    let mut words = Vec::new();
    for &id in body {
        if id == END {
            return Decoded {
                words,
                truncated: false,
            };
        }
        if id != PAD {
            words.push(vocab.word(id).unwrap_or(UNK_WORD).to_string());
        }
    }
    Decoded {
        words,
        truncated: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn caps(sentences: &[&str]) -> Vec<Vec<String>> {
        sentences.iter().map(|s| tokenize(s)).collect()
    }

    #[test]
    fn build_counts_by_hand() {
        // a:2, b:1, c:1 -> specials + a, b, c with ids 4, 5, 6
        let vocab = Vocabulary::build(&caps(&["a b", "a c"]), 1).unwrap();
        assert_eq!(vocab.len(), 7);
        assert_eq!(vocab.id("a"), 4);
        assert_eq!(vocab.id("b"), 5);
        assert_eq!(vocab.id("c"), 6);
    }

    #[test]
    fn build_drops_rare_words_and_unks_them() {
        let vocab = Vocabulary::build(&caps(&["a b", "a c"]), 2).unwrap();
        assert_eq!(vocab.len(), 5);
        assert_eq!(vocab.id("a"), 4);
        assert_eq!(vocab.id("b"), UNK);
        assert_eq!(vocab.id("c"), UNK);
    }

    #[test]
    fn build_rejects_zero_min_freq_and_empty_corpus() {
        assert!(matches!(
            Vocabulary::build(&caps(&["a"]), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Vocabulary::build(&[], 1),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn build_is_deterministic() {
        let corpus = caps(&["b a", "c a b", "d c b a"]);
        let v1 = Vocabulary::build(&corpus, 1).unwrap();
        let v2 = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v1, v2);
        // frequency then lexicographic: a(3) b(3) c(2) d(1)
        assert_eq!(v1.id("a"), 4);
        assert_eq!(v1.id("b"), 5);
        assert_eq!(v1.id("c"), 6);
        assert_eq!(v1.id("d"), 7);
    }

    #[test]
    fn encode_pads_with_zeros() {
        let vocab = Vocabulary::build(&caps(&["w1 w2 w3"]), 1).unwrap();
        let seq = encode_caption(&tokenize("w1 w2 w3"), &vocab, 6).unwrap();
        assert_eq!(
            seq.ids,
            vec![START, vocab.id("w1"), vocab.id("w2"), vocab.id("w3"), END, PAD]
        );
        assert_eq!(seq.valid_len, 5);
    }

    #[test]
    fn encode_empty_caption() {
        let vocab = Vocabulary::build(&caps(&["a"]), 1).unwrap();
        let seq = encode_caption(&[], &vocab, 2).unwrap();
        assert_eq!(seq.ids, vec![START, END]);
    }

    #[test]
    fn encode_rejects_overlong_captions() {
        let vocab = Vocabulary::build(&caps(&["a b c d e"]), 1).unwrap();
        let words = tokenize("a b c d e");
        match encode_caption(&words, &vocab, 6) {
            Err(Error::CaptionTooLong { words: 5, max_len: 6 }) => {}
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn decode_inverts_encode() {
        let vocab = Vocabulary::build(&caps(&["a b"]), 1).unwrap();
        let seq = encode_caption(&tokenize("a b"), &vocab, 6).unwrap();
        let decoded = decode_caption(&seq.ids, &vocab);
        assert_eq!(decoded.words, tokenize("a b"));
        assert!(!decoded.truncated);
    }

    #[test]
    fn decode_empty_and_unk() {
        let vocab = Vocabulary::build(&caps(&["a"]), 1).unwrap();
        let empty = decode_caption(&[START, END, PAD, PAD], &vocab);
        assert!(empty.words.is_empty());
        assert!(!empty.truncated);

        let with_unk = decode_caption(&[START, UNK, END], &vocab);
        assert_eq!(with_unk.words, vec![UNK_WORD.to_string()]);
    }

    #[test]
    fn decode_flags_missing_end() {
        let vocab = Vocabulary::build(&caps(&["a b"]), 1).unwrap();
        let decoded = decode_caption(&[START, vocab.id("a"), vocab.id("b")], &vocab);
        assert_eq!(decoded.words, tokenize("a b"));
        assert!(decoded.truncated);
    }

    #[test]
    fn tokenize_normalizes() {
        assert_eq!(
            tokenize("Many Houses, are BUILT!"),
            vec!["many", "houses", "are", "built"]
        );
        assert!(tokenize("?!.,").is_empty());
    }

    #[test]
    fn vocab_file_round_trip() {
        let vocab = Vocabulary::build(&caps(&["a b c", "b c", "c"]), 1).unwrap();
        let dir = std::env::temp_dir().join("chg2cap_vocab_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(vocab, loaded);

        std::fs::write(&path, "WRONG HEADER\na\n").unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn token_sequence_validation() {
        assert!(TokenSequence::new(vec![START, 4, END, PAD]).is_ok());
        assert!(TokenSequence::new(vec![4, END]).is_err()); // no START
        assert!(TokenSequence::new(vec![START, 4, 5]).is_err()); // no END
        assert!(TokenSequence::new(vec![START, END, 4]).is_err()); // word after END
        assert!(TokenSequence::new(vec![START, PAD, END]).is_err()); // PAD inside
    }

    proptest! {
        /// decode(encode(s)) == s for in-vocabulary sentences that fit.
        #[test]
        fn round_trip_for_in_vocab_sentences(
            idxs in proptest::collection::vec(0usize..8, 0..6)
        ) {
            let base = ["road", "houses", "north", "built", "trees", "scene", "the", "in"];
            let corpus: Vec<Vec<String>> =
                vec![base.iter().map(|w| w.to_string()).collect()];
            let vocab = Vocabulary::build(&corpus, 1).unwrap();
            let words: Vec<String> = idxs.iter().map(|&i| base[i].to_string()).collect();
            let seq = encode_caption(&words, &vocab, 8).unwrap();
            let decoded = decode_caption(&seq.ids, &vocab);
            prop_assert_eq!(decoded.words, words);
            prop_assert!(!decoded.truncated);
        }
    }
}
