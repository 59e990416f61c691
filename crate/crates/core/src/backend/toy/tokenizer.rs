use crate::backend::Tokenization;

/// Reserved id of the end-of-sequence token.
pub const EOS_ID: u32 = 0;
/// Surface form of the end-of-sequence token.
pub const EOS_MARKER: &str = "</s>";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Whitespace tokenizer that hashes lowercased words into a fixed vocabulary.
///
/// * `</s>` maps to [`EOS_ID`].
/// * `<tok:N>` with `1 <= N < vocab_size` maps to id `N` (pseudo-words used
///   for noise tokens).
/// * Every other word maps to `1 + fnv1a64(lowercase(word)) % (vocab_size - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyTokenizer {
    vocab_size: usize,
}

impl ToyTokenizer {
    /// `vocab_size` must be at least 2.
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size >= 2, "toy vocabulary needs room for the EOS id");
        ToyTokenizer { vocab_size }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// The pseudo-word that tokenizes to `id`.
    pub fn pseudo_word(id: u32) -> String {
        format!("<tok:{id}>")
    }

    pub fn word_id(&self, word: &str) -> u32 {
        if word == EOS_MARKER {
            return EOS_ID;
        }
        if let Some(n) = word
            .strip_prefix("<tok:")
            .and_then(|w| w.strip_suffix('>'))
            .and_then(|n| n.parse::<u32>().ok())
        {
            if n >= 1 && (n as usize) < self.vocab_size {
                return n;
            }
        }
        let hash = word
            .to_lowercase()
            .bytes()
            .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME));
        1 + (hash % (self.vocab_size as u64 - 1)) as u32
    }

    pub fn tokenize(&self, text: &str) -> Tokenization {
        let mut out = Tokenization::default();
        let mut start = None;
        for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    out.token_ids.push(self.word_id(&text[s..i]));
                    out.offsets.push((s, i));
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_words_share_ids() {
        let t = ToyTokenizer::new(1024).tokenize("cat cat");
        assert_eq!(t.token_ids[0], t.token_ids[1]);
        assert_eq!(t.offsets, vec![(0, 3), (4, 7)]);
    }

    #[test]
    fn empty_and_blank() {
        let tok = ToyTokenizer::new(1024);
        assert!(tok.tokenize("").is_empty());
        assert!(tok.tokenize(" \n\t ").is_empty());
    }

    #[test]
    fn case_folding() {
        let t = ToyTokenizer::new(1024).tokenize("A a");
        assert_eq!(t.token_ids[0], t.token_ids[1]);
    }

    #[test]
    fn reserved_forms() {
        let tok = ToyTokenizer::new(100);
        assert_eq!(tok.word_id("</s>"), EOS_ID);
        assert_eq!(tok.word_id("<tok:17>"), 17);
        assert_eq!(tok.word_id(&ToyTokenizer::pseudo_word(99)), 99);
        // out-of-vocabulary pseudo-words hash like any other word
        assert_ne!(tok.word_id("<tok:0>"), EOS_ID);
        assert!((1..100).contains(&tok.word_id("<tok:100>")));
    }

    #[test]
    fn offsets_are_byte_ranges() {
        let text = "héllo  wörld\nx";
        let t = ToyTokenizer::new(64).tokenize(text);
        let words: Vec<_> = t.offsets.iter().map(|&(s, e)| &text[s..e]).collect();
        assert_eq!(words, ["héllo", "wörld", "x"]);
        assert!(t.token_ids.iter().all(|id| (1..64).contains(id)));
    }
}
