//! Frozen caption vocabulary.
//!
//! Captions are whitespace-tokenized against this fixed table; there is no
//! learned tokenizer. Unknown words map to [`UNK`]. [`NULL`] is the learned
//! null-condition token used for classifier-free guidance dropout.

use alloc::string::String;
use alloc::vec::Vec;

/// Token id table; a word's id is its index here.
pub const WORDS: &[&str] = &[
    "<unk>", "<null>", // specials
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange", // colors
    "square", "circle", "bar", // shapes
    "small", "large", // sizes
    "solid", "gradient", // backgrounds
    "moving", "left", "right", "up", "down", "slow", "fast", "static", // motion
];

pub const UNK: u32 = 0;
pub const NULL: u32 = 1;

pub fn size() -> usize {
    WORDS.len()
}

pub fn id(word: &str) -> Option<u32> {
    WORDS.iter().position(|&w| w == word).map(|i| i as u32)
}

pub fn word(id: u32) -> &'static str {
    WORDS.get(id as usize).copied().unwrap_or("<unk>")
}

/// Tokenize; returns ids plus any words that fell back to `<unk>`.
pub fn encode(text: &str) -> (Vec<u32>, Vec<String>) {
    let mut ids = Vec::new();
    let mut unknown = Vec::new();
    for w in text.split_whitespace() {
        match id(w) {
            Some(i) => ids.push(i),
            None => {
                ids.push(UNK);
                unknown.push(String::from(w));
            }
        }
    }
    (ids, unknown)
}

pub fn decode(ids: &[u32]) -> String {
    let mut out = String::new();
    for (i, &id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(word(id));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_small_and_unique() {
        assert!(WORDS.len() <= 64);
        for (i, a) in WORDS.iter().enumerate() {
            for b in &WORDS[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn roundtrip_known_words() {
        let (ids, unk) = encode("red square moving right fast");
        assert!(unk.is_empty());
        assert_eq!(decode(&ids), "red square moving right fast");
    }

    #[test]
    fn unknown_maps_to_unk() {
        let (ids, unk) = encode("purple dinosaur");
        assert_eq!(ids, alloc::vec![UNK, UNK]);
        assert_eq!(unk.len(), 2);
    }
}
