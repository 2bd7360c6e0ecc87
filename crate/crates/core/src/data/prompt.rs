//! Instruction prompts: a fixed template over a fixed, documented vocabulary.
//!
//! Template: "wear this {color} {pattern} {length} {kind}" plus a trailing
//! "tucked in" clause for tucked tops. The length word is derived from the
//! garment kind, and the kind word is the natural garment name, so prompts
//! read like "wear this red solid short-sleeved tshirt tucked in".

use crate::error::{Error, Result};

use super::consts::COLOR_WORDS;
use super::{Fit, GarmentKind, GarmentSpec, Pattern};

/// Token id table. Index = id. Id 0 is the padding token; it never appears in
/// generated prompts.
pub const VOCAB: [&str; 19] = [
    "<pad>",         // 0
    "wear",          // 1
    "this",          // 2
    "red",           // 3
    "green",         // 4
    "blue",          // 5
    "yellow",        // 6
    "purple",        // 7
    "black",         // 8
    "solid",         // 9
    "striped",       // 10
    "short-sleeved", // 11
    "long-sleeved",  // 12
    "sleeveless",    // 13
    "tshirt",        // 14
    "shirt",         // 15
    "dress",         // 16
    "tucked",        // 17
    "in",            // 18
];

pub const PAD_ID: u16 = 0;

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn word_id(word: &str) -> Result<u16> {
    VOCAB
        .iter()
        .position(|&w| w == word)
        .map(|i| i as u16)
        .ok_or_else(|| Error::UnknownWord { word: word.to_string(), vocab: VOCAB.len() })
}

fn length_word(kind: GarmentKind) -> &'static str {
    match kind {
        GarmentKind::Tshirt => "short-sleeved",
        GarmentKind::Longsleeve => "long-sleeved",
        GarmentKind::Dress => "sleeveless",
    }
}

fn kind_word(kind: GarmentKind) -> &'static str {
    match kind {
        GarmentKind::Tshirt => "tshirt",
        GarmentKind::Longsleeve => "shirt",
        GarmentKind::Dress => "dress",
    }
}

fn pattern_word(pattern: Pattern) -> &'static str {
    match pattern {
        Pattern::Solid => "solid",
        Pattern::Stripes => "striped",
    }
}

/// Instantiate the prompt template for a garment spec.
pub fn prompt_from_spec(spec: &GarmentSpec) -> Vec<u16> {
    let spec = spec.canonical();
    let mut words = vec![
        "wear",
        "this",
        COLOR_WORDS[spec.color_index as usize],
        pattern_word(spec.pattern),
        length_word(spec.kind),
        kind_word(spec.kind),
    ];
    if spec.fit == Fit::Tucked {
        words.push("tucked");
        words.push("in");
    }
    words.iter().map(|w| word_id(w).expect("template words are in the vocabulary")).collect()
}

/// Tokenize whitespace-separated words; every word must be in the vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<u16>> {
    text.split_whitespace().map(word_id).collect()
}

/// Inverse of tokenization for display and round-trip checks.
pub fn detokenize(ids: &[u16]) -> Result<String> {
    let words: Vec<&str> = ids
        .iter()
        .map(|&id| {
            VOCAB
                .get(id as usize)
                .copied()
                .ok_or(Error::OutOfVocab { id, vocab: VOCAB.len() })
        })
        .collect::<Result<_>>()?;
    Ok(words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: GarmentKind, color: u8, pattern: Pattern, fit: Fit) -> GarmentSpec {
        GarmentSpec { kind, color_index: color, pattern, fit }
    }

    #[test]
    fn tucked_red_tshirt_prompt_matches_template() {
        let ids = prompt_from_spec(&spec(GarmentKind::Tshirt, 0, Pattern::Solid, Fit::Tucked));
        assert_eq!(detokenize(&ids).unwrap(), "wear this red solid short-sleeved tshirt tucked in");
    }

    #[test]
    fn color_swap_changes_exactly_one_position() {
        let a = prompt_from_spec(&spec(GarmentKind::Longsleeve, 1, Pattern::Stripes, Fit::Regular));
        let b = prompt_from_spec(&spec(GarmentKind::Longsleeve, 4, Pattern::Stripes, Fit::Regular));
        assert_eq!(a.len(), b.len());
        let diffs = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        assert_eq!(diffs, 1);
    }

    #[test]
    fn roundtrip_through_tokenizer() {
        for kind in GarmentKind::ALL {
            for fit in [Fit::Regular, Fit::Tucked] {
                let s = spec(kind, 3, Pattern::Stripes, fit);
                let ids = prompt_from_spec(&s);
                let text = detokenize(&ids).unwrap();
                assert_eq!(tokenize(&text).unwrap(), ids);
            }
        }
    }

    #[test]
    fn dress_prompt_never_mentions_tucking() {
        let ids = prompt_from_spec(&spec(GarmentKind::Dress, 5, Pattern::Solid, Fit::Tucked));
        let text = detokenize(&ids).unwrap();
        assert_eq!(text, "wear this black solid sleeveless dress");
    }

    #[test]
    fn unknown_word_is_rejected_with_the_word() {
        let err = tokenize("wear this chartreuse dress").unwrap_err();
        assert!(err.to_string().contains("chartreuse"), "{err}");
    }

    #[test]
    fn prompts_fit_max_prompt_length() {
        for kind in GarmentKind::ALL {
            for fit in [Fit::Regular, Fit::Tucked] {
                let ids = prompt_from_spec(&spec(kind, 0, Pattern::Solid, fit));
                assert!(ids.len() <= 12);
                assert!(ids.iter().all(|&id| id != PAD_ID));
            }
        }
    }
}
