//! Text canonicalization shared by matching, statistics, the metric and the
//! correction pool.

use unicode_normalization::UnicodeNormalization;

/// Words that mark a question as spatial when computing dataset statistics.
pub const SPATIAL_WORDS: [&str; 14] = [
    "left", "right", "top", "bottom", "above", "below", "under", "over", "behind", "front",
    "next", "near", "between", "corner",
];

/// NFC-normalizes, lowercases and collapses runs of whitespace to one space.
pub fn canonicalize(text: &str) -> String {
    let normalized: String = text.nfc().collect::<String>().to_lowercase();
    normalized.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// All contiguous space-joined n-grams of `tokens` with `min_n <= n <= max_n`,
/// ordered by n, then by start position.
pub fn ngrams<S: AsRef<str>>(tokens: &[S], min_n: usize, max_n: usize) -> Vec<String> {
    let mut out = Vec::new();
    for n in min_n.max(1)..=max_n {
        if n > tokens.len() {
            break;
        }
        for window in tokens.windows(n) {
            let joined: Vec<&str> = window.iter().map(|t| t.as_ref()).collect();
            out.push(joined.join(" "));
        }
    }
    out
}

/// True when any word of the canonicalized question, stripped of surrounding
/// punctuation, is in `words`.
pub fn mentions_any<S: AsRef<str>>(question: &str, words: &[S]) -> bool {
    canonicalize(question)
        .split(' ')
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .any(|w| words.iter().any(|s| s.as_ref() == w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonicalize_collapses_and_lowercases() {
        assert_eq!(canonicalize("  Coca \t  COLA\n"), "coca cola");
        assert_eq!(canonicalize(""), "");
    }

    #[test]
    fn canonicalize_applies_nfc() {
        // "e" + combining acute vs precomposed
        assert_eq!(canonicalize("cafe\u{301}"), canonicalize("caf\u{e9}"));
    }

    #[test]
    fn ngrams_in_order() {
        let toks = ["a", "b", "c"];
        assert_eq!(ngrams(&toks, 2, 4), vec!["a b", "b c", "a b c"]);
        assert_eq!(ngrams(&toks, 1, 1), vec!["a", "b", "c"]);
    }

    #[test]
    fn spatial_membership_ignores_punctuation() {
        assert!(mentions_any("What is on the LEFT shelf?", &SPATIAL_WORDS));
        assert!(!mentions_any("what is written", &SPATIAL_WORDS));
        assert!(!mentions_any("what is leftover", &SPATIAL_WORDS));
    }
}
