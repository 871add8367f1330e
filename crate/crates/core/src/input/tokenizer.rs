//! Whitespace + greedy longest-match subword tokenizer over a vocabulary built
//! from the dataset. Continuation pieces carry a `##` prefix.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::text::canonicalize;
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const SENTINEL_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const NUM_SPECIALS: usize = 5;

const SPECIALS: [&str; NUM_SPECIALS] = ["<pad>", "</s>", "<mask>", "<extra_id_0>", "<unk>"];
const CONTINUATION: &str = "##";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary holding every whole word of `texts` plus every
    /// character as both a word-initial and a continuation piece, so any word
    /// over the seen alphabet tokenizes without UNK.
    pub fn build<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words = BTreeSet::new();
        let mut chars = BTreeSet::new();
        for text in texts {
            for word in canonicalize(text.as_ref()).split(' ').filter(|w| !w.is_empty()) {
                chars.extend(word.chars());
                words.insert(word.to_string());
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        let pieces = words
            .into_iter()
            .chain(chars.iter().map(|c| c.to_string()))
            .chain(chars.iter().map(|c| format!("{CONTINUATION}{c}")));
        for piece in pieces {
            if seen.insert(piece.clone()) {
                tokens.push(piece);
            }
        }
        Self::from_tokens(tokens).expect("built vocabulary has specials in place")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (id, special) in SPECIALS.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(special) {
                return Err(Error::Vocab(format!(
                    "special token {special} missing at id {id}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.contains('\n') {
                return Err(Error::Vocab(format!("invalid token at id {id}")));
            }
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// One token per line; line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if let Some(id) = self.id(word) {
            out.push(id);
            return;
        }
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        let mut pieces = Vec::new();
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let body: String = chars[start..end].iter().collect();
                let piece = if start == 0 {
                    body
                } else {
                    format!("{CONTINUATION}{body}")
                };
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK_ID);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Canonicalizes then tokenizes `text`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in canonicalize(text).split(' ').filter(|w| !w.is_empty()) {
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Joins pieces back into text, dropping PAD and EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD_ID || id == EOS_ID {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !rest.is_empty() && !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["coca cola", "stop sign", "exit"])
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = vocab();
        assert_eq!(v.id("<pad>"), Some(PAD_ID));
        assert_eq!(v.id("</s>"), Some(EOS_ID));
        assert_eq!(v.id("<mask>"), Some(MASK_ID));
        assert_eq!(v.id("<extra_id_0>"), Some(SENTINEL_ID));
        assert_eq!(v.id("<unk>"), Some(UNK_ID));
    }

    #[test]
    fn whole_words_are_single_tokens() {
        let v = vocab();
        let ids = v.encode("Coca  COLA");
        assert_eq!(ids.len(), 2);
        assert_eq!(v.decode(&ids), "coca cola");
    }

    #[test]
    fn unseen_words_fall_back_to_pieces() {
        let v = vocab();
        let ids = v.encode("c0ca");
        // '0' was never seen
        assert_eq!(ids, vec![UNK_ID]);
        let ids = v.encode("stopexit");
        assert!(ids.len() > 1);
        assert_eq!(v.decode(&ids), "stopexit");
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn missing_special_rejected() {
        assert!(matches!(
            Vocab::from_tokens(vec!["<pad>".into(), "</s>".into()]),
            Err(Error::Vocab(_))
        ));
    }
}
