//! BERT-style masked language modeling corruption.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::IGNORE_INDEX;
use super::tokenizer::{Vocab, MASK_ID, NUM_SPECIALS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmConfig {
    /// Probability that an eligible token becomes a prediction target.
    pub select_prob: f64,
    /// Of the selected tokens: replaced by MASK.
    pub mask_prob: f64,
    /// Of the selected tokens: replaced by a random non-special token. The
    /// remainder is left unchanged.
    pub random_prob: f64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

/// Corrupts `token_ids` and returns `(corrupted, labels)`; labels hold the
/// original id at selected positions and [`IGNORE_INDEX`] elsewhere.
///
/// Consumes exactly one draw per token plus one per selected token, so the
/// output is a pure function of the rng state.
pub fn apply_mlm_corruption<R: Rng + ?Sized>(
    token_ids: &[u32],
    rng: &mut R,
    vocab: &Vocab,
    cfg: &MlmConfig,
) -> Result<(Vec<u32>, Vec<i64>)> {
    if vocab.token(MASK_ID) != Some("<mask>") {
        return Err(Error::Vocab("MASK token missing".into()));
    }
    if vocab.len() <= NUM_SPECIALS {
        return Err(Error::Vocab(
            "vocabulary has no regular tokens for random replacement".into(),
        ));
    }
    let mut corrupted = Vec::with_capacity(token_ids.len());
    let mut labels = Vec::with_capacity(token_ids.len());
    for &id in token_ids {
        if rng.random::<f64>() < cfg.select_prob {
            labels.push(id as i64);
            let branch = rng.random::<f64>();
            let replacement = if branch < cfg.mask_prob {
                MASK_ID
            } else if branch < cfg.mask_prob + cfg.random_prob {
                rng.random_range(NUM_SPECIALS as u32..vocab.len() as u32)
            } else {
                id
            };
            corrupted.push(replacement);
        } else {
            labels.push(IGNORE_INDEX);
            corrupted.push(id);
        }
    }
    Ok((corrupted, labels))
}
