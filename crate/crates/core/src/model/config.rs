use serde::{Deserialize, Serialize};

use crate::input::NUM_RELATIONS;
use crate::{Error, Result};

/// Hyperparameters of the toy encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_feat: usize,
    pub n_rpp_classes: usize,
    /// Width of the pairwise relation scorer.
    pub rpp_rank: usize,
    pub dropout: f64,
    pub max_text_len: usize,
    pub max_dec_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            d_ff: 128,
            d_feat: 32,
            n_rpp_classes: NUM_RELATIONS,
            rpp_rank: 32,
            dropout: 0.0,
            max_text_len: 64,
            max_dec_len: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_feat", self.d_feat),
            ("rpp_rank", self.rpp_rank),
            ("max_text_len", self.max_text_len),
            ("max_dec_len", self.max_dec_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_rpp_classes != NUM_RELATIONS {
            return Err(Error::Config(format!(
                "n_rpp_classes must be {NUM_RELATIONS}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    ///
    /// With `V` vocab, `d` model width, `f` FFN width, `F` feature length,
    /// `T`/`T'` max text/decoder lengths, `r` scorer rank, `C` classes:
    ///
    /// ```text
    /// embeddings  V·d + 3·d + T·d + 2·(d·(F+4) + d)
    /// enc layer   4·d² + 2·d·f + f + d + 4·d
    /// dec layer   8·d² + 2·d·f + f + d + 6·d
    /// decoder     T'·d + 4·d            (positions, memory + final norm)
    /// lm head     V·d + V               (shared with MLM)
    /// mlm norm    2·d
    /// rpp head    2·d + 4·r·d + r + C·r + C
    /// ```
    pub fn parameter_count(&self) -> usize {
        let (v, d, f, feat) = (self.vocab_size, self.d_model, self.d_ff, self.d_feat);
        let (r, c) = (self.rpp_rank, self.n_rpp_classes);
        let ffn = 2 * d * f + f + d;
        let embeddings = v * d + 3 * d + self.max_text_len * d + 2 * (d * (feat + 4) + d);
        let enc = self.n_layers_enc * (4 * d * d + ffn + 4 * d);
        let dec = self.n_layers_dec * (8 * d * d + ffn + 6 * d) + self.max_dec_len * d + 4 * d;
        let heads = v * d + v + 2 * d + 2 * d + 4 * r * d + r + c * r + c;
        embeddings + enc + dec + heads
    }
}
