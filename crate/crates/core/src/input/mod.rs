//! Turning samples into model-ready batches.

mod batch;
mod mlm;
mod rpp;
mod tokenizer;

pub use batch::{
    build_finetune_sample, build_pretrain_sample, collate, most_frequent_answer, EncoderRow,
    MultimodalBatch, Segment, IGNORE_INDEX, NUM_SEGMENTS,
};
pub use mlm::{apply_mlm_corruption, MlmConfig};
pub use rpp::{compute_rpp_label, RelationClass, NUM_RELATIONS};
pub use tokenizer::{Vocab, EOS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SENTINEL_ID, UNK_ID};
