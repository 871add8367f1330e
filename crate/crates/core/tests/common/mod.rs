#![allow(dead_code)]

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textvqa::data::{BoundingBox, Region, SceneSample};
use textvqa::input::{build_finetune_sample, build_pretrain_sample, collate, MlmConfig, MultimodalBatch, Vocab};
use textvqa::model::{ModelConfig, ModelState};

pub const TINY_D_FEAT: usize = 4;

fn region(text: &str, b: [f64; 4], seed: f32) -> Region {
    Region {
        text: text.to_string(),
        bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
        feature: (0..TINY_D_FEAT).map(|i| ((i as f32 + 1.0) * seed).sin()).collect(),
    }
}

/// Three hand-made samples over a four-letter alphabet, so the vocabulary
/// stays under 32 entries.
pub fn tiny_samples() -> Vec<SceneSample> {
    let answers = |a: &str| Some(vec![a.to_string(); 10]);
    vec![
        SceneSample {
            image_id: "t0".into(),
            image_text: Some("a bad cab".into()),
            objects: vec![region("cd", [0.1, 0.1, 0.4, 0.5], 0.3), region("dab", [0.6, 0.2, 0.9, 0.4], 0.7)],
            scene_tokens: vec![region("bad", [0.15, 0.2, 0.3, 0.3], 1.1), region("ab", [0.5, 0.6, 0.7, 0.8], 1.9)],
            question: Some("cab ab".into()),
            answers: answers("bad"),
        },
        SceneSample {
            image_id: "t1".into(),
            image_text: None,
            objects: vec![region("cab", [0.0, 0.0, 1.0, 1.0], 2.3)],
            scene_tokens: vec![region("dad", [0.2, 0.2, 0.4, 0.3], 2.9), region("cd", [0.6, 0.5, 0.8, 0.9], 3.7), region("ab", [0.1, 0.7, 0.3, 0.9], 4.1)],
            question: Some("dab".into()),
            answers: answers("cd"),
        },
        SceneSample {
            image_id: "t2".into(),
            image_text: Some("dab dab".into()),
            objects: vec![region("bad", [0.3, 0.3, 0.5, 0.5], 5.3), region("a", [0.7, 0.0, 0.9, 0.1], 5.9)],
            scene_tokens: vec![region("abcd", [0.25, 0.25, 0.6, 0.6], 6.7)],
            question: Some("a cd".into()),
            answers: answers("abcd"),
        },
    ]
}

pub fn tiny_vocab(samples: &[SceneSample]) -> Vocab {
    let mut texts = Vec::new();
    for s in samples {
        texts.extend(s.image_text.iter().cloned());
        texts.extend(s.objects.iter().chain(&s.scene_tokens).map(|r| r.text.clone()));
        texts.extend(s.question.iter().cloned());
        texts.extend(s.answers.iter().flatten().cloned());
    }
    Vocab::build(texts)
}

/// d_model 8, one encoder and one decoder layer, vocabulary 32.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 8,
        n_layers_enc: 1,
        n_layers_dec: 1,
        n_heads: 2,
        d_ff: 16,
        d_feat: TINY_D_FEAT,
        rpp_rank: 6,
        max_text_len: 24,
        max_dec_len: 6,
        ..Default::default()
    }
}

pub fn tiny_state(seed: u64, dtype: DType) -> ModelState {
    ModelState::new(tiny_config(), seed, dtype).unwrap()
}

/// Pre-training batch (one row per sample) with heavy MLM so every loss term
/// is active.
pub fn tiny_pretrain_batch(seed: u64) -> (MultimodalBatch, Vocab) {
    let samples = tiny_samples();
    let vocab = tiny_vocab(&samples);
    assert!(vocab.len() <= 32, "tiny vocabulary has {} entries", vocab.len());
    let mlm = MlmConfig {
        select_prob: 0.5,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            build_pretrain_sample(s, i % s.scene_tokens.len(), &vocab, &mut rng, Some(&mlm)).unwrap()
        })
        .collect();
    (collate(&rows).unwrap(), vocab)
}

pub fn tiny_finetune_batch() -> (MultimodalBatch, Vocab) {
    let samples = tiny_samples();
    let vocab = tiny_vocab(&samples);
    let rows: Vec<_> = samples
        .iter()
        .map(|s| build_finetune_sample(s, &vocab).unwrap())
        .collect();
    (collate(&rows).unwrap(), vocab)
}

pub fn flat_f64(t: &candle_core::Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}
