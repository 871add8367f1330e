//! Multimodal serialization and batching.
//!
//! The encoder sees `[text | objects | scene tokens]`. The text stream is itself
//! `[image text or question | object labels | scene-token texts]`, tagged with
//! [`Segment`] ids.

use std::collections::HashMap;

use ndarray::{Array2, Array3};
use rand::Rng;

use super::mlm::{apply_mlm_corruption, MlmConfig};
use super::rpp::compute_rpp_label;
use super::tokenizer::{Vocab, EOS_ID, PAD_ID, SENTINEL_ID};
use crate::data::{Region, SceneSample};
use crate::{Error, Result};

/// Label value skipped by every loss.
pub const IGNORE_INDEX: i64 = -100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Segment {
    /// Question (fine-tuning) or image text (pre-training).
    Text = 0,
    ObjectLabel = 1,
    SceneText = 2,
}

pub const NUM_SEGMENTS: usize = 3;

/// One unpadded encoder/decoder example.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderRow {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub mlm_labels: Vec<i64>,
    pub obj_features: Vec<Vec<f32>>,
    pub obj_boxes: Vec<[f32; 4]>,
    pub scene_features: Vec<Vec<f32>>,
    pub scene_boxes: Vec<[f32; 4]>,
    /// `[scene token][object]` relation ids.
    pub rpp_labels: Vec<Vec<i64>>,
    /// Target ids ending in EOS.
    pub decoder_target_ids: Vec<u32>,
    pub d_feat: usize,
}

impl EncoderRow {
    /// Token ids of the scene-text segment.
    pub fn scene_text_ids(&self) -> Vec<u32> {
        self.token_ids
            .iter()
            .zip(&self.segment_ids)
            .filter(|(_, s)| **s == Segment::SceneText as u32)
            .map(|(t, _)| *t)
            .collect()
    }

    /// Text stream with MLM corruption undone.
    pub fn clean_token_ids(&self) -> Vec<u32> {
        self.token_ids
            .iter()
            .zip(&self.mlm_labels)
            .map(|(&t, &l)| if l == IGNORE_INDEX { t } else { l as u32 })
            .collect()
    }
}

struct TextStream {
    ids: Vec<u32>,
    segments: Vec<u32>,
}

impl TextStream {
    fn new() -> Self {
        Self {
            ids: Vec::new(),
            segments: Vec::new(),
        }
    }

    fn push(&mut self, ids: &[u32], segment: Segment) {
        self.ids.extend_from_slice(ids);
        self.segments
            .extend(std::iter::repeat_n(segment as u32, ids.len()));
    }
}

fn box_f32(r: &Region) -> [f32; 4] {
    r.bbox.to_array().map(|c| c as f32)
}

fn rpp_matrix(sample: &SceneSample) -> Vec<Vec<i64>> {
    sample
        .scene_tokens
        .iter()
        .map(|s| {
            sample
                .objects
                .iter()
                .map(|o| compute_rpp_label(&s.bbox, &o.bbox).id() as i64)
                .collect()
        })
        .collect()
}

fn sample_d_feat(sample: &SceneSample) -> Result<usize> {
    sample
        .d_feat()
        .ok_or_else(|| Error::MissingAnnotation(format!("{}: no regions", sample.image_id)))
}

/// Pre-training example: one scene token's text becomes the decoder target
/// and is replaced by a sentinel in the text stream, while its visual feature
/// and box stay in the encoder input.
///
/// With `mlm = Some(cfg)` the text stream (minus the sentinel) is corrupted
/// using `rng`; `None` yields the clean stream used for evaluation.
pub fn build_pretrain_sample<R: Rng + ?Sized>(
    sample: &SceneSample,
    target_index: usize,
    vocab: &Vocab,
    rng: &mut R,
    mlm: Option<&MlmConfig>,
) -> Result<EncoderRow> {
    if target_index >= sample.scene_tokens.len() {
        return Err(Error::Index {
            index: target_index,
            len: sample.scene_tokens.len(),
        });
    }
    if sample.objects.is_empty() {
        return Err(Error::MissingAnnotation(format!(
            "{}: pre-training needs at least one object",
            sample.image_id
        )));
    }
    let mut stream = TextStream::new();
    if let Some(text) = &sample.image_text {
        stream.push(&vocab.encode(text), Segment::Text);
    }
    for o in &sample.objects {
        stream.push(&vocab.encode(&o.text), Segment::ObjectLabel);
    }
    for (i, t) in sample.scene_tokens.iter().enumerate() {
        if i == target_index {
            stream.push(&[SENTINEL_ID], Segment::SceneText);
        } else {
            stream.push(&vocab.encode(&t.text), Segment::SceneText);
        }
    }

    let mut token_ids = stream.ids;
    let mut mlm_labels = vec![IGNORE_INDEX; token_ids.len()];
    if let Some(cfg) = mlm {
        let eligible: Vec<usize> = (0..token_ids.len())
            .filter(|&i| token_ids[i] != SENTINEL_ID)
            .collect();
        let originals: Vec<u32> = eligible.iter().map(|&i| token_ids[i]).collect();
        let (corrupted, labels) = apply_mlm_corruption(&originals, rng, vocab, cfg)?;
        for ((&pos, id), label) in eligible.iter().zip(corrupted).zip(labels) {
            token_ids[pos] = id;
            mlm_labels[pos] = label;
        }
    }

    let mut decoder_target_ids = vocab.encode(&sample.scene_tokens[target_index].text);
    decoder_target_ids.push(EOS_ID);

    Ok(EncoderRow {
        token_ids,
        segment_ids: stream.segments,
        mlm_labels,
        obj_features: sample.objects.iter().map(|r| r.feature.clone()).collect(),
        obj_boxes: sample.objects.iter().map(box_f32).collect(),
        scene_features: sample.scene_tokens.iter().map(|r| r.feature.clone()).collect(),
        scene_boxes: sample.scene_tokens.iter().map(box_f32).collect(),
        rpp_labels: rpp_matrix(sample),
        decoder_target_ids,
        d_feat: sample_d_feat(sample)?,
    })
}

/// Most frequent answer, ties broken by lexicographic order.
pub fn most_frequent_answer(answers: &[String]) -> Option<&str> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for a in answers {
        *counts.entry(a.as_str()).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then_with(|| b.cmp(a)))
        .map(|(a, _)| a)
}

/// Fine-tuning example: `[question | object labels | scene texts]` with the
/// majority answer as decoder target. No MLM corruption.
pub fn build_finetune_sample(sample: &SceneSample, vocab: &Vocab) -> Result<EncoderRow> {
    let question = sample
        .question
        .as_ref()
        .ok_or_else(|| Error::MissingAnnotation(format!("{}: no question", sample.image_id)))?;
    let answers = sample
        .answers
        .as_ref()
        .ok_or_else(|| Error::MissingAnnotation(format!("{}: no answers", sample.image_id)))?;
    let answer = most_frequent_answer(answers)
        .ok_or_else(|| Error::MissingAnnotation(format!("{}: empty answers", sample.image_id)))?;

    let mut stream = TextStream::new();
    stream.push(&vocab.encode(question), Segment::Text);
    for o in &sample.objects {
        stream.push(&vocab.encode(&o.text), Segment::ObjectLabel);
    }
    for t in &sample.scene_tokens {
        stream.push(&vocab.encode(&t.text), Segment::SceneText);
    }
    let mut decoder_target_ids = vocab.encode(answer);
    decoder_target_ids.push(EOS_ID);
    let n = stream.ids.len();
    Ok(EncoderRow {
        token_ids: stream.ids,
        segment_ids: stream.segments,
        mlm_labels: vec![IGNORE_INDEX; n],
        obj_features: sample.objects.iter().map(|r| r.feature.clone()).collect(),
        obj_boxes: sample.objects.iter().map(box_f32).collect(),
        scene_features: sample.scene_tokens.iter().map(|r| r.feature.clone()).collect(),
        scene_boxes: sample.scene_tokens.iter().map(box_f32).collect(),
        rpp_labels: rpp_matrix(sample),
        decoder_target_ids,
        d_feat: sample_d_feat(sample)?,
    })
}

/// Padded batch. Masks are 1 at real positions and 0 at padding; label
/// tensors hold [`IGNORE_INDEX`] at padding.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalBatch {
    pub token_ids: Array2<u32>,
    pub segment_ids: Array2<u32>,
    pub text_mask: Array2<u8>,
    pub obj_features: Array3<f32>,
    pub obj_boxes: Array3<f32>,
    pub obj_mask: Array2<u8>,
    pub scene_features: Array3<f32>,
    pub scene_boxes: Array3<f32>,
    pub scene_mask: Array2<u8>,
    /// `[B, L_text + N_obj + N_st]`
    pub attention_mask: Array2<u8>,
    pub mlm_labels: Array2<i64>,
    pub rpp_labels: Array3<i64>,
    pub decoder_target_ids: Array2<i64>,
    pub d_feat: usize,
}

impl MultimodalBatch {
    pub fn batch_size(&self) -> usize {
        self.token_ids.nrows()
    }

    pub fn text_len(&self) -> usize {
        self.token_ids.ncols()
    }

    pub fn n_obj(&self) -> usize {
        self.obj_mask.ncols()
    }

    pub fn n_scene(&self) -> usize {
        self.scene_mask.ncols()
    }

    pub fn total_len(&self) -> usize {
        self.text_len() + self.n_obj() + self.n_scene()
    }

    pub fn dec_len(&self) -> usize {
        self.decoder_target_ids.ncols()
    }

    /// Right-shifted targets with PAD as the start token.
    pub fn decoder_input_ids(&self) -> Array2<u32> {
        let (b, l) = self.decoder_target_ids.dim();
        Array2::from_shape_fn((b, l), |(i, j)| {
            if j == 0 {
                PAD_ID
            } else {
                let prev = self.decoder_target_ids[[i, j - 1]];
                if prev == IGNORE_INDEX {
                    PAD_ID
                } else {
                    prev as u32
                }
            }
        })
    }

    /// Recovers the unpadded row `i`.
    pub fn row(&self, i: usize) -> EncoderRow {
        let count = |m: &Array2<u8>| m.row(i).iter().filter(|&&v| v != 0).count();
        let (lt, no, ns) = (
            count(&self.text_mask),
            count(&self.obj_mask),
            count(&self.scene_mask),
        );
        let ld = self
            .decoder_target_ids
            .row(i)
            .iter()
            .filter(|&&v| v != IGNORE_INDEX)
            .count();
        let feats = |a: &Array3<f32>, n: usize| -> Vec<Vec<f32>> {
            (0..n)
                .map(|k| a.slice(ndarray::s![i, k, ..]).to_vec())
                .collect()
        };
        let boxes = |a: &Array3<f32>, n: usize| -> Vec<[f32; 4]> {
            (0..n)
                .map(|k| std::array::from_fn(|c| a[[i, k, c]]))
                .collect()
        };
        EncoderRow {
            token_ids: self.token_ids.row(i).iter().take(lt).copied().collect(),
            segment_ids: self.segment_ids.row(i).iter().take(lt).copied().collect(),
            mlm_labels: self.mlm_labels.row(i).iter().take(lt).copied().collect(),
            obj_features: feats(&self.obj_features, no),
            obj_boxes: boxes(&self.obj_boxes, no),
            scene_features: feats(&self.scene_features, ns),
            scene_boxes: boxes(&self.scene_boxes, ns),
            rpp_labels: (0..ns)
                .map(|s| (0..no).map(|o| self.rpp_labels[[i, s, o]]).collect())
                .collect(),
            decoder_target_ids: self
                .decoder_target_ids
                .row(i)
                .iter()
                .take(ld)
                .map(|&v| v as u32)
                .collect(),
            d_feat: self.d_feat,
        }
    }
}

/// Pads rows to the per-batch maxima of every axis, preserving order.
pub fn collate(rows: &[EncoderRow]) -> Result<MultimodalBatch> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Heterogeneity("no rows to collate".into()))?;
    let d = first.d_feat;
    for (i, r) in rows.iter().enumerate() {
        if r.d_feat != d {
            return Err(Error::Heterogeneity(format!(
                "row {i} has d_feat {} but row 0 has {d}",
                r.d_feat
            )));
        }
        let lengths_ok = r.segment_ids.len() == r.token_ids.len()
            && r.mlm_labels.len() == r.token_ids.len()
            && r.obj_boxes.len() == r.obj_features.len()
            && r.scene_boxes.len() == r.scene_features.len()
            && r.rpp_labels.len() == r.scene_features.len()
            && r.rpp_labels.iter().all(|x| x.len() == r.obj_features.len())
            && r.obj_features.iter().chain(&r.scene_features).all(|f| f.len() == d);
        if !lengths_ok {
            return Err(Error::Heterogeneity(format!("row {i} is internally inconsistent")));
        }
    }
    let b = rows.len();
    let lt = rows.iter().map(|r| r.token_ids.len()).max().unwrap_or(0);
    let no = rows.iter().map(|r| r.obj_features.len()).max().unwrap_or(0);
    let ns = rows.iter().map(|r| r.scene_features.len()).max().unwrap_or(0);
    let ld = rows
        .iter()
        .map(|r| r.decoder_target_ids.len())
        .max()
        .unwrap_or(0);

    let mut batch = MultimodalBatch {
        token_ids: Array2::from_elem((b, lt), PAD_ID),
        segment_ids: Array2::zeros((b, lt)),
        text_mask: Array2::zeros((b, lt)),
        obj_features: Array3::zeros((b, no, d)),
        obj_boxes: Array3::zeros((b, no, 4)),
        obj_mask: Array2::zeros((b, no)),
        scene_features: Array3::zeros((b, ns, d)),
        scene_boxes: Array3::zeros((b, ns, 4)),
        scene_mask: Array2::zeros((b, ns)),
        attention_mask: Array2::zeros((b, lt + no + ns)),
        mlm_labels: Array2::from_elem((b, lt), IGNORE_INDEX),
        rpp_labels: Array3::from_elem((b, ns, no), IGNORE_INDEX),
        decoder_target_ids: Array2::from_elem((b, ld), IGNORE_INDEX),
        d_feat: d,
    };
    for (i, r) in rows.iter().enumerate() {
        for (j, ((&t, &s), &m)) in r
            .token_ids
            .iter()
            .zip(&r.segment_ids)
            .zip(&r.mlm_labels)
            .enumerate()
        {
            batch.token_ids[[i, j]] = t;
            batch.segment_ids[[i, j]] = s;
            batch.mlm_labels[[i, j]] = m;
            batch.text_mask[[i, j]] = 1;
            batch.attention_mask[[i, j]] = 1;
        }
        for (k, (f, bx)) in r.obj_features.iter().zip(&r.obj_boxes).enumerate() {
            for (c, v) in f.iter().enumerate() {
                batch.obj_features[[i, k, c]] = *v;
            }
            for (c, v) in bx.iter().enumerate() {
                batch.obj_boxes[[i, k, c]] = *v;
            }
            batch.obj_mask[[i, k]] = 1;
            batch.attention_mask[[i, lt + k]] = 1;
        }
        for (k, (f, bx)) in r.scene_features.iter().zip(&r.scene_boxes).enumerate() {
            for (c, v) in f.iter().enumerate() {
                batch.scene_features[[i, k, c]] = *v;
            }
            for (c, v) in bx.iter().enumerate() {
                batch.scene_boxes[[i, k, c]] = *v;
            }
            batch.scene_mask[[i, k]] = 1;
            batch.attention_mask[[i, lt + no + k]] = 1;
        }
        for (s, labels) in r.rpp_labels.iter().enumerate() {
            for (o, &l) in labels.iter().enumerate() {
                batch.rpp_labels[[i, s, o]] = l;
            }
        }
        for (j, &t) in r.decoder_target_ids.iter().enumerate() {
            batch.decoder_target_ids[[i, j]] = t as i64;
        }
    }
    Ok(batch)
}
