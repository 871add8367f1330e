use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{ModelState, MASK_BIAS};
use crate::input::{MultimodalBatch, IGNORE_INDEX};
use crate::{Error, Result};

/// Encoder input modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Object,
    Scene,
    All,
}

/// A [`MultimodalBatch`] converted to tensors in the model's dtype.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    pub b: usize,
    pub lt: usize,
    pub n_obj: usize,
    pub n_scene: usize,
    pub ld: usize,
    /// Flattened `[B * L_text]` ids.
    pub token_ids: Tensor,
    pub segment_ids: Tensor,
    /// `[B, L_text, 1]`
    pub text_mask: Tensor,
    /// `[B, N_obj, D_feat + 4]`, `None` when the batch has no objects.
    pub obj_inputs: Option<Tensor>,
    pub obj_mask: Option<Tensor>,
    pub scene_inputs: Option<Tensor>,
    pub scene_mask: Option<Tensor>,
    /// `[B, 1, 1, L]`: 0 at real keys, a large negative value at padding.
    pub enc_bias: Tensor,
    /// Per-position 0/1 mask over `[B, L]`.
    pub attention_mask: Vec<u8>,
    pub mlm_labels: Vec<i64>,
    pub rpp_labels: Vec<i64>,
    pub decoder_input_ids: Tensor,
    pub decoder_targets: Vec<i64>,
}

fn region_inputs(
    features: &ndarray::Array3<f32>,
    boxes: &ndarray::Array3<f32>,
    mask: &ndarray::Array2<u8>,
    dtype: DType,
) -> Result<Option<(Tensor, Tensor)>> {
    let (b, n, d) = features.dim();
    if n == 0 {
        return Ok(None);
    }
    let mut flat = Vec::with_capacity(b * n * (d + 4));
    for i in 0..b {
        for k in 0..n {
            flat.extend(features.slice(ndarray::s![i, k, ..]).iter().copied());
            flat.extend(boxes.slice(ndarray::s![i, k, ..]).iter().copied());
        }
    }
    let inputs = Tensor::from_vec(flat, (b, n, d + 4), &Device::Cpu)?.to_dtype(dtype)?;
    let m: Vec<f32> = mask.iter().map(|&v| v as f32).collect();
    let mask = Tensor::from_vec(m, (b, n, 1), &Device::Cpu)?.to_dtype(dtype)?;
    Ok(Some((inputs, mask)))
}

impl BatchTensors {
    pub fn new(batch: &MultimodalBatch, state: &ModelState) -> Result<Self> {
        let cfg = state.config();
        let dtype = state.dtype();
        let (b, lt) = batch.token_ids.dim();
        if lt > cfg.max_text_len {
            return Err(Error::Shape(format!(
                "text length {lt} exceeds max_text_len {}",
                cfg.max_text_len
            )));
        }
        if batch.dec_len() > cfg.max_dec_len {
            return Err(Error::Shape(format!(
                "decoder length {} exceeds max_dec_len {}",
                batch.dec_len(),
                cfg.max_dec_len
            )));
        }
        if batch.d_feat != cfg.d_feat {
            return Err(Error::Shape(format!(
                "batch d_feat {} but model d_feat {}",
                batch.d_feat, cfg.d_feat
            )));
        }
        let vocab = cfg.vocab_size as i64;
        let out_of_vocab = batch.token_ids.iter().any(|&t| t as i64 >= vocab)
            || batch
                .mlm_labels
                .iter()
                .chain(batch.decoder_target_ids.iter())
                .any(|&t| t != IGNORE_INDEX && !(0..vocab).contains(&t));
        if out_of_vocab {
            return Err(Error::Shape("token id outside the vocabulary".into()));
        }
        if batch
            .rpp_labels
            .iter()
            .any(|&l| l != IGNORE_INDEX && !(0..cfg.n_rpp_classes as i64).contains(&l))
        {
            return Err(Error::Shape("relation label out of range".into()));
        }
        if batch.segment_ids.iter().any(|&s| s as usize >= crate::input::NUM_SEGMENTS) {
            return Err(Error::Shape("segment id out of range".into()));
        }

        let dev = Device::Cpu;
        let token_ids = Tensor::from_iter(batch.token_ids.iter().copied(), &dev)?;
        let segment_ids = Tensor::from_iter(batch.segment_ids.iter().copied(), &dev)?;
        let tm: Vec<f32> = batch.text_mask.iter().map(|&v| v as f32).collect();
        let text_mask = Tensor::from_vec(tm, (b, lt, 1), &dev)?.to_dtype(dtype)?;
        let obj = region_inputs(&batch.obj_features, &batch.obj_boxes, &batch.obj_mask, dtype)?;
        let scene = region_inputs(
            &batch.scene_features,
            &batch.scene_boxes,
            &batch.scene_mask,
            dtype,
        )?;
        let total = batch.total_len();
        let bias: Vec<f64> = batch
            .attention_mask
            .iter()
            .map(|&m| if m == 0 { MASK_BIAS } else { 0.0 })
            .collect();
        let enc_bias = Tensor::from_vec(bias, (b, 1, 1, total), &dev)?.to_dtype(dtype)?;
        let dec_in = batch.decoder_input_ids();
        let ld = batch.dec_len();
        let decoder_input_ids = Tensor::from_iter(dec_in.iter().copied(), &dev)?.reshape((b, ld))?;

        Ok(Self {
            b,
            lt,
            n_obj: batch.n_obj(),
            n_scene: batch.n_scene(),
            ld,
            token_ids,
            segment_ids,
            text_mask,
            obj_mask: obj.as_ref().map(|(_, m)| m.clone()),
            obj_inputs: obj.map(|(i, _)| i),
            scene_mask: scene.as_ref().map(|(_, m)| m.clone()),
            scene_inputs: scene.map(|(i, _)| i),
            enc_bias,
            attention_mask: batch.attention_mask.iter().copied().collect(),
            mlm_labels: batch.mlm_labels.iter().copied().collect(),
            rpp_labels: batch.rpp_labels.iter().copied().collect(),
            decoder_input_ids,
            decoder_targets: batch.decoder_target_ids.iter().copied().collect(),
        })
    }

    pub fn total_len(&self) -> usize {
        self.lt + self.n_obj + self.n_scene
    }

    /// `[B, L, 1]` 0/1 mask of real positions belonging to `modality`.
    pub fn modality_mask(&self, modality: Modality, dtype: DType) -> Result<Tensor> {
        let total = self.total_len();
        let range = match modality {
            Modality::Text => 0..self.lt,
            Modality::Object => self.lt..self.lt + self.n_obj,
            Modality::Scene => self.lt + self.n_obj..total,
            Modality::All => 0..total,
        };
        let values: Vec<f64> = (0..self.b * total)
            .map(|k| {
                let pos = k % total;
                if range.contains(&pos) && self.attention_mask[k] != 0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Tensor::from_vec(values, (self.b, total, 1), &Device::Cpu)?.to_dtype(dtype)?)
    }
}
