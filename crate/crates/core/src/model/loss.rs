//! Heads and losses.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::{layer_norm, linear, BatchTensors, Dropout, ModelState};
use crate::input::IGNORE_INDEX;
use crate::{Error, Result};

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Value of a scalar tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn zero(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &Device::Cpu)?)
}

/// Mean cross entropy of `logits [N, C]` over rows whose label is not
/// [`IGNORE_INDEX`]; zero when every row is ignored.
pub fn masked_cross_entropy(logits: &Tensor, labels: &[i64]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let keep: Vec<u32> = (0..n as u32)
        .filter(|&i| labels[i as usize] != IGNORE_INDEX)
        .collect();
    if keep.is_empty() {
        return zero(logits.dtype());
    }
    let targets: Vec<u32> = keep.iter().map(|&i| labels[i as usize] as u32).collect();
    if targets.iter().any(|&t| t as usize >= c) {
        return Err(Error::Shape("label exceeds number of classes".into()));
    }
    let k = keep.len();
    let rows = logits.index_select(&Tensor::from_vec(keep, k, &Device::Cpu)?, 0)?;
    let picked = log_softmax(&rows)?.gather(&Tensor::from_vec(targets, (k, 1), &Device::Cpu)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Token-level cross entropy of decoder logits `[B, L_dec, V]`.
pub fn generation_loss(logits: &Tensor, decoder_targets: &[i64]) -> Result<Tensor> {
    let (b, l, v) = logits.dims3()?;
    masked_cross_entropy(&logits.reshape((b * l, v))?, decoder_targets)
}

/// Cross entropy of the shared output table at MLM-selected text positions.
pub fn mlm_loss(state: &ModelState, encoder_states: &Tensor, bt: &BatchTensors) -> Result<Tensor> {
    let positions: Vec<u32> = (0..bt.mlm_labels.len() as u32)
        .filter(|&i| bt.mlm_labels[i as usize] != IGNORE_INDEX)
        .collect();
    if positions.is_empty() {
        return zero(state.dtype());
    }
    let d = state.config().d_model;
    let labels: Vec<i64> = positions
        .iter()
        .map(|&i| bt.mlm_labels[i as usize])
        .collect();
    let k = positions.len();
    let text = encoder_states
        .narrow(1, 0, bt.lt)?
        .contiguous()?
        .reshape((bt.b * bt.lt, d))?
        .index_select(&Tensor::from_vec(positions, k, &Device::Cpu)?, 0)?;
    let h = layer_norm(&text, state.param("mlm.norm.weight"), state.param("mlm.norm.bias"))?;
    let logits = linear(
        &h,
        state.param("lm_head.weight"),
        Some(state.param("lm_head.bias")),
    )?;
    masked_cross_entropy(&logits, &labels)
}

/// Relation logits `[B, N_st, N_obj, C]` from every (scene, object) pair of
/// encoder states: a hidden layer mixing per-side projections with their
/// low-rank bilinear interaction.
pub fn rpp_logits(state: &ModelState, encoder_states: &Tensor, bt: &BatchTensors) -> Result<Tensor> {
    if bt.n_obj == 0 || bt.n_scene == 0 {
        return Err(Error::Shape("relation head needs objects and scene tokens".into()));
    }
    let p = |n: &str| state.param(n);
    let x = layer_norm(encoder_states, p("rpp.norm.weight"), p("rpp.norm.bias"))?;
    let obj = x.narrow(1, bt.lt, bt.n_obj)?;
    let scene = x.narrow(1, bt.lt + bt.n_obj, bt.n_scene)?;
    let s_lin = linear(&scene, p("rpp.scene.weight"), None)?.unsqueeze(2)?;
    let o_lin = linear(&obj, p("rpp.object.weight"), None)?.unsqueeze(1)?;
    let s_bi = linear(&scene, p("rpp.scene_bilinear.weight"), None)?.unsqueeze(2)?;
    let o_bi = linear(&obj, p("rpp.object_bilinear.weight"), None)?.unsqueeze(1)?;
    let hidden = s_lin
        .broadcast_add(&o_lin)?
        .broadcast_add(&s_bi.broadcast_mul(&o_bi)?)?
        .broadcast_add(p("rpp.hidden_bias"))?
        .gelu()?;
    linear(&hidden, p("rpp.out.weight"), Some(p("rpp.out.bias")))
}

/// Mean relation cross entropy over non-ignored (scene, object) pairs.
pub fn rpp_loss(state: &ModelState, encoder_states: &Tensor, bt: &BatchTensors) -> Result<Tensor> {
    if bt.n_obj == 0 || bt.n_scene == 0 || bt.rpp_labels.iter().all(|&l| l == IGNORE_INDEX) {
        return zero(state.dtype());
    }
    let logits = rpp_logits(state, encoder_states, bt)?;
    let c = state.config().n_rpp_classes;
    masked_cross_entropy(&logits.reshape((bt.rpp_labels.len(), c))?, &bt.rpp_labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gen: f64,
    pub mlm: f64,
    pub rpp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gen: 1.0,
            mlm: 1.0,
            rpp: 1.0,
        }
    }
}

/// What a forward pass optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Weighted generation + MLM + RPP.
    Pretrain(LossWeights),
    /// Answer generation only.
    Finetune,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub total: Tensor,
    pub gen: Tensor,
    pub mlm: Option<Tensor>,
    pub rpp: Option<Tensor>,
    pub gen_logits: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub gen: f64,
    pub mlm: Option<f64>,
    pub rpp: Option<f64>,
    pub total: f64,
}

impl ForwardOutput {
    pub fn components(&self) -> Result<LossComponents> {
        Ok(LossComponents {
            gen: scalar(&self.gen)?,
            mlm: self.mlm.as_ref().map(scalar).transpose()?,
            rpp: self.rpp.as_ref().map(scalar).transpose()?,
            total: scalar(&self.total)?,
        })
    }
}

/// Encoder, decoder and objective on top of given input embeddings.
pub fn forward_from_embeddings(
    state: &ModelState,
    embeddings: &Tensor,
    bt: &BatchTensors,
    objective: Objective,
    drop: Option<&Dropout>,
) -> Result<ForwardOutput> {
    let enc = state.encode_embeddings(embeddings, bt, drop)?;
    let gen_logits = state.decode_logits(&enc, bt, &bt.decoder_input_ids, drop)?;
    let gen = generation_loss(&gen_logits, &bt.decoder_targets)?;
    match objective {
        Objective::Finetune => Ok(ForwardOutput {
            total: gen.clone(),
            gen,
            mlm: None,
            rpp: None,
            gen_logits,
        }),
        Objective::Pretrain(w) => {
            let mlm = mlm_loss(state, &enc, bt)?;
            let rpp = rpp_loss(state, &enc, bt)?;
            let total = ((gen.affine(w.gen, 0.0)? + mlm.affine(w.mlm, 0.0)?)?
                + rpp.affine(w.rpp, 0.0)?)?;
            Ok(ForwardOutput {
                total,
                gen,
                mlm: Some(mlm),
                rpp: Some(rpp),
                gen_logits,
            })
        }
    }
}

/// `λ_gen·gen + λ_mlm·mlm + λ_rpp·rpp` on clean embeddings.
pub fn total_pretrain_loss(
    state: &ModelState,
    bt: &BatchTensors,
    weights: LossWeights,
) -> Result<(Tensor, LossComponents)> {
    let emb = state.embed(bt)?;
    let out = forward_from_embeddings(state, &emb, bt, Objective::Pretrain(weights), None)?;
    let comps = out.components()?;
    Ok((out.total, comps))
}
