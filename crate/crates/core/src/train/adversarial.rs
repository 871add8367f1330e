//! Embedding-space adversary and the symmetric KL consistency term.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use super::AdvConfig;
use crate::input::IGNORE_INDEX;
use crate::model::{log_softmax, softmax};
use crate::{Error, Result};

fn per_sample_norms(x: &Tensor) -> Result<Vec<f64>> {
    let sq = x.sqr()?.sum_keepdim(2)?.sum_keepdim(1)?;
    let v = sq.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.into_iter().map(f64::sqrt).collect())
}

fn per_sample_scale(values: &[f64], like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1), &Device::Cpu)?.to_dtype(like.dtype())?)
}

/// Worst-case perturbation `δ` of `embeddings [B, L, d]` found by projected
/// gradient ascent on `loss_fn(embeddings + δ)`.
///
/// `eligible [B, L, 1]` is 1 at positions the adversary may move; `δ` is zero
/// elsewhere and each sample's slice lies in the L2 ball of radius `epsilon`.
/// A disabled adversary returns zeros without calling `loss_fn`.
pub fn perturb_embeddings<R, F>(
    embeddings: &Tensor,
    eligible: &Tensor,
    adv: &AdvConfig,
    rng: &mut R,
    mut loss_fn: F,
) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let (b, l, d) = embeddings.dims3()?;
    if eligible.dims() != [b, l, 1] {
        return Err(Error::Shape(format!(
            "eligibility mask {:?} for embeddings {:?}",
            eligible.dims(),
            embeddings.dims()
        )));
    }
    if !adv.enabled() {
        return Ok(embeddings.zeros_like()?);
    }
    let mask = eligible.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut init = Vec::with_capacity(b * l * d);
    for i in 0..b {
        let dims = mask[i * l..(i + 1) * l].iter().sum::<f64>() * d as f64;
        let bound = if dims > 0.0 { adv.epsilon / dims.sqrt() } else { 0.0 };
        for j in 0..l {
            for _ in 0..d {
                let u: f64 = rng.random_range(-1.0..=1.0);
                init.push(u * bound * mask[i * l + j]);
            }
        }
    }
    let base = embeddings.detach();
    let mut delta = Tensor::from_vec(init, (b, l, d), &Device::Cpu)?.to_dtype(embeddings.dtype())?;
    for _ in 0..adv.k_steps {
        let var = Var::from_tensor(&delta)?;
        let loss = loss_fn(&base.add(var.as_tensor())?)?;
        let grads = loss.backward()?;
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.broadcast_mul(eligible)?,
            None => delta.zeros_like()?,
        };
        let g_norms = per_sample_norms(&g)?;
        if g_norms.iter().any(|n| !n.is_finite()) {
            return Err(Error::Numerical("non-finite adversarial gradient".into()));
        }
        let step: Vec<f64> = g_norms
            .iter()
            .map(|&n| if n > 0.0 { adv.alpha / n } else { 0.0 })
            .collect();
        delta = (delta + g.broadcast_mul(&per_sample_scale(&step, &g)?)?)?;
        let shrink: Vec<f64> = per_sample_norms(&delta)?
            .iter()
            .map(|&n| if n > adv.epsilon { adv.epsilon / n } else { 1.0 })
            .collect();
        delta = delta
            .broadcast_mul(&per_sample_scale(&shrink, &delta)?)?
            .broadcast_mul(eligible)?;
    }
    Ok(delta.detach())
}

/// Mean over non-ignored decoder positions of
/// `½[KL(p‖q) + KL(q‖p)] = ½ Σ (p − q)(log p − log q)` between the softmax
/// distributions of `a` and `b` (`[B, L, V]`). Symmetric by construction.
pub fn kl_consistency(a: &Tensor, b: &Tensor, targets: &[i64]) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("logits {:?} vs {:?}", a.dims(), b.dims())));
    }
    let v = a.dim(candle_core::D::Minus1)?;
    let rows = a.elem_count() / v;
    if targets.len() != rows {
        return Err(Error::Shape(format!("{} targets for {rows} positions", targets.len())));
    }
    let keep: Vec<u32> = (0..rows as u32)
        .filter(|&i| targets[i as usize] != IGNORE_INDEX)
        .collect();
    if keep.is_empty() {
        return Ok(Tensor::zeros((), a.dtype(), &Device::Cpu)?);
    }
    let idx = Tensor::from_vec(keep.clone(), keep.len(), &Device::Cpu)?;
    let a = a.reshape((rows, v))?.index_select(&idx, 0)?;
    let b = b.reshape((rows, v))?.index_select(&idx, 0)?;
    let dp = (softmax(&a)? - softmax(&b)?)?;
    let dl = (log_softmax(&a)? - log_softmax(&b)?)?;
    Ok((dp * dl)?.sum(1)?.mean_all()?.affine(0.5, 0.0)?)
}
