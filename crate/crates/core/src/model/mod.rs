//! Toy multimodal encoder-decoder.
//!
//! The encoder runs pre-norm transformer blocks over
//! `[text | objects | scene tokens]`; text positions embed token, segment and
//! learned absolute position, visual positions project `feature ⊕ box`. The
//! decoder cross-attends to the encoder output. One output table serves both
//! generation and MLM, and a pairwise scorer over (scene, object) encoder
//! states predicts spatial relations.
//!
//! Parameters live in a name-ordered map of candle `Var`s; names are the
//! checkpoint keys and are stable.

mod checkpoint;
mod config;
mod loss;
mod tensors;

use std::cell::Cell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint,
    OptimizerMoments, CHECKPOINT_FORMAT,
};
pub use config::ModelConfig;
pub use loss::{
    forward_from_embeddings, generation_loss, log_softmax, masked_cross_entropy, mlm_loss,
    rpp_logits, rpp_loss, scalar, softmax, total_pretrain_loss, ForwardOutput, LossComponents,
    LossWeights, Objective,
};
pub use tensors::{BatchTensors, Modality};

use crate::input::{EOS_ID, NUM_SEGMENTS, PAD_ID};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
/// Additive attention bias at masked keys.
const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Uniform with the given standard deviation.
    Uniform(f64),
}

/// Inverted dropout with masks drawn from a counter-keyed ChaCha stream, so a
/// forward pass is reproducible from `(seed, call order)`.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    seed: u64,
    counter: Cell<u64>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            seed,
            counter: Cell::new(0),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if self.rate <= 0.0 {
            return Ok(x.clone());
        }
        let n = self.counter.get();
        self.counter.set(n + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(n);
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

fn dropout(x: Tensor, ctx: Option<&Dropout>) -> Result<Tensor> {
    match ctx {
        Some(d) => d.apply(&x),
        None => Ok(x),
    }
}

/// `x · Wᵀ + b` over the last axis of a tensor of any rank.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (inp, out) = (dims[dims.len() - 1], w.dim(0)?);
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let mut y = x.reshape((rows, inp))?.matmul(&w.t()?)?;
    if let Some(b) = b {
        y = y.broadcast_add(b)?;
    }
    let mut shape = dims;
    *shape.last_mut().unwrap() = out;
    Ok(y.reshape(shape)?)
}

pub(crate) fn layer_norm(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(w)?.broadcast_add(b)?)
}

#[derive(Debug, Clone)]
pub struct ModelState {
    config: ModelConfig,
    params: BTreeMap<String, Var>,
    dtype: DType,
}

impl ModelState {
    /// Parameter names, shapes and initializers, in a fixed order.
    fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let (r, c) = (cfg.rpp_rank, cfg.n_rpp_classes);
        let fan = |n: usize| Init::Uniform(1.0 / (n as f64).sqrt());
        let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
        let norm = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
            add(format!("{p}.weight"), vec![d], Init::Ones);
            add(format!("{p}.bias"), vec![d], Init::Zeros);
        };
        let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
            for m in ["query", "key", "value", "output"] {
                add(format!("{p}.{m}.weight"), vec![d, d], fan(d));
            }
        };
        let ffn = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
            add(format!("{p}.in.weight"), vec![f, d], fan(d));
            add(format!("{p}.in.bias"), vec![f], Init::Zeros);
            add(format!("{p}.out.weight"), vec![d, f], fan(f));
            add(format!("{p}.out.bias"), vec![d], Init::Zeros);
        };

        add("embed.token".into(), vec![v, d], Init::Uniform(0.5));
        add("embed.segment".into(), vec![NUM_SEGMENTS, d], Init::Uniform(0.5));
        add("embed.text_position".into(), vec![cfg.max_text_len, d], Init::Uniform(0.1));
        for m in ["object", "scene"] {
            add(format!("embed.{m}.weight"), vec![d, cfg.d_feat + 4], fan(cfg.d_feat + 4));
            add(format!("embed.{m}.bias"), vec![d], Init::Zeros);
        }
        for i in 0..cfg.n_layers_enc {
            let p = format!("encoder.{i}");
            norm(&mut add, &format!("{p}.attn_norm"));
            attn(&mut add, &format!("{p}.self_attn"));
            norm(&mut add, &format!("{p}.ffn_norm"));
            ffn(&mut add, &format!("{p}.ffn"));
        }
        add("decoder.position".into(), vec![cfg.max_dec_len, d], Init::Uniform(0.1));
        norm(&mut add, "decoder.memory_norm");
        for i in 0..cfg.n_layers_dec {
            let p = format!("decoder.{i}");
            norm(&mut add, &format!("{p}.self_attn_norm"));
            attn(&mut add, &format!("{p}.self_attn"));
            norm(&mut add, &format!("{p}.cross_attn_norm"));
            attn(&mut add, &format!("{p}.cross_attn"));
            norm(&mut add, &format!("{p}.ffn_norm"));
            ffn(&mut add, &format!("{p}.ffn"));
        }
        norm(&mut add, "decoder.final_norm");
        add("lm_head.weight".into(), vec![v, d], fan(d));
        add("lm_head.bias".into(), vec![v], Init::Zeros);
        norm(&mut add, "mlm.norm");
        norm(&mut add, "rpp.norm");
        for m in ["scene", "object", "scene_bilinear", "object_bilinear"] {
            add(format!("rpp.{m}.weight"), vec![r, d], fan(d));
        }
        add("rpp.hidden_bias".into(), vec![r], Init::Zeros);
        add("rpp.out.weight".into(), vec![c, r], fan(r));
        add("rpp.out.bias".into(), vec![c], Init::Zeros);
        out
    }

    /// Random initialization, a pure function of `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, init) in Self::layout(&config) {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(std) => {
                    let a = std * 3f64.sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
            };
            let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?;
            params.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self {
            config,
            params,
            dtype,
        })
    }

    /// Builds a state from named tensors; every expected name must be present
    /// with its expected shape.
    pub fn from_tensors(
        config: ModelConfig,
        mut tensors: BTreeMap<String, Tensor>,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape, _) in Self::layout(&config) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
            params.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Self {
            config,
            params,
            dtype,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .as_tensor()
    }

    pub fn set_param(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "{name}: shape {:?} vs {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Independent copy (fresh `Var`s) in the requested dtype.
    pub fn deep_clone(&self, dtype: DType) -> Result<Self> {
        let tensors = self
            .params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_tensors(self.config.clone(), tensors, dtype)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// True when every parameter is finite.
    pub fn is_finite(&self) -> Result<bool> {
        for v in self.params.values() {
            let s = v.as_tensor().abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Zeroes every residual branch output (attention and FFN output
    /// projections) so each encoder and decoder block is the identity map.
    pub fn zero_residual_branches(&self) -> Result<()> {
        for (name, var) in &self.params {
            let is_branch_out = name.ends_with("attn.output.weight")
                || name.ends_with("ffn.out.weight")
                || name.ends_with("ffn.out.bias");
            if is_branch_out {
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }

    /// `[B, L, d]` input embeddings; padded positions are exactly zero.
    pub fn embed(&self, bt: &BatchTensors) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut parts = Vec::with_capacity(3);
        if bt.lt > 0 {
            let tok = self
                .param("embed.token")
                .index_select(&bt.token_ids, 0)?
                .reshape((bt.b, bt.lt, d))?;
            let seg = self
                .param("embed.segment")
                .index_select(&bt.segment_ids, 0)?
                .reshape((bt.b, bt.lt, d))?;
            let pos = self
                .param("embed.text_position")
                .narrow(0, 0, bt.lt)?
                .unsqueeze(0)?;
            parts.push((tok + seg)?.broadcast_add(&pos)?.broadcast_mul(&bt.text_mask)?);
        }
        if let (Some(inputs), Some(mask)) = (&bt.obj_inputs, &bt.obj_mask) {
            let w = self.param("embed.object.weight");
            let b = self.param("embed.object.bias");
            parts.push(linear(inputs, w, Some(b))?.broadcast_mul(mask)?);
        }
        if let (Some(inputs), Some(mask)) = (&bt.scene_inputs, &bt.scene_mask) {
            let w = self.param("embed.scene.weight");
            let b = self.param("embed.scene.bias");
            parts.push(linear(inputs, w, Some(b))?.broadcast_mul(mask)?);
        }
        if parts.is_empty() {
            return Err(Error::Shape("batch has no positions".into()));
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    fn norm(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        layer_norm(
            x,
            self.param(&format!("{prefix}.weight")),
            self.param(&format!("{prefix}.bias")),
        )
    }

    fn attention(&self, prefix: &str, q_in: &Tensor, kv_in: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, lq, d) = q_in.dims3()?;
        let lk = kv_in.dim(1)?;
        let h = self.config.n_heads;
        let dh = d / h;
        let w = |m: &str| self.param(&format!("{prefix}.{m}.weight"));
        let heads = |x: Tensor, l: usize| -> Result<Tensor> {
            Ok(x.reshape((b, l, h, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = heads(linear(q_in, w("query"), None)?, lq)?;
        let k = heads(linear(kv_in, w("key"), None)?, lk)?;
        let v = heads(linear(kv_in, w("value"), None)?, lk)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let probs = softmax(&scores.broadcast_add(bias)?)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, d))?;
        linear(&ctx, w("output"), None)
    }

    fn ffn(&self, prefix: &str, x: &Tensor, drop: Option<&Dropout>) -> Result<Tensor> {
        let p = |m: &str| self.param(&format!("{prefix}.{m}"));
        let hidden = linear(x, p("in.weight"), Some(p("in.bias")))?.gelu()?;
        let hidden = dropout(hidden, drop)?;
        linear(&hidden, p("out.weight"), Some(p("out.bias")))
    }

    /// Runs the encoder stack on precomputed embeddings.
    pub fn encode_embeddings(
        &self,
        emb: &Tensor,
        bt: &BatchTensors,
        drop: Option<&Dropout>,
    ) -> Result<Tensor> {
        if emb.dims() != [bt.b, bt.total_len(), self.config.d_model] {
            return Err(Error::Shape(format!(
                "embedding shape {:?} does not match batch",
                emb.dims()
            )));
        }
        let mut x = dropout(emb.clone(), drop)?;
        for i in 0..self.config.n_layers_enc {
            let p = format!("encoder.{i}");
            let h = self.norm(&x, &format!("{p}.attn_norm"))?;
            x = (x + self.attention(&format!("{p}.self_attn"), &h, &h, &bt.enc_bias)?)?;
            let h = self.norm(&x, &format!("{p}.ffn_norm"))?;
            x = (x + self.ffn(&format!("{p}.ffn"), &h, drop)?)?;
        }
        Ok(x)
    }

    /// Encoder states `[B, L, d]`.
    pub fn encode(&self, bt: &BatchTensors, drop: Option<&Dropout>) -> Result<Tensor> {
        let emb = self.embed(bt)?;
        self.encode_embeddings(&emb, bt, drop)
    }

    /// Teacher-forced decoder logits `[B, L_dec, V]` for right-shifted inputs.
    pub fn decode_logits(
        &self,
        encoder_states: &Tensor,
        bt: &BatchTensors,
        decoder_input_ids: &Tensor,
        drop: Option<&Dropout>,
    ) -> Result<Tensor> {
        let (b, ld) = decoder_input_ids.dims2()?;
        let d = self.config.d_model;
        if b != bt.b || ld == 0 || ld > self.config.max_dec_len {
            return Err(Error::Shape(format!(
                "decoder input {:?} incompatible with batch {} / max_dec_len {}",
                decoder_input_ids.dims(),
                bt.b,
                self.config.max_dec_len
            )));
        }
        let memory = self.norm(encoder_states, "decoder.memory_norm")?;
        let tok = self
            .param("embed.token")
            .index_select(&decoder_input_ids.flatten_all()?, 0)?
            .reshape((b, ld, d))?;
        let pos = self.param("decoder.position").narrow(0, 0, ld)?.unsqueeze(0)?;
        let mut x = dropout(tok.broadcast_add(&pos)?, drop)?;
        let causal = causal_bias(ld, self.dtype)?;
        for i in 0..self.config.n_layers_dec {
            let p = format!("decoder.{i}");
            let h = self.norm(&x, &format!("{p}.self_attn_norm"))?;
            x = (x + self.attention(&format!("{p}.self_attn"), &h, &h, &causal)?)?;
            let h = self.norm(&x, &format!("{p}.cross_attn_norm"))?;
            x = (x + self.attention(&format!("{p}.cross_attn"), &h, &memory, &bt.enc_bias)?)?;
            let h = self.norm(&x, &format!("{p}.ffn_norm"))?;
            x = (x + self.ffn(&format!("{p}.ffn"), &h, drop)?)?;
        }
        let x = self.norm(&x, "decoder.final_norm")?;
        linear(
            &x,
            self.param("lm_head.weight"),
            Some(self.param("lm_head.bias")),
        )
    }
}

fn causal_bias(len: usize, dtype: DType) -> Result<Tensor> {
    let values: Vec<f64> = (0..len * len)
        .map(|k| if k % len > k / len { MASK_BIAS } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(values, (1, 1, len, len), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Greedy decoding from the start token until EOS or `max_len` tokens
/// (capped at the decoder's position table). EOS is not included in the
/// output; argmax ties resolve to the lowest id.
pub fn greedy_decode(
    state: &ModelState,
    encoder_states: &Tensor,
    bt: &BatchTensors,
    max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    let b = bt.b;
    let steps = max_len.min(state.config().max_dec_len);
    let mut inputs: Vec<Vec<u32>> = vec![vec![PAD_ID]; b];
    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    for step in 0..steps {
        let flat: Vec<u32> = inputs.iter().flatten().copied().collect();
        let ids = Tensor::from_vec(flat, (b, step + 1), &Device::Cpu)?;
        let logits = state.decode_logits(encoder_states, bt, &ids, None)?;
        let last = logits
            .narrow(1, step, 1)?
            .squeeze(1)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        for (i, row) in last.iter().enumerate() {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            let best = best as u32;
            if !done[i] {
                if best == EOS_ID {
                    done[i] = true;
                } else {
                    outputs[i].push(best);
                }
            }
            inputs[i].push(best);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(outputs)
}
