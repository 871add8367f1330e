//! Checkpoints as safetensors files: parameters under their own names,
//! optimizer moments under `optimizer.m.<name>` / `optimizer.v.<name>`, and
//! config, vocabulary and step counters in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{ModelConfig, ModelState};
use crate::input::Vocab;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "textvqa-checkpoint-v1";

const M_PREFIX: &str = "optimizer.m.";
const V_PREFIX: &str = "optimizer.v.";

/// Adam first and second moments keyed by parameter name.
#[derive(Debug, Clone)]
pub struct OptimizerMoments {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: ModelState,
    pub vocab: Vocab,
    pub step: u64,
    /// Steps skipped so far for non-finite loss or gradient.
    pub skipped: u64,
    pub optimizer: Option<OptimizerMoments>,
}

fn ck_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Checkpoint(e.to_string())
}

fn f32_bytes(t: &Tensor) -> Result<(Vec<usize>, Vec<u8>)> {
    let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    Ok((t.dims().to_vec(), bytes))
}

/// Serializes a checkpoint to bytes.
pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let (state, vocab, optimizer) = (&ck.state, &ck.vocab, ck.optimizer.as_ref());
    // Spare embedding rows are allowed; missing ones are not.
    if vocab.len() > state.config().vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} tokens but the model embeds only {}",
            vocab.len(),
            state.config().vocab_size
        )));
    }
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in state.vars() {
        let (shape, bytes) = f32_bytes(var.as_tensor())?;
        owned.push((name.clone(), shape, bytes));
    }
    if let Some(opt) = optimizer {
        for (prefix, map) in [(M_PREFIX, &opt.m), (V_PREFIX, &opt.v)] {
            for (name, t) in map {
                let (shape, bytes) = f32_bytes(t)?;
                owned.push((format!("{prefix}{name}"), shape, bytes));
            }
        }
    }
    let views = owned
        .iter()
        .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(ck_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("model_config".to_string(), serde_json::to_string(state.config())?);
    meta.insert("vocab".to_string(), serde_json::to_string(vocab.tokens())?);
    meta.insert("step".to_string(), ck.step.to_string());
    meta.insert("skipped".to_string(), ck.skipped.to_string());
    if let Some(opt) = optimizer {
        meta.insert("optimizer_step".to_string(), opt.step.to_string());
    }
    safetensors::tensor::serialize(views, Some(meta)).map_err(ck_err)
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_bytes(ck)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn meta_field<'a>(meta: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("metadata field {key} missing")))
}

/// Parses checkpoint bytes, loading parameters in `dtype`.
pub fn checkpoint_from_bytes(bytes: &[u8], dtype: DType) -> Result<Checkpoint> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(ck_err)?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint("no metadata".into()))?;
    let format = meta_field(&meta, "format")?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {format:?}")));
    }
    let config: ModelConfig = serde_json::from_str(meta_field(&meta, "model_config")?)?;
    let tokens: Vec<String> = serde_json::from_str(meta_field(&meta, "vocab")?)?;
    let vocab = Vocab::from_tokens(tokens)?;
    let step: u64 = meta_field(&meta, "step")?.parse().map_err(ck_err)?;
    let skipped: u64 = meta_field(&meta, "skipped")?.parse().map_err(ck_err)?;

    let st = SafeTensors::deserialize(bytes).map_err(ck_err)?;
    let mut params = BTreeMap::new();
    let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected F32")));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?.to_dtype(dtype)?;
        if let Some(rest) = name.strip_prefix(M_PREFIX) {
            m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
            v.insert(rest.to_string(), t);
        } else {
            params.insert(name, t);
        }
    }
    let state = ModelState::from_tensors(config, params, dtype)?;
    if vocab.len() > state.config().vocab_size {
        return Err(Error::Checkpoint("vocabulary is larger than the model's embedding table".into()));
    }
    let optimizer = match meta.get("optimizer_step") {
        None => None,
        Some(s) => {
            let names: Vec<&String> = state.vars().keys().collect();
            if !names.iter().all(|n| m.contains_key(*n) && v.contains_key(*n)) {
                return Err(Error::Checkpoint("incomplete optimizer moments".into()));
            }
            Some(OptimizerMoments {
                step: s.parse().map_err(ck_err)?,
                m,
                v,
            })
        }
    };
    Ok(Checkpoint {
        state,
        vocab,
        step,
        skipped,
        optimizer,
    })
}

pub fn load_checkpoint(path: &Path, dtype: DType) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelState, Vocab) {
        let vocab = Vocab::build(["red sign", "stop"]);
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers_enc: 1,
            n_layers_dec: 1,
            n_heads: 2,
            d_ff: 16,
            d_feat: 4,
            rpp_rank: 4,
            max_text_len: 16,
            max_dec_len: 4,
            ..Default::default()
        };
        (ModelState::new(cfg, 3, DType::F32).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (state, vocab) = tiny();
        let m: BTreeMap<String, Tensor> = state
            .vars()
            .iter()
            .map(|(k, v)| (k.clone(), (v.as_tensor() * 0.5).unwrap()))
            .collect();
        let moments = OptimizerMoments {
            step: 9,
            v: m.clone(),
            m,
        };
        let ck = Checkpoint {
            state: state.clone(),
            vocab: vocab.clone(),
            step: 12,
            skipped: 1,
            optimizer: Some(moments),
        };
        let back = checkpoint_from_bytes(&checkpoint_bytes(&ck).unwrap(), DType::F32).unwrap();
        assert_eq!((back.step, back.skipped), (12, 1));
        assert_eq!(back.vocab, vocab);
        assert_eq!(back.state.config(), state.config());
        assert_eq!(back.optimizer.as_ref().unwrap().step, 9);
        for (name, var) in state.vars() {
            let a = var.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = back.state.param(name).flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(checkpoint_from_bytes(b"not a checkpoint", DType::F32).is_err());
    }
}
