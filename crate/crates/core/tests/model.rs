mod common;

use candle_core::{DType, IndexOp, Tensor};
use common::{flat_f64, tiny_finetune_batch, tiny_pretrain_batch, tiny_samples, tiny_state, tiny_vocab};
use textvqa::input::{build_finetune_sample, collate};
use textvqa::model::{
    checkpoint_from_bytes, greedy_decode, load_checkpoint, save_checkpoint, BatchTensors, Checkpoint,
};

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn padding_does_not_change_a_row() {
    let samples = tiny_samples();
    let vocab = tiny_vocab(&samples);
    let state = tiny_state(11, DType::F64);
    let row = |i: usize| build_finetune_sample(&samples[i], &vocab).unwrap();

    // Sample 1 alone, then next to sample 0 which has a longer text and more objects.
    let alone = collate(&[row(1)]).unwrap();
    let padded = collate(&[row(1), row(0)]).unwrap();
    let bt_a = BatchTensors::new(&alone, &state).unwrap();
    let bt_p = BatchTensors::new(&padded, &state).unwrap();
    assert!(bt_p.lt > bt_a.lt);

    let enc_a = state.encode(&bt_a, None).unwrap().i(0).unwrap();
    let enc_p = state.encode(&bt_p, None).unwrap().i(0).unwrap();
    let n_text = alone.row(0).token_ids.len();
    let text_a = flat_f64(&enc_a.narrow(0, 0, n_text).unwrap());
    let text_p = flat_f64(&enc_p.narrow(0, 0, n_text).unwrap());
    assert!(max_abs_diff(&text_a, &text_p) < 1e-10);
    let n_obj = bt_a.n_obj;
    let obj_a = flat_f64(&enc_a.narrow(0, bt_a.lt, n_obj).unwrap());
    let obj_p = flat_f64(&enc_p.narrow(0, bt_p.lt, n_obj).unwrap());
    assert!(max_abs_diff(&obj_a, &obj_p) < 1e-10);

    let ld = bt_a.ld;
    let enc_a = state.encode(&bt_a, None).unwrap();
    let enc_p = state.encode(&bt_p, None).unwrap();
    let dec_a = state.decode_logits(&enc_a, &bt_a, &bt_a.decoder_input_ids, None).unwrap();
    let dec_p = state.decode_logits(&enc_p, &bt_p, &bt_p.decoder_input_ids, None).unwrap();
    let la = flat_f64(&dec_a.i(0).unwrap());
    let lp = flat_f64(&dec_p.i(0).unwrap().narrow(0, 0, ld).unwrap());
    assert!(max_abs_diff(&la, &lp) < 1e-10);
}

#[test]
fn decoder_is_causal() {
    let (batch, _) = tiny_finetune_batch();
    let state = tiny_state(5, DType::F64);
    let bt = BatchTensors::new(&batch, &state).unwrap();
    let enc = state.encode(&bt, None).unwrap();
    let ids = bt.decoder_input_ids.to_vec2::<u32>().unwrap();
    let ld = ids[0].len();
    assert!(ld >= 2);
    let base = state.decode_logits(&enc, &bt, &bt.decoder_input_ids, None).unwrap();
    for t in 1..ld {
        let changed: Vec<Vec<u32>> = ids
            .iter()
            .map(|r| {
                let mut r = r.clone();
                for v in &mut r[t..] {
                    *v = (*v + 7) % 32;
                }
                r
            })
            .collect();
        let flat: Vec<u32> = changed.concat();
        let alt_ids = Tensor::from_vec(flat, (ids.len(), ld), &candle_core::Device::Cpu).unwrap();
        let alt = state.decode_logits(&enc, &bt, &alt_ids, None).unwrap();
        let before = flat_f64(&base.narrow(1, 0, t).unwrap());
        let after = flat_f64(&alt.narrow(1, 0, t).unwrap());
        assert!(max_abs_diff(&before, &after) < 1e-12, "position < {t} saw the future");
        let at = flat_f64(&base.narrow(1, t, 1).unwrap());
        let at_alt = flat_f64(&alt.narrow(1, t, 1).unwrap());
        assert!(max_abs_diff(&at, &at_alt) > 1e-6, "position {t} ignores its own input");
    }
}

#[test]
fn zeroed_residual_branches_make_the_encoder_an_identity() {
    let (batch, _) = tiny_pretrain_batch(3);
    let state = tiny_state(2, DType::F64);
    state.zero_residual_branches().unwrap();
    let bt = BatchTensors::new(&batch, &state).unwrap();
    let emb = flat_f64(&state.embed(&bt).unwrap());
    let enc = flat_f64(&state.encode(&bt, None).unwrap());
    assert!(max_abs_diff(&emb, &enc) < 1e-12);
}

#[test]
fn greedy_decoding_is_deterministic() {
    let (batch, _) = tiny_finetune_batch();
    let a = tiny_state(9, DType::F32);
    let b = tiny_state(9, DType::F32);
    let run = |s: &textvqa::model::ModelState| {
        let bt = BatchTensors::new(&batch, s).unwrap();
        let enc = s.encode(&bt, None).unwrap();
        greedy_decode(s, &enc, &bt, 6).unwrap()
    };
    let out = run(&a);
    assert_eq!(out, run(&a));
    assert_eq!(out, run(&b));
    assert!(out.iter().all(|ids| ids.len() <= 6 && !ids.contains(&textvqa::input::EOS_ID)));
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let samples = tiny_samples();
    let vocab = tiny_vocab(&samples);
    let state = tiny_state(4, DType::F32);
    let ck = Checkpoint {
        state: state.clone(),
        vocab: vocab.clone(),
        step: 17,
        skipped: 2,
        optimizer: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path, DType::F32).unwrap();
    assert_eq!((back.step, back.skipped), (17, 2));
    assert!(back.optimizer.is_none());
    assert_eq!(back.vocab, vocab);
    assert_eq!(back.state.config(), state.config());
    for (name, v) in state.vars() {
        let a = v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.state.param(name).flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
    }
    assert!(checkpoint_from_bytes(b"not a checkpoint", DType::F32).is_err());
}
