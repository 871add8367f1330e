mod common;

use candle_core::{DType, Tensor};
use common::{tiny_finetune_batch, tiny_pretrain_batch, tiny_samples, tiny_state, tiny_vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textvqa::model::{
    checkpoint_from_bytes, forward_from_embeddings, scalar, BatchTensors, Modality, ModelState,
    Objective,
};
use textvqa::train::{
    perturb_embeddings, run_training, train_step, AdvConfig, MemorySink, NoCheckpoints, Stage,
    StepMetrics, TrainConfig, TrainingSession,
};

fn cfg(stage: Stage, steps: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        warmup_steps: 10,
        batch_size: 3,
        total_steps: steps,
        seed: 21,
        stage,
        ..Default::default()
    }
}

fn run(stage: Stage, steps: u64, adv: &AdvConfig, seed: u64) -> (TrainingSession, Vec<StepMetrics>) {
    let samples = tiny_samples();
    let vocab = tiny_vocab(&samples);
    let session = TrainingSession::new(tiny_state(seed, DType::F32)).unwrap();
    let out = run_training(&samples, &vocab, session, &cfg(stage, steps), adv, &mut NoCheckpoints, &mut |_| Ok(()))
        .unwrap();
    (out.session, out.history)
}

fn params_bits(state: &ModelState) -> Vec<(String, Vec<u32>)> {
    state
        .vars()
        .iter()
        .map(|(k, v)| {
            let t = v.as_tensor().to_dtype(DType::F32).unwrap().flatten_all().unwrap();
            (k.clone(), t.to_vec1::<f32>().unwrap().iter().map(|x| x.to_bits()).collect())
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_runs() {
    let adv = AdvConfig::default();
    let (a, ha) = run(Stage::Pretrain, 15, &adv, 1);
    let (b, hb) = run(Stage::Pretrain, 15, &adv, 1);
    assert_eq!(ha, hb);
    assert_eq!(params_bits(&a.state), params_bits(&b.state));
    let (_, hc) = run(Stage::Pretrain, 15, &adv, 2);
    assert_ne!(ha, hc);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let samples = tiny_samples();
    let vocab = tiny_vocab(&samples);
    let adv = AdvConfig::default();
    let mut c = cfg(Stage::Pretrain, 100);
    c.checkpoint_every = 50;
    let mut sink = MemorySink::default();
    let session = TrainingSession::new(tiny_state(3, DType::F32)).unwrap();
    let full = run_training(&samples, &vocab, session, &c, &adv, &mut sink, &mut |_| Ok(())).unwrap();
    let steps: Vec<u64> = sink.saved.iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, vec![50, 100]);

    let ck = checkpoint_from_bytes(&sink.saved[0].1, DType::F32).unwrap();
    let (session, vocab_back) = TrainingSession::from_checkpoint(ck).unwrap();
    assert_eq!(vocab_back, vocab);
    assert_eq!(session.step, 50);
    let resumed = run_training(&samples, &vocab, session, &c, &adv, &mut NoCheckpoints, &mut |_| Ok(())).unwrap();
    assert_eq!(resumed.history, full.history[50..]);
    assert_eq!(params_bits(&resumed.session.state), params_bits(&full.session.state));
}

#[test]
fn tiny_batch_overfits() {
    let (_, history) = run(Stage::Finetune, 300, &AdvConfig::disabled(), 4);
    let first = history[0].total;
    let last = history[290..].iter().map(|m| m.total).sum::<f64>() / 10.0;
    assert!(last <= 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn metrics_records_have_a_fixed_key_set() {
    let keys = |m: &StepMetrics| {
        let v = serde_json::to_value(m).unwrap();
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        (k, v)
    };
    let expected = ["adv", "gen", "grad_norm", "kl", "mlm", "rpp", "skipped", "stage", "step", "total"];
    let (_, pre) = run(Stage::Pretrain, 2, &AdvConfig::default(), 5);
    let (_, fine) = run(Stage::Finetune, 2, &AdvConfig::default(), 5);
    for (m, stage) in [(&pre[1], "pretrain"), (&fine[1], "finetune")] {
        let (k, v) = keys(m);
        assert_eq!(k, expected);
        assert_eq!(v["stage"], stage);
        assert_eq!(v["step"], 2);
        assert!(v["adv"].as_f64().unwrap() > 0.0);
    }
    assert!(pre[1].mlm.is_some() && pre[1].rpp.is_some());
    assert!(fine[1].mlm.is_none() && fine[1].rpp.is_none());
}

#[test]
fn full_batch_loss_trends_down_after_warmup() {
    let mut c = cfg(Stage::Finetune, 110);
    c.learning_rate = 3e-3;
    let samples = tiny_samples();
    let vocab = tiny_vocab(&samples);
    let mut state_cfg = common::tiny_config();
    state_cfg.dropout = 0.0;
    let session = TrainingSession::new(ModelState::new(state_cfg, 6, DType::F32).unwrap()).unwrap();
    let out = run_training(&samples, &vocab, session, &c, &AdvConfig::disabled(), &mut NoCheckpoints, &mut |_| Ok(()))
        .unwrap();
    let means: Vec<f64> = out.history[10..]
        .chunks(10)
        .map(|w| w.iter().map(|m| m.total).sum::<f64>() / w.len() as f64)
        .collect();
    for pair in means.windows(2) {
        assert!(pair[1] < pair[0], "window means {means:?}");
    }
}

#[test]
fn non_finite_parameters_skip_the_update() {
    let (batch, _) = tiny_finetune_batch();
    let state = tiny_state(7, DType::F32);
    let name = "lm_head.bias";
    let nan = Tensor::full(f32::NAN, state.param(name).dims(), state.device()).unwrap();
    state.set_param(name, &nan).unwrap();
    let mut session = TrainingSession::new(state).unwrap();
    let before = params_bits(&session.state);
    let m = train_step(&mut session, &batch, &cfg(Stage::Finetune, 10), &AdvConfig::default()).unwrap();
    assert_eq!((session.step, session.skipped, m.skipped), (1, 1, 1));
    assert_eq!(params_bits(&session.state), before);
    assert_eq!(session.optimizer.step_count(), 0);
}

fn clean_loss(state: &ModelState, bt: &BatchTensors, emb: &Tensor) -> f64 {
    let objective = Objective::Pretrain(Default::default());
    scalar(&forward_from_embeddings(state, emb, bt, objective, None).unwrap().total).unwrap()
}

#[test]
fn ascent_does_not_decrease_the_loss() {
    let (batch, _) = tiny_pretrain_batch(8);
    let state = tiny_state(8, DType::F64);
    let bt = BatchTensors::new(&batch, &state).unwrap();
    let emb = state.embed(&bt).unwrap();
    let base = clean_loss(&state, &bt, &emb);
    for modality in [Modality::Text, Modality::Object, Modality::Scene] {
        let eligible = bt.modality_mask(modality, DType::F64).unwrap();
        let adv = AdvConfig {
            epsilon: 0.5,
            alpha: 0.5,
            k_steps: 3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let objective = Objective::Pretrain(Default::default());
        let delta = perturb_embeddings(&emb, &eligible, &adv, &mut rng, |e| {
            Ok(forward_from_embeddings(&state, e, &bt, objective, None)?.total)
        })
        .unwrap();
        let attacked = clean_loss(&state, &bt, &(&emb + &delta).unwrap());
        assert!(attacked > base, "{modality:?}: {base} -> {attacked}");
    }
}

#[test]
fn vanishing_radius_reduces_to_the_clean_loss() {
    let (batch, _) = tiny_pretrain_batch(9);
    let c = cfg(Stage::Pretrain, 10);
    let adv = AdvConfig {
        epsilon: 1e-12,
        alpha: 1e-12,
        ..Default::default()
    };
    let mut state_cfg = common::tiny_config();
    state_cfg.dropout = 0.0;
    let mut session = TrainingSession::new(ModelState::new(state_cfg, 9, DType::F32).unwrap()).unwrap();
    let m = train_step(&mut session, &batch, &c, &adv).unwrap();
    let clean = m.gen + m.mlm.unwrap() + m.rpp.unwrap();
    assert!((m.adv - clean).abs() < 1e-5, "adv {} clean {clean}", m.adv);
    assert!(m.kl.abs() < 1e-6);
    assert!((m.total - 2.0 * clean).abs() < 1e-4);
}
