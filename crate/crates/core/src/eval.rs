//! Accuracy metric and end-to-end evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SceneSample, NUM_ANSWERS};
use crate::input::{build_finetune_sample, build_pretrain_sample, collate, Vocab};
use crate::model::{greedy_decode, rpp_logits, BatchTensors, ModelState};
use crate::postprocess::{correct_answer, CandidatePool};
use crate::text::canonicalize;
use crate::{Error, Result};

/// Leave-one-out soft accuracy over ten human answers: the mean over the ten
/// 9-answer subsets of `min(matches / 3, 1)`.
pub fn vqa_accuracy<S: AsRef<str>>(prediction: &str, human_answers: &[S]) -> Result<f64> {
    if human_answers.len() != NUM_ANSWERS {
        return Err(Error::Arity {
            expected: NUM_ANSWERS,
            got: human_answers.len(),
        });
    }
    let pred = canonicalize(prediction);
    let hits: Vec<bool> = human_answers
        .iter()
        .map(|a| canonicalize(a.as_ref()) == pred)
        .collect();
    let total_hits = hits.iter().filter(|&&h| h).count();
    // Sum of min(matches, 3) over subsets, divided once to keep 0.3 exact.
    let clipped: usize = hits
        .iter()
        .map(|&left_out| (total_hits - usize::from(left_out)).min(3))
        .sum();
    Ok(clipped as f64 / (3 * NUM_ANSWERS) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub question: String,
    pub predicted: String,
    pub corrected: String,
    pub accuracy: f64,
    pub accuracy_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub acc_raw: f64,
    pub acc_corrected: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub postprocess: bool,
    pub threshold: u8,
    pub max_ngram: usize,
    pub max_answer_len: usize,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            postprocess: true,
            threshold: crate::postprocess::DEFAULT_THRESHOLD,
            max_ngram: crate::postprocess::DEFAULT_MAX_NGRAM,
            max_answer_len: 8,
            batch_size: 32,
        }
    }
}

fn stable_mean(records: &[EvalRecord], pick: impl Fn(&EvalRecord) -> f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].image_id.cmp(&records[b].image_id).then(a.cmp(&b)));
    order.iter().map(|&i| pick(&records[i])).sum::<f64>() / records.len() as f64
}

/// Scores given predictions, optionally correcting each against its sample's
/// OCR pool first.
pub fn evaluate_predictions(
    samples: &[SceneSample],
    predictions: &[String],
    opts: &EvalOptions,
) -> Result<(EvalSummary, Vec<EvalRecord>)> {
    if samples.len() != predictions.len() {
        return Err(Error::Schema(format!(
            "{} samples but {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    let mut records = Vec::with_capacity(samples.len());
    for (s, pred) in samples.iter().zip(predictions) {
        let (question, answers) = match (&s.question, &s.answers) {
            (Some(q), Some(a)) => (q, a),
            _ => {
                return Err(Error::Schema(format!(
                    "{}: evaluation needs question and answers",
                    s.image_id
                )))
            }
        };
        let corrected = if opts.postprocess {
            let pool = CandidatePool::from_regions(&s.scene_tokens, opts.max_ngram);
            correct_answer(pred, &pool, opts.threshold).corrected
        } else {
            pred.clone()
        };
        records.push(EvalRecord {
            image_id: s.image_id.clone(),
            question: question.clone(),
            predicted: pred.clone(),
            accuracy_raw: vqa_accuracy(pred, answers)?,
            accuracy: vqa_accuracy(&corrected, answers)?,
            corrected,
        });
    }
    let summary = EvalSummary {
        n: records.len(),
        acc_raw: stable_mean(&records, |r| r.accuracy_raw),
        acc_corrected: stable_mean(&records, |r| r.accuracy),
    };
    Ok((summary, records))
}

/// Greedy answers for fine-tuning style inputs.
pub fn predict_answers(
    state: &ModelState,
    vocab: &Vocab,
    samples: &[SceneSample],
    max_len: usize,
    batch_size: usize,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let rows = chunk
            .iter()
            .map(|s| build_finetune_sample(s, vocab))
            .collect::<Result<Vec<_>>>()?;
        let batch = collate(&rows)?;
        let bt = BatchTensors::new(&batch, state)?;
        let enc = state.encode(&bt, None)?;
        for ids in greedy_decode(state, &enc, &bt, max_len)? {
            out.push(vocab.decode(&ids));
        }
    }
    Ok(out)
}

/// Decodes every sample and reports raw and corrected accuracy.
pub fn evaluate(
    samples: &[SceneSample],
    state: &ModelState,
    vocab: &Vocab,
    opts: &EvalOptions,
) -> Result<(EvalSummary, Vec<EvalRecord>)> {
    let predictions = predict_answers(state, vocab, samples, opts.max_answer_len, opts.batch_size)?;
    evaluate_predictions(samples, &predictions, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainProbe {
    /// Fraction of (sample, scene token) pairs whose text is regenerated exactly.
    pub reconstruction: f64,
    /// Fraction of (scene token, object) pairs whose relation is predicted.
    pub rpp_accuracy: f64,
    pub n_targets: usize,
    pub n_pairs: usize,
}

/// Measures scene-text reconstruction and relation accuracy on clean
/// (uncorrupted) pre-training inputs, one row per scene token.
pub fn probe_pretraining(
    state: &ModelState,
    vocab: &Vocab,
    samples: &[SceneSample],
    batch_size: usize,
) -> Result<PretrainProbe> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in samples.iter().filter(|s| !s.objects.is_empty()) {
        for t in 0..s.scene_tokens.len() {
            rows.push(build_pretrain_sample(s, t, vocab, &mut rng, None)?);
        }
    }
    let (mut exact, mut pairs_ok, mut pairs) = (0usize, 0usize, 0usize);
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = collate(chunk)?;
        let bt = BatchTensors::new(&batch, state)?;
        let enc = state.encode(&bt, None)?;
        let max_len = batch.dec_len().max(1);
        for (row, ids) in chunk.iter().zip(greedy_decode(state, &enc, &bt, max_len)?) {
            let mut with_eos = ids.clone();
            with_eos.push(crate::input::EOS_ID);
            if with_eos == row.decoder_target_ids {
                exact += 1;
            }
        }
        if batch.n_obj() > 0 && batch.n_scene() > 0 {
            let logits = rpp_logits(state, &enc, &bt)?;
            let pred = logits.argmax(candle_core::D::Minus1)?.to_vec3::<u32>()?;
            for (i, plane) in pred.iter().enumerate() {
                for (s, line) in plane.iter().enumerate() {
                    for (o, &p) in line.iter().enumerate() {
                        let label = batch.rpp_labels[[i, s, o]];
                        if label >= 0 {
                            pairs += 1;
                            pairs_ok += usize::from(p as i64 == label);
                        }
                    }
                }
            }
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(PretrainProbe {
        reconstruction: frac(exact, rows.len()),
        rpp_accuracy: frac(pairs_ok, pairs),
        n_targets: rows.len(),
        n_pairs: pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answers(matching: usize) -> Vec<String> {
        (0..10)
            .map(|i| if i < matching { "yes".into() } else { format!("no{i}") })
            .collect()
    }

    #[test]
    fn saturation_and_zero() {
        assert_eq!(vqa_accuracy("yes", &answers(10)).unwrap(), 1.0);
        assert_eq!(vqa_accuracy("yes", &answers(0)).unwrap(), 0.0);
    }

    #[test]
    fn single_match_is_point_three() {
        assert_eq!(vqa_accuracy("yes", &answers(1)).unwrap(), 0.3);
        assert_eq!(vqa_accuracy(" YES ", &answers(1)).unwrap(), 0.3);
    }

    #[test]
    fn arity_checked() {
        assert!(matches!(
            vqa_accuracy("a", &["a"; 9]),
            Err(Error::Arity { expected: 10, got: 9 })
        ));
    }

    #[test]
    fn no_postprocess_keeps_predictions() {
        let data = crate::data::generate_synthetic_dataset(
            2,
            10,
            &crate::data::GeneratorConfig::default(),
        )
        .unwrap();
        let preds: Vec<String> = data.iter().map(|_| "stp".to_string()).collect();
        let opts = EvalOptions {
            postprocess: false,
            ..Default::default()
        };
        let (summary, records) = evaluate_predictions(&data, &preds, &opts).unwrap();
        assert!(records.iter().all(|r| r.corrected == r.predicted));
        assert_eq!(summary.acc_raw, summary.acc_corrected);
    }
}
