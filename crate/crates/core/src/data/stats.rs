use std::collections::HashSet;

use serde::Serialize;

use super::SceneSample;
use crate::text::{canonicalize, mentions_any, ngrams, SPATIAL_WORDS};
use crate::{Error, Result};

/// Longest scene-token n-gram an answer may match to count as "in OCR".
pub const MAX_OCR_NGRAM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_images: usize,
    pub frac_images_with_text: f64,
    pub n_questions: usize,
    pub frac_answer_in_ocr: f64,
    pub frac_spatial_words: f64,
}

impl DatasetStats {
    pub fn report(&self) -> String {
        format!(
            "images: {}\nimages_with_text: {:.1}%\nquestions: {}\nanswer_in_ocr: {:.1}%\nspatial_words: {:.1}%\n",
            self.n_images,
            100.0 * self.frac_images_with_text,
            self.n_questions,
            100.0 * self.frac_answer_in_ocr,
            100.0 * self.frac_spatial_words,
        )
    }
}

/// Scene-token strings and n-grams (n <= 4) in reading order, canonicalized.
pub fn ocr_strings(sample: &SceneSample) -> HashSet<String> {
    let texts = crate::postprocess::reading_order_texts(&sample.scene_tokens);
    ngrams(&texts, 1, MAX_OCR_NGRAM).into_iter().collect()
}

pub fn answer_in_ocr(sample: &SceneSample) -> bool {
    let Some(answers) = &sample.answers else {
        return false;
    };
    let ocr = ocr_strings(sample);
    answers.iter().any(|a| ocr.contains(&canonicalize(a)))
}

pub fn dataset_stats(samples: &[SceneSample]) -> Result<DatasetStats> {
    dataset_stats_with(samples, &SPATIAL_WORDS)
}

/// Same as [`dataset_stats`] with a caller-supplied spatial-word list.
pub fn dataset_stats_with<S: AsRef<str>>(
    samples: &[SceneSample],
    spatial_words: &[S],
) -> Result<DatasetStats> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_images = samples.len();
    let with_text = samples.iter().filter(|s| !s.scene_tokens.is_empty()).count();
    let questions: Vec<&SceneSample> = samples.iter().filter(|s| s.question.is_some()).collect();
    let n_questions = questions.len();
    let frac = |count: usize| {
        if n_questions == 0 {
            0.0
        } else {
            count as f64 / n_questions as f64
        }
    };
    let in_ocr = questions.iter().filter(|s| answer_in_ocr(s)).count();
    let spatial = questions
        .iter()
        .filter(|s| mentions_any(s.question.as_deref().unwrap_or(""), spatial_words))
        .count();
    Ok(DatasetStats {
        n_images,
        frac_images_with_text: with_text as f64 / n_images as f64,
        n_questions,
        frac_answer_in_ocr: frac(in_ocr),
        frac_spatial_words: frac(spatial),
    })
}
