//! Dataset schema, validation and JSON Lines IO.
//!
//! A dataset is a JSONL file with one [`SceneSample`] per line plus a sibling
//! manifest (`<stem>.manifest.json`) carrying [`DatasetManifest`].

mod stats;
mod synth;

pub use stats::{dataset_stats, DatasetStats};
pub use synth::{generate_synthetic_dataset, GeneratorConfig};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::text::canonicalize;
use crate::{Error, Result};

/// Number of human answers per question.
pub const NUM_ANSWERS: usize = 10;

/// Axis-aligned box in normalized image coordinates, y pointing down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(Error::Geometry(format!(
                "box {coords:?} has coordinates outside [0,1]"
            )));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::Geometry(format!("box {coords:?} is degenerate")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_slice(coords: &[f64]) -> Result<Self> {
        match coords {
            [x1, y1, x2, y2] => Self::new(*x1, *y1, *x2, *y2),
            _ => Err(Error::Schema(format!(
                "box must have 4 coordinates, got {}",
                coords.len()
            ))),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Inclusive-edge containment of `other` in `self`.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

/// An object or scene-text region: its text, box and visual feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub text: String,
    pub bbox: BoundingBox,
    pub feature: Vec<f32>,
}

/// One image's full annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image_id: String,
    pub image_text: Option<String>,
    pub objects: Vec<Region>,
    pub scene_tokens: Vec<Region>,
    pub question: Option<String>,
    pub answers: Option<Vec<String>>,
}

impl SceneSample {
    /// Feature dimension shared by all regions, `None` when there are none.
    pub fn d_feat(&self) -> Option<usize> {
        self.objects
            .iter()
            .chain(&self.scene_tokens)
            .map(|r| r.feature.len())
            .next()
    }

    pub fn to_record(&self) -> RawSample {
        let object = |r: &Region| RawObject {
            label: r.text.clone(),
            bbox: r.bbox.to_array().to_vec(),
            feature: r.feature.clone(),
        };
        let token = |r: &Region| RawSceneToken {
            text: r.text.clone(),
            bbox: r.bbox.to_array().to_vec(),
            feature: r.feature.clone(),
        };
        RawSample {
            image_id: self.image_id.clone(),
            image_text: self.image_text.clone(),
            objects: self.objects.iter().map(object).collect(),
            scene_tokens: self.scene_tokens.iter().map(token).collect(),
            question: self.question.clone(),
            answers: self.answers.clone(),
        }
    }
}

/// Wire format of one JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub image_id: String,
    #[serde(default)]
    pub image_text: Option<String>,
    pub objects: Vec<RawObject>,
    pub scene_tokens: Vec<RawSceneToken>,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub answers: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawObject {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: Vec<f64>,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSceneToken {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: Vec<f64>,
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Finetune,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_samples: usize,
    pub d_feat: usize,
    pub vocab_path: String,
    pub split: Split,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Schema("manifest n_samples must be >= 1".into()));
        }
        if self.d_feat == 0 {
            return Err(Error::Schema("manifest d_feat must be >= 1".into()));
        }
        Ok(())
    }

    /// `data/train.jsonl` -> `data/train.manifest.json`
    pub fn path_for(dataset: &Path) -> PathBuf {
        dataset.with_extension("manifest.json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }
}

fn canonical_nonempty(text: &str, what: &str) -> Result<String> {
    let c = canonicalize(text);
    if c.is_empty() {
        return Err(Error::Schema(format!("{what} text is empty")));
    }
    Ok(c)
}

fn check_feature(feature: &[f32], d_feat: &mut Option<usize>) -> Result<()> {
    match *d_feat {
        Some(expected) if expected != feature.len() => {
            return Err(Error::Dimension {
                expected,
                got: feature.len(),
            })
        }
        Some(_) => {}
        None => {
            if feature.is_empty() {
                return Err(Error::Dimension {
                    expected: 1,
                    got: 0,
                });
            }
            *d_feat = Some(feature.len());
        }
    }
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::Schema("feature contains non-finite values".into()));
    }
    Ok(())
}

/// Parses a JSON value into a record and validates it.
pub fn validate_value(value: serde_json::Value, d_feat: Option<usize>) -> Result<SceneSample> {
    let raw: RawSample =
        serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    validate_sample(raw, d_feat)
}

/// Checks every invariant of a record and canonicalizes its text fields.
///
/// `d_feat` is the dataset-declared feature length; when `None` the first
/// region fixes it for the rest of the sample.
pub fn validate_sample(raw: RawSample, d_feat: Option<usize>) -> Result<SceneSample> {
    let mut d_feat = d_feat;
    if raw.image_id.trim().is_empty() {
        return Err(Error::Schema("image_id is empty".into()));
    }
    let mut objects = Vec::with_capacity(raw.objects.len());
    for o in raw.objects {
        let bbox = BoundingBox::from_slice(&o.bbox)?;
        check_feature(&o.feature, &mut d_feat)?;
        objects.push(Region {
            text: canonical_nonempty(&o.label, "object label")?,
            bbox,
            feature: o.feature,
        });
    }
    let mut scene_tokens = Vec::with_capacity(raw.scene_tokens.len());
    for t in raw.scene_tokens {
        let bbox = BoundingBox::from_slice(&t.bbox)?;
        check_feature(&t.feature, &mut d_feat)?;
        scene_tokens.push(Region {
            text: canonical_nonempty(&t.text, "scene token")?,
            bbox,
            feature: t.feature,
        });
    }
    let answers = match raw.answers {
        Some(a) if a.len() != NUM_ANSWERS => {
            return Err(Error::Schema(format!(
                "answers must have exactly {NUM_ANSWERS} entries, got {}",
                a.len()
            )))
        }
        Some(a) => Some(a.iter().map(|s| canonicalize(s)).collect()),
        None => None,
    };
    Ok(SceneSample {
        image_id: raw.image_id,
        image_text: raw
            .image_text
            .map(|t| canonicalize(&t))
            .filter(|t| !t.is_empty()),
        objects,
        scene_tokens,
        question: raw.question.map(|q| canonicalize(&q)),
        answers,
    })
}

/// Reads and validates a JSONL dataset. Blank lines are skipped.
pub fn read_jsonl(path: &Path, d_feat: Option<usize>) -> Result<Vec<SceneSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut d_feat = d_feat;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("line {}: {e}", lineno + 1)))?;
        let sample = validate_sample(raw, d_feat).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("line {}: {m}", lineno + 1)),
            Error::Geometry(m) => Error::Geometry(format!("line {}: {m}", lineno + 1)),
            other => other,
        })?;
        if d_feat.is_none() {
            d_feat = sample.d_feat();
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[SceneSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, &s.to_record())?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn region_json(text_key: &str, text: &str, bbox: [f64; 4], d: usize) -> serde_json::Value {
        json!({ text_key: text, "box": bbox, "feature": vec![0.5f32; d] })
    }

    fn record(n_obj: usize, n_tok: usize, n_ans: usize) -> serde_json::Value {
        let objects: Vec<_> = (0..n_obj)
            .map(|i| region_json("label", &format!("Obj {i}"), [0.0, 0.0, 0.5, 0.5], 4))
            .collect();
        let tokens: Vec<_> = (0..n_tok)
            .map(|i| region_json("text", &format!("tok{i}"), [0.5, 0.5, 0.6, 0.6], 4))
            .collect();
        json!({
            "image_id": "img-1",
            "image_text": null,
            "objects": objects,
            "scene_tokens": tokens,
            "question": "What  is WRITTEN",
            "answers": vec!["stop"; n_ans],
        })
    }

    #[test]
    fn zero_width_box_is_geometry_error() {
        let mut r = record(1, 1, 10);
        r["objects"][0]["box"] = json!([0.1, 0.1, 0.1, 0.5]);
        assert!(matches!(validate_value(r, None), Err(Error::Geometry(_))));
    }

    #[test]
    fn well_formed_record_passes_through() {
        let s = validate_value(record(3, 5, 10), None).unwrap();
        assert_eq!(s.objects.len(), 3);
        assert_eq!(s.scene_tokens.len(), 5);
        assert_eq!(s.objects[0].text, "obj 0");
        assert_eq!(s.question.as_deref(), Some("what is written"));
        assert_eq!(s.d_feat(), Some(4));
    }

    #[test]
    fn nine_answers_is_schema_error() {
        assert!(matches!(
            validate_value(record(1, 1, 9), None),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn missing_field_is_schema_error() {
        let mut r = record(1, 1, 10);
        r.as_object_mut().unwrap().remove("scene_tokens");
        assert!(matches!(validate_value(r, None), Err(Error::Schema(_))));
    }

    #[test]
    fn feature_length_mismatch_is_dimension_error() {
        let mut r = record(2, 1, 10);
        r["objects"][1]["feature"] = json!([1.0, 2.0]);
        assert!(matches!(
            validate_value(r.clone(), None),
            Err(Error::Dimension { expected: 4, got: 2 })
        ));
        assert!(matches!(
            validate_value(record(1, 1, 10), Some(8)),
            Err(Error::Dimension { expected: 8, got: 4 })
        ));
    }

    #[test]
    fn blank_label_is_schema_error() {
        let mut r = record(1, 1, 10);
        r["objects"][0]["label"] = json!("   ");
        assert!(matches!(validate_value(r, None), Err(Error::Schema(_))));
    }

    #[test]
    fn box_arity_is_schema_error() {
        let mut r = record(1, 1, 10);
        r["scene_tokens"][0]["box"] = json!([0.1, 0.1, 0.2]);
        assert!(matches!(validate_value(r, None), Err(Error::Schema(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let s = validate_value(record(2, 3, 10), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &[s.clone(), s.clone()]).unwrap();
        let back = read_jsonl(&path, None).unwrap();
        assert_eq!(back, vec![s.clone(), s]);
    }

    #[test]
    fn manifest_path_is_sibling() {
        assert_eq!(
            DatasetManifest::path_for(Path::new("x/train.jsonl")),
            PathBuf::from("x/train.manifest.json")
        );
    }
}
