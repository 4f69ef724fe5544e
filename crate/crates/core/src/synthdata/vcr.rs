//! Ingestion of VCR-style line-delimited JSON.
//!
//! Each line carries `question`, `answer_choices`, `answer_label`,
//! `rationale_choices`, `rationale_label` and `annot_id`. Token lists mix
//! plain strings with entity references given as integer lists; an optional
//! `objects` list names the detection class of each referenced index.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::record::{FeatureOrigin, VqaRecord, NUM_OPTIONS};
use super::scene::FEATURE_DIM;
use crate::error::{Error, Result};

/// Upper bound on regions kept per record.
pub const MAX_REGIONS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureSource {
    /// Directory holding `<annot_id>.json`, a list of 13-d region vectors.
    Sidecar(PathBuf),
    /// Pseudo-random features seeded by a hash of the annotation id.
    Hashed,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Value, name: &str, line: usize) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| parse_err(line, format!("missing field `{name}`")))
}

fn entity_tag(index: u64, objects: Option<&[String]>) -> String {
    let class = objects
        .and_then(|o| o.get(index as usize))
        .map(String::as_str)
        .unwrap_or("person");
    let kind = if class == "person" { "person" } else { "object" };
    format!("[{kind}{}]", index + 1)
}

/// Rewrites bracketed tags such as `[Person2]` to lowercase canonical form.
fn normalize_word(w: &str) -> String {
    let lower = w.to_ascii_lowercase();
    if let Some(inner) = lower.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
        for kind in ["person", "object"] {
            if let Some(num) = inner.strip_prefix(kind) {
                if !num.is_empty() && num.bytes().all(|b| b.is_ascii_digit()) {
                    let n: u64 = num.parse().unwrap_or(0);
                    return format!("[{kind}{n}]");
                }
            }
        }
    }
    w.to_string()
}

fn tokens(v: &Value, name: &str, line: usize, objects: Option<&[String]>, max_ref: &mut u64) -> Result<Vec<String>> {
    let items = v
        .as_array()
        .ok_or_else(|| parse_err(line, format!("field `{name}` is not a list")))?;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        match item {
            Value::String(s) => out.push(normalize_word(s)),
            Value::Array(refs) => {
                for (k, r) in refs.iter().enumerate() {
                    let idx = r
                        .as_u64()
                        .ok_or_else(|| parse_err(line, format!("field `{name}` has a non-integer entity reference")))?;
                    *max_ref = (*max_ref).max(idx + 1);
                    if k > 0 {
                        out.push("and".to_string());
                    }
                    out.push(entity_tag(idx, objects));
                }
            }
            _ => return Err(parse_err(line, format!("field `{name}` has a non-token entry"))),
        }
    }
    Ok(out)
}

fn choices(
    obj: &Value,
    name: &str,
    line: usize,
    objects: Option<&[String]>,
    max_ref: &mut u64,
) -> Result<Vec<Vec<String>>> {
    let v = field(obj, name, line)?;
    let items = v
        .as_array()
        .ok_or_else(|| parse_err(line, format!("field `{name}` is not a list")))?;
    if items.len() != NUM_OPTIONS {
        return Err(Error::Validation(format!(
            "line {line}: `{name}` has {} entries, expected {NUM_OPTIONS}",
            items.len()
        )));
    }
    items.iter().map(|c| tokens(c, name, line, objects, max_ref)).collect()
}

fn label(obj: &Value, name: &str, line: usize) -> Result<usize> {
    let v = field(obj, name, line)?;
    let n = v
        .as_i64()
        .ok_or_else(|| parse_err(line, format!("field `{name}` is not an integer")))?;
    if !(0..NUM_OPTIONS as i64).contains(&n) {
        return Err(Error::Validation(format!("line {line}: `{name}` = {n} outside 0..3")));
    }
    Ok(n as usize)
}

/// FNV-1a, used only to seed hashed features.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn hashed_features(annot_id: &str, n_regions: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(annot_id));
    (0..n_regions.clamp(1, MAX_REGIONS))
        .map(|_| (0..FEATURE_DIM).map(|_| rng.random::<f64>()).collect())
        .collect()
}

fn sidecar_features(dir: &Path, annot_id: &str) -> Result<Vec<Vec<f64>>> {
    let path = dir.join(format!("{annot_id}.json"));
    let s = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let feats: Vec<Vec<f64>> = serde_json::from_str(&s).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if feats.is_empty() || feats.len() > MAX_REGIONS || feats.iter().any(|f| f.len() != FEATURE_DIM) {
        return Err(Error::Validation(format!(
            "{}: expected 1..={MAX_REGIONS} regions of dimension {FEATURE_DIM}",
            path.display()
        )));
    }
    Ok(feats)
}

fn parse_line(text: &str, line: usize, source: &FeatureSource) -> Result<VqaRecord> {
    let obj: Value = serde_json::from_str(text).map_err(|e| parse_err(line, e.to_string()))?;
    if !obj.is_object() {
        return Err(parse_err(line, "not a JSON object"));
    }
    let annot_id = match field(&obj, "annot_id", line)? {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => return Err(parse_err(line, "field `annot_id` is not a string")),
    };
    let objects: Option<Vec<String>> = match obj.get("objects") {
        None => None,
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|_| parse_err(line, "field `objects` is not a list of strings"))?,
        ),
    };
    let objects = objects.as_deref();
    let mut max_ref = 0u64;
    let question = tokens(field(&obj, "question", line)?, "question", line, objects, &mut max_ref)?;
    let options = choices(&obj, "answer_choices", line, objects, &mut max_ref)?;
    let answer = label(&obj, "answer_label", line)?;
    let rationales = choices(&obj, "rationale_choices", line, objects, &mut max_ref)?;
    let rationale = label(&obj, "rationale_label", line)?;

    let (region_features, origin) = match source {
        FeatureSource::Sidecar(dir) => (sidecar_features(dir, &annot_id)?, FeatureOrigin::Sidecar),
        FeatureSource::Hashed => {
            let n = objects.map_or(0, <[String]>::len).max(max_ref as usize);
            (hashed_features(&annot_id, n), FeatureOrigin::Hashed)
        }
    };
    Ok(VqaRecord {
        record_id: annot_id,
        region_features,
        question_tokens: question,
        options,
        gold_answer: answer,
        gold_rationale_tokens: rationales[rationale].clone(),
        feature_origin: Some(origin),
    })
}

pub fn load_vcr_records(path: &Path, source: &FeatureSource) -> Result<Vec<VqaRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1, source))
        .collect()
}
