use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preference {
    #[serde(rename = "a")]
    ModelA,
    #[serde(rename = "b")]
    ModelB,
}

#[derive(Deserialize)]
struct Row {
    item_id: String,
    judge_id: String,
    preference: Preference,
}

/// Pairwise preferences keyed by `(item_id, judge_id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JudgeSheet {
    votes: BTreeMap<(String, String), Preference>,
}

impl JudgeSheet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a vote; a second vote for the same pair is a validation error.
    pub fn insert(&mut self, item: &str, judge: &str, p: Preference) -> Result<()> {
        let key = (item.to_string(), judge.to_string());
        if self.votes.contains_key(&key) {
            return Err(Error::Validation(format!(
                "duplicate vote for item {item} by judge {judge}"
            )));
        }
        self.votes.insert(key, p);
        Ok(())
    }

    /// Reads CSV with header `item_id,judge_id,preference`, preference `a` or `b`.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        if header.iter().collect::<Vec<_>>() != ["item_id", "judge_id", "preference"] {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header item_id,judge_id,preference, got {}",
                    header.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut sheet = JudgeSheet::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            sheet
                .insert(&row.item_id, &row.judge_id, row.preference)
                .map_err(|e| Error::Parse {
                    line,
                    message: e.to_string(),
                })?;
        }
        Ok(sheet)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::from_reader(f)
    }

    pub fn items(&self) -> BTreeSet<&str> {
        self.votes.keys().map(|(i, _)| i.as_str()).collect()
    }

    pub fn judges(&self) -> BTreeSet<&str> {
        self.votes.keys().map(|(_, j)| j.as_str()).collect()
    }

    pub fn get(&self, item: &str, judge: &str) -> Option<Preference> {
        self.votes.get(&(item.to_string(), judge.to_string())).copied()
    }
}

/// Percentages per judge (sorted by id) and for the majority vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub judges: Vec<String>,
    pub per_judge_a: Vec<f64>,
    pub per_judge_b: Vec<f64>,
    pub majority_a: f64,
    pub majority_b: f64,
    /// Items with equal votes for both models; only possible with an even
    /// number of judges.
    pub majority_tie: f64,
    pub n_items: usize,
}

impl JudgeReport {
    /// Table with one column per judge plus `Majority Voting`, and rows
    /// `model_a`, `model_b`, `tie`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for j in &self.judges {
            out.push(',');
            out.push_str(j);
        }
        out.push_str(",Majority Voting\n");
        let rows = [
            ("model_a", &self.per_judge_a, self.majority_a),
            ("model_b", &self.per_judge_b, self.majority_b),
        ];
        for (name, per, maj) in rows {
            out.push_str(name);
            for v in per.iter() {
                out.push_str(&format!(",{}", fmt_pct(*v)));
            }
            out.push_str(&format!(",{}\n", fmt_pct(maj)));
        }
        out.push_str("tie");
        for _ in &self.judges {
            out.push_str(",0");
        }
        out.push_str(&format!(",{}\n", fmt_pct(self.majority_tie)));
        out
    }
}

fn fmt_pct(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    format!("{r}")
}

/// Aggregates a complete sheet; missing `(item, judge)` pairs are listed in
/// the validation error.
pub fn judge_aggregate(sheet: &JudgeSheet) -> Result<JudgeReport> {
    let items = sheet.items();
    let judges = sheet.judges();
    if judges.is_empty() {
        return Err(Error::Validation("judge sheet has no votes".into()));
    }
    let missing: Vec<String> = items
        .iter()
        .flat_map(|i| judges.iter().map(move |j| (*i, *j)))
        .filter(|(i, j)| sheet.get(i, j).is_none())
        .map(|(i, j)| format!("({i}, {j})"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "incomplete judge sheet, missing {}",
            missing.join(", ")
        )));
    }
    let n = items.len() as f64;
    let mut per_judge_b = Vec::new();
    for j in &judges {
        let b = items
            .iter()
            .filter(|i| sheet.get(i, j) == Some(Preference::ModelB))
            .count();
        per_judge_b.push(100.0 * b as f64 / n);
    }
    let (mut maj_a, mut maj_b, mut tie) = (0usize, 0usize, 0usize);
    for i in &items {
        let b = judges
            .iter()
            .filter(|j| sheet.get(i, j) == Some(Preference::ModelB))
            .count();
        let a = judges.len() - b;
        match b.cmp(&a) {
            std::cmp::Ordering::Greater => maj_b += 1,
            std::cmp::Ordering::Less => maj_a += 1,
            std::cmp::Ordering::Equal => tie += 1,
        }
    }
    Ok(JudgeReport {
        judges: judges.iter().map(|s| s.to_string()).collect(),
        per_judge_a: per_judge_b.iter().map(|b| 100.0 - b).collect(),
        per_judge_b,
        majority_a: 100.0 * maj_a as f64 / n,
        majority_b: 100.0 * maj_b as f64 / n,
        majority_tie: 100.0 * tie as f64 / n,
        n_items: items.len(),
    })
}
