use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::record::{make_record, Template, VqaRecord};
use super::scene::generate_scene;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<VqaRecord>,
    pub val: Vec<VqaRecord>,
    pub vocabulary: Vocabulary,
}

impl DatasetSplit {
    /// Builds the vocabulary from both splits.
    pub fn from_records(train: Vec<VqaRecord>, val: Vec<VqaRecord>) -> Self {
        let vocabulary = Vocabulary::from_tokens(train.iter().chain(&val).flat_map(VqaRecord::tokens));
        DatasetSplit { train, val, vocabulary }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        write_records(&dir.join(TRAIN_FILE), &self.train)?;
        write_records(&dir.join(VAL_FILE), &self.val)?;
        self.vocabulary.save(&dir.join(VOCAB_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let train = read_records(&dir.join(TRAIN_FILE))?;
        let val = read_records(&dir.join(VAL_FILE))?;
        let vocabulary = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        for r in train.iter().chain(&val) {
            r.validate()?;
            if let Some(t) = r.tokens().find(|t| !vocabulary.contains(t)) {
                return Err(Error::Validation(format!(
                    "record {} uses token {t:?} missing from {VOCAB_FILE}",
                    r.record_id
                )));
            }
        }
        Ok(DatasetSplit { train, val, vocabulary })
    }
}

/// Deterministic train/val split of synthetic records. Scene seeds are drawn
/// from one stream, so the two splits never share a scene.
pub fn build_dataset(n_train: usize, n_val: usize, master_seed: u64) -> Result<DatasetSplit> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidArgument("both splits need at least one record".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let mut used = BTreeSet::new();
    let mut make = |n: usize| -> Result<Vec<VqaRecord>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let scene_seed = rng.next_u64();
            if !used.insert(scene_seed) {
                continue;
            }
            let start = rng.random_range(0..Template::ALL.len());
            let scene = generate_scene(scene_seed);
            // Counting always applies, so some template succeeds.
            let record = (0..Template::ALL.len())
                .map(|k| Template::ALL[(start + k) % Template::ALL.len()])
                .find_map(|t| make_record(&scene, t, scene_seed).ok())
                .expect("counting template applies to every scene");
            out.push(record);
        }
        Ok(out)
    };
    let train = make(n_train)?;
    let val = make(n_val)?;
    Ok(DatasetSplit::from_records(train, val))
}

pub fn write_records(path: &Path, records: &[VqaRecord]) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_records(path: &Path) -> Result<Vec<VqaRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VqaRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::audit::audit_generated;
    use crate::synthdata::vocab::{BOS, EOS, PAD, SEP};

    #[test]
    fn deterministic_and_disjoint() {
        let a = build_dataset(200, 50, 7).unwrap();
        let b = build_dataset(200, 50, 7).unwrap();
        assert_eq!(a, b);
        let train_ids: BTreeSet<_> = a.train.iter().map(|r| &r.record_id).collect();
        assert!(a.val.iter().all(|r| !train_ids.contains(&r.record_id)));
        assert_eq!(a.vocabulary.id("<pad>"), Some(PAD));
        assert_eq!(a.vocabulary.id("<bos>"), Some(BOS));
        assert_eq!(a.vocabulary.id("<eos>"), Some(EOS));
        assert_eq!(a.vocabulary.id("<sep>"), Some(SEP));
    }

    #[test]
    fn all_templates_appear_and_audit() {
        let d = build_dataset(300, 100, 1).unwrap();
        for r in d.train.iter().chain(&d.val) {
            audit_generated(r).unwrap();
        }
        for t in 0..4 {
            assert!(d.train.iter().any(|r| r.record_id.ends_with(&format!("-t{t}"))));
        }
    }

    #[test]
    fn rejects_empty_splits() {
        assert!(build_dataset(0, 5, 1).is_err());
        assert!(build_dataset(5, 0, 1).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let d = build_dataset(20, 5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(DatasetSplit::load(dir.path()).unwrap(), d);
    }
}
