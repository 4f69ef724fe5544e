use serde::{Deserialize, Serialize};

use super::{bleu, mean_rouge_l, mean_rouge_n, sentence_cosine, vqa_accuracy};
use crate::encoder::{predict_answer, EncoderInput, EncoderParams};
use crate::error::{Error, Result};
use crate::rationale_lm::{LmParams, Strategy};
use crate::synthdata::{Vocabulary, VqaRecord, SPECIAL_TOKENS};

const EVAL_BATCH: usize = 64;

/// Token vectors for sentence embeddings. Tokens outside the vocabulary map
/// to `unk`, the mean of all rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vocabulary,
    rows: Vec<Vec<f64>>,
    unk: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(vocab: Vocabulary, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != vocab.len() || rows.is_empty() {
            return Err(Error::Contract(format!(
                "{} embedding rows for a vocabulary of {}",
                rows.len(),
                vocab.len()
            )));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Contract("ragged embedding rows".into()));
        }
        let mut unk = vec![0.0; d];
        for r in &rows {
            for (u, x) in unk.iter_mut().zip(r) {
                *u += x / rows.len() as f64;
            }
        }
        Ok(EmbeddingTable { vocab, rows, unk })
    }

    /// Uses the LM's token table.
    pub fn from_lm(lm: &LmParams, vocab: &Vocabulary) -> Result<Self> {
        let t = lm.params.get(lm.token_table_index());
        let d = t.shape()[1];
        Self::new(vocab.clone(), t.data().chunks(d).map(<[f64]>::to_vec).collect())
    }

    pub fn dim(&self) -> usize {
        self.unk.len()
    }

    /// Mean of the token vectors, skipping special tokens; zero if none remain.
    pub fn sentence_vector<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        let mut n = 0usize;
        for t in tokens.iter().map(AsRef::as_ref).filter(|t| !SPECIAL_TOKENS.contains(t)) {
            let row = self.vocab.id(t).map_or(&self.unk, |i| &self.rows[i]);
            v.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            n += 1;
        }
        if n > 0 {
            v.iter_mut().for_each(|a| *a /= n as f64);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cosine: f64,
    pub vqa_accuracy: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn check(&self) -> Result<()> {
        let pct = [self.bleu1, self.bleu4, self.rouge1, self.rouge_l, self.vqa_accuracy];
        if pct.iter().any(|v| !(0.0..=100.0 + 1e-9).contains(v)) || !(-1.0..=1.0).contains(&self.cosine) {
            return Err(Error::State(format!("metric out of range: {self:?}")));
        }
        Ok(())
    }

    /// `(row label, value)` pairs in report order.
    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("BLEU-1", self.bleu1),
            ("BLEU-4", self.bleu4),
            ("ROUGE-1", self.rouge1),
            ("ROUGE-L", self.rouge_l),
            ("Cosine Similarity", self.cosine),
            ("VQA Accuracy", self.vqa_accuracy),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutput {
    pub record_id: String,
    pub question: String,
    pub gold_answer: String,
    pub predicted_answer: String,
    pub gold_rationale: String,
    pub generated_rationale: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<RecordOutput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RationaleSource {
    /// Greedy decoding from the LM.
    #[default]
    Generated,
    /// Echo the gold rationale, giving an upper-bound report.
    Gold,
}

/// Answers every record, decodes a rationale from its soft answer embedding
/// and scores the rationales against the gold ones.
pub fn evaluate_model(
    encoder: &EncoderParams,
    lm: &LmParams,
    vocab: &Vocabulary,
    records: &[VqaRecord],
    source: RationaleSource,
) -> Result<Evaluation> {
    if encoder.config.vocab_size != vocab.len() || lm.config.vocab_size != vocab.len() {
        return Err(Error::Validation(format!(
            "vocabulary of {} tokens does not match checkpoints (encoder {}, lm {})",
            vocab.len(),
            encoder.config.vocab_size,
            lm.config.vocab_size
        )));
    }
    let mut predictions = Vec::with_capacity(records.len());
    let mut generated: Vec<Vec<String>> = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let inputs = chunk
            .iter()
            .map(|r| EncoderInput::from_record(vocab, r))
            .collect::<Result<Vec<_>>>()?;
        let outs = encoder.evaluate(&inputs)?;
        predictions.extend(outs.iter().map(|o| predict_answer(&o.s)));
        match source {
            RationaleSource::Gold => generated.extend(chunk.iter().map(|r| r.gold_rationale_tokens.clone())),
            RationaleSource::Generated => {
                let e_ps: Vec<Vec<f64>> = outs.into_iter().map(|o| o.e_p).collect();
                let seqs = lm.generate_batch(&e_ps, lm.config.max_rationale_len(), Strategy::Greedy)?;
                for (s, r) in seqs.iter().zip(chunk) {
                    generated.push(vocab.decode(&s.tokens).map_err(|e| e.in_record(&r.record_id))?);
                }
            }
        }
    }
    let gold: Vec<usize> = records.iter().map(|r| r.gold_answer).collect();
    let refs: Vec<Vec<String>> = records.iter().map(|r| r.gold_rationale_tokens.clone()).collect();
    let table = EmbeddingTable::from_lm(lm, vocab)?;
    let report = MetricsReport {
        bleu1: bleu(&generated, &refs, 1)?,
        bleu4: bleu(&generated, &refs, 4)?,
        rouge1: mean_rouge_n(&generated, &refs, 1)?,
        rouge_l: mean_rouge_l(&generated, &refs)?,
        cosine: sentence_cosine(&generated, &refs, &table)?,
        vqa_accuracy: vqa_accuracy(&predictions, &gold)?,
        n_samples: records.len(),
    };
    report.check()?;
    let outputs = records
        .iter()
        .zip(&predictions)
        .zip(&generated)
        .map(|((r, &p), g)| RecordOutput {
            record_id: r.record_id.clone(),
            question: r.question_tokens.join(" "),
            gold_answer: r.options[r.gold_answer].join(" "),
            predicted_answer: r.options[p].join(" "),
            gold_rationale: r.gold_rationale_tokens.join(" "),
            generated_rationale: g.join(" "),
        })
        .collect();
    Ok(Evaluation {
        report,
        records: outputs,
    })
}
