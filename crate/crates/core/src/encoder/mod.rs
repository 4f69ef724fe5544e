//! Two-stream answer encoder.
//!
//! Each option is scored as the sequence `[BOS] question [SEP] option`. The
//! text stream and the region stream run separate self-attention stacks, then
//! one cross-attention layer lets every text position read its record's
//! regions. The first position, normalized and projected, is the option
//! embedding. A linear head turns embeddings into logits, a softmax over the
//! four options gives scores, and the score-weighted sum of the embeddings is
//! the soft predicted-answer embedding.

use std::ops::Range;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::layers::{self, AttnParams, BlockParams, FfnParams};
use crate::numerics::{softmax, AttnBlock, AttnLayout, Graph, ParamSet, Var};
use crate::synthdata::{Vocabulary, VqaRecord, BOS, FEATURE_DIM, MAX_REGIONS, NUM_OPTIONS, SEP};

pub const PREFIX: &str = "encoder.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Longest `[BOS] question [SEP] option` sequence accepted.
    pub max_text_len: usize,
    /// Gaussian init scale. Below about 0.05 the small desk models sit at
    /// chance accuracy for many epochs.
    pub init_std: f64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: 128,
            max_text_len: 32,
            init_std: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.heads == 0 || self.ffn_hidden == 0 || self.max_text_len < 3
        {
            return Err(Error::Config(format!("degenerate encoder config {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide d={}",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    tok: usize,
    pos: usize,
    region_w: usize,
    region_b: usize,
    /// Row 0 is the region-stream sink token, row j is region slot j-1.
    slot: usize,
    fusion_kv_g: usize,
    fusion_kv_b: usize,
    fusion: AttnParams,
    fusion_ffn: FfnParams,
    pool_ln_g: usize,
    pool_ln_b: usize,
    pool_w: usize,
    pool_b: usize,
    score_w: usize,
}

/// Encoder weights. All parameter names start with `encoder.`.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub params: ParamSet,
    layout: Layout,
    text_blocks: Vec<BlockParams>,
    region_blocks: Vec<BlockParams>,
}

/// One record as ids and features.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub question: Vec<usize>,
    pub options: Vec<Vec<usize>>,
    pub regions: Vec<Vec<f64>>,
}

impl EncoderInput {
    pub fn new(vocab: &Vocabulary, question: &[String], regions: &[Vec<f64>], options: &[Vec<String>]) -> Result<Self> {
        if options.len() != NUM_OPTIONS {
            return contract(format!("expected {NUM_OPTIONS} options, got {}", options.len()));
        }
        Ok(EncoderInput {
            question: vocab.encode(question)?,
            options: options.iter().map(|o| vocab.encode(o)).collect::<Result<_>>()?,
            regions: regions.to_vec(),
        })
    }

    pub fn from_record(vocab: &Vocabulary, r: &VqaRecord) -> Result<Self> {
        Self::new(vocab, &r.question_tokens, &r.region_features, &r.options).map_err(|e| e.in_record(&r.record_id))
    }
}

/// Graph handles for one batched forward pass over `B` records.
#[derive(Debug, Clone, Copy)]
pub struct EncodedBatch {
    /// `[4B, d]`, option `i` of record `b` at row `4b + i`.
    pub embeddings: Var,
    /// `[B, 4]`
    pub logits: Var,
    /// `[B, 4]`, rows sum to one.
    pub scores: Var,
    /// `[B, d]`
    pub e_p: Var,
}

/// Eager outputs for a single record.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionEmbeddings {
    pub e: Vec<Vec<f64>>,
    /// Pre-softmax head outputs.
    pub logits: Vec<f64>,
    pub s: Vec<f64>,
    pub e_p: Vec<f64>,
}

impl OptionEmbeddings {
    /// Scores form a distribution and `e_p` equals the weighted sum of `e` to
    /// 1e-12. Scores may round to exactly 0 or 1 once logit gaps exceed ~37.
    pub fn check(&self) -> Result<()> {
        let total: f64 = self.s.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.s.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::State(format!(
                "scores {:?} are not a strict distribution",
                self.s
            )));
        }
        let direct = weighted_sum(&self.e, &self.s);
        let err = direct
            .iter()
            .zip(&self.e_p)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if err > 1e-12 {
            return Err(Error::State(format!(
                "soft embedding deviates from weighted sum by {err:e}"
            )));
        }
        Ok(())
    }
}

fn weighted_sum(e: &[Vec<f64>], s: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; e[0].len()];
    for (row, &w) in e.iter().zip(s) {
        out.iter_mut().zip(row).for_each(|(o, x)| *o += w * x);
    }
    out
}

impl EncoderParams {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, std) = (config.d_model, config.init_std);
        let mut ps = ParamSet::new();
        let n = |s: &str| format!("{PREFIX}{s}");
        let tok = ps.randn(&n("tok_emb"), vec![config.vocab_size, d], std, &mut rng);
        let pos = ps.randn(&n("pos_emb"), vec![config.max_text_len, d], std, &mut rng);
        let region_w = ps.randn(&n("region.w"), vec![FEATURE_DIM, d], std, &mut rng);
        let region_b = ps.zeros(&n("region.b"), vec![d]);
        let slot = ps.randn(&n("region.slot"), vec![MAX_REGIONS + 1, d], std, &mut rng);
        let text_blocks = (0..config.layers)
            .map(|l| BlockParams::register(&mut ps, &n(&format!("text.{l}")), d, config.ffn_hidden, std, &mut rng))
            .collect();
        let region_blocks = (0..config.layers)
            .map(|l| BlockParams::register(&mut ps, &n(&format!("region.{l}")), d, config.ffn_hidden, std, &mut rng))
            .collect();
        let fusion_kv_g = ps.ones(&n("fusion.kv_ln.g"), vec![d]);
        let fusion_kv_b = ps.zeros(&n("fusion.kv_ln.b"), vec![d]);
        let fusion = AttnParams::register(&mut ps, &n("fusion.attn"), d, std, &mut rng);
        let fusion_ffn = FfnParams::register(&mut ps, &n("fusion.ffn"), d, config.ffn_hidden, std, &mut rng);
        let pool_ln_g = ps.ones(&n("pool.ln.g"), vec![d]);
        let pool_ln_b = ps.zeros(&n("pool.ln.b"), vec![d]);
        let pool_w = ps.randn(&n("pool.w"), vec![d, d], std, &mut rng);
        let pool_b = ps.zeros(&n("pool.b"), vec![d]);
        let score_w = ps.randn(&n("score.w"), vec![d, 1], std, &mut rng);
        Ok(EncoderParams {
            config,
            params: ps,
            layout: Layout {
                tok,
                pos,
                region_w,
                region_b,
                slot,
                fusion_kv_g,
                fusion_kv_b,
                fusion,
                fusion_ffn,
                pool_ln_g,
                pool_ln_b,
                pool_w,
                pool_b,
                score_w,
            },
            text_blocks,
            region_blocks,
        })
    }

    /// Index of the score-head weight `[d, 1]` in `params`.
    pub fn score_weight_index(&self) -> usize {
        self.layout.score_w
    }

    /// Batched forward. `vars` must come from `self.params.bind`.
    pub fn forward(&self, g: &mut Graph<'_>, vars: &[Var], batch: &[EncoderInput]) -> Result<EncodedBatch> {
        if batch.is_empty() {
            return contract("empty encoder batch");
        }
        if vars.len() != self.params.len() {
            return contract("parameter handles do not match this encoder");
        }
        let cfg = &self.config;
        let lay = &self.layout;

        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut seqs: Vec<Range<usize>> = Vec::with_capacity(batch.len() * NUM_OPTIONS);
        let mut feats = Vec::new();
        let mut slots = Vec::new();
        let mut regs: Vec<Range<usize>> = Vec::with_capacity(batch.len());
        for inp in batch {
            if inp.options.len() != NUM_OPTIONS {
                return contract(format!("expected {NUM_OPTIONS} options, got {}", inp.options.len()));
            }
            if inp.regions.len() > MAX_REGIONS {
                return contract(format!(
                    "{} regions exceed the limit of {MAX_REGIONS}",
                    inp.regions.len()
                ));
            }
            for opt in &inp.options {
                let len = inp.question.len() + opt.len() + 2;
                if len > cfg.max_text_len {
                    return contract(format!("text sequence of {len} tokens exceeds {}", cfg.max_text_len));
                }
                let start = ids.len();
                ids.push(BOS);
                ids.extend_from_slice(&inp.question);
                ids.push(SEP);
                ids.extend_from_slice(opt);
                positions.extend(0..len);
                seqs.push(start..ids.len());
            }
            let start = slots.len();
            feats.extend(std::iter::repeat_n(0.0, FEATURE_DIM));
            slots.push(0);
            for (j, r) in inp.regions.iter().enumerate() {
                if r.len() != FEATURE_DIM {
                    return contract(format!(
                        "region feature of dimension {} (expected {FEATURE_DIM})",
                        r.len()
                    ));
                }
                feats.extend_from_slice(r);
                slots.push(j + 1);
            }
            regs.push(start..slots.len());
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size));
        }

        // Region stream; the sink row has zero features.
        let f = g.constant(vec![slots.len(), FEATURE_DIM], feats)?;
        let r = g.matmul(f, vars[lay.region_w])?;
        let r = g.add_row(r, vars[lay.region_b])?;
        let s = g.gather_rows(vars[lay.slot], &slots)?;
        let mut y = g.add(r, s)?;
        let region_layout = Rc::new(AttnLayout::self_blocks(&regs, false));
        for b in &self.region_blocks {
            y = layers::block(g, vars, b, y, cfg.heads, &region_layout)?;
        }

        // Text embeddings.
        let tok = g.embedding(vars[lay.tok], &ids)?;
        let pos = g.gather_rows(vars[lay.pos], &positions)?;
        let mut x = g.add(tok, pos)?;
        // Fusion: every text position reads its record's regions.
        let kv = g.layer_norm(y, vars[lay.fusion_kv_g], vars[lay.fusion_kv_b])?;
        let cross = Rc::new(AttnLayout {
            blocks: seqs
                .iter()
                .enumerate()
                .map(|(i, q)| AttnBlock {
                    q: q.clone(),
                    k: regs[i / NUM_OPTIONS].clone(),
                })
                .collect(),
            causal: false,
        });
        x = layers::attention_sublayer(g, vars, &lay.fusion, x, Some(kv), cfg.heads, &cross)?;
        x = layers::ffn_sublayer(g, vars, &lay.fusion_ffn, x)?;

        // Text stream.
        let text_layout = Rc::new(AttnLayout::self_blocks(&seqs, false));
        for b in &self.text_blocks {
            x = layers::block(g, vars, b, x, cfg.heads, &text_layout)?;
        }

        let firsts: Vec<usize> = seqs.iter().map(|r| r.start).collect();
        let pooled = g.gather_rows(x, &firsts)?;
        let pooled = g.layer_norm(pooled, vars[lay.pool_ln_g], vars[lay.pool_ln_b])?;
        let e = g.matmul(pooled, vars[lay.pool_w])?;
        let embeddings = g.add_row(e, vars[lay.pool_b])?;

        // No bias: a shared offset cancels in the softmax over options.
        let l = g.matmul(embeddings, vars[lay.score_w])?;
        let logits = g.reshape(l, vec![batch.len(), NUM_OPTIONS])?;
        let scores = g.softmax(logits);
        let e_p = g.group_weighted_sum(scores, embeddings)?;
        Ok(EncodedBatch {
            embeddings,
            logits,
            scores,
            e_p,
        })
    }

    /// Eager evaluation of one record from its token strings.
    pub fn encode_options(
        &self,
        vocab: &Vocabulary,
        question: &[String],
        regions: &[Vec<f64>],
        options: &[Vec<String>],
    ) -> Result<OptionEmbeddings> {
        let inp = EncoderInput::new(vocab, question, regions, options)?;
        Ok(self.evaluate(std::slice::from_ref(&inp))?.remove(0))
    }

    /// Eager evaluation of a batch; each result has passed its invariant check.
    pub fn evaluate(&self, batch: &[EncoderInput]) -> Result<Vec<OptionEmbeddings>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, batch)?;
        let d = self.config.d_model;
        let (e, s, p) = (g.value(out.embeddings), g.value(out.scores), g.value(out.e_p));
        let l = g.value(out.logits);
        (0..batch.len())
            .map(|b| {
                let oe = OptionEmbeddings {
                    e: (0..NUM_OPTIONS)
                        .map(|i| e[(b * NUM_OPTIONS + i) * d..(b * NUM_OPTIONS + i + 1) * d].to_vec())
                        .collect(),
                    logits: l[b * NUM_OPTIONS..(b + 1) * NUM_OPTIONS].to_vec(),
                    s: s[b * NUM_OPTIONS..(b + 1) * NUM_OPTIONS].to_vec(),
                    e_p: p[b * d..(b + 1) * d].to_vec(),
                };
                oe.check()?;
                Ok(oe)
            })
            .collect()
    }
}

/// Softmax of the linear head applied to each embedding.
pub fn answer_scores(embeddings: &[Vec<f64>], head_w: &[f64]) -> Result<Vec<f64>> {
    if embeddings.len() != NUM_OPTIONS {
        return contract(format!("expected {NUM_OPTIONS} embeddings, got {}", embeddings.len()));
    }
    if let Some(e) = embeddings.iter().find(|e| e.len() != head_w.len()) {
        return contract(format!(
            "embedding of dimension {} vs head of dimension {}",
            e.len(),
            head_w.len()
        ));
    }
    let logits: Vec<f64> = embeddings
        .iter()
        .map(|e| e.iter().zip(head_w).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    softmax(&logits)
}

/// `Σ_i s_i · E_i`.
pub fn soft_answer_embedding(embeddings: &[Vec<f64>], scores: &[f64]) -> Result<Vec<f64>> {
    if embeddings.is_empty() || embeddings.len() != scores.len() {
        return contract(format!("{} embeddings with {} scores", embeddings.len(), scores.len()));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return contract("embeddings differ in dimension");
    }
    let total: f64 = scores.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return contract(format!("scores sum to {total}, not 1"));
    }
    Ok(weighted_sum(embeddings, scores))
}

/// Argmax with ties going to the lowest index.
pub fn predict_answer(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
