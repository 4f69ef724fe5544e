//! Causal transformer LM over rationale tokens, conditioned on a dense vector.
//!
//! Sequence layout: position 0 holds the projected conditioning vector, position
//! 1 holds BOS, and rationale tokens follow. The output projection is tied to the
//! token table, plus a per-token output bias.

use std::collections::BTreeMap;
use std::ops::Range;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::layers::{self, BlockParams};
use crate::numerics::{softmax, AttnLayout, Graph, ParamSet, Var};
use crate::synthdata::{BOS, EOS, PAD, SEP};

pub const PREFIX: &str = "lm.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    /// Width of the conditioning vector.
    pub d_in: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Positions including the prefix and BOS.
    pub max_len: usize,
    pub init_std: f64,
}

impl LmConfig {
    pub fn new(vocab_size: usize, d_in: usize) -> Self {
        LmConfig {
            vocab_size,
            d_in,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: 128,
            max_len: 24,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS || self.d_in == 0 || self.d_model == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config(format!("degenerate LM config {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide d_lm={}",
                self.heads, self.d_model
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(
                "max_len must leave room for prefix, BOS and one token".into(),
            ));
        }
        Ok(())
    }

    /// Longest rationale, excluding EOS, that fits the position table.
    pub fn max_rationale_len(&self) -> usize {
        self.max_len - 2
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    tok: usize,
    pos: usize,
    prefix_w: usize,
    prefix_b: usize,
    final_g: usize,
    final_b: usize,
    out_bias: usize,
}

#[derive(Debug, Clone)]
pub struct LmParams {
    pub config: LmConfig,
    pub params: ParamSet,
    layout: Layout,
    blocks: Vec<BlockParams>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleSequence {
    pub tokens: Vec<usize>,
    /// Whether EOS was emitted.
    pub terminated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Tokens never emitted during generation.
const BLOCKED: [usize; 3] = [PAD, BOS, SEP];

impl LmParams {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, std) = (config.d_model, config.init_std);
        let mut ps = ParamSet::new();
        let n = |s: &str| format!("{PREFIX}{s}");
        let tok = ps.randn(&n("tok_emb"), vec![config.vocab_size, d], std, &mut rng);
        let pos = ps.randn(&n("pos_emb"), vec![config.max_len, d], std, &mut rng);
        let prefix_w = ps.randn(&n("prefix.w"), vec![config.d_in, d], std, &mut rng);
        let prefix_b = ps.zeros(&n("prefix.b"), vec![d]);
        let blocks = (0..config.layers)
            .map(|l| BlockParams::register(&mut ps, &n(&format!("block.{l}")), d, config.ffn_hidden, std, &mut rng))
            .collect();
        let final_g = ps.ones(&n("final_ln.g"), vec![d]);
        let final_b = ps.zeros(&n("final_ln.b"), vec![d]);
        let out_bias = ps.zeros(&n("out_bias"), vec![config.vocab_size]);
        Ok(LmParams {
            config,
            params: ps,
            layout: Layout {
                tok,
                pos,
                prefix_w,
                prefix_b,
                final_g,
                final_b,
                out_bias,
            },
            blocks,
        })
    }

    /// Index of the token table, which is also the output projection.
    pub fn token_table_index(&self) -> usize {
        self.layout.tok
    }

    pub fn out_bias_index(&self) -> usize {
        self.layout.out_bias
    }

    /// Next-token logits for every input position after the prefix.
    ///
    /// `e_p` is `[B, d_in]`; `inputs[b]` starts with BOS. Row `k` of the result
    /// for record `b` lies at `ranges[b].start + k` and predicts the token that
    /// follows `inputs[b][k]`.
    pub fn logits(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        e_p: Var,
        inputs: &[Vec<usize>],
    ) -> Result<(Var, Vec<Range<usize>>)> {
        let cfg = &self.config;
        let lay = &self.layout;
        if vars.len() != self.params.len() {
            return contract("parameter handles do not match this LM");
        }
        let b = inputs.len();
        if b == 0 || g.shape(e_p) != [b, cfg.d_in] {
            return contract(format!(
                "conditioning of shape {:?} for {b} sequences of width {}",
                g.shape(e_p),
                cfg.d_in
            ));
        }
        let mut ids = Vec::new();
        for inp in inputs {
            if inp.is_empty() || inp[0] != BOS {
                return contract("LM input must start with BOS");
            }
            if inp.len() + 1 > cfg.max_len {
                return contract(format!(
                    "sequence of {} tokens exceeds max_len {}",
                    inp.len() + 1,
                    cfg.max_len
                ));
            }
            if let Some(&bad) = inp.iter().find(|&&t| t >= cfg.vocab_size) {
                return contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size));
            }
            ids.extend_from_slice(inp);
        }
        // Rows [0, B) hold prefixes, then all token rows; `order` interleaves them.
        let mut order = Vec::with_capacity(b + ids.len());
        let mut positions = Vec::with_capacity(b + ids.len());
        let mut seqs = Vec::with_capacity(b);
        let mut outs = Vec::with_capacity(ids.len());
        let mut next_tok = b;
        for (i, inp) in inputs.iter().enumerate() {
            let start = order.len();
            order.push(i);
            positions.push(0);
            for k in 0..inp.len() {
                outs.push(order.len());
                order.push(next_tok);
                positions.push(k + 1);
                next_tok += 1;
            }
            seqs.push(start..order.len());
        }
        let pre = g.matmul(e_p, vars[lay.prefix_w])?;
        let pre = g.add_row(pre, vars[lay.prefix_b])?;
        let tok = g.embedding(vars[lay.tok], &ids)?;
        let all = g.concat_rows(&[pre, tok])?;
        let x = g.gather_rows(all, &order)?;
        let pos = g.gather_rows(vars[lay.pos], &positions)?;
        let mut x = g.add(x, pos)?;
        let layout = Rc::new(AttnLayout::self_blocks(&seqs, true));
        for blk in &self.blocks {
            x = layers::block(g, vars, blk, x, cfg.heads, &layout)?;
        }
        let h = g.gather_rows(x, &outs)?;
        let h = g.layer_norm(h, vars[lay.final_g], vars[lay.final_b])?;
        let l = g.matmul_t(h, vars[lay.tok])?;
        let logits = g.add_row(l, vars[lay.out_bias])?;
        let mut ranges = Vec::with_capacity(b);
        let mut off = 0;
        for inp in inputs {
            ranges.push(off..off + inp.len());
            off += inp.len();
        }
        Ok((logits, ranges))
    }

    /// Mean over records of the per-token mean negative log-likelihood of
    /// `targets[b]` given `e_p[b]`, with teacher forcing.
    pub fn nll(&self, g: &mut Graph<'_>, vars: &[Var], e_p: Var, targets: &[Vec<usize>]) -> Result<Var> {
        if targets.iter().any(Vec::is_empty) {
            return contract("rationale must contain at least one token");
        }
        let inputs: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| std::iter::once(BOS).chain(t[..t.len() - 1].iter().copied()).collect())
            .collect();
        let (logits, _) = self.logits(g, vars, e_p, &inputs)?;
        let flat: Vec<usize> = targets.concat();
        let weights: Vec<f64> = targets
            .iter()
            .flat_map(|t| std::iter::repeat_n(1.0 / (t.len() * targets.len()) as f64, t.len()))
            .collect();
        g.cross_entropy(logits, &flat, &weights)
    }

    /// Scalar loss for one conditioning vector and one token sequence.
    pub fn rationale_nll(&self, e_p: &[f64], rationale: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let e = g.constant(vec![1, e_p.len()], e_p.to_vec())?;
        let loss = self.nll(&mut g, &vars, e, &[rationale.to_vec()])?;
        Ok(g.scalar(loss))
    }

    /// Next-token distributions for each input position, eagerly.
    pub fn next_token_probs(&self, e_p: &[f64], input: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let e = g.constant(vec![1, e_p.len()], e_p.to_vec())?;
        let (logits, _) = self.logits(&mut g, &vars, e, &[input.to_vec()])?;
        g.value(logits).chunks(self.config.vocab_size).map(softmax).collect()
    }

    pub fn generate(&self, e_p: &[f64], max_len: usize, strategy: Strategy) -> Result<RationaleSequence> {
        Ok(self.generate_batch(&[e_p.to_vec()], max_len, strategy)?.remove(0))
    }

    /// Decodes every conditioning vector in lockstep. With sampling, record
    /// `i` draws from its own stream seeded by `seed + i`.
    pub fn generate_batch(
        &self,
        e_ps: &[Vec<f64>],
        max_len: usize,
        strategy: Strategy,
    ) -> Result<Vec<RationaleSequence>> {
        if max_len < 1 {
            return contract("max_len must be at least 1");
        }
        if let Strategy::Sample { temperature, .. } = strategy {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return contract(format!("temperature {temperature} must be positive"));
            }
        }
        if e_ps.is_empty() {
            return Ok(Vec::new());
        }
        let limit = max_len.min(self.config.max_rationale_len());
        let d_in = self.config.d_in;
        if let Some(e) = e_ps.iter().find(|e| e.len() != d_in) {
            return contract(format!("conditioning vector of width {} (expected {d_in})", e.len()));
        }
        let mut rngs: Vec<ChaCha8Rng> = match strategy {
            Strategy::Greedy => Vec::new(),
            Strategy::Sample { seed, .. } => (0..e_ps.len())
                .map(|i| ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)))
                .collect(),
        };
        let mut out: Vec<RationaleSequence> = vec![
            RationaleSequence {
                tokens: Vec::new(),
                terminated: false
            };
            e_ps.len()
        ];
        let v = self.config.vocab_size;
        // A record stops on EOS or once it holds `limit` tokens and a final
        // EOS check has been made.
        let mut done = vec![false; out.len()];
        loop {
            let active: Vec<usize> = (0..out.len()).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g, false);
            let e = g.constant(
                vec![active.len(), d_in],
                active.iter().flat_map(|&i| e_ps[i].clone()).collect(),
            )?;
            let inputs: Vec<Vec<usize>> = active
                .iter()
                .map(|&i| std::iter::once(BOS).chain(out[i].tokens.iter().copied()).collect())
                .collect();
            let (logits, ranges) = self.logits(&mut g, &vars, e, &inputs)?;
            let lv = g.value(logits);
            for (k, &i) in active.iter().enumerate() {
                let row = ranges[k].end - 1;
                let mut l = lv[row * v..(row + 1) * v].to_vec();
                for &t in &BLOCKED {
                    l[t] = f64::NEG_INFINITY;
                }
                let next = match strategy {
                    Strategy::Greedy => argmax(&l),
                    Strategy::Sample { temperature, .. } => sample(&tempered(&l, temperature), &mut rngs[i]),
                };
                if next == EOS {
                    out[i].terminated = true;
                    done[i] = true;
                } else if out[i].tokens.len() == limit {
                    done[i] = true;
                } else {
                    out[i].tokens.push(next);
                }
            }
        }
        Ok(out)
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// `softmax(l / temperature)`; entries at −∞ get probability zero.
fn tempered(l: &[f64], temperature: f64) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|&x| ((x - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn sample(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&q| q > 0.0).unwrap_or(0)
}

/// `[personK]` or `[objectK]`.
pub fn is_entity_tag(token: &str) -> bool {
    token
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .and_then(|s| s.strip_prefix("person").or_else(|| s.strip_prefix("object")))
        .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
}

/// Maps each distinct tag, in order of first appearance, to a pool name
/// drawn without replacement.
pub fn tag_mapping<'t, I>(tokens: I, name_pool: &[String], seed: u64) -> Result<BTreeMap<String, String>>
where
    I: IntoIterator<Item = &'t String>,
{
    if name_pool.is_empty() {
        return contract("name pool is empty");
    }
    let mut tags: Vec<&String> = Vec::new();
    for t in tokens {
        if is_entity_tag(t) && !tags.contains(&t) {
            tags.push(t);
        }
    }
    if tags.len() > name_pool.len() {
        return Err(Error::Capacity(format!(
            "{} distinct tags but only {} names",
            tags.len(),
            name_pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = name_pool.to_vec();
    pool.shuffle(&mut rng);
    Ok(tags.into_iter().cloned().zip(pool).collect())
}

/// Replaces entity tags with names; other tokens are untouched.
pub fn anonymize_tags(tokens: &[String], name_pool: &[String], seed: u64) -> Result<Vec<String>> {
    let map = tag_mapping(tokens, name_pool, seed)?;
    Ok(tokens
        .iter()
        .map(|t| map.get(t).cloned().unwrap_or_else(|| t.clone()))
        .collect())
}

#[cfg(test)]
mod tests;
