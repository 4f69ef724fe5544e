//! Pre-norm transformer building blocks shared by the encoder and the LM.

use std::rc::Rc;

use rand::Rng;

use super::graph::{AttnLayout, Graph, Var};
use super::params::ParamSet;
use crate::error::Result;

/// Indices into a [`ParamSet`] for one attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub ln_g: usize,
    pub ln_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub ln_g: usize,
    pub ln_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub attn: AttnParams,
    pub ffn: FfnParams,
}

impl AttnParams {
    pub fn register<R: Rng>(ps: &mut ParamSet, prefix: &str, d: usize, std: f64, rng: &mut R) -> Self {
        AttnParams {
            ln_g: ps.ones(&format!("{prefix}.ln.g"), vec![d]),
            ln_b: ps.zeros(&format!("{prefix}.ln.b"), vec![d]),
            wq: ps.randn(&format!("{prefix}.wq"), vec![d, d], std, rng),
            wk: ps.randn(&format!("{prefix}.wk"), vec![d, d], std, rng),
            wv: ps.randn(&format!("{prefix}.wv"), vec![d, d], std, rng),
            wo: ps.randn(&format!("{prefix}.wo"), vec![d, d], std, rng),
            bo: ps.zeros(&format!("{prefix}.bo"), vec![d]),
        }
    }
}

impl FfnParams {
    pub fn register<R: Rng>(ps: &mut ParamSet, prefix: &str, d: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        FfnParams {
            ln_g: ps.ones(&format!("{prefix}.ln.g"), vec![d]),
            ln_b: ps.zeros(&format!("{prefix}.ln.b"), vec![d]),
            w1: ps.randn(&format!("{prefix}.w1"), vec![d, hidden], std, rng),
            b1: ps.zeros(&format!("{prefix}.b1"), vec![hidden]),
            w2: ps.randn(&format!("{prefix}.w2"), vec![hidden, d], std, rng),
            b2: ps.zeros(&format!("{prefix}.b2"), vec![d]),
        }
    }
}

impl BlockParams {
    pub fn register<R: Rng>(ps: &mut ParamSet, prefix: &str, d: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        BlockParams {
            attn: AttnParams::register(ps, &format!("{prefix}.attn"), d, std, rng),
            ffn: FfnParams::register(ps, &format!("{prefix}.ffn"), d, hidden, std, rng),
        }
    }
}

/// `x + Wo·Attn(LN(x) as queries, kv)`. When `kv` is `None` the normalized
/// `x` also supplies keys and values; otherwise `kv` is used as given.
pub fn attention_sublayer(
    g: &mut Graph<'_>,
    p: &[Var],
    a: &AttnParams,
    x: Var,
    kv: Option<Var>,
    heads: usize,
    layout: &Rc<AttnLayout>,
) -> Result<Var> {
    let h = g.layer_norm(x, p[a.ln_g], p[a.ln_b])?;
    let src = kv.unwrap_or(h);
    let q = g.matmul(h, p[a.wq])?;
    let k = g.matmul(src, p[a.wk])?;
    let v = g.matmul(src, p[a.wv])?;
    let att = g.attention(q, k, v, heads, Rc::clone(layout))?;
    let o = g.matmul(att, p[a.wo])?;
    let o = g.add_row(o, p[a.bo])?;
    g.add(x, o)
}

/// `x + W2·gelu(W1·LN(x) + b1) + b2`.
pub fn ffn_sublayer(g: &mut Graph<'_>, p: &[Var], f: &FfnParams, x: Var) -> Result<Var> {
    let h = g.layer_norm(x, p[f.ln_g], p[f.ln_b])?;
    let h = g.matmul(h, p[f.w1])?;
    let h = g.add_row(h, p[f.b1])?;
    let h = g.gelu(h);
    let h = g.matmul(h, p[f.w2])?;
    let h = g.add_row(h, p[f.b2])?;
    g.add(x, h)
}

pub fn block(
    g: &mut Graph<'_>,
    p: &[Var],
    b: &BlockParams,
    x: Var,
    heads: usize,
    layout: &Rc<AttnLayout>,
) -> Result<Var> {
    let x = attention_sublayer(g, p, &b.attn, x, None, heads, layout)?;
    ffn_sublayer(g, p, &b.ffn, x)
}
