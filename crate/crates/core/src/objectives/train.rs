use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{combine, Combinator, LossBundle, Mode, TrainConfig};
use crate::encoder::{predict_answer, EncoderInput, EncoderParams, OptionEmbeddings};
use crate::error::{contract, Error, Result};
use crate::numerics::{Adam, Graph, ParamSet, Var};
use crate::rationale_lm::LmParams;
use crate::synthdata::{Vocabulary, VqaRecord, EOS, NUM_OPTIONS};

/// Records evaluated per graph outside of training steps.
const EVAL_BATCH: usize = 64;

/// A record as model inputs: encoder ids, the gold rationale followed by EOS,
/// and the gold answer index.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub record_id: String,
    pub input: EncoderInput,
    pub rationale: Vec<usize>,
    pub gold: usize,
}

pub fn prepare(records: &[VqaRecord], vocab: &Vocabulary, max_rationale_len: usize) -> Result<Vec<Prepared>> {
    records
        .iter()
        .map(|r| {
            r.validate()?;
            let input = EncoderInput::from_record(vocab, r)?;
            if r.gold_rationale_tokens.len() > max_rationale_len {
                return Err(Error::Contract(format!(
                    "rationale of {} tokens exceeds the limit of {max_rationale_len}",
                    r.gold_rationale_tokens.len()
                ))
                .in_record(&r.record_id));
            }
            let mut rationale = vocab
                .encode(&r.gold_rationale_tokens)
                .map_err(|e| e.in_record(&r.record_id))?;
            rationale.push(EOS);
            Ok(Prepared {
                record_id: r.record_id.clone(),
                input,
                rationale,
                gold: r.gold_answer,
            })
        })
        .collect()
}

/// One line of the training history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_A")]
    pub l_a: f64,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    pub kl: Option<f64>,
    pub total: f64,
    /// Percent of validation records answered correctly.
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Validation total loss per epoch, used to pick the kept checkpoint.
    pub val_total: Vec<f64>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    /// Final `(s_A, s_R)` under the uncertainty combinator.
    pub uncertainty: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    #[serde(rename = "L_A")]
    pub l_a: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub history: Vec<PretrainRecord>,
    pub best_epoch: usize,
}

/// Eager encoder outputs for every record, in order.
pub fn evaluate_encoder(encoder: &EncoderParams, data: &[Prepared]) -> Result<Vec<OptionEmbeddings>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let inputs: Vec<EncoderInput> = chunk.iter().map(|p| p.input.clone()).collect();
        out.extend(encoder.evaluate(&inputs)?);
    }
    Ok(out)
}

fn accuracy(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total.max(1) as f64
}

/// Where the encoder-side quantities of a batch come from.
enum EncSource<'c> {
    /// Run the encoder on the graph; `trainable` binds its weights as params.
    Live { trainable: bool },
    /// Frozen encoder outputs computed ahead of time.
    Cached(&'c [OptionEmbeddings]),
}

struct BatchResult {
    parts: LossBundle,
    correct: usize,
    enc: Option<Vec<Option<Vec<f64>>>>,
    lm: Option<Vec<Option<Vec<f64>>>>,
    unc: Option<Vec<Option<Vec<f64>>>>,
}

struct Models<'m> {
    encoder: &'m EncoderParams,
    lm: &'m LmParams,
    unc: &'m ParamSet,
}

/// Builds one batch's loss graph; runs backward when `learn` is set.
fn run_batch(
    m: &Models<'_>,
    cfg: &TrainConfig,
    items: &[&Prepared],
    source: EncSource<'_>,
    reference: Option<&[Vec<f64>]>,
    learn: bool,
) -> Result<BatchResult> {
    let b = items.len();
    let mut g = Graph::new();
    let d = m.encoder.config.d_model;
    let (enc_vars, logits, e_p) = match source {
        EncSource::Live { trainable } => {
            let vars = m.encoder.params.bind(&mut g, trainable);
            let inputs: Vec<EncoderInput> = items.iter().map(|p| p.input.clone()).collect();
            let out = m.encoder.forward(&mut g, &vars, &inputs)?;
            (trainable.then_some(vars), out.logits, out.e_p)
        }
        EncSource::Cached(c) => {
            let logits = g.constant(vec![b, NUM_OPTIONS], c.iter().flat_map(|o| o.logits.clone()).collect())?;
            let e_p = g.constant(vec![b, d], c.iter().flat_map(|o| o.e_p.clone()).collect())?;
            (None, logits, e_p)
        }
    };
    let lm_vars = m.lm.params.bind(&mut g, learn);
    let unc_vars = m.unc.bind(&mut g, learn);

    let gold: Vec<usize> = items.iter().map(|p| p.gold).collect();
    let l_a = g.cross_entropy(logits, &gold, &vec![1.0 / b as f64; b])?;
    let l_a_used = if cfg.detach_answer_loss { g.detach(l_a) } else { l_a };
    let targets: Vec<Vec<usize>> = items.iter().map(|p| p.rationale.clone()).collect();
    let l_r = m.lm.nll(&mut g, &lm_vars, e_p, &targets)?;

    let kl = match (cfg.combinator, reference) {
        (Combinator::Kldiv { .. }, Some(refs)) => {
            let lq = g.log_softmax(logits);
            let plogp: f64 = refs.iter().flatten().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
            let p = g.constant(vec![b, NUM_OPTIONS], refs.concat())?;
            let cross = g.mul(p, lq)?;
            let cross = g.sum(cross);
            let cross = g.scale(cross, -1.0 / b as f64);
            let c = g.constant(vec![1], vec![plogp / b as f64])?;
            Some(g.add(cross, c)?)
        }
        (Combinator::Kldiv { .. }, None) => {
            return Err(Error::Config("the kldiv combinator needs reference scores".into()));
        }
        _ => None,
    };

    let total = match cfg.combinator {
        Combinator::Weighted { lambda } => {
            let a = g.scale(l_a_used, lambda);
            g.add(a, l_r)?
        }
        Combinator::Uncertainty => {
            let (s_a, s_r) = (unc_vars[0], unc_vars[1]);
            let na = g.scale(s_a, -1.0);
            let wa = g.exp(na);
            let ta = g.mul(wa, l_a_used)?;
            let nr = g.scale(s_r, -1.0);
            let wr = g.exp(nr);
            let tr = g.mul(wr, l_r)?;
            let t = g.add(ta, tr)?;
            let t = g.add(t, s_a)?;
            g.add(t, s_r)?
        }
        Combinator::Kldiv { beta } => {
            let t = g.add(l_a_used, l_r)?;
            let k = g.scale(kl.expect("kl computed above"), beta);
            g.add(t, k)?
        }
    };

    let kl_val = kl.map(|k| g.scalar(k));
    let s = (m.unc.get(0).data()[0], m.unc.get(1).data()[0]);
    let parts = LossBundle {
        l_a: g.scalar(l_a),
        l_r: g.scalar(l_r),
        kl: kl_val,
        total: combine(cfg.combinator, g.scalar(l_a), g.scalar(l_r), kl_val, Some(s))?,
    };
    let graph_total = g.scalar(total);
    if (graph_total - parts.total).abs() > 1e-9 * graph_total.abs().max(1.0) {
        return Err(Error::State(format!(
            "graph total {graph_total} disagrees with combinator {}",
            parts.total
        )));
    }
    let lv = g.value(logits);
    let correct = (0..b)
        .filter(|&i| predict_answer(&lv[i * NUM_OPTIONS..(i + 1) * NUM_OPTIONS]) == gold[i])
        .count();

    let (mut enc, mut lm, mut unc) = (None, None, None);
    if learn {
        let mut grads = g.backward(total)?;
        enc = enc_vars.map(|v| ParamSet::extract_grads(&v, &mut grads));
        lm = Some(ParamSet::extract_grads(&lm_vars, &mut grads));
        if cfg.combinator == Combinator::Uncertainty {
            unc = Some(ParamSet::extract_grads(&unc_vars, &mut grads));
        }
    }
    Ok(BatchResult {
        parts,
        correct,
        enc,
        lm,
        unc,
    })
}

fn clip(sets: &mut [&mut ParamSet], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = sets.iter().map(|s| s.grad_sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        sets.iter_mut().for_each(|s| s.scale_grads(max_norm / norm));
    }
}

#[derive(Default)]
struct Acc {
    l_a: f64,
    l_r: f64,
    kl: f64,
    total: f64,
    n: usize,
    correct: usize,
}

impl Acc {
    fn add(&mut self, p: &LossBundle, n: usize, correct: usize) {
        let w = n as f64;
        self.l_a += w * p.l_a;
        self.l_r += w * p.l_r;
        self.kl += w * p.kl.unwrap_or(0.0);
        self.total += w * p.total;
        self.n += n;
        self.correct += correct;
    }

    fn mean(&self, x: f64) -> f64 {
        x / self.n.max(1) as f64
    }
}

fn uncertainty_params() -> ParamSet {
    let mut ps = ParamSet::new();
    ps.zeros("uncertainty.s_a", vec![1]);
    ps.zeros("uncertainty.s_r", vec![1]);
    ps
}

/// Trains the LM (and, in `Ra` mode, the encoder) on `train_set`, keeping the
/// parameters of the epoch with the lowest validation total loss.
///
/// `reference` is the frozen answer model whose scores the kldiv combinator
/// compares against. `Fr` mode assumes `encoder` has been trained on answers.
pub fn train(
    config: &TrainConfig,
    train_set: &[Prepared],
    val_set: &[Prepared],
    encoder: &mut EncoderParams,
    lm: &mut LmParams,
    reference: Option<&EncoderParams>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return contract("training needs non-empty train and validation sets");
    }
    if lm.config.d_in != encoder.config.d_model {
        return Err(Error::Config(format!(
            "LM expects conditioning width {}, encoder produces {}",
            lm.config.d_in, encoder.config.d_model
        )));
    }
    let is_kl = matches!(config.combinator, Combinator::Kldiv { .. });
    let ref_scores = |data: &[Prepared]| -> Result<Option<Vec<Vec<f64>>>> {
        match (is_kl, reference) {
            (false, _) => Ok(None),
            (true, None) => Err(Error::Config(
                "the kldiv combinator needs a pretrained reference encoder".into(),
            )),
            (true, Some(r)) => Ok(Some(evaluate_encoder(r, data)?.into_iter().map(|o| o.s).collect())),
        }
    };
    let ref_train = ref_scores(train_set)?;
    let ref_val = ref_scores(val_set)?;
    let frozen = config.mode == Mode::Fr;
    let (cache_train, cache_val) = if frozen {
        (
            Some(evaluate_encoder(encoder, train_set)?),
            Some(evaluate_encoder(encoder, val_set)?),
        )
    } else {
        (None, None)
    };
    let encoder_before = frozen.then(|| encoder.params.clone());

    let mut unc = uncertainty_params();
    let mut adam_enc = Adam::new(&encoder.params, config.lr);
    let mut adam_lm = Adam::new(&lm.params, config.lr);
    let mut adam_unc = Adam::new(&unc, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = Vec::with_capacity(config.epochs);
    let mut val_total = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamSet, ParamSet, ParamSet)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut acc = Acc::default();
        for idx in order.chunks(config.batch_size) {
            let items: Vec<&Prepared> = idx.iter().map(|&i| &train_set[i]).collect();
            let cached: Option<Vec<OptionEmbeddings>> = cache_train
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i].clone()).collect());
            let refs: Option<Vec<Vec<f64>>> = ref_train.as_ref().map(|r| idx.iter().map(|&i| r[i].clone()).collect());
            let source = match &cached {
                Some(c) => EncSource::Cached(c),
                None => EncSource::Live { trainable: true },
            };
            let res = {
                let models = Models { encoder, lm, unc: &unc };
                run_batch(&models, config, &items, source, refs.as_deref(), true)?
            };
            acc.add(&res.parts, items.len(), res.correct);
            if let Some(gr) = res.enc {
                encoder.params.accumulate_grads(gr)?;
            }
            if let Some(gr) = res.lm {
                lm.params.accumulate_grads(gr)?;
            }
            if let Some(gr) = res.unc {
                unc.accumulate_grads(gr)?;
            }
            {
                let mut sets: Vec<&mut ParamSet> = vec![&mut lm.params, &mut unc];
                if !frozen {
                    sets.push(&mut encoder.params);
                }
                clip(&mut sets, config.clip_norm);
            }
            if !frozen {
                adam_enc.step(&mut encoder.params)?;
            }
            adam_lm.step(&mut lm.params)?;
            adam_unc.step(&mut unc)?;
        }

        let mut vacc = Acc::default();
        for (ci, chunk) in val_set.chunks(EVAL_BATCH).enumerate() {
            let items: Vec<&Prepared> = chunk.iter().collect();
            let range = ci * EVAL_BATCH..ci * EVAL_BATCH + chunk.len();
            let source = match &cache_val {
                Some(c) => EncSource::Cached(&c[range.clone()]),
                None => EncSource::Live { trainable: false },
            };
            let refs = ref_val.as_ref().map(|r| &r[range]);
            let models = Models { encoder, lm, unc: &unc };
            let res = run_batch(&models, config, &items, source, refs, false)?;
            vacc.add(&res.parts, items.len(), res.correct);
        }
        let v_total = vacc.mean(vacc.total);
        history.push(EpochRecord {
            epoch,
            l_a: acc.mean(acc.l_a),
            l_r: acc.mean(acc.l_r),
            kl: is_kl.then(|| acc.mean(acc.kl)),
            total: acc.mean(acc.total),
            val_accuracy: accuracy(vacc.correct, vacc.n),
        });
        val_total.push(v_total);
        if !v_total.is_finite() || !lm.params.all_finite() || !encoder.params.all_finite() {
            return Err(Error::State(format!("training diverged at epoch {epoch}")));
        }
        if best.as_ref().is_none_or(|b| v_total < b.0) {
            let enc_snap = if frozen {
                ParamSet::new()
            } else {
                encoder.params.clone()
            };
            best = Some((v_total, epoch, enc_snap, lm.params.clone(), unc.clone()));
        }
    }

    let (_, best_epoch, enc_snap, lm_snap, unc_snap) = best.expect("at least one epoch ran");
    if !frozen {
        encoder.params = enc_snap;
    }
    lm.params = lm_snap;
    unc = unc_snap;
    encoder.params.zero_grad();
    lm.params.zero_grad();

    if let Some(before) = encoder_before {
        if before.max_abs_diff(&encoder.params) != Some(0.0) {
            return Err(Error::State("encoder parameters changed in frozen mode".into()));
        }
    }
    Ok(TrainOutcome {
        history,
        val_total,
        best_epoch,
        uncertainty: (config.combinator == Combinator::Uncertainty)
            .then(|| (unc.get(0).data()[0], unc.get(1).data()[0])),
    })
}

/// Answer-only training of the encoder; keeps the epoch with the lowest
/// validation answer loss.
pub fn pretrain_vqa_only(
    config: &TrainConfig,
    train_set: &[Prepared],
    val_set: &[Prepared],
    encoder: &mut EncoderParams,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return contract("pretraining needs non-empty train and validation sets");
    }
    let mut adam = Adam::new(&encoder.params, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamSet)> = None;

    let answer_loss =
        |g: &mut Graph<'_>, enc: &EncoderParams, vars: &[Var], items: &[&Prepared]| -> Result<(Var, usize)> {
            let inputs: Vec<EncoderInput> = items.iter().map(|p| p.input.clone()).collect();
            let out = enc.forward(g, vars, &inputs)?;
            let gold: Vec<usize> = items.iter().map(|p| p.gold).collect();
            let b = items.len();
            let loss = g.cross_entropy(out.logits, &gold, &vec![1.0 / b as f64; b])?;
            let lv = g.value(out.logits);
            let correct = (0..b)
                .filter(|&i| predict_answer(&lv[i * NUM_OPTIONS..(i + 1) * NUM_OPTIONS]) == gold[i])
                .count();
            Ok((loss, correct))
        };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for idx in order.chunks(config.batch_size) {
            let items: Vec<&Prepared> = idx.iter().map(|&i| &train_set[i]).collect();
            let grads = {
                let mut g = Graph::new();
                let vars = encoder.params.bind(&mut g, true);
                let (loss, c) = answer_loss(&mut g, encoder, &vars, &items)?;
                loss_sum += g.scalar(loss) * items.len() as f64;
                correct += c;
                let mut grads = g.backward(loss)?;
                ParamSet::extract_grads(&vars, &mut grads)
            };
            encoder.params.accumulate_grads(grads)?;
            clip(&mut [&mut encoder.params], config.clip_norm);
            adam.step(&mut encoder.params)?;
        }
        let (mut v_loss, mut v_correct) = (0.0, 0);
        for chunk in val_set.chunks(EVAL_BATCH) {
            let items: Vec<&Prepared> = chunk.iter().collect();
            let mut g = Graph::new();
            let vars = encoder.params.bind(&mut g, false);
            let (loss, c) = answer_loss(&mut g, encoder, &vars, &items)?;
            v_loss += g.scalar(loss) * items.len() as f64;
            v_correct += c;
        }
        let v_loss = v_loss / val_set.len() as f64;
        if !v_loss.is_finite() || !encoder.params.all_finite() {
            return Err(Error::State(format!("pretraining diverged at epoch {epoch}")));
        }
        history.push(PretrainRecord {
            epoch,
            l_a: loss_sum / train_set.len() as f64,
            train_accuracy: accuracy(correct, train_set.len()),
            val_accuracy: accuracy(v_correct, val_set.len()),
        });
        if best.as_ref().is_none_or(|b| v_loss < b.0) {
            best = Some((v_loss, epoch, encoder.params.clone()));
        }
    }
    let (_, best_epoch, snap) = best.expect("at least one epoch ran");
    encoder.params = snap;
    encoder.params.zero_grad();
    Ok(PretrainOutcome { history, best_epoch })
}
