use super::*;
use crate::numerics::Adam;
use rand::Rng;

fn tiny(seed: u64, vocab: usize) -> LmParams {
    let mut cfg = LmConfig::new(vocab, 6);
    cfg.d_model = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.ffn_hidden = 16;
    cfg.max_len = 12;
    cfg.init_std = 0.4;
    LmParams::new(cfg, seed).unwrap()
}

fn randvec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn zero_output(lm: &mut LmParams) {
    let i = lm.token_table_index();
    lm.params.get_mut(i).data_mut().iter_mut().for_each(|x| *x = 0.0);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut lm = tiny(1, 10);
    zero_output(&mut lm);
    let nll = lm.rationale_nll(&[0.3; 6], &[5, 7, 2]).unwrap();
    assert!((nll - 10f64.ln()).abs() <= 1e-12, "{nll}");
}

#[test]
fn saturated_logit_gives_near_zero_loss() {
    let mut lm = tiny(2, 10);
    zero_output(&mut lm);
    let b = lm.out_bias_index();
    lm.params.get_mut(b).data_mut()[6] = 100.0;
    let nll = lm.rationale_nll(&[0.1; 6], &[6]).unwrap();
    assert!(nll <= 1e-6, "{nll}");
}

#[test]
fn too_long_sequences_are_rejected() {
    let lm = tiny(3, 10);
    let long = vec![5; lm.config.max_len];
    assert!(matches!(lm.rationale_nll(&[0.0; 6], &long), Err(Error::Contract(_))));
    assert!(lm.rationale_nll(&[0.0; 6], &vec![5; lm.config.max_len - 1]).is_ok());
}

// ---- independent reference forward ---------------------------------------

struct Ref<'a> {
    lm: &'a LmParams,
}

impl Ref<'_> {
    fn p(&self, name: &str) -> &[f64] {
        self.lm.params.by_name(&format!("lm.{name}")).unwrap().data()
    }

    fn ln(&self, x: &[f64], pre: &str) -> Vec<f64> {
        let (g, b) = (self.p(&format!("{pre}.g")), self.p(&format!("{pre}.b")));
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let r = 1.0 / (var + 1e-5).sqrt();
        x.iter().enumerate().map(|(i, v)| (v - mu) * r * g[i] + b[i]).collect()
    }

    fn lin(&self, x: &[f64], w: &str, b: Option<&str>) -> Vec<f64> {
        let w = self.p(w);
        let cols = w.len() / x.len();
        let mut out: Vec<f64> = b.map_or(vec![0.0; cols], |b| self.p(b).to_vec());
        for (i, xi) in x.iter().enumerate() {
            for j in 0..cols {
                out[j] += xi * w[i * cols + j];
            }
        }
        out
    }

    /// Distribution over the token after `input` (which starts with BOS).
    fn next(&self, e_p: &[f64], input: &[usize]) -> Vec<f64> {
        let cfg = &self.lm.config;
        let d = cfg.d_model;
        let (tok, pos) = (self.p("tok_emb"), self.p("pos_emb"));
        let mut xs: Vec<Vec<f64>> = vec![self.lin(e_p, "prefix.w", Some("prefix.b"))];
        for &t in input {
            xs.push(tok[t * d..(t + 1) * d].to_vec());
        }
        for (i, x) in xs.iter_mut().enumerate() {
            x.iter_mut().zip(&pos[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
        }
        let dh = d / cfg.heads;
        for l in 0..cfg.layers {
            let pre = format!("block.{l}");
            let h: Vec<Vec<f64>> = xs.iter().map(|x| self.ln(x, &format!("{pre}.attn.ln"))).collect();
            let q: Vec<_> = h.iter().map(|x| self.lin(x, &format!("{pre}.attn.wq"), None)).collect();
            let k: Vec<_> = h.iter().map(|x| self.lin(x, &format!("{pre}.attn.wk"), None)).collect();
            let v: Vec<_> = h.iter().map(|x| self.lin(x, &format!("{pre}.attn.wv"), None)).collect();
            let mut att = vec![vec![0.0; d]; xs.len()];
            for t in 0..xs.len() {
                for hd in 0..cfg.heads {
                    let cols = hd * dh..(hd + 1) * dh;
                    let s: Vec<f64> = (0..=t)
                        .map(|u| cols.clone().map(|c| q[t][c] * k[u][c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                    for (u, su) in s.iter().enumerate() {
                        let w = (su - m).exp() / z;
                        for c in cols.clone() {
                            att[t][c] += w * v[u][c];
                        }
                    }
                }
            }
            for (x, a) in xs.iter_mut().zip(&att) {
                let o = self.lin(a, &format!("{pre}.attn.wo"), Some(&format!("{pre}.attn.bo")));
                x.iter_mut().zip(&o).for_each(|(p, q)| *p += q);
                let h = self.ln(x, &format!("{pre}.ffn.ln"));
                let h = self.lin(&h, &format!("{pre}.ffn.w1"), Some(&format!("{pre}.ffn.b1")));
                let h: Vec<f64> = h
                    .iter()
                    .map(|&u| {
                        0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
                    })
                    .collect();
                let o = self.lin(&h, &format!("{pre}.ffn.w2"), Some(&format!("{pre}.ffn.b2")));
                x.iter_mut().zip(&o).for_each(|(p, q)| *p += q);
            }
        }
        let last = self.ln(xs.last().unwrap(), "final_ln");
        let bias = self.p("out_bias");
        let logits: Vec<f64> = (0..cfg.vocab_size)
            .map(|t| {
                last.iter()
                    .zip(&tok[t * d..(t + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + bias[t]
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
        logits.iter().map(|x| (x - m).exp() / z).collect()
    }
}

#[test]
fn nll_matches_step_by_step_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..5 {
        let lm = tiny(seed, 11);
        let e_p = randvec(&mut rng, 6, 1.0);
        let r = [7usize, 4, 9];
        let oracle = Ref { lm: &lm };
        let mut total = 0.0;
        for i in 0..r.len() {
            let input: Vec<usize> = std::iter::once(BOS).chain(r[..i].iter().copied()).collect();
            total -= oracle.next(&e_p, &input)[r[i]].ln();
        }
        let want = total / r.len() as f64;
        let got = lm.rationale_nll(&e_p, &r).unwrap();
        assert!((got - want).abs() <= 1e-12, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn perturbing_a_token_only_affects_later_positions() {
    let lm = tiny(5, 12);
    let e_p = [0.2, -0.4, 0.1, 0.9, -0.3, 0.5];
    let a = [BOS, 5, 6, 7, 8, 9];
    for j in 1..a.len() {
        let mut b = a;
        b[j] = 11;
        let pa = lm.next_token_probs(&e_p, &a).unwrap();
        let pb = lm.next_token_probs(&e_p, &b).unwrap();
        for t in 0..j {
            let diff = pa[t].iter().zip(&pb[t]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-12, "position {t} moved after changing {j}");
        }
        assert!(pa[j] != pb[j]);
    }
}

#[test]
fn conditioning_changes_first_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lm = LmParams::new(LmConfig::new(20, 16), 6).unwrap();
    for _ in 0..5 {
        let e1 = randvec(&mut rng, 16, 1.0);
        let mut e2 = randvec(&mut rng, 16, 1.0);
        let dist: f64 = e1.iter().zip(&e2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist < 1.0 {
            e2[0] += 1.0;
        }
        let p1 = lm.next_token_probs(&e1, &[BOS]).unwrap();
        let p2 = lm.next_token_probs(&e2, &[BOS]).unwrap();
        let tv: f64 = p1[0].iter().zip(&p2[0]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv > 0.0);
    }
}

#[test]
fn gradient_reaches_conditioning_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lm = tiny(7, 10);
    let mut g = Graph::new();
    let vars = lm.params.bind(&mut g, true);
    let e = g.input(vec![2, 6], randvec(&mut rng, 12, 1.0), true).unwrap();
    let loss = lm.nll(&mut g, &vars, e, &[vec![4, 5, EOS], vec![6, EOS]]).unwrap();
    let grads = g.backward(loss).unwrap();
    let norm: f64 = grads.get(e).unwrap().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 1e-12);
}

#[test]
fn batched_nll_is_mean_of_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lm = tiny(8, 10);
    let (e1, e2) = (randvec(&mut rng, 6, 1.0), randvec(&mut rng, 6, 1.0));
    let (r1, r2) = (vec![4, 5, 6, EOS], vec![9, EOS]);
    let mut g = Graph::new();
    let vars = lm.params.bind(&mut g, false);
    let e = g.constant(vec![2, 6], [e1.clone(), e2.clone()].concat()).unwrap();
    let loss = lm.nll(&mut g, &vars, e, &[r1.clone(), r2.clone()]).unwrap();
    let want = (lm.rationale_nll(&e1, &r1).unwrap() + lm.rationale_nll(&e2, &r2).unwrap()) / 2.0;
    assert!((g.scalar(loss) - want).abs() <= 1e-12);
}

#[test]
fn always_eos_gives_empty_terminated_sequence() {
    let mut lm = tiny(9, 10);
    zero_output(&mut lm);
    let b = lm.out_bias_index();
    lm.params.get_mut(b).data_mut()[EOS] = 10.0;
    let s = lm.generate(&[0.5; 6], 8, Strategy::Greedy).unwrap();
    assert_eq!(
        s,
        RationaleSequence {
            tokens: vec![],
            terminated: true
        }
    );
}

#[test]
fn generation_respects_length_limit() {
    let mut lm = tiny(10, 10);
    zero_output(&mut lm);
    let b = lm.out_bias_index();
    lm.params.get_mut(b).data_mut()[7] = 10.0;
    let s = lm.generate(&[0.5; 6], 4, Strategy::Greedy).unwrap();
    assert_eq!(
        s,
        RationaleSequence {
            tokens: vec![7; 4],
            terminated: false
        }
    );
    let s = lm.generate(&[0.5; 6], 100, Strategy::Greedy).unwrap();
    assert_eq!(s.tokens.len(), lm.config.max_rationale_len());
    assert!(matches!(
        lm.generate(&[0.5; 6], 0, Strategy::Greedy),
        Err(Error::Contract(_))
    ));
    assert!(lm
        .generate(
            &[0.5; 6],
            3,
            Strategy::Sample {
                temperature: 0.0,
                seed: 0
            }
        )
        .is_err());
}

#[test]
fn greedy_emits_argmax_at_every_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let lm = tiny(11, 10);
    let e_p = randvec(&mut rng, 6, 2.0);
    let s = lm.generate(&e_p, 6, Strategy::Greedy).unwrap();
    let input: Vec<usize> = std::iter::once(BOS).chain(s.tokens.iter().copied()).collect();
    let probs = lm.next_token_probs(&e_p, &input).unwrap();
    for (t, p) in probs.iter().enumerate().take(s.tokens.len()) {
        let allowed = |i: &usize| !BLOCKED.contains(i);
        let best = (0..p.len())
            .filter(allowed)
            .fold(EOS, |a, i| if p[i] > p[a] { i } else { a });
        assert_eq!(best, s.tokens[t]);
    }
}

#[test]
fn cold_sampling_matches_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..5 {
        let lm = tiny(seed + 20, 10);
        let e_p = randvec(&mut rng, 6, 2.0);
        let greedy = lm.generate(&e_p, 8, Strategy::Greedy).unwrap();
        let cold = lm
            .generate(
                &e_p,
                8,
                Strategy::Sample {
                    temperature: 1e-9,
                    seed,
                },
            )
            .unwrap();
        assert_eq!(greedy, cold);
    }
}

#[test]
fn sampling_is_seeded() {
    let lm = tiny(13, 10);
    let e_p = [0.3; 6];
    let st = Strategy::Sample {
        temperature: 1.5,
        seed: 99,
    };
    assert_eq!(lm.generate(&e_p, 8, st).unwrap(), lm.generate(&e_p, 8, st).unwrap());
    let batch = lm.generate_batch(&[e_p.to_vec(), e_p.to_vec()], 8, st).unwrap();
    assert_eq!(batch[0], lm.generate(&e_p, 8, st).unwrap());
}

#[test]
fn batched_generation_matches_single() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let lm = tiny(14, 10);
    let es: Vec<Vec<f64>> = (0..5).map(|_| randvec(&mut rng, 6, 2.0)).collect();
    let batch = lm.generate_batch(&es, 8, Strategy::Greedy).unwrap();
    for (e, b) in es.iter().zip(&batch) {
        assert_eq!(&lm.generate(e, 8, Strategy::Greedy).unwrap(), b);
    }
}

#[test]
fn golden_greedy_sequence() {
    let lm = tiny(48, 12);
    let e_p = [0.9, -0.7, 0.5, -0.3, 0.1, 0.2];
    let s = lm.generate(&e_p, 10, Strategy::Greedy).unwrap();
    assert_eq!(s.tokens, [5, 8, 5, 5, 4]);
    assert!(s.terminated);
}

#[test]
fn overfits_fifty_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let vocab = 30;
    let mut cfg = LmConfig::new(vocab, 16);
    cfg.d_model = 32;
    cfg.ffn_hidden = 64;
    let mut lm = LmParams::new(cfg, 15).unwrap();
    let e: Vec<f64> = randvec(&mut rng, 50 * 16, 1.0);
    let targets: Vec<Vec<usize>> = (0..50)
        .map(|_| {
            let n = rng.random_range(3..8);
            let mut t: Vec<usize> = (0..n).map(|_| rng.random_range(4..vocab)).collect();
            t.push(EOS);
            t
        })
        .collect();
    let mut adam = Adam::new(&lm.params, 3e-3);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let grads = {
            let mut g = Graph::new();
            let vars = lm.params.bind(&mut g, true);
            let ev = g.constant(vec![50, 16], e.clone()).unwrap();
            let loss = lm.nll(&mut g, &vars, ev, &targets).unwrap();
            losses.push(g.scalar(loss));
            let mut grads = g.backward(loss).unwrap();
            ParamSet::extract_grads(&vars, &mut grads)
        };
        lm.params.accumulate_grads(grads).unwrap();
        adam.step(&mut lm.params).unwrap();
    }
    // Mean over each 20-step window falls.
    let windows: Vec<f64> = losses
        .chunks(20)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    let last = *losses.last().unwrap();
    assert!(last <= 0.1, "final NLL {last}");
}

#[test]
fn tags_map_to_pool_names() {
    let pool = vec!["Alex".to_string()];
    let t = crate::synthdata::toks("[person1] is running");
    assert_eq!(anonymize_tags(&t, &pool, 0).unwrap(), ["Alex", "is", "running"]);
    let plain = crate::synthdata::toks("no tags here");
    assert_eq!(anonymize_tags(&plain, &pool, 5).unwrap(), plain);
    let two = crate::synthdata::toks("[person1] and [object2]");
    assert!(matches!(anonymize_tags(&two, &pool, 0), Err(Error::Capacity(_))));
}

#[test]
fn anonymization_agrees_with_brute_force_assignments() {
    let pool: Vec<String> = ["Alex", "Sam"].iter().map(|s| s.to_string()).collect();
    let t = crate::synthdata::toks("[person1] sees [person2] and [person1] waves");
    let out = anonymize_tags(&t, &pool, 3).unwrap();
    // Every injective assignment of the two tags to pool names.
    let candidates: Vec<Vec<String>> = [(0, 1), (1, 0)]
        .iter()
        .map(|&(a, b)| {
            t.iter()
                .map(|w| match w.as_str() {
                    "[person1]" => pool[a].clone(),
                    "[person2]" => pool[b].clone(),
                    _ => w.clone(),
                })
                .collect()
        })
        .collect();
    assert!(candidates.contains(&out), "{out:?}");
    assert_eq!(out, anonymize_tags(&t, &pool, 3).unwrap());
    // Across seeds both assignments occur.
    let seen: std::collections::BTreeSet<Vec<String>> =
        (0..32).map(|s| anonymize_tags(&t, &pool, s).unwrap()).collect();
    assert_eq!(seen.len(), 2);
}

#[test]
fn entity_tag_recognition() {
    assert!(is_entity_tag("[person12]"));
    assert!(is_entity_tag("[object1]"));
    assert!(!is_entity_tag("[person]"));
    assert!(!is_entity_tag("person1"));
    assert!(!is_entity_tag("[animal1]"));
}
