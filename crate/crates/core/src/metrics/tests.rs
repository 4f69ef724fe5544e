use super::*;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::Error;
use crate::rationale_lm::{LmConfig, LmParams};
use crate::synthdata::{build_dataset, Vocabulary};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

// Independent oracles: n-gram lists scanned linearly, LCS by enumerating
// every subsequence of the shorter side.

fn naive_overlap(c: &[String], r: &[String], n: usize) -> usize {
    if c.len() < n || r.len() < n {
        return 0;
    }
    let mut pool: Vec<&[String]> = r.windows(n).collect();
    let mut hit = 0;
    for g in c.windows(n) {
        if let Some(pos) = pool.iter().position(|x| *x == g) {
            pool.remove(pos);
            hit += 1;
        }
    }
    hit
}

fn naive_bleu(c: &[Vec<String>], r: &[Vec<String>], max_n: usize) -> f64 {
    let mut prod = 1.0;
    for n in 1..=max_n {
        let mut m = 0;
        let mut t = 0;
        for (a, b) in c.iter().zip(r) {
            m += naive_overlap(a, b, n);
            if a.len() >= n {
                t += a.len() - n + 1;
            }
        }
        if m == 0 {
            return 0.0;
        }
        prod *= m as f64 / t as f64;
    }
    let cl: usize = c.iter().map(Vec::len).sum();
    let rl: usize = r.iter().map(Vec::len).sum();
    let bp = if cl >= rl {
        1.0
    } else {
        (1.0 - rl as f64 / cl as f64).exp()
    };
    100.0 * bp * prod.powf(1.0 / max_n as f64)
}

fn is_subsequence<T: PartialEq>(sub: &[T], s: &[T]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

fn brute_lcs<T: PartialEq + Clone>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<T> = (0..short.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| short[i].clone())
            .collect();
        if sub.len() > best && is_subsequence(&sub, long) {
            best = sub.len();
        }
    }
    best
}

fn naive_f1(o: usize, c: usize, r: usize) -> f64 {
    if o == 0 {
        0.0
    } else {
        let (p, rc) = (o as f64 / c as f64, o as f64 / r as f64);
        100.0 * 2.0 * p * rc / (p + rc)
    }
}

fn fixture_pairs() -> Vec<(Vec<String>, Vec<String>)> {
    let words = ["the", "cat", "sat", "on", "mat", "a", "dog", "red", "is", "because"];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..20)
        .map(|_| {
            let lc = rng.random_range(1..10);
            let lr = rng.random_range(1..10);
            let c = (0..lc).map(|_| words[rng.random_range(0..6)].to_string()).collect();
            let r = (0..lr)
                .map(|_| words[rng.random_range(0..words.len())].to_string())
                .collect();
            (c, r)
        })
        .collect()
}

#[test]
fn bleu_cases() {
    let a = vec![w("the cat sat down"), w("a dog")];
    assert!((bleu(&a, &a, 4).unwrap() - 100.0).abs() <= 1e-12);
    assert_eq!(bleu(&[w("x y z")], &[w("a b c")], 1).unwrap(), 0.0);
    let v = bleu(&[w("the cat sat")], &[w("the cat sat down")], 1).unwrap();
    assert!((v - 71.653).abs() <= 5e-4, "{v}");
    assert!((v - 100.0 * (-1.0f64 / 3.0).exp()).abs() <= 1e-12);
    // A missing 4-gram zeroes unsmoothed BLEU-4.
    assert_eq!(bleu(&[w("the cat sat")], &[w("the cat sat")], 4).unwrap(), 0.0);
    assert!(matches!(bleu::<String>(&[], &[], 1), Err(Error::Contract(_))));
    assert!(matches!(bleu(&[w("a")], &[], 1), Err(Error::Contract(_))));
}

#[test]
fn rouge_cases() {
    let v = rouge_n(&w("a b c"), &w("a c d"), 1).unwrap();
    assert!((v - 200.0 / 3.0).abs() <= 1e-12);
    assert!((v - 66.67).abs() <= 5e-3);
    assert_eq!(rouge_n(&w("a b"), &w("a b"), 2).unwrap(), 100.0);
    assert_eq!(rouge_n(&w("a"), &w("a b"), 2).unwrap(), 0.0);
    assert_eq!(rouge_n(&w("x y"), &w("a b"), 1).unwrap(), 0.0);
    assert!(rouge_n(&w("a"), &w("a"), 0).is_err());
    assert_eq!(rouge_l(&w("a b c d"), &w("a c b d")), 75.0);
    assert_eq!(rouge_l(&w("a b c"), &w("a b c")), 100.0);
    assert_eq!(rouge_l(&[] as &[String], &w("a b")), 0.0);
}

#[test]
fn metrics_match_brute_force_on_fixture() {
    let pairs = fixture_pairs();
    let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    for n in [1, 2, 4] {
        let got = bleu(&c, &r, n).unwrap();
        let want = naive_bleu(&c, &r, n);
        assert!((got - want).abs() <= 1e-9, "BLEU-{n}: {got} vs {want}");
    }
    for (a, b) in &pairs {
        let want1 = naive_f1(naive_overlap(a, b, 1), a.len(), b.len());
        assert!((rouge_n(a, b, 1).unwrap() - want1).abs() <= 1e-9);
        assert!((rouge_l(a, b) - naive_f1(brute_lcs(a, b), a.len(), b.len())).abs() <= 1e-9);
    }
    let mean1: f64 = pairs.iter().map(|(a, b)| rouge_n(a, b, 1).unwrap()).sum::<f64>() / 20.0;
    assert!((mean_rouge_n(&c, &r, 1).unwrap() - mean1).abs() <= 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn lcs_agrees_with_brute_force(a in proptest::collection::vec(0u8..4, 0..=8), b in proptest::collection::vec(0u8..4, 0..=8)) {
        prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
    }

    #[test]
    fn bounds_and_self_similarity(a in proptest::collection::vec(0u8..6, 1..10), b in proptest::collection::vec(0u8..6, 1..10)) {
        for v in [bleu(&[a.clone()], &[b.clone()], 1).unwrap(), rouge_n(&a, &b, 1).unwrap(), rouge_l(&a, &b)] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert_eq!(rouge_n(&a, &a, 1).unwrap(), 100.0);
        prop_assert_eq!(rouge_l(&a, &a), 100.0);
    }

    #[test]
    fn appending_a_matching_token_never_lowers_bleu1(r in proptest::collection::vec(0u8..5, 2..12), keep in proptest::collection::vec(any::<bool>(), 12), pick in 0usize..12) {
        let cand: Vec<u8> = r.iter().zip(&keep).filter(|(_, k)| **k).map(|(t, _)| *t).collect();
        prop_assume!(!cand.is_empty() && cand.len() < r.len());
        // Tokens of the reference not yet used by the candidate.
        let mut spare = r.clone();
        for t in &cand {
            let p = spare.iter().position(|x| x == t).unwrap();
            spare.remove(p);
        }
        let mut longer = cand.clone();
        longer.push(spare[pick % spare.len()]);
        let before = bleu(&[cand], &[r.clone()], 1).unwrap();
        let after = bleu(&[longer], &[r], 1).unwrap();
        prop_assert!(after >= before - 1e-12, "{before} -> {after}");
    }
}

fn toy_table() -> EmbeddingTable {
    let vocab = Vocabulary::from_list(
        ["<pad>", "<bos>", "<eos>", "<sep>", "a", "b", "c"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )
    .unwrap();
    let rows = vec![
        vec![9.0, 9.0],
        vec![9.0, 9.0],
        vec![9.0, 9.0],
        vec![9.0, 9.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![1.0, 1.0],
    ];
    EmbeddingTable::new(vocab, rows).unwrap()
}

#[test]
fn cosine_cases() {
    let t = toy_table();
    assert!((sentence_cosine(&[w("a c")], &[w("a c")], &t).unwrap() - 1.0).abs() <= 1e-15);
    assert_eq!(sentence_cosine(&[w("a a")], &[w("b")], &t).unwrap(), 0.0);
    // Specials are skipped, so these are the same sentence.
    assert!((sentence_cosine(&[w("<bos> a <eos>")], &[w("a")], &t).unwrap() - 1.0).abs() <= 1e-15);
    assert_eq!(sentence_cosine(&[w("<eos>")], &[w("a")], &t).unwrap(), 0.0);
    // An unknown token maps to the mean row.
    let u = t.sentence_vector(&w("zebra"));
    assert!((u[0] - 38.0 / 7.0).abs() <= 1e-12 && (u[1] - 38.0 / 7.0).abs() <= 1e-12);
}

#[test]
fn cosine_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vocab = Vocabulary::from_tokens(w("a b c d e").iter());
    let rows: Vec<Vec<f64>> = (0..vocab.len())
        .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let t = EmbeddingTable::new(vocab.clone(), rows.clone()).unwrap();
    let (c, r) = (w("a b b e"), w("c d a"));
    let mean = |s: &[String]| -> Vec<f64> {
        let mut v = vec![0.0; 6];
        for tok in s {
            let row = &rows[vocab.id(tok).unwrap()];
            for k in 0..6 {
                v[k] += row[k] / s.len() as f64;
            }
        }
        v
    };
    let (x, y) = (mean(&c), mean(&r));
    let dot: f64 = (0..6).map(|k| x[k] * y[k]).sum();
    let nx = (0..6).map(|k| x[k] * x[k]).sum::<f64>().sqrt();
    let ny = (0..6).map(|k| y[k] * y[k]).sum::<f64>().sqrt();
    let got = sentence_cosine(&[c], &[r], &t).unwrap();
    assert!((got - dot / (nx * ny)).abs() <= 1e-14);
}

#[test]
fn accuracy_cases() {
    assert_eq!(vqa_accuracy(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 100.0);
    assert_eq!(vqa_accuracy(&[1, 2, 3, 0], &[0, 1, 2, 3]).unwrap(), 0.0);
    assert_eq!(vqa_accuracy(&[0, 2, 3, 0], &[0, 1, 2, 3]).unwrap(), 25.0);
    assert!(matches!(vqa_accuracy(&[], &[]), Err(Error::Contract(_))));
}

fn sheet_from(patterns: &[(&str, usize)]) -> JudgeSheet {
    let mut s = JudgeSheet::new();
    let mut item = 0;
    for (pat, count) in patterns {
        for _ in 0..*count {
            for (j, c) in pat.chars().enumerate() {
                let p = if c == 'b' {
                    Preference::ModelB
                } else {
                    Preference::ModelA
                };
                s.insert(&format!("i{item:03}"), &format!("H-{}", j + 1), p).unwrap();
            }
            item += 1;
        }
    }
    s
}

#[test]
fn judge_unanimous() {
    let r = judge_aggregate(&sheet_from(&[("bbb", 5)])).unwrap();
    assert_eq!(r.per_judge_b, vec![100.0; 3]);
    assert_eq!(r.per_judge_a, vec![0.0; 3]);
    assert_eq!((r.majority_a, r.majority_b, r.majority_tie), (0.0, 100.0, 0.0));
}

#[test]
fn judge_hand_sheet_matches_count() {
    let csv = "item_id,judge_id,preference\n\
        q1,j1,b\nq1,j2,b\nq1,j3,a\n\
        q2,j1,a\nq2,j2,a\nq2,j3,a\n\
        q3,j1,b\nq3,j2,a\nq3,j3,b\n\
        q4,j1,b\nq4,j2,a\nq4,j3,a\n";
    let sheet = JudgeSheet::from_reader(csv.as_bytes()).unwrap();
    let r = judge_aggregate(&sheet).unwrap();
    // j1: q1,q3,q4 -> 75; j2: q1 -> 25; j3: q3 -> 25; majority b: q1,q3 -> 50.
    assert_eq!(r.judges, vec!["j1", "j2", "j3"]);
    assert_eq!(r.per_judge_b, vec![75.0, 25.0, 25.0]);
    assert_eq!((r.majority_b, r.majority_a, r.majority_tie), (50.0, 50.0, 0.0));
}

#[test]
fn judge_table_layout() {
    // 100 items whose counts give 69/71/62 per judge and 80 by majority.
    let sheet = sheet_from(&[("bbb", 22), ("bba", 18), ("bab", 9), ("abb", 31), ("baa", 20)]);
    let r = judge_aggregate(&sheet).unwrap();
    assert_eq!(
        r.to_csv(),
        "model,H-1,H-2,H-3,Majority Voting\nmodel_a,31,29,38,20\nmodel_b,69,71,62,80\ntie,0,0,0,0\n"
    );
}

#[test]
fn judge_errors() {
    let csv = "item_id,judge_id,preference\nq1,j1,a\nq1,j2,b\nq2,j1,a\n";
    let err = judge_aggregate(&JudgeSheet::from_reader(csv.as_bytes()).unwrap()).unwrap_err();
    assert!(
        matches!(err, Error::Validation(ref m) if m.contains("(q2, j2)")),
        "{err}"
    );
    let dup = "item_id,judge_id,preference\nq1,j1,a\nq1,j1,b\n";
    assert!(matches!(
        JudgeSheet::from_reader(dup.as_bytes()),
        Err(Error::Parse { line: 3, .. })
    ));
    let bad = "item_id,judge_id,preference\nq1,j1,c\n";
    assert!(matches!(
        JudgeSheet::from_reader(bad.as_bytes()),
        Err(Error::Parse { line: 2, .. })
    ));
    let hdr = "item,judge,pref\nq1,j1,a\n";
    assert!(matches!(
        JudgeSheet::from_reader(hdr.as_bytes()),
        Err(Error::Parse { line: 1, .. })
    ));
    assert!(judge_aggregate(&JudgeSheet::new()).is_err());
}

#[test]
fn even_judge_count_uses_tie_bucket() {
    let r = judge_aggregate(&sheet_from(&[("ab", 1), ("bb", 1), ("aa", 2)])).unwrap();
    assert_eq!((r.majority_a, r.majority_b, r.majority_tie), (50.0, 25.0, 25.0));
}

proptest! {
    #[test]
    fn judge_columns_sum_to_100(votes in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 3), 1..30)) {
        let mut s = JudgeSheet::new();
        for (i, row) in votes.iter().enumerate() {
            for (j, &b) in row.iter().enumerate() {
                let p = if b { Preference::ModelB } else { Preference::ModelA };
                s.insert(&i.to_string(), &j.to_string(), p).unwrap();
            }
        }
        let r = judge_aggregate(&s).unwrap();
        for (a, b) in r.per_judge_a.iter().zip(&r.per_judge_b) {
            prop_assert!((a + b - 100.0).abs() <= 1e-9);
        }
        prop_assert!((r.majority_a + r.majority_b + r.majority_tie - 100.0).abs() <= 1e-9);
        prop_assert_eq!(r.majority_tie, 0.0);
    }
}

fn tiny_models(n_val: usize) -> (EncoderParams, LmParams, crate::synthdata::DatasetSplit) {
    let d = build_dataset(4, n_val, 3).unwrap();
    let mut ec = EncoderConfig::new(d.vocabulary.len());
    ec.d_model = 8;
    ec.layers = 1;
    ec.heads = 2;
    ec.ffn_hidden = 16;
    let enc = EncoderParams::new(ec, 1).unwrap();
    let mut lc = LmConfig::new(d.vocabulary.len(), 8);
    lc.d_model = 8;
    lc.layers = 1;
    lc.heads = 2;
    lc.ffn_hidden = 16;
    let lm = LmParams::new(lc, 2).unwrap();
    (enc, lm, d)
}

#[test]
fn gold_echo_scores_perfectly() {
    let (enc, lm, d) = tiny_models(10);
    let ev = evaluate_model(&enc, &lm, &d.vocabulary, &d.val, RationaleSource::Gold).unwrap();
    let r = &ev.report;
    assert_eq!((r.bleu1, r.bleu4, r.rouge1, r.rouge_l), (100.0, 100.0, 100.0, 100.0));
    assert!((r.cosine - 1.0).abs() <= 1e-12);
    assert_eq!(ev.records.len(), 10);
}

#[test]
fn untrained_model_is_near_chance() {
    let (enc, lm, d) = tiny_models(10);
    let ev = evaluate_model(&enc, &lm, &d.vocabulary, &d.val, RationaleSource::Generated).unwrap();
    assert!(ev.report.bleu4 <= 5.0, "{:?}", ev.report);
    let bigger = d.vocabulary.with_extra(&["zebra"]);
    let err = evaluate_model(&enc, &lm, &bigger, &d.val, RationaleSource::Generated).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}

#[test]
fn golden_report() {
    let (enc, lm, d) = tiny_models(10);
    let ev = evaluate_model(&enc, &lm, &d.vocabulary, &d.val, RationaleSource::Generated).unwrap();
    let json = serde_json::to_string(&ev.report).unwrap();
    assert_eq!(json, GOLDEN_REPORT, "{json}");
    let again = evaluate_model(&enc, &lm, &d.vocabulary, &d.val, RationaleSource::Generated).unwrap();
    assert_eq!(ev, again);
}

const GOLDEN_REPORT: &str = r#"{"bleu1":5.000000000000001,"bleu4":0.0,"rouge1":7.106481481481483,"rougeL":6.481481481481481,"cosine":0.28627311363068386,"vqa_accuracy":40.0,"n_samples":10}"#;
