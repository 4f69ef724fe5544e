//! Per-op gradient checks and softmax/cross-entropy properties.

use std::rc::Rc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

const TOL: f64 = 1e-4;

// softmax([1,2,3]) and -ln p[1], evaluated at 40 digits with mpmath.
const SOFTMAX_123: [f64; 3] = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953];
const CE_123_T1: f64 = 1.4076059644443803045;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fixed random weights turn any op output into a scalar that touches every element.
fn weighted_sum<'g>(g: &mut Graph<'g>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::randn(shape.clone(), 1.0, &mut rng(seed ^ 0xABCD));
    let wv = g.constant(shape, w.into_data())?;
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn check_at_points<F>(name: &str, shape: &[usize], op: F)
where
    F: for<'g> Fn(&mut Graph<'g>, Var, u64) -> Result<Var>,
{
    for seed in 0..10u64 {
        let point = Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed));
        let err = grad_check(|g, x| op(g, x, seed), &point).unwrap();
        assert!(err <= TOL, "{name}: seed {seed} rel err {err}");
    }
}

fn fixed(shape: &[usize], seed: u64) -> Vec<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed + 1000)).into_data()
}

#[test]
fn gradcheck_matmul() {
    check_at_points("matmul lhs", &[3, 4], |g, x, s| {
        let b = g.constant(vec![4, 2], fixed(&[4, 2], s))?;
        let y = g.matmul(x, b)?;
        weighted_sum(g, y, s)
    });
    check_at_points("matmul rhs", &[4, 2], |g, x, s| {
        let a = g.constant(vec![3, 4], fixed(&[3, 4], s))?;
        let y = g.matmul(a, x)?;
        weighted_sum(g, y, s)
    });
    check_at_points("matmul_t rhs", &[5, 4], |g, x, s| {
        let a = g.constant(vec![3, 4], fixed(&[3, 4], s))?;
        let y = g.matmul_t(a, x)?;
        weighted_sum(g, y, s)
    });
    check_at_points("matmul self", &[3, 3], |g, x, s| {
        let y = g.matmul(x, x)?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn gradcheck_elementwise() {
    check_at_points("add", &[2, 3], |g, x, s| {
        let b = g.constant(vec![2, 3], fixed(&[2, 3], s))?;
        let y = g.add(x, b)?;
        let y = g.mul(y, y)?;
        weighted_sum(g, y, s)
    });
    check_at_points("add_row", &[3], |g, x, s| {
        let a = g.constant(vec![4, 3], fixed(&[4, 3], s))?;
        let y = g.add_row(a, x)?;
        let y = g.mul(y, y)?;
        weighted_sum(g, y, s)
    });
    check_at_points("mul", &[6], |g, x, s| {
        let b = g.constant(vec![6], fixed(&[6], s))?;
        let y = g.mul(x, b)?;
        let y = g.mul(y, x)?;
        weighted_sum(g, y, s)
    });
    check_at_points("scale", &[5], |g, x, s| {
        let y = g.scale(x, -2.5);
        let y = g.mul(y, x)?;
        weighted_sum(g, y, s)
    });
    check_at_points("exp", &[5], |g, x, s| {
        let y = g.exp(x);
        weighted_sum(g, y, s)
    });
}

#[test]
fn gradcheck_gelu() {
    check_at_points("gelu", &[3, 4], |g, x, s| {
        let y = g.gelu(x);
        weighted_sum(g, y, s)
    });
}

#[test]
fn gradcheck_layer_norm() {
    check_at_points("layer_norm x", &[3, 5], |g, x, s| {
        let gain = g.constant(vec![5], fixed(&[5], s))?;
        let bias = g.constant(vec![5], fixed(&[5], s + 7))?;
        let y = g.layer_norm(x, gain, bias)?;
        weighted_sum(g, y, s)
    });
    check_at_points("layer_norm gain", &[5], |g, x, s| {
        let inp = g.constant(vec![3, 5], fixed(&[3, 5], s))?;
        let bias = g.constant(vec![5], fixed(&[5], s + 7))?;
        let y = g.layer_norm(inp, x, bias)?;
        weighted_sum(g, y, s)
    });
    check_at_points("layer_norm bias", &[5], |g, x, s| {
        let inp = g.constant(vec![3, 5], fixed(&[3, 5], s))?;
        let gain = g.constant(vec![5], fixed(&[5], s + 7))?;
        let y = g.layer_norm(inp, gain, x)?;
        let y = g.mul(y, y)?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn gradcheck_embedding_and_structure() {
    check_at_points("embedding", &[5, 3], |g, x, s| {
        let y = g.embedding(x, &[4, 0, 4, 2])?;
        let y = g.mul(y, y)?;
        weighted_sum(g, y, s)
    });
    check_at_points("concat_rows", &[2, 3], |g, x, s| {
        let other = g.constant(vec![1, 3], fixed(&[1, 3], s))?;
        let sq = g.mul(x, x)?;
        let y = g.concat_rows(&[x, other, sq])?;
        weighted_sum(g, y, s)
    });
    check_at_points("reshape", &[2, 3], |g, x, s| {
        let y = g.reshape(x, vec![3, 2])?;
        let w = g.constant(vec![2, 2], fixed(&[2, 2], s))?;
        let y = g.matmul(y, w)?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn gradcheck_softmax_family() {
    check_at_points("softmax", &[3, 4], |g, x, s| {
        let y = g.softmax(x);
        weighted_sum(g, y, s)
    });
    check_at_points("log_softmax", &[3, 4], |g, x, s| {
        let y = g.log_softmax(x);
        weighted_sum(g, y, s)
    });
    check_at_points("cross_entropy", &[3, 4], |g, x, _| {
        g.cross_entropy(x, &[1, 3, 0], &[0.5, 1.0, 2.0])
    });
    check_at_points("cross_entropy 1-row", &[1, 4], |g, x, s| {
        g.cross_entropy(x, &[(s % 4) as usize], &[1.0])
    });
}

#[test]
fn gradcheck_reductions() {
    check_at_points("sum", &[2, 3], |g, x, _| {
        let y = g.mul(x, x)?;
        Ok(g.sum(y))
    });
    check_at_points("mean", &[2, 3], |g, x, _| {
        let y = g.exp(x);
        Ok(g.mean(y))
    });
}

#[test]
fn gradcheck_attention() {
    let layout = Rc::new(AttnLayout {
        blocks: vec![AttnBlock { q: 0..3, k: 0..3 }, AttnBlock { q: 3..5, k: 1..5 }],
        causal: false,
    });
    let causal = Rc::new(AttnLayout::self_blocks(&[0..2, 2..5], true));
    for (name, lay) in [("attention", layout), ("causal attention", causal)] {
        let l1 = lay.clone();
        check_at_points(name, &[5, 4], move |g, x, s| {
            let k = g.constant(vec![5, 4], fixed(&[5, 4], s))?;
            let v = g.constant(vec![5, 4], fixed(&[5, 4], s + 3))?;
            let y = g.attention(x, k, v, 2, l1.clone())?;
            weighted_sum(g, y, s)
        });
        let l2 = lay.clone();
        check_at_points(name, &[5, 4], move |g, x, s| {
            let q = g.constant(vec![5, 4], fixed(&[5, 4], s))?;
            let v = g.constant(vec![5, 4], fixed(&[5, 4], s + 3))?;
            let y = g.attention(q, x, v, 2, l2.clone())?;
            weighted_sum(g, y, s)
        });
        let l3 = lay.clone();
        check_at_points(name, &[5, 4], move |g, x, s| {
            let y = g.attention(x, x, x, 2, l3.clone())?;
            weighted_sum(g, y, s)
        });
    }
}

#[test]
fn gradcheck_group_weighted_sum() {
    check_at_points("gws weights", &[2, 4], |g, x, s| {
        let rows = g.constant(vec![8, 3], fixed(&[8, 3], s))?;
        let y = g.group_weighted_sum(x, rows)?;
        weighted_sum(g, y, s)
    });
    check_at_points("gws rows", &[8, 3], |g, x, s| {
        let w = g.constant(vec![2, 4], fixed(&[2, 4], s))?;
        let y = g.group_weighted_sum(w, x)?;
        let y = g.mul(y, y)?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn mse_of_linear_map_matches_finite_differences() {
    // loss = mean((W·x − y)²) at random W, fixed x, y
    for seed in 0..10 {
        let w = Tensor::randn(vec![3, 4], 1.0, &mut rng(seed));
        let err = grad_check(
            |g, wv| {
                let x = g.constant(vec![4, 1], fixed(&[4, 1], seed))?;
                let y = g.constant(vec![3, 1], fixed(&[3, 1], seed + 50))?;
                let p = g.matmul(wv, x)?;
                let neg = g.scale(y, -1.0);
                let r = g.add(p, neg)?;
                let sq = g.mul(r, r)?;
                Ok(g.mean(sq))
            },
            &w,
        )
        .unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn softmax_oracle_values() {
    let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
    for (a, b) in p.iter().zip(SOFTMAX_123) {
        assert!((a - b).abs() < 1e-15);
    }
    // direct exponentiation, no max shift
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    for (a, x) in p.iter().zip(&e) {
        assert!((a - x / s).abs() < 1e-15);
    }
    let ce = cross_entropy(&[1.0, 2.0, 3.0], 1).unwrap();
    assert!((ce - CE_123_T1).abs() < 1e-14);
    assert!((ce + SOFTMAX_123[1].ln()).abs() < 1e-14);
}

#[test]
fn graph_softmax_matches_eager() {
    let mut g = Graph::new();
    let x = g.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
    let y = g.softmax(x);
    assert!(g.value(y)[..3]
        .iter()
        .zip(SOFTMAX_123)
        .all(|(a, b)| (a - b).abs() < 1e-15));
    assert!(g.value(y)[3..].iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

proptest! {
    #[test]
    fn softmax_normalised_and_shift_invariant(
        logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&logits).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0 && v <= 1.0));
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_negative_log_softmax(
        logits in proptest::collection::vec(-30.0f64..30.0, 1..10),
        t in 0usize..10,
    ) {
        let t = t % logits.len();
        let ce = cross_entropy(&logits, t).unwrap();
        let ls = log_softmax(&logits).unwrap();
        prop_assert!(ce >= 0.0);
        prop_assert!((ce + ls[t]).abs() <= 1e-12);
    }

    #[test]
    fn adam_with_zero_grads_is_identity(params in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
        let mut s = AdamState::new(params.len(), 1e-3);
        let zeros = vec![0.0; params.len()];
        let mut p = params.clone();
        for _ in 0..3 {
            s.step(&mut p, &zeros).unwrap();
        }
        prop_assert_eq!(p, params);
    }
}
