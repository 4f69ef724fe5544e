//! Plain-slice numeric kernels shared by the tape ops and the eager helpers.

use crate::error::{Error, Result};

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("softmax input is not finite".into()));
    }
    Ok(())
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let mut out = logits.to_vec();
    log_softmax_in_place(&mut out);
    Ok(out)
}

/// `-log softmax(logits)[target]`, computed through log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    check_logits(logits)?;
    if target >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(logsumexp(logits) - logits[target])
}

pub(crate) fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    x.iter_mut().for_each(|v| *v *= inv);
}

pub(crate) fn log_softmax_in_place(x: &mut [f64]) {
    let lse = logsumexp(x);
    x.iter_mut().for_each(|v| *v -= lse);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Strided view of a row-major matrix stored in a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn dense(cols: usize) -> Self {
        MatView {
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a dense matrix with `cols` columns.
    pub fn dense_t(cols: usize) -> Self {
        MatView {
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }
}

/// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n` given as strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    beta: f64,
    c: &mut [f64],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    // matrixmultiply reads exactly the elements addressed by the strides.
    let a_last = av.offset + (m - 1) * av.rs + k.saturating_sub(1) * av.cs;
    let b_last = bv.offset + k.saturating_sub(1) * bv.rs + (n - 1) * bv.cs;
    let c_last = cv.offset + (m - 1) * cv.rs + (n - 1) * cv.cs;
    assert!(k == 0 || (a_last < a.len() && b_last < b.len()));
    assert!(c_last < c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[cv.offset + i * cv.rs + j * cv.cs] *= beta;
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Dense `c = op(a) · op(b) + beta · c`; `a_t`/`b_t` mean the stored matrix is the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let av = if a_t { MatView::dense_t(m) } else { MatView::dense(k) };
    let bv = if b_t { MatView::dense_t(k) } else { MatView::dense(n) };
    gemm_view(m, k, n, a, av, b, bv, beta, c, MatView::dense(n));
}
