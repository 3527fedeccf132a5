//! Slice-level math shared by the recorded graph and the incremental decoder.
//!
//! Both execution paths call these routines, so a cached decode step and a
//! full teacher-forced pass perform the same floating-point operations per row.

pub const LN_EPS: f64 = 1e-5;

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`).
///
/// `a` is `m×k` (stored `k×m` when `trans_a`), `b` is `k×n` (stored `n×k`
/// when `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe the slices above, whose lengths were checked.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, false, &mut c, false);
    c
}

/// Row vector times matrix: `x (1×k) · w (k×n)`.
pub fn vecmat(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    matmul(x, w, 1, x.len(), n)
}

pub fn softmax_inplace(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn log_softmax_inplace(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in x.iter_mut() {
        *v -= lse;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Normalizes one row; returns `(mean, 1/std)` for the backward pass.
pub fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * g[i] + b[i];
    }
    (mean, rstd)
}

/// Multi-head attention of one query row over `n_keys` cached key/value rows.
///
/// `weights`, when given, receives the per-head attention distribution laid
/// out as `heads × n_keys`.
pub fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    n_keys: usize,
    heads: usize,
    out: &mut [f64],
    mut weights: Option<&mut [f64]>,
) {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    out.fill(0.0);
    if n_keys == 0 {
        return;
    }
    let mut scores = vec![0.0; n_keys];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            *s = dot(qh, kh) * scale;
        }
        softmax_inplace(&mut scores);
        let oh = &mut out[h * dh..(h + 1) * dh];
        for (j, &a) in scores.iter().enumerate() {
            let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, v) in oh.iter_mut().zip(vh) {
                *o += a * v;
            }
        }
        if let Some(w) = weights.as_deref_mut() {
            w[h * n_keys..(h + 1) * n_keys].copy_from_slice(&scores);
        }
    }
}

/// Single-head attention of `q` over the listed rows of `mem` (keys = values).
pub fn attend_memory(q: &[f64], mem: &[f64], rows: &[usize], out: &mut [f64]) -> Vec<f64> {
    let d = q.len();
    out.fill(0.0);
    if rows.is_empty() {
        return Vec::new();
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut a: Vec<f64> = rows
        .iter()
        .map(|&j| dot(q, &mem[j * d..(j + 1) * d]) * scale)
        .collect();
    softmax_inplace(&mut a);
    for (&j, &w) in rows.iter().zip(&a) {
        for (o, m) in out.iter_mut().zip(&mem[j * d..(j + 1) * d]) {
            *o += w * m;
        }
    }
    a
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Indices of the `k` largest entries; ties go to the lower index. The result
/// is returned in ascending index order so downstream sums are deterministic.
pub fn top_k_indices(p: &[f64], k: usize) -> Vec<usize> {
    if k >= p.len() {
        return (0..p.len()).collect();
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    let cmp = |a: &usize, b: &usize| p[*b].total_cmp(&p[*a]).then(a.cmp(b));
    idx.select_nth_unstable_by(k - 1, cmp);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Expectation of embedding rows under `p` restricted to its top-`k` support
/// and renormalized. Returns the selected `(index, prob)` pairs and their mass.
pub fn topk_expect_row(
    p: &[f64],
    table: &[f64],
    d: usize,
    k: usize,
    out: &mut [f64],
) -> (Vec<(usize, f64)>, f64) {
    expect_over(p, table, d, &top_k_indices(p, k), out)
}

/// Expectation of embedding rows under `p` restricted to `sel` and renormalized.
pub fn expect_over(
    p: &[f64],
    table: &[f64],
    d: usize,
    sel: &[usize],
    out: &mut [f64],
) -> (Vec<(usize, f64)>, f64) {
    let mass: f64 = sel.iter().map(|&j| p[j]).sum();
    out.fill(0.0);
    let mut picked = Vec::with_capacity(sel.len());
    for &j in sel {
        let c = p[j] / mass;
        for (o, e) in out.iter_mut().zip(&table[j * d..(j + 1) * d]) {
            *o += c * e;
        }
        picked.push((j, p[j]));
    }
    (picked, mass)
}

/// Lowest index among the maxima.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
