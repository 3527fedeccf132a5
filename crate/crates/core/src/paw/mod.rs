//! Parafovea-attention window: adaptive lookahead, multi-horizon preview
//! distributions, preview embeddings and their compression into `z`.

use serde::{Deserialize, Serialize};

use crate::error::{FbsError, Result};
use crate::numerics::kernels::{self, sigmoid};
use crate::numerics::{Graph, Tensor, Var};

/// How the lookahead span is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    Dynamic,
    Fixed(usize),
}

/// Compression of the horizon sequence into one preview vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compression {
    #[default]
    Conv,
    Mean,
    Linear,
    None,
}

/// Window state of one position.
#[derive(Clone, Debug, PartialEq)]
pub struct PreviewState {
    pub s: f64,
    pub k_tilde: f64,
    pub k: usize,
    /// Hard inclusion weights `1[r ≤ k]`, length `k_max`.
    pub w: Vec<f64>,
    pub z: Vec<f64>,
}

/// Window score and span for one state.
///
/// ```
/// use fbs_core::paw::{predict_window, WindowMode};
///
/// let st = predict_window(&[0.0, 0.0], &[1.0, -1.0], 15, WindowMode::Dynamic).unwrap();
/// assert_eq!((st.k_tilde, st.k), (7.5, 7));
/// ```
pub fn predict_window(h: &[f64], u: &[f64], k_max: usize, mode: WindowMode) -> Result<PreviewState> {
    let (s, k_tilde, k) = match mode {
        WindowMode::Dynamic => {
            if h.len() != u.len() {
                return Err(FbsError::Shape(format!(
                    "window scorer has {} entries, state has {}",
                    u.len(),
                    h.len()
                )));
            }
            let s = kernels::dot(h, u);
            let kt = k_max as f64 * sigmoid(s);
            (s, kt, (kt.floor() as usize).min(k_max))
        }
        WindowMode::Fixed(k) => {
            if k > k_max {
                return Err(FbsError::invalid(format!("fixed window {k} exceeds k_max {k_max}")));
            }
            (0.0, k as f64, k)
        }
    };
    Ok(PreviewState {
        s,
        k_tilde,
        k,
        w: hard_window_weights(k, k_max),
        z: if k_max == 0 { Vec::new() } else { vec![0.0; h.len()] },
    })
}

/// `w_r = σ(γ(k̃ − r + 0.5))` for `r = 1..=k_max`.
pub fn soft_window_weights(k_tilde: f64, k_max: usize, gamma: f64) -> Vec<f64> {
    (1..=k_max)
        .map(|r| sigmoid(gamma * (k_tilde - r as f64 + 0.5)))
        .collect()
}

pub fn hard_window_weights(k: usize, k_max: usize) -> Vec<f64> {
    (1..=k_max).map(|r| if r <= k { 1.0 } else { 0.0 }).collect()
}

/// Distribution over the `r`-th next token from `heads` (`d × k_max·V`).
pub fn preview_distributions(h: &[f64], heads: &Tensor, vocab: usize, r: usize) -> Result<Vec<f64>> {
    let (d, w) = heads.dims2();
    if vocab == 0 || w % vocab != 0 || d != h.len() {
        return Err(FbsError::Shape(format!("preview heads {:?} for state of {}", heads.shape(), h.len())));
    }
    let k_max = w / vocab;
    if r == 0 || r > k_max {
        return Err(FbsError::invalid(format!("horizon {r} outside 1..={k_max}")));
    }
    let mut logits = vec![0.0; vocab];
    for (i, hi) in h.iter().enumerate() {
        let row = &heads.data()[i * w + (r - 1) * vocab..i * w + r * vocab];
        for (l, x) in logits.iter_mut().zip(row) {
            *l += hi * x;
        }
    }
    kernels::softmax_inplace(&mut logits);
    Ok(logits)
}

/// `Eᵀ p̂` with `p̂` the top-`K` truncation of `p`, renormalized.
pub fn preview_embed(p: &[f64], embedding: &Tensor, k_top: usize) -> Result<Vec<f64>> {
    let (v, d) = embedding.dims2();
    if p.len() != v || k_top == 0 {
        return Err(FbsError::Shape(format!("distribution of {} over table {:?}", p.len(), embedding.shape())));
    }
    let mut out = vec![0.0; d];
    kernels::topk_expect_row(p, embedding.data(), d, k_top, &mut out);
    Ok(out)
}

/// Learned tensors used by a compression mode.
#[derive(Clone, Copy, Debug)]
pub enum CompressionVars {
    /// Depthwise kernel, `3×d`.
    Conv(Var),
    Mean,
    /// Shared projection, `d×d`.
    Linear(Var),
    /// Projection of the concatenated horizons, `k_max·d × d`.
    None(Var),
}

/// Compresses `n × (k_max·d)` pre-masked horizon embeddings; `w` is the
/// `n × k_max` weight matrix already applied to them.
pub fn compress_graph(g: &mut Graph, scaled: Var, w: Var, k_max: usize, comp: CompressionVars) -> Result<Var> {
    if let CompressionVars::None(p) = comp {
        return g.matmul(scaled, p);
    }
    let pooled = match comp {
        CompressionVars::Conv(kernel) => {
            let c = g.horizon_conv(scaled, kernel, k_max)?;
            g.block_sum(c, k_max)?
        }
        CompressionVars::Mean => g.block_sum(scaled, k_max)?,
        CompressionVars::Linear(p) => {
            let s = g.block_sum(scaled, k_max)?;
            g.matmul(s, p)?
        }
        CompressionVars::None(_) => unreachable!(),
    };
    let total = g.row_sum(w);
    // rows with no mass divide by one so they stay exactly zero
    let guard: Vec<f64> = g.value(total).data().iter().map(|&s| if s == 0.0 { 1.0 } else { 0.0 }).collect();
    let n = guard.len();
    let guard = g.constant(Tensor::new(vec![n, 1], guard)?);
    let denom = g.add(total, guard)?;
    g.div_col(pooled, denom)
}

/// Standalone compression of horizon embeddings `u_hat[r]` under weights `w`.
///
/// `params` holds the learned tensor for conv (`3×d`), linear (`d×d`) and
/// none (`k_max·d × d`); it is ignored in mean mode.
pub fn compress_preview(u_hat: &[Vec<f64>], w: &[f64], mode: Compression, params: Option<&Tensor>) -> Result<Vec<f64>> {
    let k_max = u_hat.len();
    if w.len() != k_max {
        return Err(FbsError::Shape(format!("{} weights for {k_max} horizons", w.len())));
    }
    let d = u_hat.first().map_or(0, Vec::len);
    if k_max == 0 {
        return Ok(vec![0.0; d]);
    }
    let mut g = Graph::new();
    let flat: Vec<f64> = u_hat.iter().zip(w).flat_map(|(u, &wr)| u.iter().map(move |x| x * wr)).collect();
    let scaled = g.constant(Tensor::new(vec![1, k_max * d], flat)?);
    let wv = g.constant(Tensor::new(vec![1, k_max], w.to_vec())?);
    let need = |p: Option<&Tensor>| p.cloned().ok_or_else(|| FbsError::invalid("compression mode needs its parameter"));
    let comp = match mode {
        Compression::Mean => CompressionVars::Mean,
        Compression::Conv => CompressionVars::Conv(g.constant(need(params)?)),
        Compression::Linear => CompressionVars::Linear(g.constant(need(params)?)),
        Compression::None => CompressionVars::None(g.constant(need(params)?)),
    };
    let z = compress_graph(&mut g, scaled, wv, k_max, comp)?;
    Ok(g.value(z).data().to_vec())
}

/// Weighted cross-entropy of horizon predictions, normalized by total
/// in-range weight.
///
/// `log_p` is `n × (k_max·V)` log-probabilities for rows at sequence
/// positions `positions`; the target of horizon `r` at position `i` is
/// `tokens[i + r]`. Weights are constants, so no gradient reaches them.
pub fn preview_loss_graph(
    g: &mut Graph,
    log_p: Var,
    positions: &[usize],
    tokens: &[usize],
    w: &[f64],
    vocab: usize,
) -> Result<Var> {
    let (n, width) = g.value(log_p).dims2();
    let k_max = width / vocab.max(1);
    if positions.len() != n || w.len() != n * k_max {
        return Err(FbsError::Shape("preview loss: rows, positions and weights disagree".into()));
    }
    let mut picks = Vec::new();
    let mut total = 0.0;
    for (row, &i) in positions.iter().enumerate() {
        for r in 1..=k_max {
            let wr = w[row * k_max + r - 1];
            if i + r < tokens.len() && wr > 0.0 {
                picks.push((row, (r - 1) * vocab + tokens[i + r], wr));
                total += wr;
            }
        }
    }
    if total == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    for p in &mut picks {
        p.2 = -p.2 / total;
    }
    g.pick(log_p, picks)
}

/// Value-level preview loss over explicit distributions `p[i][r-1]`.
pub fn preview_loss(p: &[Vec<Vec<f64>>], tokens: &[usize], w: &[Vec<f64>]) -> Result<f64> {
    let n = p.len();
    let k_max = p.first().map_or(0, Vec::len);
    let vocab = p.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if k_max == 0 || vocab == 0 {
        return Ok(0.0);
    }
    let mut flat = Vec::with_capacity(n * k_max * vocab);
    for row in p {
        for dist in row {
            flat.extend(dist.iter().map(|&x| x.ln()));
        }
    }
    let mut g = Graph::new();
    let lp = g.constant(Tensor::new(vec![n, k_max * vocab], flat)?);
    let positions: Vec<usize> = (0..n).collect();
    let wf: Vec<f64> = w.iter().flatten().copied().collect();
    let l = preview_loss_graph(&mut g, lp, &positions, tokens, &wf, vocab)?;
    Ok(g.value(l).item())
}

/// Graph handles of one layer's PAW parameters.
#[derive(Clone, Copy, Debug)]
pub struct PawVars {
    pub u: Var,
    pub heads: Var,
    pub embedding: Var,
    pub comp: CompressionVars,
}

/// Static knobs of the preview computation.
#[derive(Clone, Copy, Debug)]
pub struct PawSettings {
    pub k_max: usize,
    pub k_top: usize,
    pub vocab: usize,
    pub gamma: f64,
    pub mode: WindowMode,
    /// Soft sigmoid windows (training) instead of hard indicators.
    pub soft: bool,
}

/// Everything one PAW pass produces for `n` rows.
#[derive(Clone, Debug)]
pub struct PreviewBlock {
    pub z: Var,
    pub log_p: Var,
    pub k_tilde: Vec<f64>,
    pub k: Vec<usize>,
    /// Weights actually applied, `n × k_max` row-major.
    pub w: Vec<f64>,
    /// Top-K support per (row, horizon), row-major.
    pub support: Vec<Vec<usize>>,
}

/// Runs the preview pipeline on states `x` (`n×d`). Each row depends only on
/// itself, so the result is prefix-only whenever `x` is.
pub fn preview_graph(
    g: &mut Graph,
    x: Var,
    vars: PawVars,
    set: PawSettings,
    pinned: Option<&[Vec<usize>]>,
) -> Result<PreviewBlock> {
    let (n, d) = g.value(x).dims2();
    let (k_max, v) = (set.k_max, set.vocab);
    if k_max == 0 {
        let z = g.zeros(&[n, d]);
        let log_p = g.zeros(&[n, 0]);
        return Ok(PreviewBlock {
            z,
            log_p,
            k_tilde: vec![0.0; n],
            k: vec![0; n],
            w: Vec::new(),
            support: Vec::new(),
        });
    }
    let (w_var, k_tilde, k) = match set.mode {
        WindowMode::Fixed(k) => {
            if k > k_max {
                return Err(FbsError::invalid(format!("fixed window {k} exceeds k_max {k_max}")));
            }
            let row = hard_window_weights(k, k_max);
            let w: Vec<f64> = (0..n).flat_map(|_| row.iter().copied()).collect();
            (g.constant(Tensor::new(vec![n, k_max], w)?), vec![k as f64; n], vec![k; n])
        }
        WindowMode::Dynamic => {
            let s = g.matmul(x, vars.u)?;
            let sig = g.sigmoid(s);
            let kt = g.scale(sig, k_max as f64);
            let k_tilde = g.value(kt).data().to_vec();
            let k: Vec<usize> = k_tilde.iter().map(|t| (t.floor() as usize).min(k_max)).collect();
            let w = if set.soft {
                let ones = g.constant(Tensor::full(&[1, k_max], 1.0));
                let spread = g.matmul(kt, ones)?;
                let off: Vec<f64> = (1..=k_max).map(|r| 0.5 - r as f64).collect();
                let off = g.constant(Tensor::new(vec![k_max], off)?);
                let shifted = g.add_row(spread, off)?;
                let sharp = g.scale(shifted, set.gamma);
                g.sigmoid(sharp)
            } else {
                let w: Vec<f64> = k.iter().flat_map(|&ki| hard_window_weights(ki, k_max)).collect();
                g.constant(Tensor::new(vec![n, k_max], w)?)
            };
            (w, k_tilde, k)
        }
    };
    let logits = g.matmul(x, vars.heads)?;
    let log_p = g.log_softmax_blocks(logits, v)?;
    let p = g.softmax_blocks(logits, v)?;
    let p_rows = g.reshape(p, &[n * k_max, v])?;
    let u_rows = g.topk_expect_pinned(p_rows, vars.embedding, set.k_top, pinned)?;
    let support = g.topk_support(u_rows).unwrap_or_default();
    let u_flat = g.reshape(u_rows, &[n, k_max * d])?;
    let mut spread = vec![0.0; k_max * k_max * d];
    for r in 0..k_max {
        spread[r * k_max * d + r * d..r * k_max * d + (r + 1) * d].fill(1.0);
    }
    let spread = g.constant(Tensor::new(vec![k_max, k_max * d], spread)?);
    let w_wide = g.matmul(w_var, spread)?;
    let scaled = g.mul(u_flat, w_wide)?;
    let z = compress_graph(g, scaled, w_var, k_max, vars.comp)?;
    Ok(PreviewBlock {
        z,
        log_p,
        k_tilde,
        k,
        w: g.value(w_var).data().to_vec(),
        support,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_examples() {
        let st = predict_window(&[0.0; 3], &[0.3; 3], 15, WindowMode::Dynamic).unwrap();
        assert_eq!(st.k, 7);
        assert!((st.k_tilde - 7.5).abs() < 1e-12);
        let st = predict_window(&[1.0; 3], &[0.3; 3], 9, WindowMode::Fixed(8)).unwrap();
        assert_eq!(st.k, 8);
        assert!(predict_window(&[1.0], &[1.0], 9, WindowMode::Fixed(10)).is_err());
        let st = predict_window(&[5.0], &[1.0], 0, WindowMode::Dynamic).unwrap();
        assert_eq!(st.k, 0);
        assert!(st.w.is_empty());
    }

    #[test]
    fn soft_weight_examples() {
        let w = soft_window_weights(2.0, 4, 1.0);
        assert!((w[0] - 1.0 / (1.0 + (-1.5f64).exp())).abs() < 1e-12);
        assert!((w[0] - 0.8176).abs() < 1e-4);
        assert!((w[2] - 0.3775).abs() < 1e-4);
        assert!(w.windows(2).all(|p| p[0] > p[1]));
        let hard = soft_window_weights(2.0, 4, 200.0);
        assert!(hard.iter().zip([1.0, 1.0, 0.0, 0.0]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn zero_heads_give_uniform() {
        let heads = Tensor::zeros(&[3, 2 * 7]);
        let p = preview_distributions(&[0.4, -1.0, 2.0], &heads, 7, 2).unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 7.0).abs() < 1e-15));
        assert!(preview_distributions(&[0.0; 3], &heads, 7, 3).is_err());
    }

    #[test]
    fn preview_embed_examples() {
        let e = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0], vec![-1.0, 6.0]]).unwrap();
        for k in 1..=4 {
            assert_eq!(preview_embed(&[0.0, 0.0, 1.0, 0.0], &e, k).unwrap(), vec![5.0, 0.0]);
        }
        // column means: (1+3+5-1)/4, (2+4+0+6)/4
        let u = preview_embed(&[0.25; 4], &e, 4).unwrap();
        assert!((u[0] - 2.0).abs() < 1e-12 && (u[1] - 3.0).abs() < 1e-12);
        assert_eq!(preview_embed(&[0.1, 0.5, 0.2, 0.2], &e, 1).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn compression_examples() {
        let u = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![7.0, 7.0]];
        let z = compress_preview(&u, &[1.0, 1.0, 0.0], Compression::Mean, None).unwrap();
        assert_eq!(z, vec![1.0, 2.0]);
        let ident = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let lin = Tensor::eye(2);
        for (mode, p) in [(Compression::Mean, None), (Compression::Conv, Some(&ident)), (Compression::Linear, Some(&lin))] {
            assert_eq!(compress_preview(&u, &[0.0; 3], mode, p).unwrap(), vec![0.0, 0.0]);
        }
        // identity taps: conv equals mean on constant horizons
        let c = vec![vec![0.5, -3.0]; 3];
        let w = [1.0, 0.6, 0.2];
        let a = compress_preview(&c, &w, Compression::Conv, Some(&ident)).unwrap();
        let b = compress_preview(&c, &w, Compression::Mean, None).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        assert_eq!(compress_preview(&[], &[], Compression::Mean, None).unwrap(), Vec::<f64>::new());
    }

    #[test]
    fn hard_limit_of_soft_window() {
        let u = vec![vec![1.0, -2.0], vec![3.0, 0.5], vec![-1.0, 1.0], vec![2.0, 2.0]];
        let ident = Tensor::from_rows(&[vec![0.1, 0.0], vec![0.8, 1.0], vec![0.2, 0.0]]).unwrap();
        let hard = compress_preview(&u, &hard_window_weights(2, 4), Compression::Conv, Some(&ident)).unwrap();
        let soft = compress_preview(&u, &soft_window_weights(2.3, 4, 100.0), Compression::Conv, Some(&ident)).unwrap();
        assert!(hard.iter().zip(&soft).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn loss_examples() {
        let v = 5;
        let toks = [0, 1, 2, 3];
        let onehot = |t: usize| (0..v).map(|j| if j == t { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let p: Vec<Vec<Vec<f64>>> = (0..4).map(|i| (1..=2).map(|r| onehot((i + r).min(3))).collect()).collect();
        let w = vec![vec![1.0, 0.5]; 4];
        assert_eq!(preview_loss(&p, &toks, &w).unwrap(), 0.0);
        let uni = vec![vec![vec![0.2; v]; 2]; 4];
        assert!((preview_loss(&uni, &toks, &w).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert_eq!(preview_loss(&uni, &toks, &vec![vec![0.0; 2]; 4]).unwrap(), 0.0);
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let mut g = Graph::new();
        let lp = g.leaf(Tensor::full(&[2, 6], -(3f64.ln())), true);
        let l = preview_loss_graph(&mut g, lp, &[0, 1], &[0, 1, 2], &[0.0; 4], 3).unwrap();
        let grads = g.backward(l);
        assert!(grads.get_or_zeros(lp).data().iter().all(|&x| x == 0.0));
    }
}
