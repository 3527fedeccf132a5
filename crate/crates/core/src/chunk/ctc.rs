//! Connectionist temporal classification over the BIOS alphabet plus blank.

use super::{parse_bios, BiosLabel};
use crate::numerics::kernels::log_softmax_inplace;

/// Index of the blank symbol; labels use `BiosLabel::index`.
pub const BLANK: usize = 4;
pub const CTC_CLASSES: usize = 5;

/// Chunk-level target: each parsed chunk contributes its head label, a
/// multi-token chunk adds a single `I` for its interior, and a run of
/// neutral tokens becomes one `O`.
pub fn collapse_labels(labels: &[BiosLabel]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut in_neutral = false;
    for c in parse_bios(labels) {
        let was_neutral = std::mem::replace(&mut in_neutral, c.neutral);
        if c.neutral {
            if !was_neutral {
                out.push(BiosLabel::O.index());
            }
        } else if c.end - c.start == 1 {
            out.push(if labels[c.start] == BiosLabel::S {
                BiosLabel::S.index()
            } else {
                BiosLabel::B.index()
            });
        } else {
            out.push(BiosLabel::B.index());
            out.push(BiosLabel::I.index());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum CtcOutcome {
    /// Negative log-likelihood and its gradient w.r.t. the `T×5` logits.
    Loss { nll: f64, grad: Vec<f64> },
    /// The target needs more frames than are available.
    Infeasible { frames: usize, required: usize },
}

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// CTC negative log-likelihood of `target` under row-wise softmax of
/// `logits` (`T×5`, row-major).
///
/// ```
/// use fbs_core::chunk::{ctc_loss, CtcOutcome};
///
/// match ctc_loss(&[0.0; 5], &[0]) {
///     CtcOutcome::Loss { nll, .. } => assert!((nll - 5f64.ln()).abs() < 1e-12),
///     _ => unreachable!(),
/// }
/// ```
pub fn ctc_loss(logits: &[f64], target: &[usize]) -> CtcOutcome {
    let t_len = logits.len() / CTC_CLASSES;
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    let required = target.len() + repeats;
    if t_len < required || (t_len == 0 && !target.is_empty()) {
        return CtcOutcome::Infeasible {
            frames: t_len,
            required,
        };
    }
    if t_len == 0 {
        return CtcOutcome::Loss {
            nll: 0.0,
            grad: Vec::new(),
        };
    }
    let mut lp = logits.to_vec();
    for row in lp.chunks_mut(CTC_CLASSES) {
        log_softmax_inplace(row);
    }
    // extended sequence: blank, l1, blank, l2, ..., blank
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let y = |t: usize, k: usize| lp[t * CTC_CLASSES + k];
    let ninf = f64::NEG_INFINITY;
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = y(0, ext[0]);
    if s_len > 1 {
        alpha[1] = y(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = lse(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if can_skip(s) {
                a = lse(a, alpha[(t - 1) * s_len + s - 2]);
            }
            if a != ninf {
                alpha[t * s_len + s] = a + y(t, ext[s]);
            }
        }
    }
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = y(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = y(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = lse(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                b = lse(b, beta[(t + 1) * s_len + s + 2]);
            }
            if b != ninf {
                beta[t * s_len + s] = b + y(t, ext[s]);
            }
        }
    }
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = lse(log_p, alpha[last + s_len - 2]);
    }
    let mut grad = vec![0.0; t_len * CTC_CLASSES];
    for t in 0..t_len {
        let mut occ = [ninf; CTC_CLASSES];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            occ[ext[s]] = lse(occ[ext[s]], ab);
        }
        for k in 0..CTC_CLASSES {
            let prob = y(t, k).exp();
            // alpha and beta both include y(t, k), so divide it out once
            let post = if occ[k] == ninf {
                0.0
            } else {
                (occ[k] - log_p - y(t, k)).exp()
            };
            grad[t * CTC_CLASSES + k] = prob - post;
        }
    }
    CtcOutcome::Loss { nll: -log_p, grad }
}
