//! Trainable pieces of the chunk head: BIOS prediction, the CE/CTC
//! objective, cache fusion and the chunk/token alignment loss.

use super::ctc::{collapse_labels, ctc_loss, CtcOutcome, CTC_CLASSES};
use super::{BiosLabel, ChunkCache, ChunkRecord};
use crate::error::{FbsError, Result};
use crate::numerics::kernels;
use crate::numerics::{Graph, Tensor, Var};

/// Coverage at or above which the token-level CE branch is used.
pub const DEFAULT_Q0: f64 = 0.90;
const NORM_EPS: f64 = 1e-8;

/// BIOS distribution for one state from a `d×5` head (the fifth column is
/// the CTC blank and is not part of the label distribution).
pub fn predict_bios(h: &[f64], w: &Tensor, b: &[f64]) -> Result<[f64; 4]> {
    let (d, c) = w.dims2();
    if d != h.len() || c != CTC_CLASSES || b.len() != CTC_CLASSES {
        return Err(FbsError::Shape(format!("bios head {:?} for state of {}", w.shape(), h.len())));
    }
    let mut logits = [0.0; 4];
    for (k, l) in logits.iter_mut().enumerate() {
        *l = b[k] + (0..d).map(|i| h[i] * w.data()[i * c + k]).sum::<f64>();
    }
    kernels::softmax_inplace(&mut logits);
    Ok(logits)
}

/// Argmax over the four label logits of a `·×5` row.
pub fn label_of(row: &[f64]) -> BiosLabel {
    BiosLabel::from_index(kernels::argmax(&row[..4])).unwrap_or(BiosLabel::O)
}

/// Closed records and the attention window of every row when the labels
/// are streamed through a chunk cache.
pub fn chunk_schedule(labels: &[BiosLabel], window: usize, include_neutral: bool) -> (Vec<ChunkRecord>, Vec<Vec<usize>>) {
    let mut cache = ChunkCache::new(0);
    let mut windows = Vec::with_capacity(labels.len());
    for (t, &l) in labels.iter().enumerate() {
        cache.update(t, &[], l);
        windows.push(cache.window(window, include_neutral));
    }
    (cache.records().to_vec(), windows)
}

/// Outcome of the BIOS objective.
#[derive(Clone, Copy, Debug)]
pub enum BiosObjective {
    Loss(Var),
    /// CTC target longer than the frames can carry.
    Infeasible { frames: usize, required: usize },
}

/// Inverse-frequency weights over the classes present in `labels`.
pub fn class_weights(labels: &[BiosLabel]) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for l in labels {
        counts[l.index()] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;
    let n = labels.len() as f64;
    counts.map(|c| if c == 0 { 0.0 } else { n / (present * c as f64) })
}

/// CE with inverse-frequency class weights when `q ≥ q0`, otherwise CTC
/// against the collapsed label string. `logits` is `n×5`.
pub fn bios_objective(g: &mut Graph, logits: Var, labels: &[BiosLabel], q: f64, q0: f64) -> Result<BiosObjective> {
    let (n, c) = g.value(logits).dims2();
    if c != CTC_CLASSES || (n != labels.len() && !g.value(logits).is_empty()) {
        return Err(FbsError::Shape(format!("bios logits {:?} for {} labels", g.shape(logits), labels.len())));
    }
    if q >= q0 {
        if labels.is_empty() {
            return Ok(BiosObjective::Loss(g.constant(Tensor::scalar(0.0))));
        }
        let w = class_weights(labels);
        let total: f64 = labels.iter().map(|l| w[l.index()]).sum();
        let four = g.slice_cols(logits, 0, 4)?;
        let lp = g.log_softmax(four)?;
        let picks = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (i, l.index(), -w[l.index()] / total))
            .collect();
        return Ok(BiosObjective::Loss(g.pick(lp, picks)?));
    }
    let target = collapse_labels(labels);
    let values = g.value(logits).data().to_vec();
    match ctc_loss(&values, &target) {
        CtcOutcome::Loss { nll, grad } => Ok(BiosObjective::Loss(g.precomputed(logits, nll, grad)?)),
        CtcOutcome::Infeasible { frames, required } => Ok(BiosObjective::Infeasible { frames, required }),
    }
}

/// Mean over records of `1 − cos(mean of x, mean of x·A)` on member rows.
pub fn align_loss(g: &mut Graph, x: Var, proj: Var, records: &[ChunkRecord]) -> Result<Var> {
    if records.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let segs: Vec<Vec<usize>> = records.iter().map(|r| (r.start..r.end).collect()).collect();
    let xa = g.matmul(x, proj)?;
    let pooled = g.segment_mean(x, segs.clone())?;
    let mapped = g.segment_mean(xa, segs)?;
    let prod = g.mul(pooled, mapped)?;
    let dot = g.row_sum(prod);
    let norm = |g: &mut Graph, v: Var| -> Result<Var> {
        let sq = g.mul(v, v)?;
        let s = g.row_sum(sq);
        let r = g.sqrt(s);
        Ok(g.add_scalar(r, NORM_EPS))
    };
    let na = norm(g, pooled)?;
    let nb = norm(g, mapped)?;
    let den = g.mul(na, nb)?;
    let cos = g.div(dot, den)?;
    let one_minus = g.scale(cos, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    Ok(g.mean(one_minus))
}
