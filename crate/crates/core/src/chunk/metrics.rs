use super::BiosLabel;
use crate::error::{FbsError, Result};

const EPS: f64 = 1e-12;

fn check_len(pred: &[BiosLabel], gold: &[BiosLabel]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(FbsError::invalid(format!(
            "label length mismatch: {} predicted vs {} gold",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

/// Per-class F1 in `B, I, O, S` order.
pub fn per_class_f1(pred: &[BiosLabel], gold: &[BiosLabel]) -> Result<[f64; 4]> {
    check_len(pred, gold)?;
    let mut out = [0.0; 4];
    for c in BiosLabel::ALL {
        let tp = pred.iter().zip(gold).filter(|(p, g)| **p == c && **g == c).count() as f64;
        let np = pred.iter().filter(|p| **p == c).count() as f64;
        let ng = gold.iter().filter(|g| **g == c).count() as f64;
        let p = tp / (np + EPS);
        let r = tp / (ng + EPS);
        out[c.index()] = 2.0 * p * r / (p + r + EPS);
    }
    Ok(out)
}

/// Mean of the four per-class F1 scores; absent classes count as 0.
pub fn bios_macro_f1(pred: &[BiosLabel], gold: &[BiosLabel]) -> Result<f64> {
    Ok(per_class_f1(pred, gold)?.iter().sum::<f64>() / 4.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set precision/recall over positions labeled `B` or `S`.
pub fn boundary_f1(pred: &[BiosLabel], gold: &[BiosLabel]) -> Result<BoundaryScore> {
    check_len(pred, gold)?;
    let tp = pred
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.is_boundary() && g.is_boundary())
        .count() as f64;
    let np = pred.iter().filter(|p| p.is_boundary()).count() as f64;
    let ng = gold.iter().filter(|g| g.is_boundary()).count() as f64;
    let precision = tp / (np + EPS);
    let recall = tp / (ng + EPS);
    Ok(BoundaryScore {
        precision,
        recall,
        f1: 2.0 * precision * recall / (precision + recall + EPS),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use BiosLabel::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let g = [B, I, O, S, O];
        assert!((bios_macro_f1(&g, &g).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_example() {
        // boundaries at positions 1 and 5 predicted, 1, 4, 5 gold
        let pred = [O, B, I, I, I, S];
        let gold = [O, S, O, O, B, S];
        let s = boundary_f1(&pred, &gold).unwrap();
        assert!((s.precision - 1.0).abs() < 1e-9);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-9);
        assert!((s.f1 - 0.8).abs() < 1e-9);
    }

    #[test]
    fn absent_class_counts_zero() {
        let gold = [B, I, O, O];
        let pred = [O, O, O, O];
        let f = per_class_f1(&pred, &gold).unwrap();
        assert_eq!(f[B.index()], 0.0);
        assert_eq!(f[S.index()], 0.0);
        let m = bios_macro_f1(&pred, &gold).unwrap();
        assert!((m - f[O.index()] / 4.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(bios_macro_f1(&[B], &[B, I]).is_err());
    }
}
