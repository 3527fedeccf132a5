//! Bootstrap tests, rank correlations, residual-energy bins, fixed-effects
//! logistic regression, odds ratios and FDR control.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{FbsError, Result};

pub mod tables;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub resamples: usize,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p: f64,
    pub seed: u64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Paired bootstrap of the mean difference, resampling examples jointly.
pub fn bootstrap_diff(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<BootstrapReport> {
    if a.len() != b.len() {
        return Err(FbsError::stats(format!("paired samples differ in length ({} vs {})", a.len(), b.len())));
    }
    if a.len() < 2 || resamples == 0 {
        return Err(FbsError::stats("need at least 2 pairs and 1 resample"));
    }
    let n = a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let (mut sa, mut sb) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            sa += a[i];
            sb += b[i];
        }
        d.push(sa / n as f64 - sb / n as f64);
    }
    let le = d.iter().filter(|&&x| x <= 0.0).count() as f64 / resamples as f64;
    let ge = d.iter().filter(|&&x| x >= 0.0).count() as f64 / resamples as f64;
    d.sort_by(f64::total_cmp);
    Ok(BootstrapReport {
        resamples,
        estimate: mean(a) - mean(b),
        ci_low: quantile_sorted(&d, 0.025),
        ci_high: quantile_sorted(&d, 0.975),
        p: (2.0 * le.min(ge)).min(1.0),
        seed,
    })
}

/// Mid-ranks (1-based, ties averaged).
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(FbsError::stats("correlation needs two equal-length sequences of ≥ 2"));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(FbsError::stats("zero variance: correlation undefined"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(FbsError::stats("length mismatch"));
    }
    pearson(&ranks(x), &ranks(y))
}

/// Pairs tied within runs of equal values of a sorted key.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    if !sorted.is_empty() {
        total += run * (run - 1) / 2;
    }
    total
}

/// Merge sort counting inversions.
fn sort_count(v: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mut right = v.split_off(n / 2);
    let mut swaps = sort_count(v) + sort_count(&mut right);
    let left = std::mem::take(v);
    let (mut i, mut j) = (0, 0);
    v.reserve(n);
    while i < left.len() && j < right.len() {
        if right[j] < left[i] {
            v.push(right[j]);
            swaps += (left.len() - i) as u64;
            j += 1;
        } else {
            v.push(left[i]);
            i += 1;
        }
    }
    v.extend_from_slice(&left[i..]);
    v.extend_from_slice(&right[j..]);
    swaps
}

/// Kendall tau-b in `O(n log n)`.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(FbsError::stats("correlation needs two equal-length sequences of ≥ 2"));
    }
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n0 = n * (n - 1) / 2;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = sort_count(&mut ys);
    let n2 = tied_pairs(&ys);
    if n0 == n1 || n0 == n2 {
        return Err(FbsError::stats("zero variance: correlation undefined"));
    }
    let num = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    Ok(num / ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt())
}

/// Residuals of `y` after least squares on `[1, controls…]`.
fn residualize(y: &[f64], controls: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = y.len();
    let p = controls.len() + 1;
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { controls[j - 1][i] });
    let xtx = x.transpose() * &x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| FbsError::stats("singular control design"))?;
    let yv = DVector::from_column_slice(y);
    let beta = chol.solve(&(x.transpose() * &yv));
    Ok((yv - x * beta).iter().copied().collect())
}

/// Spearman correlation of `x` and `y` after regressing their ranks on the
/// ranks of every control.
pub fn partial_spearman(x: &[f64], y: &[f64], controls: &[Vec<f64>]) -> Result<f64> {
    if x.len() != y.len() || controls.iter().any(|c| c.len() != x.len()) {
        return Err(FbsError::stats("all sequences must have equal length"));
    }
    if controls.is_empty() {
        return spearman(x, y);
    }
    let cr: Vec<Vec<f64>> = controls.iter().map(|c| ranks(c)).collect();
    let rx = residualize(&ranks(x), &cr)?;
    let ry = residualize(&ranks(y), &cr)?;
    // near-zero residual variance means the controls explain everything
    let scale = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    if scale(&rx) < 1e-18 || scale(&ry) < 1e-18 {
        return Err(FbsError::stats("zero residual variance: correlation undefined"));
    }
    pearson(&rx, &ry)
}

/// `‖a − b‖₂`.
pub fn residual_energy(prev: &[f64], post: &[f64]) -> Result<f64> {
    if prev.len() != post.len() {
        return Err(FbsError::stats("state lengths differ"));
    }
    Ok(prev.iter().zip(post).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuintileBin {
    pub bin: usize,
    /// Upper edge (inclusive); the last bin has no upper edge.
    pub upper: Option<f64>,
    pub count: usize,
    /// `None` for empty bins.
    pub skip_rate: Option<f64>,
}

/// Nearest-rank quintile edges; a value equal to an edge falls in the lower
/// bin.
pub fn quintile_skip_rates(e: &[f64], g: &[f64]) -> Result<Vec<QuintileBin>> {
    if e.len() != g.len() {
        return Err(FbsError::stats("energy and gate lengths differ"));
    }
    if e.len() < 5 {
        return Err(FbsError::stats("need at least 5 observations for quintiles"));
    }
    let mut sorted = e.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let edges: Vec<f64> = (1..5)
        .map(|k| sorted[((k * n).div_ceil(5)).max(1) - 1])
        .collect();
    let mut counts = [0usize; 5];
    let mut sums = [0.0; 5];
    for (&ev, &gv) in e.iter().zip(g) {
        let bin = edges.iter().position(|&edge| ev <= edge).unwrap_or(4);
        counts[bin] += 1;
        sums[bin] += gv;
    }
    Ok((0..5)
        .map(|b| QuintileBin {
            bin: b + 1,
            upper: edges.get(b).copied(),
            count: counts[b],
            skip_rate: (counts[b] > 0).then(|| sums[b] / counts[b] as f64),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    pub a1: f64,
    pub se: f64,
    pub a0: f64,
    pub iterations: usize,
    pub n_used: usize,
    /// Levels removed because only one class occurred in them.
    pub dropped_layers: Vec<usize>,
    pub dropped_bins: Vec<usize>,
}

fn zscore(x: &[f64]) -> Result<Vec<f64>> {
    let m = mean(x);
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    if sd == 0.0 {
        return Err(FbsError::stats("constant predictor cannot be standardized"));
    }
    Ok(x.iter().map(|v| (v - m) / sd).collect())
}

fn single_class_levels(levels: &[usize], g: &[bool]) -> Vec<usize> {
    let mut seen: std::collections::BTreeMap<usize, (bool, bool)> = Default::default();
    for (&l, &y) in levels.iter().zip(g) {
        let e = seen.entry(l).or_default();
        if y {
            e.1 = true;
        } else {
            e.0 = true;
        }
    }
    seen.into_iter().filter(|(_, (a, b))| !(*a && *b)).map(|(l, _)| l).collect()
}

/// `Pr(g=1) = σ(a0 + a1·z(E) + u_layer + v_bin)` by Newton iterations; the
/// lowest surviving level of each factor is the reference.
pub fn logistic_fixed_effects(g: &[bool], e: &[f64], layers: &[usize], bins: &[usize]) -> Result<LogitFit> {
    let n = g.len();
    if e.len() != n || layers.len() != n || bins.len() != n {
        return Err(FbsError::stats("logistic inputs differ in length"));
    }
    let dropped_layers = single_class_levels(layers, g);
    let dropped_bins = single_class_levels(bins, g);
    let keep: Vec<usize> = (0..n)
        .filter(|&i| !dropped_layers.contains(&layers[i]) && !dropped_bins.contains(&bins[i]))
        .collect();
    if keep.is_empty() {
        return Err(FbsError::stats("no level has both classes"));
    }
    let mut layer_levels: Vec<usize> = keep.iter().map(|&i| layers[i]).collect();
    layer_levels.sort_unstable();
    layer_levels.dedup();
    let mut bin_levels: Vec<usize> = keep.iter().map(|&i| bins[i]).collect();
    bin_levels.sort_unstable();
    bin_levels.dedup();
    let z = zscore(&keep.iter().map(|&i| e[i]).collect::<Vec<_>>())?;
    let p = 2 + layer_levels.len() - 1 + bin_levels.len() - 1;
    let m = keep.len();
    let mut x = DMatrix::<f64>::zeros(m, p);
    for (r, &i) in keep.iter().enumerate() {
        x[(r, 0)] = 1.0;
        x[(r, 1)] = z[r];
        let li = layer_levels.binary_search(&layers[i]).expect("kept level");
        if li > 0 {
            x[(r, 1 + li)] = 1.0;
        }
        let bi = bin_levels.binary_search(&bins[i]).expect("kept level");
        if bi > 0 {
            x[(r, 1 + layer_levels.len() - 1 + bi)] = 1.0;
        }
    }
    let y = DVector::from_iterator(m, keep.iter().map(|&i| if g[i] { 1.0 } else { 0.0 }));
    let mut beta = DVector::<f64>::zeros(p);
    for it in 1..=100 {
        let eta = &x * &beta;
        let mu = eta.map(crate::numerics::kernels::sigmoid);
        let w = mu.map(|q| q * (1.0 - q));
        let grad = x.transpose() * (&y - &mu);
        let mut xw = x.clone();
        for (r, mut row) in xw.row_iter_mut().enumerate() {
            row *= w[r];
        }
        let h = x.transpose() * xw;
        let chol = h.clone().cholesky().ok_or_else(|| {
            FbsError::stats(format!("singular information matrix at iteration {it} (gradient norm {:.3e})", grad.norm()))
        })?;
        let step = chol.solve(&grad);
        beta += &step;
        if !beta.iter().all(|v| v.is_finite()) {
            return Err(FbsError::stats(format!("diverged at iteration {it}")));
        }
        if step.amax() < 1e-10 {
            let inv = chol.inverse();
            return Ok(LogitFit {
                a1: beta[1],
                se: inv[(1, 1)].sqrt(),
                a0: beta[0],
                iterations: it,
                n_used: m,
                dropped_layers,
                dropped_bins,
            });
        }
    }
    let mu = (&x * &beta).map(crate::numerics::kernels::sigmoid);
    let grad = x.transpose() * (&y - &mu);
    Err(FbsError::stats(format!(
        "no convergence after 100 iterations (gradient norm {:.3e})",
        grad.norm()
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OddsRatio {
    pub or: f64,
    pub chi2: f64,
    pub p: f64,
    /// Haldane correction applied.
    pub corrected: bool,
}

/// Odds ratio of two proportions and the Pearson chi-square test on the
/// implied 2×2 table.
pub fn odds_ratio(p_high: f64, n_high: f64, p_low: f64, n_low: f64) -> Result<OddsRatio> {
    if !(n_high > 0.0 && n_low > 0.0) {
        return Err(FbsError::stats("counts must be positive"));
    }
    if !(0.0..=1.0).contains(&p_high) || !(0.0..=1.0).contains(&p_low) {
        return Err(FbsError::stats("proportions must lie in [0, 1]"));
    }
    let mut cells = [p_high * n_high, (1.0 - p_high) * n_high, p_low * n_low, (1.0 - p_low) * n_low];
    let corrected = cells.contains(&0.0);
    if corrected {
        cells.iter_mut().for_each(|c| *c += 0.5);
    }
    let [a, b, c, d] = cells;
    let or = (a / b) / (c / d);
    let n = a + b + c + d;
    let (r1, r2, c1, c2) = (a + b, c + d, a + c, b + d);
    let chi2 = n * (a * d - b * c).powi(2) / (r1 * r2 * c1 * c2);
    let p = 1.0 - ChiSquared::new(1.0).expect("1 dof").cdf(chi2);
    Ok(OddsRatio { or, chi2, p, corrected })
}

/// Benjamini–Hochberg adjusted p-values and rejections at level `q`.
pub fn benjamini_hochberg(p: &[f64], q: f64) -> (Vec<f64>, Vec<bool>) {
    let n = p.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| p[i].total_cmp(&p[j]));
    let mut adj = vec![0.0; n];
    let mut run = 1.0f64;
    for (rank, &i) in idx.iter().enumerate().rev() {
        run = run.min(p[i] * n as f64 / (rank + 1) as f64).min(1.0);
        adj[i] = run;
    }
    let reject = adj.iter().map(|&a| a <= q).collect();
    (adj, reject)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_examples() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = bootstrap_diff(&a, &a, 1000, 3).unwrap();
        assert_eq!(r.p, 1.0);
        let b: Vec<f64> = (0..100).map(|i| (i as f64).cos() * 0.1).collect();
        let a: Vec<f64> = b.iter().map(|x| x + 10.0).collect();
        let r = bootstrap_diff(&a, &b, 1000, 3).unwrap();
        assert!(r.p <= 0.002 && r.ci_low > 0.0);
        assert_eq!(r, bootstrap_diff(&a, &b, 1000, 3).unwrap());
        assert!(bootstrap_diff(&a, &b[..10], 10, 0).is_err());
    }

    #[test]
    fn correlation_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((kendall(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 5.0, 2.0], &[1.0, 5.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        let k = kendall(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((k - 4.0 / 6.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn energy_examples() {
        assert_eq!(residual_energy(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(residual_energy(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!((residual_energy(&[-3.0, 0.0], &[6.0, 12.0]).unwrap() - 3.0 * residual_energy(&[-1.0, 0.0], &[2.0, 4.0]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn quintile_degenerate_and_partition() {
        let bins = quintile_skip_rates(&[2.0; 10], &[1.0; 10]).unwrap();
        assert_eq!(bins[0].count, 10);
        assert!(bins[1..].iter().all(|b| b.count == 0 && b.skip_rate.is_none()));
        let e: Vec<f64> = (0..23).map(|i| i as f64).collect();
        let bins = quintile_skip_rates(&e, &[0.0; 23]).unwrap();
        let counts: Vec<usize> = bins.iter().map(|b| b.count).collect();
        assert_eq!(counts.iter().sum::<usize>(), 23);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn odds_ratio_examples() {
        assert!((odds_ratio(0.432, 1000.0, 0.261, 1000.0).unwrap().or - 2.15).abs() < 0.01);
        let r = odds_ratio(0.3, 100.0, 0.3, 200.0).unwrap();
        assert!((r.or - 1.0).abs() < 1e-12 && r.chi2.abs() < 1e-12);
        assert!((odds_ratio(0.174, 1000.0, 0.063, 1000.0).unwrap().or - 3.13).abs() < 0.01);
        assert!(odds_ratio(0.0, 10.0, 0.5, 10.0).unwrap().corrected);
    }

    #[test]
    fn bh_reads_raw_p() {
        let p = [0.01, 0.04, 0.03, 0.2];
        let (adj, rej) = benjamini_hochberg(&p, 0.05);
        assert!((adj[0] - 0.04).abs() < 1e-12);
        assert!((adj[1] - 0.04 * 4.0 / 3.0).abs() < 1e-12 || adj[1] <= 0.06);
        assert_eq!(rej, [true, false, false, false].iter().zip(&adj).map(|(_, &a)| a <= 0.05).collect::<Vec<_>>());
    }
}
