//! Mechanism tables over decode-cell dumps: correlations with bootstrap
//! intervals, energy quintiles, token-property odds ratios and the
//! fixed-effects logistic fit, each with an FDR column.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::skipgate::{ForceReason, DEFAULT_PROTECTED};

/// One decode cell: gate outcome and residual energy at a (step, layer).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellRecord {
    /// Index of the generation the cell came from.
    pub run: usize,
    pub step: usize,
    /// 1-based.
    pub layer: usize,
    pub p: f64,
    pub g: u8,
    pub reason: ForceReason,
    pub energy: f64,
    /// Token fed at this step.
    pub token: usize,
}

pub const CELLS_HEADER: &str = "step,layer,p,g,reason,energy,token";

pub fn cells_csv(cells: &[CellRecord]) -> String {
    let mut s = format!("{CELLS_HEADER}\n");
    for c in cells {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", c.step, c.layer, c.p, c.g, c.reason, c.energy, c.token);
    }
    s
}

pub fn parse_cells(body: &str, origin: &str, run: usize) -> Result<Vec<CellRecord>> {
    let mut lines = body.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CELLS_HEADER => {}
        _ => {
            return Err(FbsError::Parse {
                path: origin.into(),
                line: 1,
                msg: format!("expected header {CELLS_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| FbsError::Parse {
            path: origin.into(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, got {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let g = int(f[3])?;
        if g > 1 {
            return Err(err(format!("gate value {g} is not 0 or 1")));
        }
        out.push(CellRecord {
            run,
            step: int(f[0])?,
            layer: int(f[1])?,
            p: num(f[2])?,
            g: g as u8,
            reason: f[4].parse().map_err(|e: FbsError| err(e.to_string()))?,
            energy: num(f[5])?,
            token: int(f[6])?,
        });
    }
    Ok(out)
}

/// Percentile bootstrap of a statistic over resampled indices.
pub fn bootstrap_stat<F>(n: usize, resamples: usize, seed: u64, stat: F) -> Result<(f64, f64, f64, f64)>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    let all: Vec<usize> = (0..n).collect();
    let est = stat(&all)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(resamples);
    let mut idx = vec![0; n];
    for _ in 0..resamples {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        // degenerate resamples (zero variance) are skipped
        if let Ok(v) = stat(&idx) {
            draws.push(v);
        }
    }
    if draws.is_empty() {
        return Err(FbsError::stats("every bootstrap resample was degenerate"));
    }
    let m = draws.len() as f64;
    let le = draws.iter().filter(|&&d| d <= 0.0).count() as f64 / m;
    let ge = draws.iter().filter(|&&d| d >= 0.0).count() as f64 / m;
    draws.sort_by(f64::total_cmp);
    Ok((est, quantile_sorted(&draws, 0.025), quantile_sorted(&draws, 0.975), (2.0 * le.min(ge)).min(1.0)))
}

/// A CSV table whose `p` column drives `q` and `reject` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        "nan".into()
    }
}

impl Table {
    fn new(cols: &[&str]) -> Self {
        Self {
            header: cols.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn parse(body: &str) -> Result<Self> {
        let mut lines = body.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| FbsError::stats("empty table"))?
            .split(',')
            .map(String::from)
            .collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        if rows.iter().any(|r| r.len() != header.len()) {
            return Err(FbsError::stats("ragged table"));
        }
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Recomputes `q` and `reject` from the raw `p` column; rows with a
    /// non-numeric p are left out of the family.
    pub fn apply_fdr(&mut self, level: f64) -> Result<()> {
        let (Some(pc), Some(qc), Some(rc)) = (self.col("p"), self.col("q"), self.col("reject")) else {
            return Err(FbsError::stats("table lacks p, q or reject columns"));
        };
        let family: Vec<(usize, f64)> = self
            .rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r[pc].parse::<f64>().ok().filter(|p| p.is_finite()).map(|p| (i, p)))
            .collect();
        let ps: Vec<f64> = family.iter().map(|x| x.1).collect();
        let (q, rej) = benjamini_hochberg(&ps, level);
        for r in &mut self.rows {
            r[qc] = "nan".into();
            r[rc] = "false".into();
        }
        for (k, &(i, _)) in family.iter().enumerate() {
            self.rows[i][qc] = fmt(q[k]);
            self.rows[i][rc] = rej[k].to_string();
        }
        Ok(())
    }
}

/// Cells that carry a gate decision of their own (not forced).
fn free_cells(cells: &[CellRecord]) -> Vec<&CellRecord> {
    cells
        .iter()
        .filter(|c| c.p.is_finite() && c.reason == ForceReason::None)
        .collect()
}

fn note(e: &FbsError) -> String {
    e.to_string().replace([',', '\n'], ";")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub resamples: usize,
    pub seed: u64,
    pub fdr_q: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            resamples: 500,
            seed: 0,
            fdr_q: 0.05,
        }
    }
}

/// Correlations between residual energy and skip probability, pooled and
/// per layer.
pub fn correlation_table(cells: &[CellRecord], cfg: &AnalysisConfig) -> Result<Table> {
    let mut t = Table::new(&["scope", "measure", "rho", "ci_low", "ci_high", "p", "q", "reject", "n", "note"]);
    let free = free_cells(cells);
    let mut layers: Vec<usize> = free.iter().map(|c| c.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut scopes = vec![("all".to_string(), free.clone())];
    for l in layers {
        scopes.push((format!("layer{l}"), free.iter().copied().filter(|c| c.layer == l).collect()));
    }
    for (scope, sub) in scopes {
        let e: Vec<f64> = sub.iter().map(|c| c.energy).collect();
        let p: Vec<f64> = sub.iter().map(|c| c.p).collect();
        let layer: Vec<f64> = sub.iter().map(|c| c.layer as f64).collect();
        let step: Vec<f64> = sub.iter().map(|c| c.step as f64).collect();
        let pick = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let (e, p, layer, step) = (&e, &p, &layer, &step);
        type Stat<'a> = Box<dyn Fn(&[usize]) -> Result<f64> + 'a>;
        let mut measures: Vec<(&str, Stat)> = vec![
            ("spearman", Box::new(|i: &[usize]| spearman(&pick(e, i), &pick(p, i)))),
            ("kendall", Box::new(|i: &[usize]| kendall(&pick(e, i), &pick(p, i)))),
        ];
        let pooled = scope == "all";
        measures.push((
            "partial_spearman",
            Box::new(move |i: &[usize]| {
                let mut controls = vec![pick(step, i)];
                if pooled {
                    controls.push(pick(layer, i));
                }
                partial_spearman(&pick(e, i), &pick(p, i), &controls)
            }),
        ));
        for (name, f) in measures {
            let row = match bootstrap_stat(sub.len(), cfg.resamples, cfg.seed, f) {
                Ok((rho, lo, hi, pv)) => vec![fmt(rho), fmt(lo), fmt(hi), fmt(pv), "nan".into(), "false".into(), sub.len().to_string(), "ok".into()],
                Err(err) => {
                    let mut r = vec!["nan".to_string(); 6];
                    r[5] = "false".into();
                    r.extend([sub.len().to_string(), note(&err)]);
                    r
                }
            };
            let mut full = vec![scope.clone(), name.to_string()];
            full.extend(row);
            t.rows.push(full);
        }
    }
    t.apply_fdr(cfg.fdr_q)?;
    Ok(t)
}

/// Skip rate per residual-energy quintile.
pub fn bins_table(cells: &[CellRecord]) -> Result<Table> {
    let free = free_cells(cells);
    let e: Vec<f64> = free.iter().map(|c| c.energy).collect();
    let g: Vec<f64> = free.iter().map(|c| c.g as f64).collect();
    let mut t = Table::new(&["bin", "upper", "count", "skip_rate"]);
    for b in quintile_skip_rates(&e, &g)? {
        t.rows.push(vec![
            b.bin.to_string(),
            b.upper.map_or("inf".into(), fmt),
            b.count.to_string(),
            b.skip_rate.map_or("nan".into(), fmt),
        ]);
    }
    Ok(t)
}

type Property = (&'static str, fn(usize) -> bool);

const PROPERTIES: &[Property] = &[
    ("punctuation", |t| t < 128 && (t as u8).is_ascii_punctuation()),
    ("digit", |t| t < 128 && (t as u8).is_ascii_digit()),
    ("whitespace", |t| t < 128 && (t as u8).is_ascii_whitespace()),
    ("letter", |t| t < 128 && (t as u8).is_ascii_alphabetic()),
    ("structure", |t| t < 256 && DEFAULT_PROTECTED.contains(&(t as u8))),
];

/// Token properties among high-skip versus low-skip steps. A step is
/// high-skip when its skip share over free cells exceeds the median share.
pub fn odds_table(cells: &[CellRecord], cfg: &AnalysisConfig) -> Result<Table> {
    let mut steps: std::collections::BTreeMap<(usize, usize), (usize, usize, usize)> = Default::default();
    for c in free_cells(cells) {
        let e = steps.entry((c.run, c.step)).or_insert((0, 0, c.token));
        e.0 += c.g as usize;
        e.1 += 1;
    }
    let shares: Vec<(f64, usize)> = steps.values().map(|&(s, n, tok)| (s as f64 / n as f64, tok)).collect();
    let mut sorted: Vec<f64> = shares.iter().map(|s| s.0).collect();
    sorted.sort_by(f64::total_cmp);
    let median = quantile_sorted(&sorted, 0.5);
    let high: Vec<usize> = shares.iter().filter(|s| s.0 > median).map(|s| s.1).collect();
    let low: Vec<usize> = shares.iter().filter(|s| s.0 <= median).map(|s| s.1).collect();
    let mut t = Table::new(&["property", "p_high", "n_high", "p_low", "n_low", "or", "chi2", "p", "q", "reject", "corrected", "note"]);
    for (name, has) in PROPERTIES {
        let frac = |v: &[usize]| v.iter().filter(|&&tok| has(tok)).count() as f64 / v.len().max(1) as f64;
        let (ph, pl) = (frac(&high), frac(&low));
        let mut row = vec![name.to_string(), fmt(ph), high.len().to_string(), fmt(pl), low.len().to_string()];
        match odds_ratio(ph, high.len() as f64, pl, low.len() as f64) {
            Ok(r) => row.extend([fmt(r.or), fmt(r.chi2), fmt(r.p), "nan".into(), "false".into(), r.corrected.to_string(), "ok".into()]),
            Err(e) => {
                row.extend(["nan", "nan", "nan", "nan", "false", "false"].map(String::from));
                row.push(note(&e));
            }
        }
        t.rows.push(row);
    }
    t.apply_fdr(cfg.fdr_q)?;
    Ok(t)
}

/// Fixed-effects logistic fit of the skip decision on standardized energy
/// with layer and step-quintile effects.
pub fn logistic_table(cells: &[CellRecord], cfg: &AnalysisConfig) -> Result<Table> {
    let free = free_cells(cells);
    let mut t = Table::new(&["term", "estimate", "se", "z", "p", "q", "reject", "n", "iterations", "note"]);
    let g: Vec<bool> = free.iter().map(|c| c.g == 1).collect();
    let e: Vec<f64> = free.iter().map(|c| c.energy).collect();
    let layers: Vec<usize> = free.iter().map(|c| c.layer).collect();
    let bins = step_bins(&free.iter().map(|c| c.step).collect::<Vec<_>>());
    let row = match logistic_fixed_effects(&g, &e, &layers, &bins) {
        Ok(f) => {
            let z = f.a1 / f.se;
            let p = 2.0 * (1.0 - statrs::distribution::Normal::standard().cdf(z.abs()));
            vec![fmt(f.a1), fmt(f.se), fmt(z), fmt(p), "nan".into(), "false".into(), f.n_used.to_string(), f.iterations.to_string(), "ok".into()]
        }
        Err(err) => {
            let mut r: Vec<String> = ["nan", "nan", "nan", "nan", "nan", "false"].map(String::from).to_vec();
            r.extend([free.len().to_string(), "0".into(), note(&err)]);
            r
        }
    };
    let mut full = vec!["a1_energy".to_string()];
    full.extend(row);
    t.rows.push(full);
    t.apply_fdr(cfg.fdr_q)?;
    Ok(t)
}

/// Quintile (1..=5) of each step among the distinct steps present.
fn step_bins(steps: &[usize]) -> Vec<usize> {
    let mut distinct = steps.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let n = distinct.len().max(1);
    steps
        .iter()
        .map(|s| distinct.binary_search(s).map_or(1, |i| i * 5 / n + 1))
        .collect()
}

/// All four tables, keyed by file name.
pub fn analyze_cells(cells: &[CellRecord], cfg: &AnalysisConfig) -> Result<Vec<(&'static str, Table)>> {
    if free_cells(cells).is_empty() {
        return Err(FbsError::stats("no free gate decisions in the dumps"));
    }
    Ok(vec![
        ("correlations.csv", correlation_table(cells, cfg)?),
        ("bins.csv", bins_table(cells)?),
        ("odds.csv", odds_table(cells, cfg)?),
        ("logistic.csv", logistic_table(cells, cfg)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_cells(n_steps: usize, seed: u64) -> Vec<CellRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for step in 0..n_steps {
            let token = rng.random_range(32..127);
            for layer in 2..=4 {
                let energy: f64 = rng.random_range(0.0..3.0);
                let p = crate::numerics::kernels::sigmoid(1.0 - energy + rng.random_range(-0.5..0.5));
                out.push(CellRecord {
                    run: 0,
                    step,
                    layer,
                    p,
                    g: (p > 0.5) as u8,
                    reason: ForceReason::None,
                    energy,
                    token,
                });
            }
        }
        out
    }

    #[test]
    fn cells_round_trip() {
        let cells = synthetic_cells(5, 1);
        let back = parse_cells(&cells_csv(&cells), "mem", 0).unwrap();
        assert_eq!(back, cells);
    }

    #[test]
    fn tables_and_fdr_idempotence() {
        let cells = synthetic_cells(80, 2);
        let cfg = AnalysisConfig { resamples: 50, ..Default::default() };
        let tables = analyze_cells(&cells, &cfg).unwrap();
        assert_eq!(tables.len(), 4);
        let corr = &tables[0].1;
        let rho: f64 = corr.rows[0][2].parse().unwrap();
        assert!(rho < -0.5, "{rho}");
        for (_, t) in tables.iter().filter(|(n, _)| *n != "bins.csv") {
            let mut again = Table::parse(&t.to_csv()).unwrap();
            again.apply_fdr(0.05).unwrap();
            assert_eq!(again.to_csv(), t.to_csv());
        }
        let bins = &tables[1].1;
        let total: usize = bins.rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
        assert_eq!(total, cells.len());
    }
}
