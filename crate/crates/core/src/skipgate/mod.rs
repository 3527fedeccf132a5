//! Skip-gate: per-layer, per-token skip probabilities, training surrogates,
//! deterministic inference thresholds, safety overrides and the reward.

pub mod rl;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FbsError, Result};
use crate::numerics::{Graph, Tensor, Var};

pub use rl::{collect_episode, rl_update, Episode, RlConfig, RlStats};

/// Which signals feed the gate MLP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInputMode {
    ResidualOnly,
    PreviewOnly,
    #[default]
    Both,
}

/// Linear threshold schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anneal {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total: usize,
}

impl Default for Anneal {
    fn default() -> Self {
        Self {
            tau_start: 0.9,
            tau_end: 0.7,
            total: 1000,
        }
    }
}

pub const DEFAULT_PROTECTED: &[u8] = b"\n{}[]():,\"'";

/// Runtime gate policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatePolicyConfig {
    pub tau: f64,
    /// 1-based layer indices that always execute.
    pub never_skip: Vec<usize>,
    pub protect: bool,
    pub protected: Vec<u8>,
    pub protect_tau: f64,
    /// Positions `< warmup` always execute.
    pub warmup: usize,
    pub anneal: Anneal,
    pub seed: u64,
}

impl Default for GatePolicyConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            never_skip: vec![1, 5, 6],
            protect: false,
            protected: DEFAULT_PROTECTED.to_vec(),
            protect_tau: 0.95,
            warmup: 0,
            anneal: Anneal::default(),
            seed: 0,
        }
    }
}

impl GatePolicyConfig {
    /// First layer and last two layers are critical.
    pub fn for_layers(n_layers: usize) -> Self {
        let mut ns = vec![1];
        ns.extend(n_layers.saturating_sub(1).max(2)..=n_layers);
        ns.dedup();
        Self {
            never_skip: ns,
            ..Self::default()
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.tau < 0.0 || self.tau.is_nan() {
            return Err(FbsError::Config(format!("tau must be ≥ 0, got {}", self.tau)));
        }
        if let Some(&l) = self.never_skip.iter().find(|&&l| l == 0 || l > n_layers) {
            return Err(FbsError::Config(format!("never-skip layer {l} outside 1..={n_layers}")));
        }
        Ok(())
    }

    /// 0-based layer check.
    pub fn is_critical(&self, layer: usize) -> bool {
        self.never_skip.contains(&(layer + 1))
    }
}

/// Why a cell was forced to execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ForceReason {
    None,
    CriticalLayer,
    StructureToken,
    Warmup,
}

impl fmt::Display for ForceReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForceReason::None => "none",
            ForceReason::CriticalLayer => "critical-layer",
            ForceReason::StructureToken => "structure-token",
            ForceReason::Warmup => "warmup",
        })
    }
}

impl FromStr for ForceReason {
    type Err = FbsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ForceReason::None),
            "critical-layer" => Ok(ForceReason::CriticalLayer),
            "structure-token" => Ok(ForceReason::StructureToken),
            "warmup" => Ok(ForceReason::Warmup),
            _ => Err(FbsError::invalid(format!("unknown force reason {s:?}"))),
        }
    }
}

/// Strict threshold decision: skip iff `p > τ`.
pub fn threshold_gate(p: f64, tau: f64) -> bool {
    p > tau
}

/// Linear schedule from `tau_start` to `tau_end`, clamped at both ends.
pub fn anneal_tau(step: usize, a: &Anneal) -> f64 {
    if a.total == 0 {
        return a.tau_end;
    }
    let frac = (step as f64 / a.total as f64).clamp(0.0, 1.0);
    a.tau_start + (a.tau_end - a.tau_start) * frac
}

/// Forced-compute reason (if any) and effective threshold for layer `layer`
/// (0-based) at position `pos` whose input byte is `prev_byte`.
pub fn safety_mask(layer: usize, pos: usize, prev_byte: Option<usize>, cfg: &GatePolicyConfig) -> (Option<ForceReason>, f64) {
    if cfg.is_critical(layer) {
        return (Some(ForceReason::CriticalLayer), cfg.tau);
    }
    if pos < cfg.warmup {
        return (Some(ForceReason::Warmup), cfg.tau);
    }
    let protected = cfg.protect && prev_byte.is_some_and(|b| b < 256 && cfg.protected.contains(&(b as u8)));
    let tau = if protected { cfg.tau.max(cfg.protect_tau) } else { cfg.tau };
    (None, tau)
}

/// Threshold decision with safety overrides; returns `(skip, reason)`.
pub fn decide(p: f64, layer: usize, pos: usize, prev_byte: Option<usize>, cfg: &GatePolicyConfig) -> (bool, ForceReason) {
    let (forced, tau) = safety_mask(layer, pos, prev_byte, cfg);
    if let Some(r) = forced {
        return (false, r);
    }
    let skip = threshold_gate(p, tau);
    if !skip && threshold_gate(p, cfg.tau) {
        return (false, ForceReason::StructureToken);
    }
    (skip, ForceReason::None)
}

/// `R = α(c0 − c)/c0 − β·max(0, Δℓ)`.
pub fn reward(c: f64, c0: f64, delta_nll: f64, alpha: f64, beta: f64) -> Result<f64> {
    if c0 <= 0.0 || c0.is_nan() {
        return Err(FbsError::invalid(format!("full-compute proxy must be positive, got {c0}")));
    }
    Ok(alpha * (c0 - c) / c0 - beta * delta_nll.max(0.0))
}

/// Deterministic uniform draw for one `(position, layer)` cell.
pub fn cell_uniform(seed: u64, pos: usize, layer: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((pos as u64) << 16) | layer as u64);
    rng.random::<f64>()
}

/// Graph handles of one layer's gate parameters.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    /// `2d × d_r` residual projection.
    pub res: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Skip probabilities (`n×1`) from layer inputs `h`, the inter-layer delta
/// and the preview vector `z`.
pub fn gate_graph(g: &mut Graph, h: Var, delta: Var, z: Var, vars: GateVars, mode: GateInputMode) -> Result<Var> {
    let (n, _) = g.value(h).dims2();
    let d_r = g.shape(vars.res)[1];
    let r = if mode == GateInputMode::PreviewOnly {
        g.zeros(&[n, d_r])
    } else {
        let cat = g.concat_cols(&[h, delta])?;
        g.matmul(cat, vars.res)?
    };
    let z = if mode == GateInputMode::ResidualOnly {
        let d = g.value(z).dims2().1;
        g.zeros(&[n, d])
    } else {
        z
    };
    gate_mlp(g, r, z, vars)
}

fn gate_mlp(g: &mut Graph, r: Var, z: Var, vars: GateVars) -> Result<Var> {
    let inp = g.concat_cols(&[r, z])?;
    let a = g.matmul(inp, vars.w1)?;
    let a = g.add_row(a, vars.b1)?;
    let a = g.tanh(a);
    let o = g.matmul(a, vars.w2)?;
    let o = g.add_row(o, vars.b2)?;
    Ok(g.sigmoid(o))
}

/// Gate MLP weights as plain tensors.
#[derive(Clone, Debug)]
pub struct GateWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// `σ(MLP([r; z]))` for one residual signal `r` (already projected to
/// `d_r`) and preview vector `z`.
pub fn gate_prob(residual: &[f64], z: &[f64], mode: GateInputMode, wts: &GateWeights) -> Result<f64> {
    let mut g = Graph::new();
    let mut r = residual.to_vec();
    let mut zz = z.to_vec();
    match mode {
        GateInputMode::ResidualOnly => zz.iter_mut().for_each(|v| *v = 0.0),
        GateInputMode::PreviewOnly => r.iter_mut().for_each(|v| *v = 0.0),
        GateInputMode::Both => {}
    }
    let rv = g.constant(Tensor::new(vec![1, r.len()], r)?);
    let zv = g.constant(Tensor::new(vec![1, zz.len()], zz)?);
    let vars = GateVars {
        res: rv,
        w1: g.constant(wts.w1.clone()),
        b1: g.constant(wts.b1.clone()),
        w2: g.constant(wts.w2.clone()),
        b2: g.constant(wts.b2.clone()),
    };
    let p = gate_mlp(&mut g, rv, zv, vars)?;
    Ok(g.value(p).item())
}

/// Straight-through gate: forward value `hard`, gradient of `p`.
pub fn st_gate(g: &mut Graph, p: Var, hard: &[f64]) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    let hv = g.constant(Tensor::new(shape, hard.to_vec())?);
    let sg = g.stop_grad(p);
    let diff = g.sub(p, sg)?;
    g.add(hv, diff)
}

/// Bernoulli draw against a uniform sample: `1` iff `u < p`.
pub fn bernoulli(p: f64, u: f64) -> f64 {
    if u < p {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Skip-or-compute. At inference a set gate returns `h` without calling
/// `full_path`; in training the soft mixture `g·h + (1−g)·f(h)` always
/// evaluates it. `evals` counts calls of `full_path`.
pub fn apply_skip<F>(h: &[f64], full_path: F, g: f64, phase: Phase, evals: &mut u64) -> Vec<f64>
where
    F: FnOnce(&[f64]) -> Vec<f64>,
{
    match phase {
        Phase::Infer if g >= 0.5 => h.to_vec(),
        Phase::Infer => {
            *evals += 1;
            full_path(h)
        }
        Phase::Train => {
            *evals += 1;
            let f = full_path(h);
            h.iter().zip(&f).map(|(a, b)| g * a + (1.0 - g) * b).collect()
        }
    }
}

/// One gate decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// 1-based layer index.
    pub layer: usize,
    pub p: f64,
    pub g: u8,
    pub reason: ForceReason,
}

/// Gate decisions over a generation, one row per (step, layer).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateTrace {
    pub rows: Vec<TraceRow>,
}

impl GateTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,layer,p,g,reason\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.step, r.layer, r.p, r.g, r.reason));
        }
        s
    }

    pub fn parse_csv(body: &str, origin: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in body.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| FbsError::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
            let g = int(f[3])?;
            if g > 1 {
                return Err(err(format!("gate value {g} is not 0 or 1")));
            }
            rows.push(TraceRow {
                step: int(f[0])?,
                layer: int(f[1])?,
                p: num(f[2])?,
                g: g as u8,
                reason: f[4].parse().map_err(|e: FbsError| err(e.to_string()))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn skip_ratio(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.g == 1).count() as f64 / self.rows.len() as f64
    }
}

/// Balanced `()[]{}` nesting, the structural check behind the fallback rerun.
pub fn brackets_balanced(bytes: &[u8]) -> bool {
    let mut stack = Vec::new();
    for &b in bytes {
        match b {
            b'(' | b'[' | b'{' => stack.push(b),
            b')' | b']' | b'}' => {
                let open = match b {
                    b')' => b'(',
                    b']' => b'[',
                    _ => b'{',
                };
                if stack.pop() != Some(open) {
                    return false;
                }
            }
            _ => {}
        }
    }
    stack.is_empty()
}

/// `(mean p − ρ)² − η·mean H(p)` with binary entropy `H`.
pub fn gate_regularizer_value(p: &[f64], rho: f64) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let ent = p
        .iter()
        .map(|&q| {
            let q = q.clamp(1e-12, 1.0 - 1e-12);
            -(q * q.ln() + (1.0 - q) * (1.0 - q).ln())
        })
        .sum::<f64>()
        / n;
    (mean - rho).powi(2) - ENTROPY_WEIGHT * ent
}

pub const ENTROPY_WEIGHT: f64 = 0.01;

/// Graph form of [`gate_regularizer_value`] over a column of probabilities.
pub fn gate_regularizer(g: &mut Graph, p: Var, rho: f64) -> Result<Var> {
    if g.value(p).is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mean = g.mean(p);
    let dev = g.add_scalar(mean, -rho);
    let sq = g.mul(dev, dev)?;
    let lp = g.ln(p);
    let a = g.mul(p, lp)?;
    let neg = g.scale(p, -1.0);
    let q = g.add_scalar(neg, 1.0);
    let lq = g.ln(q);
    let b = g.mul(q, lq)?;
    let s = g.add(a, b)?;
    // mean of p ln p + q ln q is −mean H
    let neg_ent = g.mean(s);
    let term = g.scale(neg_ent, ENTROPY_WEIGHT);
    g.add(sq, term)
}
