//! Efficiency measurement: FLOPs ledger, relative compute, bypass ratios,
//! the fixed-step timing protocol and threshold sweeps.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardOptions, GateMode, KvCache, Model, ModelConfig, StepGates};
use crate::error::{FbsError, Result};
use crate::numerics::kernels;
use crate::skipgate::GateTrace;

/// Per-token FLOPs of one layer body at context length `ctx`: QKVO
/// projections, score and mix, and the two FFN matmuls, counting a
/// multiply-add as 2.
pub fn layer_flops(d: u64, d_ff: u64, ctx: u64) -> u64 {
    8 * d * d + 4 * d * ctx + 4 * d * d_ff
}

/// Preview overhead per executed layer step.
pub fn paw_overhead(cfg: &ModelConfig) -> u64 {
    (cfg.k_max * 2 * cfg.d * cfg.k_top) as u64
}

/// Chunk-cache attention overhead per executed layer step.
pub fn ch_overhead(cfg: &ModelConfig) -> u64 {
    (2 * cfg.d * cfg.c_chunk) as u64
}

/// Gate MLP cost per evaluated cell.
pub fn gate_overhead(cfg: &ModelConfig) -> u64 {
    (2 * (2 * cfg.d * cfg.d_r + (cfg.d_r + cfg.d) * cfg.gate_hidden + cfg.gate_hidden)) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerStep {
    pub ctx: usize,
    /// Executed flag per layer.
    pub executed: Vec<bool>,
}

/// Executed layer invocations with the per-layer cost formula.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub d: u64,
    pub d_ff: u64,
    pub n_layers: usize,
    pub paw_cost: u64,
    pub ch_cost: u64,
    pub gate_cost: u64,
    pub steps: Vec<LedgerStep>,
    pub paw_calls: u64,
    pub ch_calls: u64,
    pub gate_calls: u64,
}

impl FlopsLedger {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            d: cfg.d as u64,
            d_ff: cfg.d_ff as u64,
            n_layers: cfg.n_layers,
            paw_cost: paw_overhead(cfg),
            ch_cost: ch_overhead(cfg),
            gate_cost: gate_overhead(cfg),
            steps: Vec::new(),
            paw_calls: 0,
            ch_calls: 0,
            gate_calls: 0,
        }
    }

    /// Records one decode step; module overhead counts executed layers only
    /// (every layer is assumed to carry the modules that are switched on).
    pub fn record_step(&mut self, ctx: usize, executed: &[bool], paw: bool, ch: bool, gated: bool) {
        let n = executed.iter().filter(|&&e| e).count() as u64;
        if paw {
            self.paw_calls += n;
        }
        if ch {
            self.ch_calls += n;
        }
        if gated {
            self.gate_calls += executed.len() as u64;
        }
        self.steps.push(LedgerStep {
            ctx,
            executed: executed.to_vec(),
        });
    }

    pub fn merge(&mut self, other: &FlopsLedger) {
        self.steps.extend(other.steps.iter().cloned());
        self.paw_calls += other.paw_calls;
        self.ch_calls += other.ch_calls;
        self.gate_calls += other.gate_calls;
    }

    /// Layer FLOPs over executed cells.
    pub fn executed_flops(&self) -> u128 {
        self.sum(|e| e)
    }

    /// Layer FLOPs with every cell executed.
    pub fn total_flops(&self) -> u128 {
        self.sum(|_| true)
    }

    pub fn overhead_flops(&self) -> u128 {
        (self.paw_calls * self.paw_cost + self.ch_calls * self.ch_cost + self.gate_calls * self.gate_cost) as u128
    }

    fn sum(&self, keep: impl Fn(bool) -> bool) -> u128 {
        self.steps
            .iter()
            .map(|s| {
                let f = layer_flops(self.d, self.d_ff, s.ctx as u64) as u128;
                f * s.executed.iter().filter(|&&e| keep(e)).count() as u128
            })
            .sum()
    }

    pub fn executed_cells(&self) -> usize {
        self.steps.iter().map(|s| s.executed.iter().filter(|&&e| e).count()).sum()
    }

    /// Executed cells agree with `g = 0` rows of the trace, cell by cell.
    pub fn matches_trace(&self, trace: &GateTrace) -> bool {
        let cells: usize = self.steps.iter().map(|s| s.executed.len()).sum();
        cells == trace.rows.len()
            && trace.rows.iter().all(|r| {
                self.steps
                    .get(r.step)
                    .and_then(|s| s.executed.get(r.layer.wrapping_sub(1)))
                    .is_some_and(|&e| e == (r.g == 0))
            })
    }
}

/// Executed over total layer FLOPs, optionally with module overhead added
/// to the numerator.
pub fn tflops_rel(ledger: &FlopsLedger, include_overhead: bool) -> Result<f64> {
    let total = ledger.total_flops();
    if total == 0 {
        return Err(FbsError::invalid("empty ledger"));
    }
    let mut num = ledger.executed_flops();
    if include_overhead {
        num += ledger.overhead_flops();
    }
    Ok(num as f64 / total as f64)
}

/// `Σ a_t / Σ m` for a fixed proposal length.
pub fn acceptance_rate(accepted: &[usize], m: usize) -> Result<f64> {
    if m == 0 {
        return Err(FbsError::invalid("proposal length must be positive"));
    }
    if accepted.is_empty() {
        return Err(FbsError::invalid("no steps"));
    }
    if let Some(a) = accepted.iter().find(|&&a| a > m) {
        return Err(FbsError::invalid(format!("accepted count {a} exceeds proposal length {m}")));
    }
    Ok(accepted.iter().sum::<usize>() as f64 / (m * accepted.len()) as f64)
}

/// `Σ v_t / Σ m_t`.
pub fn verified_advance(committed: &[usize], attempted: &[usize]) -> Result<f64> {
    if committed.len() != attempted.len() {
        return Err(FbsError::invalid("committed and attempted lengths differ"));
    }
    if committed.iter().zip(attempted).any(|(v, m)| v > m) {
        return Err(FbsError::invalid("committed exceeds attempted"));
    }
    let m: usize = attempted.iter().sum();
    if m == 0 {
        return Err(FbsError::invalid("nothing attempted"));
    }
    Ok(committed.iter().sum::<usize>() as f64 / m as f64)
}

/// Fixed-step timing protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingProtocol {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub warmup: usize,
    pub runs: usize,
}

impl TimingProtocol {
    pub fn desk() -> Self {
        Self {
            prompt_len: 128,
            gen_len: 64,
            warmup: 3,
            runs: 10,
        }
    }

    /// 512-token prompts, 128 decode steps, 20 warmup and 50 measured runs.
    pub fn paper() -> Self {
        Self {
            prompt_len: 512,
            gen_len: 128,
            warmup: 20,
            runs: 50,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(FbsError::invalid(format!("unknown profile {name:?} (desk|paper)"))),
        }
    }
}

/// Wall-clock of one measured run over every prompt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub prefill_ms: f64,
    pub decode_ms: f64,
}

impl RunTiming {
    pub fn total_ms(&self) -> f64 {
        self.prefill_ms + self.decode_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub warmup: usize,
    pub runs: Vec<RunTiming>,
    pub median_ms: f64,
    pub median_decode_ms: f64,
    pub median_prefill_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl TimingReport {
    pub fn from_runs(warmup: usize, runs: Vec<RunTiming>) -> Self {
        let totals: Vec<f64> = runs.iter().map(RunTiming::total_ms).collect();
        let n = totals.len() as f64;
        let mean = totals.iter().sum::<f64>() / n;
        let var = if totals.len() > 1 {
            totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            warmup,
            median_ms: median(&totals),
            median_decode_ms: median(&runs.iter().map(|r| r.decode_ms).collect::<Vec<_>>()),
            median_prefill_ms: median(&runs.iter().map(|r| r.prefill_ms).collect::<Vec<_>>()),
            mean_ms: mean,
            std_ms: var.sqrt(),
            runs,
        }
    }
}

/// Prefill then exactly `gen_len` greedy steps per prompt, timed separately.
/// Returns the per-run timing and the ledger of one run.
fn run_once(model: &Model, prompts: &[Vec<usize>], gen_len: usize, opts: &ForwardOptions) -> Result<(RunTiming, FlopsLedger, GateTrace)> {
    let mut ledger = FlopsLedger::new(&model.cfg);
    let mut trace = GateTrace::default();
    let mut prefill = 0.0;
    let mut decode = 0.0;
    let gated = opts.gate != GateMode::Off;
    for prompt in prompts {
        let mut cache = KvCache::new(model);
        let start = Instant::now();
        for &t in &prompt[..prompt.len() - 1] {
            model.decode_step(&mut cache, t, StepGates::Policy, opts)?;
        }
        prefill += start.elapsed().as_secs_f64() * 1e3;
        let mut next = prompt[prompt.len() - 1];
        let base = ledger.steps.len();
        let start = Instant::now();
        for _ in 0..gen_len {
            let ctx = cache.t + 1;
            let out = model.decode_step(&mut cache, next, StepGates::Policy, opts)?;
            next = kernels::argmax(&out.logits);
            let executed: Vec<bool> = out.cells.iter().map(|c| !c.skipped).collect();
            let step = ledger.steps.len();
            for (l, c) in out.cells.iter().enumerate() {
                trace.rows.push(crate::skipgate::TraceRow {
                    step,
                    layer: l + 1,
                    p: c.p,
                    g: c.skipped as u8,
                    reason: c.reason,
                });
            }
            ledger.record_step(ctx, &executed, opts.paw.is_some(), opts.ch, gated);
        }
        decode += start.elapsed().as_secs_f64() * 1e3;
        debug_assert_eq!(ledger.steps.len() - base, gen_len);
    }
    Ok((
        RunTiming {
            prefill_ms: prefill,
            decode_ms: decode,
        },
        ledger,
        trace,
    ))
}

fn truncate_prompts(prompts: &[Vec<usize>], len: usize) -> Result<Vec<Vec<usize>>> {
    if prompts.is_empty() {
        return Err(FbsError::invalid("empty prompt set"));
    }
    if len == 0 {
        return Err(FbsError::invalid("prompt_len must be positive"));
    }
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.len() < len {
                Err(FbsError::invalid(format!("prompt {i} has {} tokens, need {len}", p.len())))
            } else {
                Ok(p[..len].to_vec())
            }
        })
        .collect()
}

/// Warmup runs are discarded; the ledger and trace come from the last
/// measured run (decoding is deterministic, so every run agrees).
pub fn timed_generate(
    model: &Model,
    prompts: &[Vec<usize>],
    protocol: &TimingProtocol,
    opts: &ForwardOptions,
) -> Result<(TimingReport, FlopsLedger, GateTrace)> {
    if protocol.runs == 0 || protocol.gen_len == 0 {
        return Err(FbsError::invalid("runs and gen_len must be positive"));
    }
    let prompts = truncate_prompts(prompts, protocol.prompt_len)?;
    for _ in 0..protocol.warmup {
        run_once(model, &prompts, protocol.gen_len, opts)?;
    }
    let mut runs = Vec::with_capacity(protocol.runs);
    let mut last = None;
    for _ in 0..protocol.runs {
        let (t, l, tr) = run_once(model, &prompts, protocol.gen_len, opts)?;
        runs.push(t);
        last = Some((l, tr));
    }
    let (ledger, trace) = last.expect("at least one run");
    Ok((TimingReport::from_runs(protocol.warmup, runs), ledger, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub skip_pct: f64,
    pub tflops_rel: f64,
    pub latency_ms_median: f64,
    pub nll: f64,
}

pub const SWEEP_HEADER: &str = "tau,skip_pct,tflops_rel,latency_ms_median,nll";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.tau, r.skip_pct, r.tflops_rel, r.latency_ms_median, r.nll));
    }
    s
}

/// Mean next-token NLL of teacher-forced passes under `opts`.
pub fn mean_nll(model: &Model, seqs: &[Vec<usize>], opts: &ForwardOptions) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in seqs {
        if s.len() < 2 {
            continue;
        }
        let logits = model.logits(s, opts)?;
        for i in 0..s.len() - 1 {
            let mut row = logits.row(i).to_vec();
            kernels::log_softmax_inplace(&mut row);
            total -= row[s[i + 1]];
            n += 1;
        }
    }
    if n == 0 {
        return Err(FbsError::invalid("no next-token targets"));
    }
    Ok(total / n as f64)
}

/// One row per threshold under threshold gating, sorted by τ descending.
/// `base` supplies the modules and the safety policy; its τ is replaced.
pub fn tau_sweep(
    model: &Model,
    prompts: &[Vec<usize>],
    taus: &[f64],
    protocol: &TimingProtocol,
    base: &ForwardOptions,
) -> Result<Vec<SweepRow>> {
    if taus.is_empty() {
        return Err(FbsError::invalid("empty τ grid"));
    }
    let mut taus = taus.to_vec();
    taus.sort_by(|a, b| b.total_cmp(a));
    let truncated = truncate_prompts(prompts, protocol.prompt_len)?;
    let mut rows = Vec::with_capacity(taus.len());
    for tau in taus {
        let mut opts = base.clone();
        opts.gate = GateMode::Threshold;
        opts.policy.tau = tau;
        let (report, ledger, trace) = timed_generate(model, &truncated, protocol, &opts)?;
        rows.push(SweepRow {
            tau,
            skip_pct: 100.0 * trace.skip_ratio(),
            tflops_rel: tflops_rel(&ledger, false)?,
            latency_ms_median: report.median_ms,
            nll: mean_nll(model, &truncated, &opts)?,
        });
    }
    Ok(rows)
}
