use super::forward::{ForwardOptions, GateMode, Rows};
use super::Model;
use crate::chunk::ChunkCache;
use crate::error::{FbsError, Result};
use crate::harness::FlopsLedger;
use crate::numerics::{kernels, Binder, Graph};
use crate::skipgate::{ForceReason, GateTrace, TraceRow};

/// Keys, values and chunk state of one layer. Rows are appended only when
/// the layer executes, so skipped positions leave no entry.
#[derive(Clone, Debug)]
pub struct LayerCache {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    /// Absolute position of every cached row.
    pub positions: Vec<usize>,
    pub chunks: ChunkCache,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Per-sequence incremental decoding state.
#[derive(Clone, Debug)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    /// Tokens consumed so far.
    pub t: usize,
    /// Layer bodies executed since creation.
    pub body_evals: u64,
}

impl KvCache {
    pub fn new(model: &Model) -> Self {
        Self {
            layers: (0..model.cfg.n_layers)
                .map(|_| LayerCache {
                    keys: Vec::new(),
                    values: Vec::new(),
                    positions: Vec::new(),
                    chunks: ChunkCache::new(model.cfg.d),
                })
                .collect(),
            t: 0,
            body_evals: 0,
        }
    }
}

/// Per-layer gate source for one step.
#[derive(Clone, Copy, Debug)]
pub enum StepGates<'a> {
    /// Skip flags per layer (`true` = skip), bypassing the policy.
    Given(&'a [bool]),
    /// Decisions from the options' gate mode.
    Policy,
}

/// One (step, layer) cell of the decode trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCell {
    /// Skip probability; NaN when no gate was evaluated.
    pub p: f64,
    pub skipped: bool,
    pub reason: ForceReason,
    /// `‖h^{(ℓ)} − h^{(ℓ−1)}‖` of the layer inputs (0 at the first layer).
    pub energy: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub cells: Vec<StepCell>,
    /// Final hidden state of the new token.
    pub hidden: Vec<f64>,
}

impl Model {
    /// Feeds one token at position `cache.t`.
    pub fn decode_step(&self, cache: &mut KvCache, token: usize, gates: StepGates, opts: &ForwardOptions) -> Result<StepOutput> {
        if cache.layers.len() != self.cfg.n_layers {
            return Err(FbsError::invalid(format!(
                "cache has {} layers, model has {}",
                cache.layers.len(),
                self.cfg.n_layers
            )));
        }
        let given = match gates {
            StepGates::Given(g) => {
                if g.len() != self.cfg.n_layers {
                    return Err(FbsError::invalid(format!(
                        "gate vector has {} entries for L={}",
                        g.len(),
                        self.cfg.n_layers
                    )));
                }
                Some(g)
            }
            StepGates::Policy => None,
        };
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let pos = [cache.t];
        let tok = [token];
        let rows = Rows {
            tokens: &tok,
            positions: &pos,
        };
        let h0 = self.embed(&mut g, &mut b, &rows)?;
        let (h, hidden, layers) = self.run_stack(&mut g, &mut b, h0, &rows, opts, Some(cache), given)?;
        let logits = self.lm_head(&mut g, &mut b, h)?;
        cache.t += 1;
        let cells = layers
            .iter()
            .enumerate()
            .map(|(l, out)| {
                let energy = if l == 0 {
                    0.0
                } else {
                    let (a, b) = (g.value(hidden[l]).data(), g.value(hidden[l - 1]).data());
                    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                };
                let (p, reason) = match &out.gate {
                    Some(gt) => (gt.p_values[0], gt.reasons[0]),
                    None => (f64::NAN, ForceReason::None),
                };
                StepCell {
                    p,
                    skipped: out.executed.is_empty(),
                    reason,
                    energy,
                }
            })
            .collect();
        Ok(StepOutput {
            logits: g.value(logits).data().to_vec(),
            cells,
            hidden: g.value(h).data().to_vec(),
        })
    }
}

/// Result of fixed-step greedy decoding.
#[derive(Clone, Debug)]
pub struct Generation {
    /// The `n_new` emitted tokens.
    pub tokens: Vec<usize>,
    /// Decode-step gate decisions (prefill excluded), steps numbered from 0.
    pub trace: GateTrace,
    pub ledger: FlopsLedger,
    /// Decode-step cells `[step][layer]`.
    pub cells: Vec<Vec<StepCell>>,
    /// Logits of every decode step.
    pub logits: Vec<Vec<f64>>,
}

/// Greedy decoding for exactly `n_new` steps. The prompt's last token is the
/// first decode input; every later input is the previous argmax.
pub fn greedy_generate(model: &Model, prompt: &[usize], n_new: usize, opts: &ForwardOptions) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(FbsError::invalid("empty prompt"));
    }
    if n_new == 0 {
        return Err(FbsError::invalid("n_new must be at least 1"));
    }
    if opts.gate.is_mixture() {
        return Err(FbsError::invalid("generation needs a hard gate mode"));
    }
    if prompt.len() + n_new - 1 > model.cfg.max_len {
        return Err(FbsError::invalid(format!(
            "prompt {} + {} new tokens exceeds max_len {}",
            prompt.len(),
            n_new,
            model.cfg.max_len
        )));
    }
    let mut cache = KvCache::new(model);
    for &t in &prompt[..prompt.len() - 1] {
        model.decode_step(&mut cache, t, StepGates::Policy, opts)?;
    }
    let mut ledger = FlopsLedger::new(&model.cfg);
    let mut trace = GateTrace::default();
    let mut tokens = Vec::with_capacity(n_new);
    let mut cells = Vec::with_capacity(n_new);
    let mut all_logits = Vec::with_capacity(n_new);
    let mut next = prompt[prompt.len() - 1];
    for step in 0..n_new {
        let ctx = cache.t + 1;
        let out = model.decode_step(&mut cache, next, StepGates::Policy, opts)?;
        let gated = opts.gate != GateMode::Off;
        for (l, c) in out.cells.iter().enumerate() {
            trace.rows.push(TraceRow {
                step,
                layer: l + 1,
                p: c.p,
                g: c.skipped as u8,
                reason: c.reason,
            });
        }
        ledger.record_step(
            ctx,
            &out.cells.iter().map(|c| !c.skipped).collect::<Vec<_>>(),
            opts.paw.is_some(),
            opts.ch,
            gated,
        );
        next = kernels::argmax(&out.logits);
        tokens.push(next);
        all_logits.push(out.logits);
        cells.push(out.cells);
    }
    Ok(Generation {
        tokens,
        trace,
        ledger,
        cells,
        logits: all_logits,
    })
}
