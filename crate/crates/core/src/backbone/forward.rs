use super::decode::LayerCache;
use super::{KvCache, Model};
use crate::chunk::head::{chunk_schedule, label_of};
use crate::chunk::{BiosLabel, ChunkRecord};
use crate::error::{FbsError, Result};
use crate::numerics::kernels;
use crate::numerics::{Binder, Graph, Tensor, Var};
use crate::paw::{preview_graph, CompressionVars, PawSettings, PawVars, PreviewBlock, WindowMode};
use crate::skipgate::{self, bernoulli, cell_uniform, gate_graph, st_gate, ForceReason, GatePolicyConfig, GateVars};

/// How gates act during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum GateMode {
    /// No gates: every layer executes.
    Off,
    /// Training mixture `p·h + (1−p)·f(h)`.
    Soft,
    /// Training mixture with a Bernoulli draw and straight-through gradient.
    StraightThrough { seed: u64 },
    /// Training mixture with `1[p > τ]` and straight-through gradient.
    StThreshold { tau: f64 },
    /// Conditional execution by the policy threshold and safety rules.
    Threshold,
    /// Conditional execution with given skip flags `[position][layer]`.
    Fixed(Vec<Vec<bool>>),
    /// Conditional execution with Bernoulli draws (critical layers and
    /// warmup still forced).
    Sampled { seed: u64 },
    /// Every layer skipped at every position.
    AllSkip,
}

impl GateMode {
    pub fn is_mixture(&self) -> bool {
        matches!(self, GateMode::Soft | GateMode::StraightThrough { .. } | GateMode::StThreshold { .. })
    }
}

/// Discrete choices held fixed across repeated passes (finite differencing).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pins {
    pub bios: Vec<Option<Vec<BiosLabel>>>,
    pub topk: Vec<Option<Vec<Vec<usize>>>>,
    pub gate_hard: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Preview window mode; `None` disables the preview contribution.
    pub paw: Option<WindowMode>,
    pub ch: bool,
    pub gate: GateMode,
    pub policy: GatePolicyConfig,
    /// Soft preview windows.
    pub training: bool,
    pub detach_gate_inputs: bool,
    pub pins: Option<Pins>,
}

impl ForwardOptions {
    /// Plain decoder: no preview, no chunk head, no gates.
    pub fn vanilla() -> Self {
        Self {
            paw: None,
            ch: false,
            gate: GateMode::Off,
            policy: GatePolicyConfig::default(),
            training: false,
            detach_gate_inputs: true,
            pins: None,
        }
    }

    /// Every module active with threshold gating.
    pub fn full(policy: GatePolicyConfig) -> Self {
        Self {
            paw: Some(WindowMode::Dynamic),
            ch: true,
            gate: GateMode::Threshold,
            policy,
            ..Self::vanilla()
        }
    }

    /// Stage-1 training: soft windows and soft gate mixture.
    pub fn stage1(policy: GatePolicyConfig) -> Self {
        Self {
            paw: Some(WindowMode::Dynamic),
            ch: true,
            gate: GateMode::Soft,
            policy,
            training: true,
            ..Self::vanilla()
        }
    }

    pub fn with_gate(mut self, gate: GateMode) -> Self {
        self.gate = gate;
        self
    }
}

#[derive(Clone, Debug)]
pub struct ChunkOutput {
    /// `n×5` head logits over executed rows (fifth column is the CTC blank).
    pub logits: Var,
    pub labels: Vec<BiosLabel>,
    /// Closed records in executed-row coordinates.
    pub records: Vec<ChunkRecord>,
    /// Normalized layer input the head and the cache read.
    pub x: Var,
}

#[derive(Clone, Debug)]
pub struct GateOutput {
    /// `m×1` skip probabilities.
    pub p: Var,
    pub p_values: Vec<f64>,
    /// Forward gate value per row (`p` for the soft mixture, else 0/1).
    pub g: Vec<f64>,
    pub reasons: Vec<ForceReason>,
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// Rows whose block executed, ascending.
    pub executed: Vec<usize>,
    pub preview: Option<PreviewBlock>,
    pub chunk: Option<ChunkOutput>,
    pub gate: Option<GateOutput>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `m×V`.
    pub logits: Var,
    /// Input of each layer followed by the last layer's output (L+1 entries).
    pub hidden: Vec<Var>,
    pub layers: Vec<LayerOutput>,
}

impl ForwardOutput {
    /// Discrete choices of this pass, for replay.
    pub fn pins(&self) -> Pins {
        Pins {
            bios: self.layers.iter().map(|l| l.chunk.as_ref().map(|c| c.labels.clone())).collect(),
            topk: self
                .layers
                .iter()
                .map(|l| l.preview.as_ref().map(|p| p.support.clone()))
                .collect(),
            gate_hard: self
                .layers
                .iter()
                .map(|l| l.gate.as_ref().map(|gt| gt.g.clone()))
                .collect(),
        }
    }
}

/// `h + sa + paw + ch`, elementwise in that order.
pub fn fuse_block(h: &Tensor, sa: &Tensor, paw: &Tensor, ch: &Tensor) -> Result<Tensor> {
    for t in [sa, paw, ch] {
        if t.shape() != h.shape() {
            return Err(FbsError::Shape(format!("fuse: {:?} vs {:?}", h.shape(), t.shape())));
        }
    }
    let data = h
        .data()
        .iter()
        .zip(sa.data())
        .zip(paw.data())
        .zip(ch.data())
        .map(|(((a, b), c), e)| a + b + c + e)
        .collect();
    Tensor::new(h.shape().to_vec(), data)
}

/// Tokens and absolute positions of the rows being processed.
pub(crate) struct Rows<'a> {
    pub tokens: &'a [usize],
    pub positions: &'a [usize],
}

impl Model {
    /// Teacher-forced pass over `tokens` on a caller-owned graph.
    pub fn forward_on(&self, g: &mut Graph, b: &mut Binder, tokens: &[usize], opts: &ForwardOptions) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(FbsError::invalid("empty token sequence"));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(FbsError::invalid(format!(
                "sequence of {} exceeds max_len {}",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let rows = Rows {
            tokens,
            positions: &positions,
        };
        let h0 = self.embed(g, b, &rows)?;
        let (h, hidden, layers) = self.run_stack(g, b, h0, &rows, opts, None, None)?;
        let logits = self.lm_head(g, b, h)?;
        Ok(ForwardOutput { logits, hidden, layers })
    }

    /// Inference pass with all parameters frozen.
    pub fn forward(&self, tokens: &[usize], opts: &ForwardOptions) -> Result<(Graph, ForwardOutput)> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.store);
        let out = self.forward_on(&mut g, &mut b, tokens, opts)?;
        Ok((g, out))
    }

    /// Logits of a teacher pass as a tensor.
    pub fn logits(&self, tokens: &[usize], opts: &ForwardOptions) -> Result<Tensor> {
        let (g, out) = self.forward(tokens, opts)?;
        Ok(g.value(out.logits).clone())
    }

    pub(crate) fn embed(&self, g: &mut Graph, b: &mut Binder, rows: &Rows) -> Result<Var> {
        if let Some(&t) = rows.tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(FbsError::invalid(format!("token id {t} ≥ V={}", self.cfg.vocab)));
        }
        if let Some(&p) = rows.positions.iter().find(|&&p| p >= self.cfg.max_len) {
            return Err(FbsError::invalid(format!("position {p} ≥ max_len {}", self.cfg.max_len)));
        }
        let tok = b.var(g, &self.store, self.ids.tok);
        let pos = b.var(g, &self.store, self.ids.pos);
        let te = g.embedding(tok, rows.tokens)?;
        let pe = g.embedding(pos, rows.positions)?;
        g.add(te, pe)
    }

    pub(crate) fn lm_head(&self, g: &mut Graph, b: &mut Binder, h: Var) -> Result<Var> {
        let lg = b.var(g, &self.store, self.ids.lnf_g);
        let lb = b.var(g, &self.store, self.ids.lnf_b);
        let tok = b.var(g, &self.store, self.ids.tok);
        let x = g.layer_norm(h, lg, lb)?;
        g.matmul_bt(x, tok)
    }

    /// Runs every layer over `rows`. With `cache` the block is a single new
    /// row whose attention and chunk state come from (and go to) the cache.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn run_stack(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        h0: Var,
        rows: &Rows,
        opts: &ForwardOptions,
        mut cache: Option<&mut KvCache>,
        given: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>, Vec<LayerOutput>)> {
        let cfg = &self.cfg;
        let m = rows.tokens.len();
        let d = cfg.d;
        if cache.is_some() && m != 1 {
            return Err(FbsError::invalid("cached decoding processes one row at a time"));
        }
        if let Some(gv) = given {
            if gv.len() != cfg.n_layers {
                return Err(FbsError::invalid(format!("gate vector has {} entries for L={}", gv.len(), cfg.n_layers)));
            }
        }
        if cache.is_some() && opts.gate.is_mixture() {
            return Err(FbsError::invalid("incremental decoding needs hard gates"));
        }
        let mut h = h0;
        let mut hidden = vec![h0];
        let mut prev: Option<Var> = None;
        let mut z_latest = g.zeros(&[m, d]);
        let mut outs = Vec::with_capacity(cfg.n_layers);
        let all: Vec<usize> = (0..m).collect();
        for l in 0..cfg.n_layers {
            let ids = &self.ids.layers[l];
            let gate_on = given.is_some() || opts.gate != GateMode::Off;
            let p = if gate_on {
                let delta = match prev {
                    Some(pv) => g.sub(h, pv)?,
                    None => g.zeros(&[m, d]),
                };
                let (hin, din, zin) = if opts.detach_gate_inputs {
                    (g.stop_grad(h), g.stop_grad(delta), g.stop_grad(z_latest))
                } else {
                    (h, delta, z_latest)
                };
                let vars = GateVars {
                    res: b.var(g, &self.store, ids.gate.res),
                    w1: b.var(g, &self.store, ids.gate.w1),
                    b1: b.var(g, &self.store, ids.gate.b1),
                    w2: b.var(g, &self.store, ids.gate.w2),
                    b2: b.var(g, &self.store, ids.gate.b2),
                };
                Some(gate_graph(g, hin, din, zin, vars, cfg.gate_input)?)
            } else {
                None
            };
            let p_values: Vec<f64> = p.map(|p| g.value(p).data().to_vec()).unwrap_or_default();
            let critical = opts.policy.is_critical(l);
            let pins = opts.pins.as_ref();
            let pin_bios = pins.and_then(|p| p.bios.get(l).cloned().flatten());
            let pin_topk = pins.and_then(|p| p.topk.get(l).cloned().flatten());
            let layer_cache = cache.as_deref_mut();

            let (h_next, out) = if opts.gate.is_mixture() && given.is_none() {
                let (f, preview, chunk) = self.body(g, b, l, h, rows, opts, pin_bios, pin_topk, None)?;
                let p = p.expect("mixture gates need probabilities");
                let (h_next, gvals, reasons) = if critical {
                    (f, vec![0.0; m], vec![ForceReason::CriticalLayer; m])
                } else {
                    let pinned = pins.and_then(|p| p.gate_hard.get(l).cloned().flatten());
                    let gv = match &opts.gate {
                        GateMode::Soft => p,
                        GateMode::StraightThrough { seed } => {
                            let hard = pinned.unwrap_or_else(|| {
                                p_values
                                    .iter()
                                    .zip(rows.positions)
                                    .map(|(&pv, &pos)| bernoulli(pv, cell_uniform(*seed, pos, l)))
                                    .collect()
                            });
                            st_gate(g, p, &hard)?
                        }
                        GateMode::StThreshold { tau } => {
                            let hard = pinned.unwrap_or_else(|| {
                                p_values.iter().map(|&pv| if skipgate::threshold_gate(pv, *tau) { 1.0 } else { 0.0 }).collect()
                            });
                            st_gate(g, p, &hard)?
                        }
                        _ => unreachable!(),
                    };
                    let gvals = g.value(gv).data().to_vec();
                    let diff = g.sub(h, f)?;
                    let mixed = g.mul_col(diff, gv)?;
                    (g.add(f, mixed)?, gvals, vec![ForceReason::None; m])
                };
                let out = LayerOutput {
                    executed: all.clone(),
                    preview,
                    chunk,
                    gate: Some(GateOutput {
                        p,
                        p_values,
                        g: gvals,
                        reasons,
                    }),
                };
                (h_next, out)
            } else {
                let mut skip = vec![false; m];
                let mut reasons = vec![ForceReason::None; m];
                for i in 0..m {
                    let pos = rows.positions[i];
                    let (s, r) = if let Some(gv) = given {
                        (gv[l], ForceReason::None)
                    } else {
                        match &opts.gate {
                            GateMode::Off => (false, ForceReason::None),
                            GateMode::Threshold => skipgate::decide(p_values[i], l, pos, Some(rows.tokens[i]), &opts.policy),
                            GateMode::Fixed(actions) => (
                                actions.get(pos).and_then(|a| a.get(l)).copied().unwrap_or(false),
                                ForceReason::None,
                            ),
                            GateMode::Sampled { seed } => match skipgate::safety_mask(l, pos, None, &opts.policy).0 {
                                Some(r) => (false, r),
                                None => (bernoulli(p_values[i], cell_uniform(*seed, pos, l)) == 1.0, ForceReason::None),
                            },
                            GateMode::AllSkip => (true, ForceReason::None),
                            _ => unreachable!(),
                        }
                    };
                    skip[i] = s;
                    reasons[i] = r;
                }
                let executed: Vec<usize> = (0..m).filter(|&i| !skip[i]).collect();
                let (h_next, preview, chunk) = if executed.is_empty() {
                    (h, None, None)
                } else if executed.len() == m {
                    let (f, pv, ch) = self.body(g, b, l, h, rows, opts, pin_bios, pin_topk, layer_cache)?;
                    (f, pv, ch)
                } else {
                    let hs = g.gather_rows(h, &executed)?;
                    let toks: Vec<usize> = executed.iter().map(|&i| rows.tokens[i]).collect();
                    let poss: Vec<usize> = executed.iter().map(|&i| rows.positions[i]).collect();
                    let sub = Rows {
                        tokens: &toks,
                        positions: &poss,
                    };
                    let (f, pv, ch) = self.body(g, b, l, hs, &sub, opts, pin_bios, pin_topk, layer_cache)?;
                    (g.scatter_rows(h, f, &executed)?, pv, ch)
                };
                let gate = p.map(|p| GateOutput {
                    p,
                    p_values,
                    g: skip.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect(),
                    reasons,
                });
                (
                    h_next,
                    LayerOutput {
                        executed,
                        preview,
                        chunk,
                        gate,
                    },
                )
            };
            if let Some(pv) = &out.preview {
                let z = pv.z;
                z_latest = if out.executed.len() == m {
                    z
                } else {
                    g.scatter_rows(z_latest, z, &out.executed)?
                };
            }
            outs.push(out);
            prev = Some(h);
            h = h_next;
            hidden.push(h);
        }
        Ok((h, hidden, outs))
    }

    /// One fused block on `rows`: attention, preview and chunk contributions,
    /// then the FFN.
    #[allow(clippy::too_many_arguments)]
    fn body(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        l: usize,
        h: Var,
        rows: &Rows,
        opts: &ForwardOptions,
        pin_bios: Option<Vec<BiosLabel>>,
        pin_topk: Option<Vec<Vec<usize>>>,
        cache: Option<&mut KvCache>,
    ) -> Result<(Var, Option<PreviewBlock>, Option<ChunkOutput>)> {
        let cfg = &self.cfg;
        let ids = &self.ids.layers[l];
        let s = &self.store;
        let mut lc: Option<&mut LayerCache> = match cache {
            Some(c) => {
                c.body_evals += 1;
                Some(&mut c.layers[l])
            }
            None => None,
        };
        let (g1, b1) = (b.var(g, s, ids.ln1_g), b.var(g, s, ids.ln1_b));
        let x = g.layer_norm(h, g1, b1)?;
        let wq = b.var(g, s, ids.wq);
        let wk = b.var(g, s, ids.wk);
        let wv = b.var(g, s, ids.wv);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let att = match lc.as_deref_mut() {
            None => g.causal_attention(q, k, v, cfg.n_heads)?,
            Some(c) => {
                c.keys.extend_from_slice(g.value(k).data());
                c.values.extend_from_slice(g.value(v).data());
                c.positions.extend_from_slice(rows.positions);
                let n = c.positions.len();
                let mut out = vec![0.0; cfg.d];
                kernels::attend_row(g.value(q).data(), &c.keys, &c.values, n, cfg.n_heads, &mut out, None);
                g.constant(Tensor::new(vec![1, cfg.d], out)?)
            }
        };
        let wo = b.var(g, s, ids.wo);
        let sa = g.matmul(att, wo)?;
        let mut fused = g.add(h, sa)?;

        let mut preview = None;
        if let (Some(mode), Some(pi)) = (opts.paw, ids.paw.as_ref()) {
            let comp = match (cfg.compression, pi.comp) {
                (crate::paw::Compression::Mean, _) => CompressionVars::Mean,
                (crate::paw::Compression::Conv, Some(c)) => CompressionVars::Conv(b.var(g, s, c)),
                (crate::paw::Compression::Linear, Some(c)) => CompressionVars::Linear(b.var(g, s, c)),
                (crate::paw::Compression::None, Some(c)) => CompressionVars::None(b.var(g, s, c)),
                _ => return Err(FbsError::Checkpoint("compression parameter missing".into())),
            };
            let vars = PawVars {
                u: b.var(g, s, pi.u),
                heads: b.var(g, s, pi.heads),
                embedding: b.var(g, s, self.ids.tok),
                comp,
            };
            let set = PawSettings {
                k_max: cfg.k_max,
                k_top: cfg.k_top,
                vocab: cfg.vocab,
                gamma: cfg.gamma,
                mode,
                soft: opts.training,
            };
            let block = preview_graph(g, x, vars, set, pin_topk.as_deref())?;
            let out = b.var(g, s, pi.out);
            let contrib = g.matmul(block.z, out)?;
            fused = g.add(fused, contrib)?;
            preview = Some(block);
        }

        let mut chunk = None;
        if let (true, Some(ci)) = (opts.ch, ids.ch.as_ref()) {
            let w = b.var(g, s, ci.bios);
            let bb = b.var(g, s, ci.bios_b);
            let lin = g.matmul(x, w)?;
            let logits = g.add_row(lin, bb)?;
            let labels: Vec<BiosLabel> = match pin_bios {
                Some(p) if p.len() == rows.tokens.len() => p,
                Some(p) => {
                    return Err(FbsError::invalid(format!(
                        "{} pinned labels for {} rows at layer {l}",
                        p.len(),
                        rows.tokens.len()
                    )))
                }
                None => {
                    let lv = g.value(logits);
                    (0..rows.tokens.len()).map(|i| label_of(lv.row(i))).collect()
                }
            };
            let (att, records) = match lc {
                None => {
                    let (records, windows) = chunk_schedule(&labels, cfg.c_chunk, cfg.ch_include_neutral);
                    let segs: Vec<Vec<usize>> = records.iter().map(|r| (r.start..r.end).collect()).collect();
                    let mem = g.segment_mean(x, segs)?;
                    (g.memory_attention(x, mem, windows)?, records)
                }
                Some(c) => {
                    c.chunks.update(rows.positions[0], g.value(x).data(), labels[0]);
                    let win = c.chunks.window(cfg.c_chunk, cfg.ch_include_neutral);
                    let mut rowsv = Vec::with_capacity(win.len() * cfg.d);
                    for &j in &win {
                        rowsv.extend_from_slice(c.chunks.pooled_row(j));
                    }
                    let mem = if win.is_empty() {
                        g.constant(Tensor::new(vec![0], vec![])?)
                    } else {
                        g.constant(Tensor::new(vec![win.len(), cfg.d], rowsv)?)
                    };
                    (g.memory_attention(x, mem, vec![(0..win.len()).collect()])?, Vec::new())
                }
            };
            let out = b.var(g, s, ci.out);
            let contrib = g.matmul(att, out)?;
            fused = g.add(fused, contrib)?;
            chunk = Some(ChunkOutput {
                logits,
                labels,
                records,
                x,
            });
        }

        let (g2, b2) = (b.var(g, s, ids.ln2_g), b.var(g, s, ids.ln2_b));
        let y = g.layer_norm(fused, g2, b2)?;
        let w1 = b.var(g, s, ids.w1);
        let bias1 = b.var(g, s, ids.b1);
        let a = g.matmul(y, w1)?;
        let a = g.add_row(a, bias1)?;
        let a = g.gelu(a);
        let w2 = b.var(g, s, ids.w2);
        let bias2 = b.var(g, s, ids.b2);
        let o = g.matmul(a, w2)?;
        let o = g.add_row(o, bias2)?;
        Ok((g.add(fused, o)?, preview, chunk))
    }
}
