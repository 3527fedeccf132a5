//! Stage-1 objective assembly and the desk-scale training loop, followed by
//! an optional gate phase on a frozen backbone.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    is_backbone_param, is_ch_param, is_gate_param, is_paw_param, ForwardOptions, ForwardOutput, GateMode, Model,
    ModelConfig,
};
use crate::chunk::{align_loss, bios_objective, bios_macro_f1, chunk_schedule, label_spans, BiosLabel, BiosObjective};
use crate::error::{FbsError, Result};
use crate::numerics::{Binder, Graph, Var};
use crate::paw::{preview_loss_graph, WindowMode};
use crate::skipgate::{anneal_tau, gate_regularizer, GatePolicyConfig};
use crate::textdata::{encode, synth_corpus};

/// Weights of the auxiliary terms and the target mean skip probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub bios: f64,
    pub align: f64,
    pub paw: f64,
    pub gate: f64,
    pub rho_target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bios: 0.5,
            align: 0.1,
            paw: 0.5,
            gate: 0.1,
            rho_target: 0.3,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            bios: 0.0,
            align: 0.0,
            paw: 0.0,
            gate: 0.0,
            rho_target: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.bios, self.align, self.paw, self.gate];
        if all.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(FbsError::Config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.rho_target) {
            return Err(FbsError::Config(format!("rho_target {} outside [0, 1]", self.rho_target)));
        }
        Ok(())
    }
}

/// One training sequence with optional weak labels and their coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub labels: Option<Vec<BiosLabel>>,
    pub coverage: f64,
}

/// Graph handles of every term plus their values.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub lm: f64,
    pub bios: f64,
    pub align: f64,
    pub preview: f64,
    pub gate: f64,
    pub total_value: f64,
    /// CH layers whose CTC target was infeasible and contributed nothing.
    pub bios_infeasible: usize,
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, 1.0 / terms.len() as f64)))
}

/// Mean next-token cross-entropy of `logits` (`m×V`).
pub fn lm_loss(g: &mut Graph, logits: Var, tokens: &[usize]) -> Result<Var> {
    let m = tokens.len();
    if m < 2 {
        return Err(FbsError::invalid("language-model loss needs at least 2 tokens"));
    }
    let lp = g.log_softmax(logits)?;
    let c = -1.0 / (m - 1) as f64;
    g.pick(lp, (0..m - 1).map(|i| (i, tokens[i + 1], c)).collect())
}

/// Assembles the weighted objective on an existing pass.
#[allow(clippy::too_many_arguments)]
pub fn stage1_terms(
    g: &mut Graph,
    b: &mut Binder,
    model: &Model,
    out: &ForwardOutput,
    sample: &Sample,
    weights: &LossWeights,
    policy: &GatePolicyConfig,
    q0: f64,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let toks = &sample.tokens;
    let lm = lm_loss(g, out.logits, toks)?;
    let mut bios_terms = Vec::new();
    let mut align_terms = Vec::new();
    let mut preview_terms = Vec::new();
    let mut gate_terms = Vec::new();
    let mut infeasible = 0;
    let gold_records = sample
        .labels
        .as_ref()
        .map(|l| chunk_schedule(l, model.cfg.c_chunk, model.cfg.ch_include_neutral).0);
    for (l, lo) in out.layers.iter().enumerate() {
        if let Some(ch) = &lo.chunk {
            if lo.executed.len() != toks.len() {
                return Err(FbsError::invalid("stage-1 terms need every row executed"));
            }
            match &sample.labels {
                Some(labels) => {
                    match bios_objective(g, ch.logits, labels, sample.coverage, q0)? {
                        BiosObjective::Loss(v) => bios_terms.push(v),
                        BiosObjective::Infeasible { .. } => infeasible += 1,
                    }
                    let ids = model.ids.layers[l].ch.as_ref().expect("chunk output implies a head");
                    let proj = b.var(g, &model.store, ids.align);
                    align_terms.push(align_loss(g, ch.x, proj, gold_records.as_deref().unwrap_or(&[]))?);
                }
                None if weights.bios > 0.0 || weights.align > 0.0 => {
                    return Err(FbsError::invalid("weak labels are required when the BIOS or alignment weight is positive"))
                }
                None => {}
            }
        }
        if let Some(pv) = &lo.preview {
            let positions: Vec<usize> = lo.executed.clone();
            preview_terms.push(preview_loss_graph(g, pv.log_p, &positions, toks, &pv.w, model.cfg.vocab)?);
        }
        if let Some(gt) = &lo.gate {
            if !policy.is_critical(l) {
                gate_terms.push(gate_regularizer(g, gt.p, weights.rho_target)?);
            }
        }
    }
    let mut total = lm;
    let mut vals = [0.0; 4];
    for (i, (terms, w)) in [
        (&bios_terms, weights.bios),
        (&align_terms, weights.align),
        (&preview_terms, weights.paw),
        (&gate_terms, weights.gate),
    ]
    .into_iter()
    .enumerate()
    {
        if let Some(t) = mean_of(g, terms)? {
            vals[i] = g.value(t).item();
            if w > 0.0 {
                let s = g.scale(t, w);
                total = g.add(total, s)?;
            }
        }
    }
    let lm_v = g.value(lm).item();
    let total_value = g.value(total).item();
    Ok(LossBreakdown {
        total,
        lm: lm_v,
        bios: vals[0],
        align: vals[1],
        preview: vals[2],
        gate: vals[3],
        total_value,
        bios_infeasible: infeasible,
    })
}

/// Forward pass plus objective for one sample.
pub fn stage1_loss(
    g: &mut Graph,
    b: &mut Binder,
    model: &Model,
    sample: &Sample,
    weights: &LossWeights,
    opts: &ForwardOptions,
    q0: f64,
) -> Result<LossBreakdown> {
    let out = model.forward_on(g, b, &sample.tokens, opts)?;
    stage1_terms(g, b, model, &out, sample, weights, &opts.policy, q0)
}

/// Which modules take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modules {
    pub paw: bool,
    pub ch: bool,
    pub gate: bool,
}

impl Default for Modules {
    fn default() -> Self {
        Self {
            paw: true,
            ch: true,
            gate: true,
        }
    }
}

/// Gate fine-tuning on a frozen backbone with straight-through threshold
/// gates annealed by the policy schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatePhase {
    pub steps: usize,
    pub lr: f64,
    pub rho_target: f64,
    pub weight: f64,
}

impl Default for GatePhase {
    fn default() -> Self {
        Self {
            steps: 0,
            lr: 0.05,
            rho_target: 0.85,
            weight: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub clip: f64,
    pub seed: u64,
    pub corpus_seed: u64,
    pub corpus_tokens: usize,
    pub pattern_rate: f64,
    pub q0: f64,
    pub modules: Modules,
    pub gate_phase: GatePhase,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            batch: 16,
            seq_len: 128,
            clip: 1.0,
            seed: 0,
            corpus_seed: 1,
            corpus_tokens: 200_000,
            pattern_rate: 0.3,
            q0: crate::chunk::DEFAULT_Q0,
            modules: Modules::default(),
            gate_phase: GatePhase::default(),
        }
    }
}

/// Full configuration file: model, loss weights, gate policy, training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub gate: GatePolicyConfig,
    #[serde(default)]
    pub train: TrainSettings,
}

impl Config {
    pub fn from_json(body: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(body).map_err(|e| FbsError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.gate.validate(self.model.n_layers)?;
        let t = &self.train;
        if t.batch == 0 || t.seq_len < 2 || t.seq_len > self.model.max_len {
            return Err(FbsError::Config(format!(
                "batch must be ≥ 1 and seq_len in 2..={}",
                self.model.max_len
            )));
        }
        if t.lr.is_nan() || t.lr <= 0.0 || t.clip.is_nan() || t.clip <= 0.0 {
            return Err(FbsError::Config("lr and clip must be positive".into()));
        }
        Ok(())
    }

    /// Forward options of the stage-1 phase.
    pub fn stage1_options(&self) -> ForwardOptions {
        let m = self.train.modules;
        ForwardOptions {
            paw: m.paw.then_some(WindowMode::Dynamic),
            ch: m.ch,
            gate: if m.gate { GateMode::Soft } else { GateMode::Off },
            policy: self.gate.clone(),
            training: true,
            detach_gate_inputs: true,
            pins: None,
        }
    }

    /// Inference options with every trained module switched on.
    pub fn inference_options(&self) -> ForwardOptions {
        let m = self.train.modules;
        ForwardOptions {
            paw: m.paw.then_some(WindowMode::Dynamic),
            ch: m.ch,
            gate: if m.gate { GateMode::Threshold } else { GateMode::Off },
            policy: self.gate.clone(),
            training: false,
            detach_gate_inputs: true,
            pins: None,
        }
    }

    fn stage1_filter(&self) -> impl Fn(&str) -> bool + Copy {
        let m = self.train.modules;
        move |n: &str| {
            is_backbone_param(n) || (m.paw && is_paw_param(n)) || (m.ch && is_ch_param(n)) || (m.gate && is_gate_param(n))
        }
    }
}

/// Tokenized corpus with gold BIOS labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    pub tokens: Vec<usize>,
    pub labels: Vec<BiosLabel>,
}

impl LabeledCorpus {
    /// Synthetic text labeled from the generator's own pattern spans.
    pub fn synthetic(seed: u64, n_tokens: usize, pattern_rate: f64) -> Self {
        let c = synth_corpus(seed, n_tokens, pattern_rate);
        let toks = encode(&c.text);
        let report = label_spans(&toks, &c.gold.spans);
        Self {
            tokens: toks.ids,
            labels: report.labels,
        }
    }

    /// Window of `len` tokens at `start`, moved back to the chunk start so
    /// that no window opens on an interior label.
    pub fn window(&self, start: usize, len: usize) -> Sample {
        let mut s = start.min(self.tokens.len().saturating_sub(len));
        while s > 0 && self.labels[s] == BiosLabel::I {
            s -= 1;
        }
        let end = (s + len).min(self.tokens.len());
        Sample {
            tokens: self.tokens[s..end].to_vec(),
            labels: Some(self.labels[s..end].to_vec()),
            coverage: 1.0,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, len: usize) -> Sample {
        let hi = self.tokens.len().saturating_sub(len).max(1);
        self.window(rng.random_range(0..hi), len)
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lm: f64,
    pub bios: f64,
    pub align: f64,
    pub preview: f64,
    pub gate: f64,
    pub total: f64,
    pub tau: f64,
}

pub const METRICS_HEADER: &str = "step,L_lm,L_bios,L_align,L_preview,L_gate,total,tau";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.step, r.lm, r.bios, r.align, r.preview, r.gate, r.total, r.tau);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
}

fn averaged(rows: &[LossBreakdown], step: usize, tau: f64) -> MetricsRow {
    let n = rows.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| rows.iter().map(f).sum::<f64>() / n;
    MetricsRow {
        step,
        lm: avg(|r| r.lm),
        bios: avg(|r| r.bios),
        align: avg(|r| r.align),
        preview: avg(|r| r.preview),
        gate: avg(|r| r.gate),
        total: avg(|r| r.total_value),
        tau,
    }
}

/// One averaged-gradient SGD step; returns the per-sample breakdowns.
#[allow(clippy::too_many_arguments)]
fn sgd_batch(
    model: &mut Model,
    batch: &[Sample],
    weights: &LossWeights,
    opts: &ForwardOptions,
    q0: f64,
    lr: f64,
    clip: f64,
    filter: impl Fn(&str) -> bool + Copy,
    step: usize,
) -> Result<Vec<LossBreakdown>> {
    model.store.zero_grad();
    let mut rows = Vec::with_capacity(batch.len());
    for sample in batch {
        let mut g = Graph::new();
        let mut b = Binder::with_filter(&model.store, filter);
        let br = stage1_loss(&mut g, &mut b, model, sample, weights, opts, q0)?;
        if !br.total_value.is_finite() {
            return Err(FbsError::Divergence {
                step,
                msg: format!("non-finite loss {}", br.total_value),
            });
        }
        let grads = g.backward(br.total);
        b.accumulate(&mut model.store, &grads);
        rows.push(br);
    }
    model.store.scale_grads(1.0 / batch.len() as f64);
    let norm = model.store.grad_norm();
    if !norm.is_finite() {
        return Err(FbsError::Divergence {
            step,
            msg: "non-finite gradient".into(),
        });
    }
    if norm > clip {
        model.store.scale_grads(clip / norm);
    }
    model.store.sgd_step(lr, filter);
    Ok(rows)
}

/// Seeded training: `steps` stage-1 updates, then the gate phase.
/// `on_step` sees every metrics row as it is produced.
pub fn train_loop(
    cfg: &Config,
    corpus: &LabeledCorpus,
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.tokens.len() < 2 {
        return Err(FbsError::invalid("corpus is empty"));
    }
    let t = &cfg.train;
    let mut model = Model::new(cfg.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut metrics = Vec::with_capacity(t.steps + t.gate_phase.steps);
    let opts = cfg.stage1_options();
    let filter = cfg.stage1_filter();
    for step in 0..t.steps {
        let batch: Vec<Sample> = (0..t.batch).map(|_| corpus.sample(&mut rng, t.seq_len)).collect();
        let rows = sgd_batch(&mut model, &batch, &cfg.loss, &opts, t.q0, t.lr, t.clip, filter, step)?;
        let row = averaged(&rows, step, cfg.gate.tau);
        on_step(&row);
        metrics.push(row);
    }
    if t.gate_phase.steps > 0 && t.modules.gate {
        metrics.extend(gate_phase(&mut model, cfg, corpus, &mut rng, t.steps, &mut on_step)?);
    }
    Ok(TrainOutcome { model, metrics })
}

/// Gate-only training under an annealed straight-through threshold. Steps
/// are numbered from `first_step`.
pub fn gate_phase(
    model: &mut Model,
    cfg: &Config,
    corpus: &LabeledCorpus,
    rng: &mut ChaCha8Rng,
    first_step: usize,
    mut on_step: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    let t = &cfg.train;
    let gp = t.gate_phase;
    let weights = LossWeights {
        gate: gp.weight,
        rho_target: gp.rho_target,
        ..cfg.loss
    };
    let anneal = crate::skipgate::Anneal {
        total: cfg.gate.anneal.total.min(gp.steps.saturating_sub(1)).max(1),
        ..cfg.gate.anneal
    };
    let mut metrics = Vec::with_capacity(gp.steps);
    for i in 0..gp.steps {
        let tau = anneal_tau(i, &anneal);
        let mut opts = cfg.stage1_options();
        opts.gate = GateMode::StThreshold { tau };
        let batch: Vec<Sample> = (0..t.batch).map(|_| corpus.sample(rng, t.seq_len)).collect();
        let step = first_step + i;
        let rows = sgd_batch(model, &batch, &weights, &opts, t.q0, gp.lr, t.clip, is_gate_param, step)?;
        let row = averaged(&rows, step, tau);
        on_step(&row);
        metrics.push(row);
    }
    Ok(metrics)
}

/// BIOS macro-F1 of the chunk head at `layer` (0-based) against gold
/// labels, over consecutive windows of `len` tokens.
pub fn bios_f1(model: &Model, corpus: &LabeledCorpus, layer: usize, len: usize, windows: usize) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let opts = ForwardOptions {
        paw: Some(WindowMode::Dynamic),
        ch: true,
        ..ForwardOptions::vanilla()
    };
    let mut start = 0;
    for _ in 0..windows {
        if start + len > corpus.tokens.len() {
            break;
        }
        let s = corpus.window(start, len);
        let (_, out) = model.forward(&s.tokens, &opts)?;
        let ch = out.layers[layer]
            .chunk
            .as_ref()
            .ok_or_else(|| FbsError::invalid(format!("layer {} has no chunk head", layer + 1)))?;
        pred.extend_from_slice(&ch.labels);
        gold.extend_from_slice(s.labels.as_ref().expect("corpus windows carry labels"));
        start += len;
    }
    bios_macro_f1(&pred, &gold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FusionInit;
    use crate::skipgate::gate_regularizer_value;

    fn tiny_cfg() -> Config {
        Config {
            model: ModelConfig::tiny(),
            gate: GatePolicyConfig::for_layers(3),
            train: TrainSettings {
                steps: 3,
                batch: 2,
                seq_len: 24,
                corpus_tokens: 2000,
                ..TrainSettings::default()
            },
            ..Config::default()
        }
    }

    fn sample() -> Sample {
        LabeledCorpus::synthetic(1, 3000, 0.3).window(100, 32)
    }

    fn breakdown(model: &Model, w: &LossWeights) -> LossBreakdown {
        let cfg = tiny_cfg();
        let mut g = Graph::new();
        let mut b = Binder::new(&model.store);
        stage1_loss(&mut g, &mut b, model, &sample(), w, &cfg.stage1_options(), 0.9).unwrap()
    }

    #[test]
    fn zero_weights_total_is_lm() {
        let m = Model::new(ModelConfig { fusion_init: FusionInit::Random, ..ModelConfig::tiny() }).unwrap();
        let br = breakdown(&m, &LossWeights::zero());
        assert_eq!(br.total_value, br.lm);
        assert!(br.bios > 0.0 && br.preview > 0.0);
    }

    #[test]
    fn weights_are_linear() {
        let m = Model::new(ModelConfig { fusion_init: FusionInit::Random, ..ModelConfig::tiny() }).unwrap();
        let w = LossWeights::default();
        let a = breakdown(&m, &w);
        let b = breakdown(&m, &LossWeights { paw: 2.0 * w.paw, ..w });
        assert!((b.total_value - a.total_value - w.paw * a.preview).abs() < 1e-12);
        assert_eq!(a.lm, b.lm);
        assert_eq!(a.bios, b.bios);
    }

    #[test]
    fn missing_labels_rejected() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let cfg = tiny_cfg();
        let s = Sample { labels: None, ..sample() };
        let mut g = Graph::new();
        let mut b = Binder::new(&m.store);
        assert!(stage1_loss(&mut g, &mut b, &m, &s, &LossWeights::default(), &cfg.stage1_options(), 0.9).is_err());
        let mut g = Graph::new();
        let mut b = Binder::new(&m.store);
        assert!(stage1_loss(&mut g, &mut b, &m, &s, &LossWeights { bios: 0.0, align: 0.0, ..LossWeights::default() }, &cfg.stage1_options(), 0.9).is_ok());
    }

    #[test]
    fn gate_regularizer_examples() {
        assert!((gate_regularizer_value(&[0.5; 4], 0.5) + 0.01 * 2f64.ln()).abs() < 1e-12);
        assert!((gate_regularizer_value(&[1.0 - 1e-12; 4], 0.3) - 0.49).abs() < 1e-6);
        assert!(gate_regularizer_value(&[0.6; 3], 0.3) < gate_regularizer_value(&[0.9; 3], 0.3) + 1e-12);
    }

    #[test]
    fn zero_steps_returns_initialization_and_runs_are_deterministic() {
        let mut cfg = tiny_cfg();
        let corpus = LabeledCorpus::synthetic(1, 2000, 0.3);
        cfg.train.steps = 0;
        let out = train_loop(&cfg, &corpus, |_| {}).unwrap();
        assert!(out.model.same_params(&Model::new(cfg.model.clone()).unwrap()));
        cfg.train.steps = 2;
        cfg.train.gate_phase.steps = 2;
        let a = train_loop(&cfg, &corpus, |_| {}).unwrap();
        let b = train_loop(&cfg, &corpus, |_| {}).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.metrics.len(), 4);
        assert_eq!(a.metrics[2].tau, 0.9);
        assert!((a.metrics[3].tau - 0.7).abs() < 1e-12);
    }

    #[test]
    fn gate_phase_moves_only_gates() {
        let mut cfg = tiny_cfg();
        let corpus = LabeledCorpus::synthetic(1, 2000, 0.3);
        cfg.train.steps = 1;
        let before = train_loop(&cfg, &corpus, |_| {}).unwrap().model;
        cfg.train.gate_phase.steps = 2;
        let after = train_loop(&cfg, &corpus, |_| {}).unwrap().model;
        for ((_, a), (_, b)) in after.store.iter().zip(before.store.iter()) {
            if !is_gate_param(&a.name) {
                assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
            }
        }
    }

    #[test]
    fn windows_never_open_mid_chunk() {
        let c = LabeledCorpus::synthetic(3, 5000, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s = c.sample(&mut rng, 40);
            assert_ne!(s.labels.unwrap()[0], BiosLabel::I);
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let j = serde_json::to_string(&tiny_cfg()).unwrap();
        assert_eq!(Config::from_json(&j).unwrap(), tiny_cfg());
        let bad = j.replacen("\"steps\"", "\"stepz\"", 1);
        assert!(Config::from_json(&bad).is_err());
    }
}
