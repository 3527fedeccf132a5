//! No-leakage and cache-consistency battery.
//!
//! Checks run against any [`Subject`], so planted-bug fixtures can prove the
//! battery actually fails when causality or caching is broken.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{greedy_generate, ForwardOptions, KvCache, Model, StepGates};
use crate::error::{FbsError, Result};
use crate::numerics::kernels;
use crate::paw::WindowMode;
use crate::skipgate::GatePolicyConfig;

/// Operative tolerance in 64-bit arithmetic.
pub const EPS: f64 = 1e-9;
/// The 32-bit bar deviations are also reported against.
pub const REPORT_EPS: f64 = 1e-6;

/// Preview of one position at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RowPreview {
    pub k: usize,
    /// Distributions for horizons `1..=k`.
    pub probs: Vec<Vec<f64>>,
}

/// What a full-sequence pass exposes to the battery.
#[derive(Clone, Debug, Default)]
pub struct TeacherView {
    /// Per-position logits.
    pub logits: Vec<Vec<f64>>,
    /// `[layer][position]`; `None` where the layer has no preview or skipped.
    pub previews: Vec<Vec<Option<RowPreview>>>,
}

pub trait Subject {
    fn teacher(&self, tokens: &[usize]) -> Result<TeacherView>;
    /// Greedy incremental decoding: per-step logits for `n_new` steps.
    fn incremental(&self, prompt: &[usize], n_new: usize) -> Result<Vec<Vec<f64>>>;
    fn vocab(&self) -> usize;
}

/// A model under a fixed set of forward options.
pub struct FbsSubject<'a> {
    pub model: &'a Model,
    pub opts: ForwardOptions,
}

impl Subject for FbsSubject<'_> {
    fn teacher(&self, tokens: &[usize]) -> Result<TeacherView> {
        let (g, out) = self.model.forward(tokens, &self.opts)?;
        let logits = g.value(out.logits).rows();
        let v = self.model.cfg.vocab;
        let previews = out
            .layers
            .iter()
            .map(|lo| {
                let mut row = vec![None; tokens.len()];
                if let Some(pv) = &lo.preview {
                    let lp = g.value(pv.log_p).data();
                    let width = lp.len() / lo.executed.len().max(1);
                    for (r, &pos) in lo.executed.iter().enumerate() {
                        let k = pv.k[r];
                        let probs = (0..k)
                            .map(|h| lp[r * width + h * v..r * width + (h + 1) * v].iter().map(|x| x.exp()).collect())
                            .collect();
                        row[pos] = Some(RowPreview { k, probs });
                    }
                }
                row
            })
            .collect();
        Ok(TeacherView { logits, previews })
    }

    fn incremental(&self, prompt: &[usize], n_new: usize) -> Result<Vec<Vec<f64>>> {
        Ok(greedy_generate(self.model, prompt, n_new, &self.opts)?.logits)
    }

    fn vocab(&self) -> usize {
        self.model.cfg.vocab
    }
}

/// One battery line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: String,
    pub seed: u64,
    pub max_dev: f64,
    pub pass: bool,
    /// Passed only because nothing was compared (k = 0 everywhere).
    pub vacuous: bool,
    /// First step at which incremental decoding diverged, if any.
    pub first_divergence: Option<usize>,
}

impl CaseResult {
    pub fn line(&self) -> String {
        let case = if self.vacuous { format!("{}[vacuous]", self.case) } else { self.case.clone() };
        format!("{},{},{:.3e},{}", case, self.seed, self.max_dev, self.pass)
    }
}

pub const REPORT_HEADER: &str = "case,seed,max_dev,pass";

pub fn report(cases: &[CaseResult]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for c in cases {
        s.push_str(&c.line());
        s.push('\n');
    }
    s
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_pair(prefix: &[usize], a: &[usize], b: &[usize]) -> Result<()> {
    if prefix.is_empty() {
        return Err(FbsError::invalid("shared prefix must be nonempty"));
    }
    if a == b {
        return Err(FbsError::invalid("suffixes must differ"));
    }
    Ok(())
}

fn views(subject: &dyn Subject, prefix: &[usize], a: &[usize], b: &[usize]) -> Result<(TeacherView, TeacherView)> {
    check_pair(prefix, a, b)?;
    let xa: Vec<usize> = prefix.iter().chain(a).copied().collect();
    let xb: Vec<usize> = prefix.iter().chain(b).copied().collect();
    Ok((subject.teacher(&xa)?, subject.teacher(&xb)?))
}

/// Largest logit deviation over prefix positions (up to the boundary).
pub fn suffix_invariance_logits(subject: &dyn Subject, prefix: &[usize], a: &[usize], b: &[usize]) -> Result<f64> {
    let (va, vb) = views(subject, prefix, a, b)?;
    Ok((0..prefix.len())
        .map(|i| max_abs_diff(&va.logits[i], &vb.logits[i]))
        .fold(0.0, f64::max))
}

/// Largest preview deviation over prefix positions and horizons `r ≤ k(i)`;
/// a mismatch in `k` or in whether a preview exists is infinite. The flag is
/// true when at least one horizon was compared.
pub fn suffix_invariance_preview(subject: &dyn Subject, prefix: &[usize], a: &[usize], b: &[usize]) -> Result<(f64, bool)> {
    let (va, vb) = views(subject, prefix, a, b)?;
    let mut dev: f64 = 0.0;
    let mut compared = false;
    for (la, lb) in va.previews.iter().zip(&vb.previews) {
        for i in 0..prefix.len() {
            match (&la[i], &lb[i]) {
                (None, None) => {}
                (Some(pa), Some(pb)) if pa.k == pb.k => {
                    for (x, y) in pa.probs.iter().zip(&pb.probs) {
                        compared = true;
                        dev = dev.max(max_abs_diff(x, y));
                    }
                }
                _ => return Ok((f64::INFINITY, true)),
            }
        }
    }
    Ok((dev, compared))
}

/// Outcome of recompute-versus-incremental decoding over several prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheReport {
    pub identical: bool,
    pub max_drift: f64,
    /// `(prompt index, step)` of the first divergent token or logit.
    pub first_divergence: Option<(usize, usize)>,
}

/// Greedy decoding twice: every step recomputed from scratch, and through
/// the incremental caches.
pub fn cache_consistency(subject: &dyn Subject, prompts: &[Vec<usize>], n_new: usize) -> Result<CacheReport> {
    let mut report = CacheReport {
        identical: true,
        max_drift: 0.0,
        first_divergence: None,
    };
    for (pi, prompt) in prompts.iter().enumerate() {
        let inc = subject.incremental(prompt, n_new)?;
        if inc.len() != n_new {
            return Err(FbsError::invalid("incremental decoding returned the wrong step count"));
        }
        let mut seq = prompt.clone();
        for (step, inc_logits) in inc.iter().enumerate() {
            let view = subject.teacher(&seq)?;
            let full = view.logits.last().expect("nonempty sequence");
            let drift = max_abs_diff(full, inc_logits);
            report.max_drift = report.max_drift.max(drift);
            let tok = kernels::argmax(full);
            let same = tok == kernels::argmax(inc_logits);
            if !same {
                report.identical = false;
            }
            if (!same || drift > EPS) && report.first_divergence.is_none() {
                report.first_divergence = Some((pi, step));
            }
            if !same {
                break;
            }
            seq.push(tok);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub pairs: usize,
    pub prompts: usize,
    pub steps: usize,
    pub prompt_len: usize,
    pub max_prefix: usize,
    pub max_suffix: usize,
    pub seed: u64,
    pub eps: f64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            prompts: 50,
            steps: 64,
            prompt_len: 16,
            max_prefix: 24,
            max_suffix: 8,
            seed: 0,
            eps: EPS,
        }
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Random `(prefix, suffix_a, suffix_b)` with suffixes differing at their
/// first token.
pub fn random_pair(rng: &mut ChaCha8Rng, cfg: &BatteryConfig, vocab: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let p = rng.random_range(1..=cfg.max_prefix.max(1));
    let s = rng.random_range(1..=cfg.max_suffix.max(1));
    let prefix = random_tokens(rng, p, vocab);
    let a = random_tokens(rng, s, vocab);
    let mut b = random_tokens(rng, s, vocab);
    b[0] = (a[0] + 1 + rng.random_range(0..vocab - 1)) % vocab;
    (prefix, a, b)
}

/// Suffix-invariance of logits and previews over random pairs.
pub fn leakage_cases(name: &str, subject: &dyn Subject, cfg: &BatteryConfig) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut logit_dev, mut preview_dev): (f64, f64) = (0.0, 0.0);
    let mut compared = false;
    for _ in 0..cfg.pairs {
        let (prefix, a, b) = random_pair(&mut rng, cfg, subject.vocab());
        logit_dev = logit_dev.max(suffix_invariance_logits(subject, &prefix, &a, &b)?);
        let (d, c) = suffix_invariance_preview(subject, &prefix, &a, &b)?;
        preview_dev = preview_dev.max(d);
        compared |= c;
    }
    let case = |kind: &str, dev: f64, vacuous: bool| CaseResult {
        case: format!("{kind}/{name}"),
        seed: cfg.seed,
        max_dev: dev,
        pass: dev <= cfg.eps,
        vacuous,
        first_divergence: None,
    };
    Ok(vec![case("logits", logit_dev, false), case("preview", preview_dev, !compared)])
}

pub fn cache_case(name: &str, subject: &dyn Subject, cfg: &BatteryConfig) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xcace);
    let prompts: Vec<Vec<usize>> = (0..cfg.prompts)
        .map(|_| random_tokens(&mut rng, cfg.prompt_len, subject.vocab()))
        .collect();
    let r = cache_consistency(subject, &prompts, cfg.steps)?;
    Ok(CaseResult {
        case: format!("cache/{name}"),
        seed: cfg.seed,
        max_dev: r.max_drift,
        pass: r.identical && r.max_drift <= cfg.eps,
        vacuous: false,
        first_divergence: r.first_divergence.map(|(_, s)| s),
    })
}

/// The four module configurations the battery covers.
pub fn battery_configs(policy: &GatePolicyConfig) -> Vec<(&'static str, ForwardOptions)> {
    let paw = ForwardOptions {
        paw: Some(WindowMode::Dynamic),
        ..ForwardOptions::vanilla()
    };
    let paw_ch = ForwardOptions { ch: true, ..paw.clone() };
    vec![
        ("vanilla", ForwardOptions::vanilla()),
        ("paw", paw),
        ("paw_ch", paw_ch),
        ("full", ForwardOptions::full(policy.clone())),
    ]
}

/// Leakage cases for every configuration plus cache consistency under full
/// gating.
pub fn run_battery(model: &Model, policy: &GatePolicyConfig, cfg: &BatteryConfig) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (name, opts) in battery_configs(policy) {
        let s = FbsSubject { model, opts };
        out.extend(leakage_cases(name, &s, cfg)?);
        if name == "full" {
            out.push(cache_case(name, &s, cfg)?);
        }
    }
    Ok(out)
}

/// Deliberately broken subjects used to show the battery fails loudly.
pub mod fixtures {
    use super::*;

    /// Mixes the next token into each position's logits and previews.
    pub struct Acausal<'a> {
        pub inner: FbsSubject<'a>,
        pub strength: f64,
    }

    impl Subject for Acausal<'_> {
        fn teacher(&self, tokens: &[usize]) -> Result<TeacherView> {
            let mut v = self.inner.teacher(tokens)?;
            for i in 0..tokens.len().saturating_sub(1) {
                let next = tokens[i + 1];
                v.logits[i][next] += self.strength;
                for layer in &mut v.previews {
                    if let Some(p) = &mut layer[i] {
                        for dist in &mut p.probs {
                            dist[next] += self.strength;
                        }
                    }
                }
            }
            Ok(v)
        }

        fn incremental(&self, prompt: &[usize], n_new: usize) -> Result<Vec<Vec<f64>>> {
            self.inner.incremental(prompt, n_new)
        }

        fn vocab(&self) -> usize {
            self.inner.vocab()
        }
    }

    /// Stops writing new keys into layer 0 once decoding reaches `stale_from`.
    pub struct StaleCache<'a> {
        pub inner: FbsSubject<'a>,
        pub stale_from: usize,
    }

    impl Subject for StaleCache<'_> {
        fn teacher(&self, tokens: &[usize]) -> Result<TeacherView> {
            self.inner.teacher(tokens)
        }

        fn incremental(&self, prompt: &[usize], n_new: usize) -> Result<Vec<Vec<f64>>> {
            let model = self.inner.model;
            let opts = &self.inner.opts;
            let mut cache = KvCache::new(model);
            for &t in &prompt[..prompt.len() - 1] {
                model.decode_step(&mut cache, t, StepGates::Policy, opts)?;
            }
            let mut next = prompt[prompt.len() - 1];
            let mut out = Vec::with_capacity(n_new);
            for step in 0..n_new {
                let before = cache.layers[0].len();
                let o = model.decode_step(&mut cache, next, StepGates::Policy, opts)?;
                let lc = &mut cache.layers[0];
                if step >= self.stale_from && lc.len() > before {
                    let width = lc.keys.len() / lc.len();
                    lc.keys.truncate(before * width);
                    lc.values.truncate(before * width);
                    lc.positions.truncate(before);
                }
                next = kernels::argmax(&o.logits);
                out.push(o.logits);
            }
            Ok(out)
        }

        fn vocab(&self) -> usize {
            self.inner.vocab()
        }
    }
}
