//! Clipped policy-gradient fine-tuning of the gates on a frozen backbone.
//!
//! Each episode samples per-(position, layer) skip actions from the gate's
//! Bernoulli policy on one sequence, scores the compute saved against the
//! NLL increase on its gold continuation, and stores the old log-probs.

use serde::{Deserialize, Serialize};

use super::{reward, ForceReason, GatePolicyConfig};
use crate::backbone::{is_gate_param, is_paw_param, ForwardOptions, GateMode, Model};
use crate::error::{FbsError, Result};
use crate::harness::layer_flops;
use crate::numerics::{kernels, Binder, Graph};
use crate::paw::WindowMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub alpha: f64,
    pub beta: f64,
    pub clip: f64,
    pub lr: f64,
    /// Also move preview parameters.
    pub train_paw: bool,
    pub max_grad_norm: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            clip: 0.2,
            lr: 1e-5,
            train_paw: false,
            max_grad_norm: 1.0,
        }
    }
}

/// One sampled rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub tokens: Vec<usize>,
    /// First position whose next-token NLL counts toward Δℓ.
    pub gold_start: usize,
    /// Skip actions `[position][layer]`.
    pub actions: Vec<Vec<bool>>,
    /// Old log-probs of the taken actions; `None` for forced cells.
    pub old_logp: Vec<Vec<Option<f64>>>,
    pub c: f64,
    pub c0: f64,
    pub delta_nll: f64,
    pub reward: f64,
}

impl Episode {
    pub fn decisions(&self) -> usize {
        self.old_logp.iter().flatten().filter(|x| x.is_some()).count()
    }

    pub fn skip_ratio(&self) -> f64 {
        let n: usize = self.actions.iter().map(Vec::len).sum();
        if n == 0 {
            return 0.0;
        }
        self.actions.iter().flatten().filter(|&&a| a).count() as f64 / n as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlStats {
    pub mean_reward: f64,
    pub mean_skip: f64,
    /// Clipped surrogate objective (to be maximized).
    pub surrogate: f64,
    pub clipped_frac: f64,
    pub decisions: usize,
}

fn rl_options(policy: &GatePolicyConfig, gate: GateMode) -> ForwardOptions {
    ForwardOptions {
        paw: Some(WindowMode::Dynamic),
        ch: true,
        gate,
        policy: policy.clone(),
        training: false,
        detach_gate_inputs: true,
        pins: None,
    }
}

fn gold_nll(logits: &crate::numerics::Tensor, tokens: &[usize], from: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for i in from.saturating_sub(1)..tokens.len() - 1 {
        let mut row = logits.row(i).to_vec();
        kernels::log_softmax_inplace(&mut row);
        total -= row[tokens[i + 1]];
        n += 1;
    }
    total / n.max(1) as f64
}

/// Samples one episode; `gold_start` marks where the gold continuation
/// begins.
pub fn collect_episode(
    model: &Model,
    tokens: &[usize],
    gold_start: usize,
    policy: &GatePolicyConfig,
    cfg: &RlConfig,
    seed: u64,
) -> Result<Episode> {
    if tokens.len() < 2 || gold_start == 0 || gold_start >= tokens.len() {
        return Err(FbsError::invalid(format!(
            "episode needs a prompt and a gold continuation (len {}, gold at {gold_start})",
            tokens.len()
        )));
    }
    let (g, out) = model.forward(tokens, &rl_options(policy, GateMode::Sampled { seed }))?;
    let m = tokens.len();
    let n_layers = model.cfg.n_layers;
    let mut actions = vec![vec![false; n_layers]; m];
    let mut old_logp = vec![vec![None; n_layers]; m];
    for (l, lo) in out.layers.iter().enumerate() {
        let gt = lo.gate.as_ref().expect("sampled gates are evaluated");
        for i in 0..m {
            let skip = gt.g[i] == 1.0;
            actions[i][l] = skip;
            if gt.reasons[i] == ForceReason::None {
                let p = gt.p_values[i];
                old_logp[i][l] = Some(if skip { p.ln() } else { (1.0 - p).ln() });
            }
        }
    }
    let (d, ff) = (model.cfg.d as u64, model.cfg.d_ff as u64);
    let mut c = 0.0;
    let mut c0 = 0.0;
    for (i, row) in actions.iter().enumerate() {
        let f = layer_flops(d, ff, i as u64 + 1) as f64;
        c0 += f * n_layers as f64;
        c += f * row.iter().filter(|&&a| !a).count() as f64;
    }
    let sampled = gold_nll(g.value(out.logits), tokens, gold_start);
    let full = gold_nll(&model.logits(tokens, &rl_options(policy, GateMode::Off))?, tokens, gold_start);
    let delta_nll = sampled - full;
    Ok(Episode {
        tokens: tokens.to_vec(),
        gold_start,
        actions,
        old_logp,
        c,
        c0,
        delta_nll,
        reward: reward(c, c0, delta_nll, cfg.alpha, cfg.beta)?,
    })
}

/// One clipped-surrogate step over a batch. Every decision of an episode
/// shares its terminal reward, so reward-to-go minus the batch mean is the
/// advantage.
pub fn rl_update(model: &mut Model, episodes: &[Episode], policy: &GatePolicyConfig, cfg: &RlConfig) -> Result<RlStats> {
    if episodes.is_empty() {
        return Err(FbsError::invalid("no episodes"));
    }
    let mean_r = episodes.iter().map(|e| e.reward).sum::<f64>() / episodes.len() as f64;
    let total: usize = episodes.iter().map(Episode::decisions).sum();
    let mut stats = RlStats {
        mean_reward: mean_r,
        mean_skip: episodes.iter().map(Episode::skip_ratio).sum::<f64>() / episodes.len() as f64,
        decisions: total,
        ..RlStats::default()
    };
    if total == 0 {
        return Ok(stats);
    }
    let train_paw = cfg.train_paw;
    let filter = move |n: &str| is_gate_param(n) || (train_paw && is_paw_param(n));
    model.store.zero_grad();
    let mut clipped = 0usize;
    for ep in episodes {
        if ep.actions.len() != ep.tokens.len() || ep.old_logp.len() != ep.tokens.len() {
            return Err(FbsError::invalid("episode is missing old log-probs"));
        }
        let adv = ep.reward - mean_r;
        let mut g = Graph::new();
        let mut b = Binder::with_filter(&model.store, filter);
        let mut opts = rl_options(policy, GateMode::Fixed(ep.actions.clone()));
        opts.detach_gate_inputs = !train_paw;
        let out = model.forward_on(&mut g, &mut b, &ep.tokens, &opts)?;
        let mut loss = None;
        for (l, lo) in out.layers.iter().enumerate() {
            let gt = lo.gate.as_ref().expect("fixed gates are evaluated");
            let lp = g.ln(gt.p);
            let neg = g.scale(gt.p, -1.0);
            let q = g.add_scalar(neg, 1.0);
            let lq = g.ln(q);
            let both = g.concat_cols(&[lp, lq])?;
            let mut picks = Vec::new();
            for (i, old) in ep.old_logp.iter().enumerate() {
                let Some(old) = old[l] else { continue };
                let skip = ep.actions[i][l];
                let p = gt.p_values[i];
                let new = if skip { p.ln() } else { (1.0 - p).ln() };
                let ratio = (new - old).exp();
                let clipped_ratio = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
                stats.surrogate += (ratio * adv).min(clipped_ratio * adv) / total as f64;
                let active = !((adv > 0.0 && ratio > 1.0 + cfg.clip) || (adv < 0.0 && ratio < 1.0 - cfg.clip));
                if !active {
                    clipped += 1;
                    continue;
                }
                // d(ρA)/dθ = ρA·d(log π)/dθ; the loss is the negated mean
                let coef = -adv * ratio / total as f64;
                if coef != 0.0 {
                    picks.push((i, if skip { 0 } else { 1 }, coef));
                }
            }
            if !picks.is_empty() {
                let term = g.pick(both, picks)?;
                loss = Some(match loss {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
        }
        if let Some(loss) = loss {
            let grads = g.backward(loss);
            b.accumulate(&mut model.store, &grads);
        }
    }
    stats.clipped_frac = clipped as f64 / total as f64;
    let norm = model.store.grad_norm();
    if norm > cfg.max_grad_norm && norm > 0.0 {
        model.store.scale_grads(cfg.max_grad_norm / norm);
    }
    model.store.sgd_step(cfg.lr, filter);
    model.store.zero_grad();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{FusionInit, ModelConfig};

    fn model() -> Model {
        Model::new(ModelConfig {
            fusion_init: FusionInit::Random,
            ..ModelConfig::tiny()
        })
        .unwrap()
    }

    fn policy() -> GatePolicyConfig {
        GatePolicyConfig {
            never_skip: vec![1],
            ..GatePolicyConfig::default()
        }
    }

    #[test]
    fn equal_rewards_leave_parameters_unchanged() {
        let mut m = model();
        let before = m.clone();
        let toks: Vec<usize> = b"abcdefgh".iter().map(|&b| b as usize).collect();
        let mut eps: Vec<Episode> = (0..3)
            .map(|s| collect_episode(&m, &toks, 4, &policy(), &RlConfig::default(), s).unwrap())
            .collect();
        for e in &mut eps {
            e.reward = 0.25;
        }
        rl_update(&mut m, &eps, &policy(), &RlConfig { lr: 1.0, ..RlConfig::default() }).unwrap();
        assert!(m.same_params(&before));
    }

    #[test]
    fn positive_advantage_raises_taken_action_logprob() {
        let mut m = model();
        let toks: Vec<usize> = b"abcdef".iter().map(|&b| b as usize).collect();
        let cfg = RlConfig { lr: 0.05, ..RlConfig::default() };
        let mut a = collect_episode(&m, &toks, 3, &policy(), &cfg, 1).unwrap();
        let mut b = a.clone();
        a.reward = 1.0;
        b.reward = 0.0;
        // b replays the opposite actions so that the pair is not symmetric
        for (row, lp) in b.actions.iter_mut().zip(&mut b.old_logp) {
            for (x, o) in row.iter_mut().zip(lp.iter_mut()) {
                if let Some(v) = o {
                    *x = !*x;
                    *v = (1.0 - v.exp()).ln();
                }
            }
        }
        let logp = |m: &Model, e: &Episode| -> f64 {
            let opts = rl_options(&policy(), GateMode::Fixed(e.actions.clone()));
            let (_, out) = m.forward(&e.tokens, &opts).unwrap();
            let mut s = 0.0;
            for (l, lo) in out.layers.iter().enumerate() {
                let gt = lo.gate.as_ref().unwrap();
                for i in 0..e.tokens.len() {
                    if e.old_logp[i][l].is_some() {
                        let p = gt.p_values[i];
                        s += if e.actions[i][l] { p.ln() } else { (1.0 - p).ln() };
                    }
                }
            }
            s
        };
        let before = logp(&m, &a);
        rl_update(&mut m, &[a.clone(), b], &policy(), &cfg).unwrap();
        assert!(logp(&m, &a) > before);
    }

    #[test]
    fn backbone_is_frozen() {
        let mut m = model();
        let before = m.clone();
        let toks: Vec<usize> = b"hello world".iter().map(|&b| b as usize).collect();
        let eps: Vec<Episode> = (0..4)
            .map(|s| collect_episode(&m, &toks, 6, &policy(), &RlConfig::default(), s).unwrap())
            .collect();
        rl_update(&mut m, &eps, &policy(), &RlConfig { lr: 0.1, ..RlConfig::default() }).unwrap();
        for ((_, a), (_, b)) in m.store.iter().zip(before.store.iter()) {
            if !is_gate_param(&a.name) {
                assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
            }
        }
    }
}
