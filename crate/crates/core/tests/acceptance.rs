//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::time::Instant;

use fbs_core::backbone::{greedy_generate, ForwardOptions, FusionInit, GateMode, Model, ModelConfig};
use fbs_core::chunk::{align_loss, bios_objective, chunk_schedule, collapse_labels, ctc_loss, parse_bios, BiosLabel, BiosObjective, Chunk, CtcOutcome};
use fbs_core::cli::{bench_prompts, generation_cells};
use fbs_core::conformance::{cache_case, leakage_cases, battery_configs, BatteryConfig, FbsSubject};
use fbs_core::harness::{layer_flops, tau_sweep, tflops_rel, FlopsLedger, TimingProtocol};
use fbs_core::numerics::{grad_check_with, Binder, Graph, Var};
use fbs_core::paw::preview_loss_graph;
use fbs_core::skipgate::{anneal_tau, gate_regularizer, reward, Anneal, ForceReason, GatePolicyConfig};
use fbs_core::stats::tables::{analyze_cells, AnalysisConfig, Table};
use fbs_core::stats::{bootstrap_diff, kendall, logistic_fixed_effects, odds_ratio};
use fbs_core::training::{bios_f1, gate_phase, lm_loss, train_loop, Config, GatePhase, LabeledCorpus, Sample, TrainSettings};
use fbs_core::{FbsError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Training batch for the toy run; see the README for why it is below the
/// library default.
const TOY_BATCH: usize = 2;
const TOY_SEQ: usize = 64;
const TOY_STEPS: usize = 2000;
const GATE_STEPS: usize = 300;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn desk_random(seed: u64) -> Model {
    Model::new(ModelConfig {
        seed,
        fusion_init: FusionInit::Random,
        ..ModelConfig::desk()
    })
    .unwrap()
}

/// Policy that lets the random gates actually skip.
fn loose_policy() -> GatePolicyConfig {
    GatePolicyConfig::for_layers(6).with_tau(0.5)
}

fn c1_no_leakage() -> Result<Outcome> {
    let t = Instant::now();
    let model = desk_random(11);
    let cfg = BatteryConfig { pairs: 100, seed: 1, ..BatteryConfig::default() };
    let mut worst: f64 = 0.0;
    let mut fails = Vec::new();
    for (name, opts) in battery_configs(&loose_policy()) {
        let s = FbsSubject { model: &model, opts };
        for c in leakage_cases(name, &s, &cfg)? {
            worst = worst.max(c.max_dev);
            if !c.pass {
                fails.push(c.line());
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(outcome(
        fails.is_empty() && worst <= 1e-9 && secs < 120.0,
        format!("4 configs x 100 pairs, max deviation {worst:.2e} (bar 1e-9), {secs:.1}s {fails:?}"),
    ))
}

fn c2_cache() -> Result<Outcome> {
    let t = Instant::now();
    let model = desk_random(12);
    let cfg = BatteryConfig { prompts: 50, steps: 64, seed: 2, ..BatteryConfig::default() };
    let s = FbsSubject { model: &model, opts: ForwardOptions::full(loose_policy()) };
    let c = cache_case("full", &s, &cfg)?;
    let secs = t.elapsed().as_secs_f64();
    Ok(outcome(
        c.pass && secs < 300.0,
        format!("50 prompts x 64 steps, drift {:.2e}, first divergence {:?}, {secs:.1}s", c.max_dev, c.first_divergence),
    ))
}

/// Finite differences on the top coordinates of every parameter that
/// receives gradient from `term`. Returns (max relative error, coordinates).
fn check_term<F>(model: &mut Model, term: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph, &mut Binder, &Model) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut b = Binder::new(&model.store);
    let out = term(&mut g, &mut b, model)?;
    let grads = g.backward(out);
    let mut ids = Vec::new();
    let mut inputs = Vec::new();
    let mut analytic = Vec::new();
    let mut coords = Vec::new();
    let all: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in all {
        let Some(v) = b.bound(id) else { continue };
        let a = grads.get_or_zeros(v);
        let mut order: Vec<usize> = (0..a.len()).collect();
        order.sort_by(|&i, &j| a.data()[j].abs().total_cmp(&a.data()[i].abs()));
        let top: Vec<usize> = order.into_iter().take(2).filter(|&i| a.data()[i].abs() > 1e-9).collect();
        if top.is_empty() {
            continue;
        }
        ids.push(id);
        inputs.push(model.store.value(id).clone());
        analytic.push(a);
        coords.push(top);
    }
    let n: usize = coords.iter().map(Vec::len).sum();
    let report = grad_check_with(&inputs, &analytic, Some(&coords), 1e-5, |ps| {
        for (id, p) in ids.iter().zip(ps) {
            model.store.set_value(*id, p.clone())?;
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen(&model.store);
        let v = term(&mut g, &mut b, model)?;
        Ok(g.value(v).item())
    })?;
    for (id, p) in ids.iter().zip(&inputs) {
        model.store.set_value(*id, p.clone())?;
    }
    Ok((report.max_rel_err, n))
}

fn c3_gradients() -> Result<Outcome> {
    let mut model = desk_random(13);
    let corpus = LabeledCorpus::synthetic(5, 4000, 0.3);
    // first window whose CTC target fits in its frames
    let sample: Sample = (0..200)
        .map(|i| corpus.window(300 + 7 * i, 24))
        .find(|s| {
            let target = collapse_labels(s.labels.as_ref().unwrap());
            matches!(ctc_loss(&[0.0; 24 * 5], &target), CtcOutcome::Loss { .. })
        })
        .ok_or_else(|| FbsError::invalid("no CTC-feasible window"))?;
    let toks = sample.tokens.clone();
    let labels = sample.labels.clone().unwrap();
    let mut base = ForwardOptions::stage1(GatePolicyConfig::for_layers(6));
    base.detach_gate_inputs = false;
    let mut no_gate = base.clone().with_gate(GateMode::Off);
    let (_, out0) = model.forward(&toks, &no_gate)?;
    let layer = 2;
    let w_preview = out0.layers[layer].preview.as_ref().unwrap().w.clone();
    base.pins = Some(out0.pins());
    no_gate.pins = base.pins.clone();
    let gold = chunk_schedule(&labels, model.cfg.c_chunk, model.cfg.ch_include_neutral).0;

    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;
    let mut run = |name: &str, model: &mut Model, f: &dyn Fn(&mut Graph, &mut Binder, &Model) -> Result<Var>| -> Result<()> {
        let (err, n) = check_term(model, f)?;
        worst = worst.max(err);
        lines.push(format!("{name} {err:.1e}/{n}"));
        Ok(())
    };
    run("lm", &mut model, &|g, b, m| {
        let o = m.forward_on(g, b, &toks, &no_gate)?;
        lm_loss(g, o.logits, &toks)
    })?;
    for (name, q) in [("bios_ce", 1.0), ("bios_ctc", 0.0)] {
        run(name, &mut model, &|g, b, m| {
            let o = m.forward_on(g, b, &toks, &no_gate)?;
            match bios_objective(g, o.layers[layer].chunk.as_ref().unwrap().logits, &labels, q, 0.5)? {
                BiosObjective::Loss(v) => Ok(v),
                BiosObjective::Infeasible { .. } => Err(FbsError::invalid("infeasible CTC target")),
            }
        })?;
    }
    run("align", &mut model, &|g, b, m| {
        let o = m.forward_on(g, b, &toks, &no_gate)?;
        let id = m.store.id(&format!("layers.{layer}.ch.align")).unwrap();
        let proj = b.var(g, &m.store, id);
        align_loss(g, o.layers[layer].chunk.as_ref().unwrap().x, proj, &gold)
    })?;
    run("preview", &mut model, &|g, b, m| {
        let o = m.forward_on(g, b, &toks, &no_gate)?;
        let pv = o.layers[layer].preview.as_ref().unwrap();
        let pos: Vec<usize> = (0..toks.len()).collect();
        preview_loss_graph(g, pv.log_p, &pos, &toks, &w_preview, m.cfg.vocab)
    })?;
    run("gate", &mut model, &|g, b, m| {
        let o = m.forward_on(g, b, &toks, &base)?;
        gate_regularizer(g, o.layers[layer].gate.as_ref().unwrap().p, 0.3)
    })?;
    run("soft_mixture", &mut model, &|g, b, m| {
        let o = m.forward_on(g, b, &toks, &base)?;
        lm_loss(g, o.logits, &toks)
    })?;
    Ok(outcome(worst <= 1e-4, format!("max relative error {worst:.2e} (bar 1e-4): {}", lines.join(", "))))
}

/// Chunk containing each position found by looking backwards.
fn reference_chunks(labels: &[BiosLabel]) -> Vec<Chunk> {
    let owner = |i: usize| -> Option<usize> {
        let mut j = i;
        loop {
            match labels[j] {
                BiosLabel::B => return Some(j),
                BiosLabel::I if j > 0 => j -= 1,
                _ => return None,
            }
        }
    };
    let mut out: Vec<Chunk> = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let (start, neutral) = match label {
            BiosLabel::S => (i, false),
            BiosLabel::O => (i, true),
            BiosLabel::B => (i, false),
            BiosLabel::I => match owner(i) {
                Some(s) => (s, false),
                None => (i, true),
            },
        };
        match out.last_mut() {
            Some(c) if c.start == start && !neutral && label == BiosLabel::I => c.end = i + 1,
            _ => out.push(Chunk { start, end: i + 1, neutral }),
        }
    }
    out
}

fn c4_bios_oracle() -> Result<Outcome> {
    let mut checked = 0usize;
    let mut bad = 0usize;
    for n in 0..=6u32 {
        for code in 0..4usize.pow(n) {
            let labels: Vec<BiosLabel> = (0..n).map(|i| BiosLabel::from_index((code >> (2 * i)) & 3).unwrap()).collect();
            checked += 1;
            if parse_bios(&labels) != reference_chunks(&labels) {
                bad += 1;
            }
        }
    }
    Ok(outcome(bad == 0, format!("{checked} sequences (n <= 6), {bad} mismatches")))
}

fn brute_ctc(logits: &[f64], target: &[usize]) -> f64 {
    let t = logits.len() / 5;
    let logp: Vec<f64> = logits
        .chunks(5)
        .flat_map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|x| (x - m).exp()).sum();
            r.iter().map(move |x| x - m - z.ln()).collect::<Vec<_>>()
        })
        .collect();
    let mut total = 0.0;
    for code in 0..5usize.pow(t as u32) {
        let path: Vec<usize> = (0..t).map(|i| (code / 5usize.pow(i as u32)) % 5).collect();
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != 4 {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(i, &s)| logp[i * 5 + s]).sum::<f64>().exp();
        }
    }
    total
}

fn c5_ctc_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut bad = 0;
    for t in 1..=4usize {
        for len in 0..=3usize {
            for code in 0..4usize.pow(len as u32) {
                let target: Vec<usize> = (0..len).map(|i| (code >> (2 * i)) & 3).collect();
                let logits: Vec<f64> = (0..t * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
                let p = brute_ctc(&logits, &target);
                cases += 1;
                match ctc_loss(&logits, &target) {
                    CtcOutcome::Loss { nll, .. } => worst = worst.max((nll - (-p.ln())).abs()),
                    CtcOutcome::Infeasible { .. } => {
                        if p != 0.0 {
                            bad += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(outcome(worst <= 1e-8 && bad == 0, format!("{cases} cases (T <= 4, |y| <= 3), max |nll diff| {worst:.2e}, {bad} wrong infeasible")))
}

fn c6_compute() -> Result<Outcome> {
    let cfg = ModelConfig::desk();
    let (d, dff) = (cfg.d as u128, cfg.d_ff as u128);
    let oracle = |ctx: u128| 8 * d * d + 4 * d * ctx + 4 * d * dff;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ledger = FlopsLedger::new(&cfg);
    let (mut skipped, mut total) = (0u128, 0u128);
    for ctx in 1..=64usize {
        let ex: Vec<bool> = (0..cfg.n_layers).map(|_| rng.random_bool(0.6)).collect();
        for &e in &ex {
            total += oracle(ctx as u128);
            if !e {
                skipped += oracle(ctx as u128);
            }
        }
        ledger.record_step(ctx, &ex, true, true, true);
    }
    let rel = tflops_rel(&ledger, false)?;
    let share = 1.0 - skipped as f64 / total as f64;
    let exact = ledger.total_flops() == total && ledger.executed_flops() + skipped == total && (rel - share).abs() <= 2.0 * f64::EPSILON;
    let formula = layer_flops(cfg.d as u64, cfg.d_ff as u64, 10) as u128 == oracle(10);

    // forced all-skip: no layer FLOPs and identity hidden states
    let model = desk_random(16);
    let prompt: Vec<usize> = (0..8).map(|i| 97 + i).collect();
    let all_skip = ForwardOptions::full(GatePolicyConfig::for_layers(6)).with_gate(GateMode::AllSkip);
    let gen = greedy_generate(&model, &prompt, 8, &all_skip)?;
    let (g, out) = model.forward(&prompt, &all_skip)?;
    let identity = g.value(out.hidden[0]).data() == g.value(out.hidden[cfg.n_layers]).data();
    let zero = gen.ledger.executed_flops() == 0 && tflops_rel(&gen.ledger, false)? == 0.0;

    let never = ForwardOptions::full(GatePolicyConfig::for_layers(6).with_tau(2.0));
    let one = tflops_rel(&greedy_generate(&model, &prompt, 8, &never)?.ledger, false)? == 1.0;

    // uniform 36% skip: 9 of 25 layers skipped at every step
    let wide = ModelConfig { n_layers: 25, ..ModelConfig::desk() };
    let mut l36 = FlopsLedger::new(&wide);
    for ctx in 1..=50 {
        let ex: Vec<bool> = (0..25).map(|l| l >= 9).collect();
        l36.record_step(ctx, &ex, false, false, true);
    }
    let r36 = tflops_rel(&l36, false)?;
    Ok(outcome(
        exact && formula && identity && zero && one && r36 == 0.64,
        format!("identity {exact}, all-skip zero {zero} hidden identity {identity}, tau 2.0 ratio 1 {one}, uniform 36% -> {r36}"),
    ))
}

fn c7_formulas() -> Result<Outcome> {
    let r1 = reward(0.70, 1.0, 0.0, 0.1, 0.1)?;
    let r2 = reward(0.95, 1.0, -0.2, 0.1, 0.1)?;
    let or = odds_ratio(0.432, 1000.0, 0.261, 1000.0)?.or;
    let a = Anneal::default();
    let (t0, t1) = (anneal_tau(0, &a), anneal_tau(a.total, &a));
    let pass = (r1 - 0.030).abs() < 1e-12
        && (r2 - 0.005).abs() < 1e-12
        && (or - 2.15).abs() <= 0.01
        && (t0 - 0.9).abs() < 1e-12
        && (t1 - 0.7).abs() < 1e-12;
    Ok(outcome(pass, format!("reward {r1:.3} / {r2:.3}, OR {or:.3}, anneal {t0:.2} -> {t1:.2}")))
}

fn brute_kendall(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).signum() * if x[i] == x[j] { 0.0 } else { 1.0 };
            let b = (y[i] - y[j]).signum() * if y[i] == y[j] { 0.0 } else { 1.0 };
            if a == 0.0 && b == 0.0 {
                continue;
            } else if a == 0.0 {
                tx += 1.0;
            } else if b == 0.0 {
                ty += 1.0;
            } else if a == b {
                c += 1.0;
            } else {
                d += 1.0;
            }
        }
    }
    (c - d) / ((c + d + tx) * (c + d + ty)).sqrt()
}

fn c8_calibration() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
    let p_same = bootstrap_diff(&a, &a, 2000, 1)?.p;
    let b: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
    let p_shift = bootstrap_diff(&b, &a, 2000, 1)?.p;

    let n = 100_000;
    let e: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let layers: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let bins: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
    let g: Vec<bool> = e
        .iter()
        .map(|&x| rng.random_bool(1.0 / (1.0 + (0.9 * x).exp())))
        .collect();
    let fit = logistic_fixed_effects(&g, &e, &layers, &bins)?;

    let mut worst: f64 = 0.0;
    for n in 2..=50 {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        if let Ok(k) = kendall(&x, &y) {
            worst = worst.max((k - brute_kendall(&x, &y)).abs());
        }
    }
    let pass = p_same == 1.0 && p_shift <= 0.002 && (fit.a1 + 0.9).abs() <= 0.1 && worst <= 1e-12;
    Ok(outcome(
        pass,
        format!("p(identical) {p_same}, p(shift) {p_shift}, a1 {:.3} (se {:.3}), kendall max diff {worst:.1e}", fit.a1, fit.se),
    ))
}

fn toy_config() -> Config {
    let base = TrainSettings::default();
    Config {
        gate: GatePolicyConfig::for_layers(6),
        train: TrainSettings {
            steps: TOY_STEPS,
            batch: TOY_BATCH,
            seq_len: TOY_SEQ,
            corpus_tokens: 200_000,
            gate_phase: GatePhase { steps: GATE_STEPS, ..base.gate_phase },
            ..base
        },
        ..Config::default()
    }
}

fn held_out_nll(model: &Model, held: &LabeledCorpus) -> Result<f64> {
    let opts = ForwardOptions { gate: GateMode::Off, ..ForwardOptions::full(GatePolicyConfig::for_layers(6)) };
    let mut total = 0.0;
    let mut n = 0;
    for w in 0..20 {
        let s = held.window(w * 128, 128);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&model.store);
        let o = model.forward_on(&mut g, &mut b, &s.tokens, &opts)?;
        let l = lm_loss(&mut g, o.logits, &s.tokens)?;
        total += g.value(l).item();
        n += 1;
    }
    Ok(total / n as f64)
}

fn c9_toy_training(cfg: &Config, corpus: &LabeledCorpus, held: &LabeledCorpus) -> Result<(Outcome, Model)> {
    let before = held_out_nll(&Model::new(cfg.model.clone())?, held)?;
    let stage1 = Config {
        train: TrainSettings {
            gate_phase: GatePhase { steps: 0, ..cfg.train.gate_phase },
            ..cfg.train.clone()
        },
        ..cfg.clone()
    };
    let t = Instant::now();
    let out = train_loop(&stage1, corpus, |_| {})?;
    let secs = t.elapsed().as_secs_f64();
    let after = held_out_nll(&out.model, held)?;
    let drop = 1.0 - after / before;
    let last = cfg.model.n_layers - 1;
    let f1 = bios_f1(&out.model, held, last, 128, 40)?;
    Ok((
        outcome(
            drop >= 0.20 && f1 >= 0.90 && secs < 600.0,
            format!(
                "{TOY_STEPS} steps of {TOY_BATCH}x{TOY_SEQ} in {secs:.0}s, held-out L_lm {before:.3} -> {after:.3} ({:.1}% drop), BIOS macro-F1 {f1:.3}",
                100.0 * drop
            ),
        ),
        out.model,
    ))
}

fn c10_skip_shape(model: &mut Model, cfg: &Config, corpus: &LabeledCorpus) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x9a7e);
    gate_phase(model, cfg, corpus, &mut rng, TOY_STEPS, |_| {})?;
    // stage 1 saw positions below TOY_SEQ only, so prompt and generation stay inside it
    let protocol = TimingProtocol {
        prompt_len: TOY_SEQ / 2,
        gen_len: TOY_SEQ / 2,
        ..TimingProtocol::desk()
    };
    let prompts = bench_prompts(21, 4, protocol.prompt_len);
    let base = ForwardOptions::full(cfg.gate.clone());
    let rows = tau_sweep(model, &prompts, &[2.0, 0.9, 0.8, 0.7], &protocol, &base)?;
    let skip: Vec<f64> = rows.iter().map(|r| r.skip_pct).collect();
    let increasing = skip.windows(2).skip(1).all(|w| w[1] > w[0]);
    let faster = rows[3].latency_ms_median < rows[0].latency_ms_median;
    let desc: Vec<String> = rows
        .iter()
        .map(|r| format!("tau {} skip {:.1}% {:.1}ms", r.tau, r.skip_pct, r.latency_ms_median))
        .collect();
    Ok(outcome(increasing && faster, desc.join("; ")))
}

fn c11_plumbing(model: &Model, cfg: &Config) -> Result<Outcome> {
    let prompts = bench_prompts(31, 4, TOY_SEQ / 2);
    let mut cells = Vec::new();
    for (run, tau) in [0.9, 0.8, 0.7].into_iter().enumerate() {
        let mut opts = ForwardOptions::full(cfg.gate.clone());
        opts.policy.tau = tau;
        for (i, p) in prompts.iter().enumerate() {
            let gen = greedy_generate(model, p, TOY_SEQ / 2, &opts)?;
            cells.extend(generation_cells(p, &gen, run * prompts.len() + i));
        }
    }
    let tables = analyze_cells(&cells, &AnalysisConfig::default())?;
    let names: Vec<&str> = tables.iter().map(|t| t.0).collect();
    let free = cells.iter().filter(|c| c.p.is_finite() && c.reason == ForceReason::None).count();
    let bins = &tables.iter().find(|t| t.0 == "bins.csv").unwrap().1;
    let binned: usize = bins.rows.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    let mut idempotent = true;
    for (_, t) in tables.iter().filter(|t| t.0 != "bins.csv") {
        let mut again = Table::parse(&t.to_csv())?;
        again.apply_fdr(0.05)?;
        let once = again.to_csv();
        again.apply_fdr(0.05)?;
        idempotent &= once == t.to_csv() && again.to_csv() == once;
    }
    let corr = &tables[0].1;
    let has_ci = corr.header.iter().any(|h| h == "ci_low") && corr.rows.iter().any(|r| r[9] == "ok");
    Ok(outcome(
        binned == free && idempotent && has_ci && names.len() == 4,
        format!("tables {names:?}, {free} free cells binned {binned}, FDR idempotent {idempotent}"),
    ))
}

fn report(n: usize, name: &str, r: Result<Outcome>, fails: &mut usize) {
    match r {
        Ok(o) => {
            println!("criterion {n:>2} {name}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            *fails += !o.pass as usize;
        }
        Err(e) => {
            println!("criterion {n:>2} {name}: FAIL | error: {e}");
            *fails += 1;
        }
    }
}

fn main() {
    let mut fails = 0;
    report(1, "no-leakage battery", c1_no_leakage(), &mut fails);
    report(2, "cache consistency", c2_cache(), &mut fails);
    report(3, "gradient integrity", c3_gradients(), &mut fails);
    report(4, "BIOS parser oracle", c4_bios_oracle(), &mut fails);
    report(5, "CTC oracle", c5_ctc_oracle(), &mut fails);
    report(6, "compute accounting", c6_compute(), &mut fails);
    report(7, "formula reproductions", c7_formulas(), &mut fails);
    report(8, "statistics calibration", c8_calibration(), &mut fails);
    let cfg = toy_config();
    let corpus = LabeledCorpus::synthetic(cfg.train.corpus_seed, cfg.train.corpus_tokens, cfg.train.pattern_rate);
    let held = LabeledCorpus::synthetic(cfg.train.corpus_seed + 1000, 20_000, cfg.train.pattern_rate);
    match c9_toy_training(&cfg, &corpus, &held) {
        Ok((o, mut model)) => {
            report(9, "toy training", Ok(o), &mut fails);
            report(10, "skip-behavior shape", c10_skip_shape(&mut model, &cfg, &corpus), &mut fails);
            report(11, "mechanism plumbing", c11_plumbing(&model, &cfg), &mut fails);
        }
        Err(e) => {
            report(9, "toy training", Err(e), &mut fails);
            println!("criterion 10 skip-behavior shape: FAIL | no trained model");
            println!("criterion 11 mechanism plumbing: FAIL | no trained model");
            fails += 2;
        }
    }
    println!("acceptance: {} of 11 criteria passed", 11 - fails);
    if fails > 0 {
        std::process::exit(1);
    }
}
