use fbs_core::backbone::{
    fuse_block, greedy_generate, load_checkpoint, save_checkpoint, ForwardOptions, FusionInit, GateMode, KvCache, Model,
    ModelConfig, StepGates,
};
use fbs_core::numerics::Tensor;
use fbs_core::skipgate::GatePolicyConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(seed: u64) -> Model {
    Model::new(ModelConfig {
        seed,
        fusion_init: FusionInit::Random,
        ..ModelConfig::tiny()
    })
    .unwrap()
}

fn tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(32..127)).collect()
}

fn policy(m: &Model, tau: f64) -> GatePolicyConfig {
    GatePolicyConfig {
        never_skip: vec![1],
        ..GatePolicyConfig::for_layers(m.n_layers())
    }
    .with_tau(tau)
}

/// Gates that skip often: bias the gate output strongly positive.
fn skippy_model(seed: u64) -> Model {
    let mut m = random_model(seed);
    for l in 0..m.n_layers() {
        let id = m.store.id(&format!("layers.{l}.gate.b2")).unwrap();
        m.store.set_value(id, Tensor::new(vec![1], vec![0.4]).unwrap()).unwrap();
    }
    m
}

#[test]
fn causality_with_all_modules() {
    let m = random_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for opts in [
        ForwardOptions::full(policy(&m, 0.5)),
        ForwardOptions::stage1(policy(&m, 0.5)),
        ForwardOptions::vanilla(),
    ] {
        for _ in 0..5 {
            let prefix = tokens(&mut rng, 9);
            let a: Vec<usize> = prefix.iter().copied().chain(tokens(&mut rng, 7)).collect();
            let b: Vec<usize> = prefix.iter().copied().chain(tokens(&mut rng, 7)).collect();
            let la = m.logits(&a, &opts).unwrap();
            let lb = m.logits(&b, &opts).unwrap();
            for i in 0..prefix.len() {
                for (x, y) in la.row(i).iter().zip(lb.row(i)) {
                    assert!((x - y).abs() <= 1e-12, "row {i}: {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn zero_init_fusion_equals_vanilla_bitwise() {
    let m = Model::new(ModelConfig::tiny()).unwrap();
    let toks: Vec<usize> = b"The cat sat (on) the mat.".iter().map(|&b| b as usize).collect();
    let v = m.logits(&toks, &ForwardOptions::vanilla()).unwrap();
    let f = m.logits(&toks, &ForwardOptions::full(policy(&m, 0.8))).unwrap();
    assert_eq!(v.data(), f.data());
}

#[test]
fn single_token_logits_shape() {
    let m = random_model(0);
    let l = m.logits(&[65], &ForwardOptions::full(policy(&m, 0.8))).unwrap();
    assert_eq!(l.shape(), &[1, m.cfg.vocab]);
    let s = fbs_core::numerics::stable_softmax(&l);
    assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(m.logits(&[m.cfg.vocab], &ForwardOptions::vanilla()).is_err());
}

#[test]
fn fuse_block_is_elementwise_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = |rng: &mut ChaCha8Rng| Tensor::new(vec![3, 4], (0..12).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
    let (h, sa, p, c) = (r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng));
    let z = Tensor::zeros(&[3, 4]);
    let out = fuse_block(&h, &sa, &p, &c).unwrap();
    for i in 0..12 {
        assert_eq!(out.data()[i], h.data()[i] + sa.data()[i] + p.data()[i] + c.data()[i]);
    }
    assert_eq!(fuse_block(&h, &z, &z, &z).unwrap().data(), h.data());
    assert!(fuse_block(&h, &Tensor::zeros(&[2, 4]), &z, &z).is_err());
}

fn step_logits(m: &Model, toks: &[usize], opts: &ForwardOptions) -> Vec<Vec<f64>> {
    let mut cache = KvCache::new(m);
    toks.iter()
        .map(|&t| m.decode_step(&mut cache, t, StepGates::Policy, opts).unwrap().logits)
        .collect()
}

#[test]
fn cache_equivalence_never_skip() {
    let m = random_model(11);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for opts in [ForwardOptions::vanilla(), ForwardOptions::full(policy(&m, 2.0))] {
        let toks = tokens(&mut rng, 24);
        let teacher = m.logits(&toks, &opts).unwrap();
        for (i, row) in step_logits(&m, &toks, &opts).iter().enumerate() {
            for (x, y) in row.iter().zip(teacher.row(i)) {
                assert!((x - y).abs() <= 1e-9, "pos {i}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn cache_equivalence_with_skips() {
    let m = skippy_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let opts = ForwardOptions::full(policy(&m, 0.55));
    let toks = tokens(&mut rng, 30);
    let (g, out) = m.forward(&toks, &opts).unwrap();
    let skipped: usize = out.layers.iter().map(|l| toks.len() - l.executed.len()).sum();
    assert!(skipped > 0 && skipped < toks.len() * m.n_layers(), "skips {skipped}");
    let teacher = g.value(out.logits);
    for (i, row) in step_logits(&m, &toks, &opts).iter().enumerate() {
        for (x, y) in row.iter().zip(teacher.row(i)) {
            assert!((x - y).abs() <= 1e-9, "pos {i}: {x} vs {y}");
        }
    }
}

#[test]
fn given_execute_all_matches_teacher() {
    let m = random_model(6);
    let opts = ForwardOptions::full(policy(&m, 0.8));
    let toks: Vec<usize> = b"if (a) { b[1] = c; }".iter().map(|&b| b as usize).collect();
    let teacher = m.logits(&toks, &ForwardOptions { gate: GateMode::Off, ..opts.clone() }).unwrap();
    let mut cache = KvCache::new(&m);
    let none = vec![false; m.n_layers()];
    for (i, &t) in toks.iter().enumerate() {
        let out = m.decode_step(&mut cache, t, StepGates::Given(&none), &opts).unwrap();
        for (x, y) in out.logits.iter().zip(teacher.row(i)) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
    assert!(m.decode_step(&mut cache, 1, StepGates::Given(&[false]), &opts).is_err());
}

#[test]
fn all_skip_returns_embedding_and_runs_no_body() {
    let m = random_model(2);
    let opts = ForwardOptions::full(policy(&m, 0.8));
    let mut cache = KvCache::new(&m);
    for &t in b"abc" {
        m.decode_step(&mut cache, t as usize, StepGates::Policy, &opts).unwrap();
    }
    let evals = cache.body_evals;
    let lens: Vec<usize> = cache.layers.iter().map(|l| l.len()).collect();
    let all = vec![true; m.n_layers()];
    let out = m.decode_step(&mut cache, 100, StepGates::Given(&all), &opts).unwrap();
    assert_eq!(cache.body_evals, evals);
    assert_eq!(cache.layers.iter().map(|l| l.len()).collect::<Vec<_>>(), lens);
    let tok = m.store.by_name("embed.tok").unwrap().value.row(100).to_vec();
    let pos = m.store.by_name("embed.pos").unwrap().value.row(3).to_vec();
    let emb: Vec<f64> = tok.iter().zip(&pos).map(|(a, b)| a + b).collect();
    assert_eq!(out.hidden, emb);
    assert!(out.cells.iter().all(|c| c.skipped));
}

#[test]
fn teacher_all_skip_is_identity_chain() {
    let m = random_model(2);
    let opts = ForwardOptions::full(policy(&m, 0.8)).with_gate(GateMode::AllSkip);
    let (g, out) = m.forward(&[70, 71, 72], &opts).unwrap();
    assert_eq!(g.value(out.hidden[0]).data(), g.value(*out.hidden.last().unwrap()).data());
}

#[test]
fn surgical_identity() {
    let m = random_model(9);
    let opts = ForwardOptions::full(policy(&m, 0.8));
    let toks: Vec<usize> = b"skip one layer".iter().map(|&b| b as usize).collect();
    let none = vec![false; m.n_layers()];
    for target in 0..m.n_layers() {
        let mut cache = KvCache::new(&m);
        for &t in &toks[..toks.len() - 1] {
            m.decode_step(&mut cache, t, StepGates::Given(&none), &opts).unwrap();
        }
        let mut cache2 = cache.clone();
        let mut gates = none.clone();
        gates[target] = true;
        let last = *toks.last().unwrap();
        let skipped = m.decode_step(&mut cache, last, StepGates::Given(&gates), &opts).unwrap();
        // a copy whose target layer contributes nothing
        let mut ident = m.clone();
        for name in ["attn.wo", "ffn.w2", "ffn.b2", "paw.out", "ch.out"] {
            let id = ident.store.id(&format!("layers.{target}.{name}")).unwrap();
            let shape = ident.store.value(id).shape().to_vec();
            ident.store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let oracle = ident.decode_step(&mut cache2, last, StepGates::Given(&none), &opts).unwrap();
        assert_eq!(skipped.logits, oracle.logits, "layer {target}");
    }
}

#[test]
fn greedy_generation_properties() {
    let m = random_model(1);
    let prompt: Vec<usize> = b"Once upon".iter().map(|&b| b as usize).collect();
    let never = ForwardOptions::full(policy(&m, 0.8)).with_gate(GateMode::Off);
    let tau2 = ForwardOptions::full(policy(&m, 2.0));
    let a = greedy_generate(&m, &prompt, 20, &never).unwrap();
    let b = greedy_generate(&m, &prompt, 20, &never).unwrap();
    let c = greedy_generate(&m, &prompt, 20, &tau2).unwrap();
    assert_eq!(a.tokens.len(), 20);
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.tokens, c.tokens);
    assert_eq!(c.trace.skip_ratio(), 0.0);
    assert!(c.ledger.matches_trace(&c.trace));
    assert!(greedy_generate(&m, &prompt, 0, &never).is_err());
}

#[test]
fn greedy_ignores_end_of_sequence() {
    use fbs_core::textdata::EOS;
    // only the EOS row of the tied embedding is nonzero and the final norm
    // bias makes its logit positive, so EOS is the argmax at every step
    let mut m = Model::new(ModelConfig::tiny()).unwrap();
    let d = m.cfg.d;
    let id = m.store.id("embed.tok").unwrap();
    let mut tok = Tensor::zeros(m.store.value(id).shape());
    tok.data_mut()[EOS * d..(EOS + 1) * d].fill(1.0);
    m.store.set_value(id, tok).unwrap();
    let b = m.store.id("ln_f.b").unwrap();
    m.store.set_value(b, Tensor::full(&[d], 1.0)).unwrap();
    let g = greedy_generate(&m, &[65, 66], 128, &ForwardOptions::vanilla()).unwrap();
    assert_eq!(g.tokens, vec![EOS; 128]);
    assert_eq!(g.ledger.steps.len(), 128);
}

#[test]
fn argmax_ties_pick_lowest_id() {
    let mut m = Model::new(ModelConfig::tiny()).unwrap();
    let id = m.store.id("embed.tok").unwrap();
    let shape = m.store.value(id).shape().to_vec();
    m.store.set_value(id, Tensor::zeros(&shape)).unwrap();
    let g = greedy_generate(&m, &[65, 66], 4, &ForwardOptions::vanilla()).unwrap();
    assert_eq!(g.tokens, vec![0; 4]);
}

#[test]
fn checkpoint_round_trip_preserves_generation() {
    let m = skippy_model(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert!(m.same_params(&back));
    let opts = ForwardOptions::full(policy(&m, 0.6));
    let prompt = [72, 101, 108, 108, 111];
    assert_eq!(
        greedy_generate(&m, &prompt, 16, &opts).unwrap().tokens,
        greedy_generate(&back, &prompt, 16, &opts).unwrap().tokens
    );
}
