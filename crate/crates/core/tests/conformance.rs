use fbs_core::backbone::{ForwardOptions, FusionInit, Model, ModelConfig};
use fbs_core::conformance::fixtures::{Acausal, StaleCache};
use fbs_core::conformance::{cache_case, leakage_cases, run_battery, BatteryConfig, FbsSubject};
use fbs_core::skipgate::GatePolicyConfig;

fn model() -> Model {
    Model::new(ModelConfig {
        seed: 3,
        fusion_init: FusionInit::Random,
        ..ModelConfig::tiny()
    })
    .unwrap()
}

fn small() -> BatteryConfig {
    BatteryConfig {
        pairs: 10,
        prompts: 3,
        steps: 12,
        seed: 4,
        ..BatteryConfig::default()
    }
}

#[test]
fn honest_model_passes_every_case() {
    let m = model();
    let policy = GatePolicyConfig::for_layers(3).with_tau(0.5);
    let cases = run_battery(&m, &policy, &small()).unwrap();
    assert_eq!(cases.len(), 9);
    for c in &cases {
        assert!(c.pass, "{}", c.line());
    }
}

#[test]
fn acausal_subject_is_caught() {
    let m = model();
    let s = Acausal {
        inner: FbsSubject {
            model: &m,
            opts: ForwardOptions::full(GatePolicyConfig::for_layers(3)),
        },
        strength: 1e-3,
    };
    let cases = leakage_cases("acausal", &s, &small()).unwrap();
    let logits = cases.iter().find(|c| c.case.starts_with("logits")).unwrap();
    assert!(!logits.pass);
    assert!(logits.max_dev >= 1e-3 - 1e-12, "{}", logits.line());
    let preview = cases.iter().find(|c| c.case.starts_with("preview")).unwrap();
    assert!(!preview.pass || preview.vacuous, "{}", preview.line());
}

#[test]
fn stale_cache_reports_where_it_diverged() {
    let m = model();
    let s = StaleCache {
        inner: FbsSubject {
            model: &m,
            opts: ForwardOptions::vanilla(),
        },
        stale_from: 5,
    };
    let c = cache_case("stale", &s, &small()).unwrap();
    assert!(!c.pass);
    let step = c.first_divergence.expect("divergence step");
    assert!(step >= 5, "diverged at {step}");
}
