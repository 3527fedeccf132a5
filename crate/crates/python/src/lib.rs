//! Python bindings for the formula layer, the parsers and greedy decoding.

use std::path::PathBuf;

use fbs_core::backbone::{greedy_generate, load_checkpoint, ForwardOptions};
use fbs_core::chunk::{ctc_loss, parse_bios, BiosLabel, CtcOutcome};
use fbs_core::harness::tflops_rel;
use fbs_core::skipgate::{Anneal, GatePolicyConfig};
use fbs_core::textdata::{decode_lossy, encode};
use fbs_core::FbsError;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: FbsError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// `α(c0 − c)/c0 − β·max(0, Δℓ)`.
#[pyfunction]
#[pyo3(signature = (c, c0, delta_nll, alpha = 0.1, beta = 0.1))]
fn reward(c: f64, c0: f64, delta_nll: f64, alpha: f64, beta: f64) -> PyResult<f64> {
    fbs_core::skipgate::reward(c, c0, delta_nll, alpha, beta).map_err(py_err)
}

/// Odds ratio of two proportions, with the chi-square p-value.
#[pyfunction]
#[pyo3(signature = (p_high, p_low, n_high = 1000.0, n_low = 1000.0))]
fn odds_ratio(p_high: f64, p_low: f64, n_high: f64, n_low: f64) -> PyResult<(f64, f64)> {
    let r = fbs_core::stats::odds_ratio(p_high, n_high, p_low, n_low).map_err(py_err)?;
    Ok((r.or, r.p))
}

#[pyfunction]
#[pyo3(signature = (step, total, tau_start = 0.9, tau_end = 0.7))]
fn anneal_tau(step: usize, total: usize, tau_start: f64, tau_end: f64) -> f64 {
    fbs_core::skipgate::anneal_tau(step, &Anneal { tau_start, tau_end, total })
}

/// Chunks of a label string such as `"BIIOS"` as `(start, end, neutral)`.
#[pyfunction]
fn parse_labels(labels: &str) -> PyResult<Vec<(usize, usize, bool)>> {
    let seq = labels
        .chars()
        .map(|c| c.to_string().parse::<BiosLabel>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    Ok(parse_bios(&seq).into_iter().map(|c| (c.start, c.end, c.neutral)).collect())
}

/// CTC negative log-likelihood over `T×5` logits; `None` when infeasible.
#[pyfunction]
fn ctc_nll(logits: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<Option<f64>> {
    if logits.iter().any(|r| r.len() != 5) {
        return Err(PyValueError::new_err("logit rows must have 5 entries"));
    }
    let flat: Vec<f64> = logits.concat();
    Ok(match ctc_loss(&flat, &target) {
        CtcOutcome::Loss { nll, .. } => Some(nll),
        CtcOutcome::Infeasible { .. } => None,
    })
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    fbs_core::stats::spearman(&x, &y).map_err(py_err)
}

/// Greedy continuation under threshold gating: `(text, skip_ratio, tflops_rel)`.
#[pyfunction]
#[pyo3(signature = (ckpt, prompt, n_new, tau = 0.8))]
fn generate(ckpt: PathBuf, prompt: &str, n_new: usize, tau: f64) -> PyResult<(String, f64, f64)> {
    let model = load_checkpoint(&ckpt).map_err(py_err)?;
    let opts = ForwardOptions::full(GatePolicyConfig::for_layers(model.cfg.n_layers).with_tau(tau));
    let gen = greedy_generate(&model, &encode(prompt).ids, n_new, &opts).map_err(py_err)?;
    let rel = tflops_rel(&gen.ledger, false).map_err(py_err)?;
    Ok((decode_lossy(&gen.tokens), gen.trace.skip_ratio(), rel))
}

#[pymodule]
fn fbs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(reward, m)?)?;
    m.add_function(wrap_pyfunction!(odds_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(anneal_tau, m)?)?;
    m.add_function(wrap_pyfunction!(parse_labels, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_nll, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
