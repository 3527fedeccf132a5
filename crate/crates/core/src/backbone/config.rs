use serde::{Deserialize, Serialize};

use crate::error::{FbsError, Result};
use crate::paw::Compression;
use crate::skipgate::GateInputMode;

/// How the fusion output projections and the alignment map start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionInit {
    /// Zero output projections: the untrained model equals the baseline.
    #[default]
    Zero,
    /// Small random values everywhere (used for gradient checks).
    Random,
}

fn default_max_len() -> usize {
    1024
}
fn default_d_r() -> usize {
    32
}
fn default_gamma() -> f64 {
    4.0
}
fn default_true() -> bool {
    true
}
fn default_std() -> f64 {
    0.1
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    #[serde(rename = "L")]
    pub n_layers: usize,
    #[serde(rename = "H")]
    pub n_heads: usize,
    pub d_ff: usize,
    #[serde(rename = "V")]
    pub vocab: usize,
    pub k_max: usize,
    #[serde(rename = "K_top")]
    pub k_top: usize,
    #[serde(rename = "C_chunk")]
    pub c_chunk: usize,
    pub gate_hidden: usize,
    pub seed: u64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Width of the projected residual signal seen by the gate.
    #[serde(default = "default_d_r")]
    pub d_r: usize,
    /// Soft-window sharpness.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub compression: Compression,
    /// 1-based layers carrying a preview module; all when absent.
    #[serde(default)]
    pub paw_layers: Option<Vec<usize>>,
    /// 1-based layers carrying a chunk head; all when absent.
    #[serde(default)]
    pub ch_layers: Option<Vec<usize>>,
    #[serde(default = "default_true")]
    pub ch_include_neutral: bool,
    #[serde(default)]
    pub gate_input: GateInputMode,
    #[serde(default)]
    pub fusion_init: FusionInit,
    #[serde(default = "default_std")]
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// d=64, L=6, H=4, d_ff=256, V=260, k_max=9, K_top=16.
    pub fn desk() -> Self {
        Self {
            d: 64,
            n_layers: 6,
            n_heads: 4,
            d_ff: 256,
            vocab: crate::textdata::VOCAB_SIZE,
            k_max: 9,
            k_top: 16,
            c_chunk: 8,
            gate_hidden: 32,
            seed: 0,
            max_len: default_max_len(),
            d_r: default_d_r(),
            gamma: default_gamma(),
            compression: Compression::Conv,
            paw_layers: None,
            ch_layers: None,
            ch_include_neutral: true,
            gate_input: GateInputMode::Both,
            fusion_init: FusionInit::Zero,
            init_std: default_std(),
        }
    }

    /// A very small configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            d: 16,
            n_layers: 3,
            n_heads: 2,
            d_ff: 32,
            k_max: 3,
            k_top: 4,
            c_chunk: 4,
            gate_hidden: 8,
            d_r: 8,
            max_len: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FbsError::Config(m));
        if self.d == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab == 0 {
            return bad("d, H, d_ff and V must be positive".into());
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return bad(format!("d={} is not divisible by H={}", self.d, self.n_heads));
        }
        if self.n_layers < 2 {
            return bad(format!("L must be at least 2, got {}", self.n_layers));
        }
        if self.k_top == 0 || self.c_chunk == 0 || self.gate_hidden == 0 || self.d_r == 0 || self.max_len == 0 {
            return bad("K_top, C_chunk, gate_hidden, d_r and max_len must be positive".into());
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        for (name, set) in [("paw_layers", &self.paw_layers), ("ch_layers", &self.ch_layers)] {
            if let Some(l) = set.iter().flatten().find(|&&l| l == 0 || l > self.n_layers) {
                return bad(format!("{name} entry {l} outside 1..={}", self.n_layers));
            }
        }
        Ok(())
    }

    /// 0-based layer check.
    pub fn has_paw(&self, layer: usize) -> bool {
        self.paw_layers.as_ref().is_none_or(|s| s.contains(&(layer + 1)))
    }

    pub fn has_ch(&self, layer: usize) -> bool {
        self.ch_layers.as_ref().is_none_or(|s| s.contains(&(layer + 1)))
    }
}
