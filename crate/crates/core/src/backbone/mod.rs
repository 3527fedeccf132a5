//! Tiny causal decoder with the fused FBS block: pre-norm attention and FFN,
//! preview and chunk contributions through output projections, and per-layer
//! skip gates.

mod checkpoint;
mod config;
mod decode;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{FusionInit, ModelConfig};
pub use decode::{greedy_generate, Generation, KvCache, LayerCache, StepCell, StepGates, StepOutput};
pub use forward::{
    fuse_block, ChunkOutput, ForwardOptions, ForwardOutput, GateMode, GateOutput, LayerOutput, Pins,
};

use crate::error::{FbsError, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};
use crate::paw::Compression;

#[derive(Clone, Debug)]
pub(crate) struct PawIds {
    pub u: ParamId,
    pub heads: ParamId,
    pub comp: Option<ParamId>,
    pub out: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ChIds {
    pub bios: ParamId,
    pub bios_b: ParamId,
    pub out: ParamId,
    pub align: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct GateIds {
    pub res: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub paw: Option<PawIds>,
    pub ch: Option<ChIds>,
    pub gate: GateIds,
}

#[derive(Clone, Debug)]
pub(crate) struct ModelIds {
    pub tok: ParamId,
    pub pos: ParamId,
    pub layers: Vec<LayerIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
}

/// Configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub(crate) ids: ModelIds,
}

/// Parameter names owned by the preview module.
pub fn is_paw_param(name: &str) -> bool {
    name.contains(".paw.")
}

pub fn is_ch_param(name: &str) -> bool {
    name.contains(".ch.")
}

pub fn is_gate_param(name: &str) -> bool {
    name.contains(".gate.")
}

pub fn is_backbone_param(name: &str) -> bool {
    !is_paw_param(name) && !is_ch_param(name) && !is_gate_param(name)
}

impl Model {
    /// Seeded initialization.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut s = ParamStore::new();
        let (d, ff, v) = (cfg.d, cfg.d_ff, cfg.vocab);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let out_std = inv(d) / (2.0 * cfg.n_layers as f64).sqrt();
        let random = cfg.fusion_init == FusionInit::Random;
        let fusion_std = if random { cfg.init_std } else { 0.0 };

        let tok = s.add_normal("embed.tok", &[v, d], cfg.init_std, &mut rng)?;
        let pos = s.add_normal("embed.pos", &[cfg.max_len, d], cfg.init_std, &mut rng)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let n = |x: &str| format!("layers.{l}.{x}");
            let ln = |s: &mut ParamStore, x: &str, rng: &mut ChaCha8Rng| -> Result<(ParamId, ParamId)> {
                if random {
                    let g = s.add_normal(n(&format!("{x}.g")), &[d], 0.1, rng)?;
                    let gv: Vec<f64> = s.value(g).data().iter().map(|e| 1.0 + e).collect();
                    s.set_value(g, Tensor::new(vec![d], gv)?)?;
                    Ok((g, s.add_normal(n(&format!("{x}.b")), &[d], 0.1, rng)?))
                } else {
                    Ok((
                        s.add_const(n(&format!("{x}.g")), &[d], 1.0)?,
                        s.add_const(n(&format!("{x}.b")), &[d], 0.0)?,
                    ))
                }
            };
            let (ln1_g, ln1_b) = ln(&mut s, "ln1", &mut rng)?;
            let wq = s.add_normal(n("attn.wq"), &[d, d], inv(d), &mut rng)?;
            let wk = s.add_normal(n("attn.wk"), &[d, d], inv(d), &mut rng)?;
            let wv = s.add_normal(n("attn.wv"), &[d, d], inv(d), &mut rng)?;
            let wo = s.add_normal(n("attn.wo"), &[d, d], out_std, &mut rng)?;
            let (ln2_g, ln2_b) = ln(&mut s, "ln2", &mut rng)?;
            let w1 = s.add_normal(n("ffn.w1"), &[d, ff], inv(d), &mut rng)?;
            let b1 = s.add_normal(n("ffn.b1"), &[ff], fusion_std, &mut rng)?;
            let w2 = s.add_normal(n("ffn.w2"), &[ff, d], inv(ff) / (2.0 * cfg.n_layers as f64).sqrt(), &mut rng)?;
            let b2 = s.add_normal(n("ffn.b2"), &[d], fusion_std, &mut rng)?;
            let paw = if cfg.has_paw(l) {
                let k = cfg.k_max;
                let u = s.add_normal(n("paw.u"), &[d, 1], inv(d), &mut rng)?;
                let heads = s.add_normal(n("paw.heads"), &[d, k * v], inv(d), &mut rng)?;
                let comp = match cfg.compression {
                    Compression::Mean => None,
                    Compression::Conv => {
                        let mut kern = vec![0.0; 3 * d];
                        kern[d..2 * d].fill(1.0);
                        let id = s.add(n("paw.conv"), Tensor::new(vec![3, d], kern)?)?;
                        if random {
                            perturb(&mut s, id, cfg.init_std, &mut rng)?;
                        }
                        Some(id)
                    }
                    Compression::Linear => Some(s.add_normal(n("paw.lin"), &[d, d], inv(d), &mut rng)?),
                    Compression::None => Some(s.add_normal(n("paw.none"), &[k * d, d], inv(k.max(1) * d), &mut rng)?),
                };
                let out = s.add_normal(n("paw.out"), &[d, d], fusion_std, &mut rng)?;
                Some(PawIds { u, heads, comp, out })
            } else {
                None
            };
            let ch = if cfg.has_ch(l) {
                let bios = s.add_normal(n("ch.bios"), &[d, 5], inv(d), &mut rng)?;
                let bios_b = s.add_normal(n("ch.bios_b"), &[5], fusion_std, &mut rng)?;
                let out = s.add_normal(n("ch.out"), &[d, d], fusion_std, &mut rng)?;
                let align = s.add(n("ch.align"), Tensor::eye(d))?;
                if random {
                    perturb(&mut s, align, inv(d), &mut rng)?;
                }
                Some(ChIds { bios, bios_b, out, align })
            } else {
                None
            };
            let gate = GateIds {
                res: s.add_normal(n("gate.res"), &[2 * d, cfg.d_r], inv(2 * d), &mut rng)?,
                w1: s.add_normal(n("gate.w1"), &[cfg.d_r + d, cfg.gate_hidden], inv(cfg.d_r + d), &mut rng)?,
                b1: s.add_normal(n("gate.b1"), &[cfg.gate_hidden], fusion_std, &mut rng)?,
                w2: s.add_normal(n("gate.w2"), &[cfg.gate_hidden, 1], if random { inv(cfg.gate_hidden) } else { 0.0 }, &mut rng)?,
                b2: s.add_normal(n("gate.b2"), &[1], fusion_std, &mut rng)?,
            };
            layers.push(LayerIds {
                ln1_g,
                ln1_b,
                wq,
                wk,
                wv,
                wo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
                paw,
                ch,
                gate,
            });
        }
        let (lnf_g, lnf_b) = if random {
            let g = s.add_const("ln_f.g", &[d], 1.0)?;
            perturb(&mut s, g, 0.1, &mut rng)?;
            (g, s.add_normal("ln_f.b", &[d], 0.1, &mut rng)?)
        } else {
            (s.add_const("ln_f.g", &[d], 1.0)?, s.add_const("ln_f.b", &[d], 0.0)?)
        };
        Ok(Self {
            cfg,
            store: s,
            ids: ModelIds {
                tok,
                pos,
                layers,
                lnf_g,
                lnf_b,
            },
        })
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    /// Replaces every parameter value by name; names and shapes must match
    /// the architecture exactly.
    pub fn load_params<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<()> {
        let mut seen = 0;
        for (name, value) in params {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| FbsError::Checkpoint(format!("unexpected parameter {name:?}")))?;
            self.store
                .set_value(id, value)
                .map_err(|e| FbsError::Checkpoint(format!("{name}: {e}")))?;
            seen += 1;
        }
        if seen != self.store.len() {
            return Err(FbsError::Checkpoint(format!(
                "checkpoint holds {seen} parameters, model needs {}",
                self.store.len()
            )));
        }
        Ok(())
    }

    /// Bitwise parameter equality.
    pub fn same_params(&self, other: &Model) -> bool {
        let a = self.store.sorted();
        let b = other.store.sorted();
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.name == y.name
                    && x.value.shape() == y.value.shape()
                    && x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }
}

fn perturb(s: &mut ParamStore, id: ParamId, std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let t = s.value(id).clone();
    let data: Vec<f64> = t
        .data()
        .iter()
        .map(|v| v + std * crate::numerics::params::standard_normal(rng))
        .collect();
    s.set_value(id, Tensor::new(t.shape().to_vec(), data)?)
}
