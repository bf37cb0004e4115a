//! Temperature-scaled multi-head cross-attention, the three fusion stages
//! and the final classifier.
//!
//! Scales are handled in ascending order `s₁ < s₂ < s₃`. With all three
//! present, `T1 = CA(Z_{s₁} ← Z_{s₂})`, `T2 = CA(Z_{s₃} ← T1)`, `T = [T1; T2]`
//! and `H = LN(T + MHA(T) + FFN(T))`. A disabled cross-attention stage passes
//! its query tokens through unchanged; a disabled transformer leaves `H = T`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{fan_in_uniform, linear_flops, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Which fusion stages are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionModules {
    /// Low-scale fusion: smallest-scale queries attend to the next scale.
    pub lsf: bool,
    /// High-scale fusion: largest-scale queries attend to the LSF output.
    pub hsf: bool,
    /// Self-attention integration over the concatenated tokens.
    pub transformer: bool,
}

impl Default for FusionModules {
    fn default() -> Self {
        FusionModules {
            lsf: true,
            hsf: true,
            transformer: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Shared latent width `D`.
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Number of stacked integration blocks.
    pub depth: usize,
    /// Weight of the squared attention-map penalty; 0 disables it.
    pub attn_reg: f64,
    pub modules: FusionModules,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            dim: 32,
            heads: 4,
            ffn_hidden: 64,
            depth: 1,
            attn_reg: 1e-3,
            modules: FusionModules::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "fusion width {} is not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if self.ffn_hidden == 0 || self.depth == 0 {
            return Err(Error::Config("fusion FFN width and depth must be positive".into()));
        }
        if !(self.attn_reg.is_finite() && self.attn_reg >= 0.0) {
            return Err(Error::Config(format!("attention regularisation weight {}", self.attn_reg)));
        }
        Ok(())
    }
}

/// Multi-head attention block with one learnable temperature per head,
/// stored as `log τ_h` so that `τ_h = exp(log τ_h) > 0`.
#[derive(Clone, Debug)]
pub struct Mha {
    pub heads: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    log_tau: ParamId,
}

impl Mha {
    pub fn new<T: Real>(
        prefix: &str,
        dim: usize,
        heads: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut w = |name: &str, rng: &mut _| store.add(format!("{prefix}{name}"), fan_in_uniform([dim, dim], dim, rng));
        let wq = w("wq", rng)?;
        let wk = w("wk", rng)?;
        let wv = w("wv", rng)?;
        let wo = w("wo", rng)?;
        let log_tau = store.add(format!("{prefix}log_tau"), Tensor::zeros([heads]))?;
        Ok(Mha {
            heads,
            wq,
            wk,
            wv,
            wo,
            log_tau,
        })
    }

    pub fn params(&self) -> [ParamId; 5] {
        [self.wq, self.wk, self.wv, self.wo, self.log_tau]
    }

    pub fn log_tau(&self) -> ParamId {
        self.log_tau
    }

    /// Returns the output `[B, Lq, D]` and the attention `[B, h, Lq, Lkv]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, q_in: Var, kv_in: Var) -> Result<(Var, Var)> {
        mha(
            tape,
            q_in,
            kv_in,
            [p[self.wq], p[self.wk], p[self.wv], p[self.wo]],
            p[self.log_tau],
            self.heads,
        )
    }
}

/// `W_O · concat_h(softmax(Q_h K_hᵀ / (τ_h √d_h)) V_h)` with `Q = q_in W_Q`,
/// `K = kv_in W_K`, `V = kv_in W_V`.
pub fn mha<T: Real>(
    tape: &mut Tape<T>,
    q_in: Var,
    kv_in: Var,
    [wq, wk, wv, wo]: [Var; 4],
    log_tau: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let q = tape.linear(q_in, wq, None)?;
    let k = tape.linear(kv_in, wk, None)?;
    let v = tape.linear(kv_in, wv, None)?;
    let attn = tape.attn_scores(q, k, log_tau, heads)?;
    let mixed = tape.attn_apply(attn, v)?;
    let out = tape.linear(mixed, wo, None)?;
    Ok((out, attn))
}

#[derive(Clone, Debug)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Ffn {
    fn new<T: Real>(prefix: &str, dim: usize, hidden: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        Ok(Ffn {
            w1: store.add(format!("{prefix}w1"), fan_in_uniform([dim, hidden], dim, rng))?,
            b1: store.add(format!("{prefix}b1"), Tensor::zeros([hidden]))?,
            w2: store.add(format!("{prefix}w2"), fan_in_uniform([hidden, dim], hidden, rng))?,
            b2: store.add(format!("{prefix}b2"), Tensor::zeros([dim]))?,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.linear(x, p[self.w1], Some(p[self.b1]))?;
        let h = tape.gelu(h)?;
        tape.linear(h, p[self.w2], Some(p[self.b2]))
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn: Mha,
    ffn: Ffn,
}

impl Block {
    /// `LN(T + MHA(T) + FFN(T))`, one normalisation after the summed residual.
    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, t: Var) -> Result<(Var, Var)> {
        let (a, map) = self.attn.forward(tape, p, t, t)?;
        let f = self.ffn.forward(tape, p, t)?;
        let sum = tape.add_all(&[t, a, f])?;
        Ok((tape.layer_norm(sum)?, map))
    }
}

/// `softmax(W_c GELU(W_h LN(mean_tokens(H))))`.
#[derive(Clone, Debug)]
pub struct Classifier {
    wh: ParamId,
    bh: ParamId,
    wc: ParamId,
    bc: ParamId,
}

impl Classifier {
    pub fn new<T: Real>(prefix: &str, dim: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        Ok(Classifier {
            wh: store.add(format!("{prefix}wh"), fan_in_uniform([dim, dim], dim, rng))?,
            bh: store.add(format!("{prefix}bh"), Tensor::zeros([dim]))?,
            wc: store.add(format!("{prefix}wc"), fan_in_uniform([dim, NUM_CLASSES], dim, rng))?,
            bc: store.add(format!("{prefix}bc"), Tensor::zeros([NUM_CLASSES]))?,
        })
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.wh, self.bh, self.wc, self.bc]
    }

    /// Logits `[B, 2]` from `H [B, L, D]`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, h: Var) -> Result<Var> {
        let pooled = tape.mean_axis(h, 1)?;
        let normed = tape.layer_norm(pooled)?;
        let hidden = tape.linear(normed, p[self.wh], Some(p[self.bh]))?;
        let hidden = tape.gelu(hidden)?;
        tape.linear(hidden, p[self.wc], Some(p[self.bc]))
    }
}

/// Everything one fusion pass produces.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub t1: Var,
    pub t2: Option<Var>,
    pub h: Var,
    /// Attention maps of every active block, in evaluation order.
    pub maps: Vec<Var>,
    pub logits: Var,
}

pub const FUSION_PREFIX: &str = "fuse.";
pub const CLASSIFIER_PREFIX: &str = "cls.";

#[derive(Clone, Debug)]
pub struct Fusion {
    cfg: FusionConfig,
    lsf: Option<Mha>,
    hsf: Option<Mha>,
    blocks: Vec<Block>,
    classifier: Classifier,
}

impl Fusion {
    /// Parameters are created only for stages that can run with `num_scales`
    /// input scales: LSF needs two scales, HSF three.
    pub fn new<T: Real>(
        cfg: FusionConfig,
        num_scales: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_scales == 0 {
            return Err(Error::Config("fusion needs at least one scale".into()));
        }
        let (d, h) = (cfg.dim, cfg.heads);
        let lsf = if cfg.modules.lsf && num_scales >= 2 {
            Some(Mha::new(&format!("{FUSION_PREFIX}lsf."), d, h, store, rng)?)
        } else {
            None
        };
        let hsf = if cfg.modules.hsf && num_scales >= 3 {
            Some(Mha::new(&format!("{FUSION_PREFIX}hsf."), d, h, store, rng)?)
        } else {
            None
        };
        let mut blocks = Vec::new();
        if cfg.modules.transformer {
            for i in 0..cfg.depth {
                let prefix = format!("{FUSION_PREFIX}tr{i}.");
                blocks.push(Block {
                    attn: Mha::new(&format!("{prefix}attn."), d, h, store, rng)?,
                    ffn: Ffn::new(&format!("{prefix}ffn."), d, cfg.ffn_hidden, store, rng)?,
                });
            }
        }
        let classifier = Classifier::new(CLASSIFIER_PREFIX, d, store, rng)?;
        Ok(Fusion {
            cfg,
            lsf,
            hsf,
            blocks,
            classifier,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    /// Ids of every temperature parameter.
    pub fn log_taus(&self) -> Vec<ParamId> {
        self.lsf
            .iter()
            .chain(&self.hsf)
            .chain(self.blocks.iter().map(|b| &b.attn))
            .map(Mha::log_tau)
            .collect()
    }

    /// Run the stages on projected token maps `[B, L_s, D]` given in ascending
    /// scale order.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, tokens: &[Var]) -> Result<FusionState> {
        let mut maps = Vec::new();
        let (t1, t2) = match *tokens {
            [z] => (z, None),
            [za, zb] => {
                let t1 = self.cross(tape, p, &self.lsf, za, zb, &mut maps)?;
                (t1, Some(zb))
            }
            [za, zb, zc] => {
                let t1 = self.cross(tape, p, &self.lsf, za, zb, &mut maps)?;
                let t2 = self.cross(tape, p, &self.hsf, zc, t1, &mut maps)?;
                (t1, Some(t2))
            }
            _ => {
                return Err(Error::Config(format!(
                    "fusion takes one to three scales, got {}",
                    tokens.len()
                )))
            }
        };
        let mut h = match t2 {
            Some(t2) => tape.concat(t1, t2, 1)?,
            None => t1,
        };
        for block in &self.blocks {
            let (next, map) = block.forward(tape, p, h)?;
            maps.push(map);
            h = next;
        }
        let logits = self.classifier.logits(tape, p, h)?;
        Ok(FusionState {
            t1,
            t2,
            h,
            maps,
            logits,
        })
    }

    fn cross<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        block: &Option<Mha>,
        queries: Var,
        context: Var,
        maps: &mut Vec<Var>,
    ) -> Result<Var> {
        match block {
            Some(m) => {
                let (out, map) = m.forward(tape, p, queries, context)?;
                maps.push(map);
                Ok(out)
            }
            None => Ok(queries),
        }
    }
}

/// Sum of squared entries over all attention maps.
pub fn attn_reg<T: Real>(tape: &mut Tape<T>, maps: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(maps.len());
    for &m in maps {
        terms.push(tape.sum_sq(m)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    tape.add_all(&terms)
}

/// Multiply-add count of one attention block: the four `D×D` maps plus the
/// score and mixing products.
fn mha_flops(d: usize, lq: usize, lkv: usize) -> u64 {
    (2 * d * d * (2 * lq + 2 * lkv) + 4 * lq * lkv * d) as u64
}

/// Multiply-add count of one fusion pass and classifier over `batch`
/// samples, given the token count of each scale in ascending scale order.
/// Bias adds of the affine layers are included; softmax, normalisation and
/// activations are not.
pub fn fusion_flops(cfg: &FusionConfig, tokens: &[usize], batch: usize) -> Result<u64> {
    let d = cfg.dim;
    let mut total = 0u64;
    let len = match *tokens {
        [la] => la,
        [la, lb] => {
            if cfg.modules.lsf {
                total += mha_flops(d, la, lb);
            }
            la + lb
        }
        [la, lb, lc] => {
            if cfg.modules.lsf {
                total += mha_flops(d, la, lb);
            }
            if cfg.modules.hsf {
                total += mha_flops(d, lc, la);
            }
            la + lc
        }
        _ => {
            return Err(Error::Config(format!(
                "fusion takes one to three scales, got {}",
                tokens.len()
            )))
        }
    };
    if cfg.modules.transformer {
        let ffn = linear_flops(d, cfg.ffn_hidden, len) + linear_flops(cfg.ffn_hidden, d, len);
        total += cfg.depth as u64 * (mha_flops(d, len, len) + ffn);
    }
    total += linear_flops(d, d, 1) + linear_flops(d, NUM_CLASSES, 1);
    Ok(total * batch as u64)
}
