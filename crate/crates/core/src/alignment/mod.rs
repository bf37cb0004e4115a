//! Projection of per-scale features into a shared latent space and the
//! cross-scale alignment losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::fan_in_uniform;
use crate::error::{Error, Result};
use crate::numerics::{covariance, Bound, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Affine map `Z = F·W + b` from one scale's features into the latent space.
#[derive(Clone, Debug)]
pub struct Projection {
    pub scale: usize,
    w: ParamId,
    b: ParamId,
}

impl Projection {
    pub fn prefix(scale: usize) -> String {
        format!("proj{scale}.")
    }

    pub fn new<T: Real>(
        scale: usize,
        features: usize,
        dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let prefix = Self::prefix(scale);
        Ok(Projection {
            scale,
            w: store.add(format!("{prefix}w"), fan_in_uniform([features, dim], features, rng))?,
            b: store.add(format!("{prefix}b"), Tensor::zeros([dim]))?,
        })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    /// Works on pooled `[B, C]` features and on `[B, L, C]` token maps alike.
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, f: Var) -> Result<Var> {
        project(tape, f, p[self.w], p[self.b])
    }
}

pub fn project<T: Real>(tape: &mut Tape<T>, f: Var, w: Var, b: Var) -> Result<Var> {
    tape.linear(f, w, Some(b))
}

/// InfoNCE weight: one value for every scale pair, or one per pair in the
/// order (0,1), (0,2), …, (1,2), … of the scales passed to [`align_loss`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairWeights {
    Uniform(f64),
    PerPair(Vec<f64>),
}

impl PairWeights {
    fn get(&self, pair: usize) -> Result<f64> {
        match self {
            PairWeights::Uniform(w) => Ok(*w),
            PairWeights::PerPair(ws) => ws
                .get(pair)
                .copied()
                .ok_or_else(|| Error::Config(format!("no InfoNCE weight for scale pair {pair}"))),
        }
    }

    fn all_zero(&self) -> bool {
        match self {
            PairWeights::Uniform(w) => *w == 0.0,
            PairWeights::PerPair(ws) => ws.iter().all(|&w| w == 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignWeights {
    pub lambda_nce: PairWeights,
    pub lambda_cov: f64,
    pub lambda_orth: f64,
    pub lambda_nuc: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Weight of the whole alignment loss in the stage-2 objective.
    pub beta: f64,
}

impl Default for AlignWeights {
    fn default() -> Self {
        AlignWeights {
            lambda_nce: PairWeights::Uniform(1.0),
            lambda_cov: 0.1,
            lambda_orth: 0.01,
            lambda_nuc: 0.001,
            tau: 0.1,
            beta: 0.5,
        }
    }
}

impl AlignWeights {
    pub fn validate(&self) -> Result<()> {
        let nce_ok = match &self.lambda_nce {
            PairWeights::Uniform(w) => *w >= 0.0,
            PairWeights::PerPair(ws) => ws.iter().all(|&w| w >= 0.0),
        };
        let ok = nce_ok
            && [self.lambda_cov, self.lambda_orth, self.lambda_nuc, self.beta]
                .iter()
                .all(|&w| w.is_finite() && w >= 0.0)
            && self.tau.is_finite()
            && self.tau > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid alignment weights {self:?}")))
        }
    }

    pub fn uses_nce(&self) -> bool {
        !self.lambda_nce.all_zero()
    }

    pub fn zero() -> Self {
        AlignWeights {
            lambda_nce: PairWeights::Uniform(0.0),
            lambda_cov: 0.0,
            lambda_orth: 0.0,
            lambda_nuc: 0.0,
            ..Self::default()
        }
    }
}

fn scalar_zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Symmetrised InfoNCE between two `[B, D]` batches with cosine similarity.
///
/// Row `b` of `zj` is the positive for anchor row `b` of `zi`; the other rows
/// are negatives, and the positive is part of the denominator.
pub fn info_nce<T: Real>(tape: &mut Tape<T>, zi: Var, zj: Var, tau: f64) -> Result<Var> {
    let (bi, di) = tape.value(zi).dims2()?;
    let (bj, dj) = tape.value(zj).dims2()?;
    if bi != bj || di != dj {
        return Err(Error::shape(format!("info_nce: [{bi}, {di}] vs [{bj}, {dj}]")));
    }
    if bi < 2 {
        return Err(Error::Config("InfoNCE needs a batch of at least 2".into()));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("InfoNCE temperature must be positive, got {tau}")));
    }
    let ni = tape.normalize_rows(zi)?;
    let nj = tape.normalize_rows(zj)?;
    let inv_tau = T::from_f64_lossy(1.0 / tau);
    let labels: Vec<usize> = (0..bi).collect();
    let sij = tape.matmul(ni, nj, false, true)?;
    let sij = tape.scale(sij, inv_tau)?;
    let sji = tape.matmul(nj, ni, false, true)?;
    let sji = tape.scale(sji, inv_tau)?;
    let lij = tape.cross_entropy(sij, &labels)?;
    let lji = tape.cross_entropy(sji, &labels)?;
    let both = tape.add(lij, lji)?;
    tape.scale(both, T::from_f64_lossy(0.5))
}

/// `Σ_{i<j} ‖Cov(Z_i) − Cov(Z_j)‖_F²`.
pub fn cov_align<T: Real>(tape: &mut Tape<T>, zs: &[Var]) -> Result<Var> {
    let covs = zs.iter().map(|&z| covariance(tape, z)).collect::<Result<Vec<_>>>()?;
    let mut total = scalar_zero(tape);
    for i in 0..covs.len() {
        for j in i + 1..covs.len() {
            let d = tape.sub(covs[i], covs[j])?;
            let sq = tape.sum_sq(d)?;
            total = tape.add(total, sq)?;
        }
    }
    Ok(total)
}

/// `‖ZᵀZ − I‖_F²`.
pub fn orth_penalty<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let (_, d) = tape.value(z).dims2()?;
    let gram = tape.matmul(z, z, true, false)?;
    let eye = tape.constant(Tensor::eye(d));
    let diff = tape.sub(gram, eye)?;
    tape.sum_sq(diff)
}

/// Nuclear norm `‖Z‖_*`.
pub fn nuclear_penalty<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    tape.nuclear_norm(z)
}

/// Unweighted components and the weighted total of the alignment loss.
#[derive(Clone, Copy, Debug)]
pub struct AlignTerms {
    /// `Σ_{i<j} λ_nce^{(i,j)} · InfoNCE^{(i,j)}` (already weighted per pair).
    pub nce: Var,
    pub cov: Var,
    /// `Σ_s ‖Z_sᵀZ_s − I‖_F²`.
    pub orth: Var,
    /// `Σ_s ‖Z_s‖_*`.
    pub nuc: Var,
    /// `nce + λ_cov·cov + λ_orth·orth + λ_nuc·nuc`.
    pub total: Var,
}

/// Alignment loss over the per-scale latent batches `zs`. Components whose
/// weight is zero are not evaluated and contribute an exact zero.
pub fn align_loss<T: Real>(tape: &mut Tape<T>, zs: &[Var], w: &AlignWeights) -> Result<AlignTerms> {
    w.validate()?;
    let mut nce = scalar_zero(tape);
    if w.uses_nce() {
        let mut pair = 0;
        for i in 0..zs.len() {
            for j in i + 1..zs.len() {
                let lambda = w.lambda_nce.get(pair)?;
                pair += 1;
                if lambda == 0.0 {
                    continue;
                }
                let l = info_nce(tape, zs[i], zs[j], w.tau)?;
                let l = tape.scale(l, T::from_f64_lossy(lambda))?;
                nce = tape.add(nce, l)?;
            }
        }
    }
    let cov = if w.lambda_cov != 0.0 {
        cov_align(tape, zs)?
    } else {
        scalar_zero(tape)
    };
    let per_scale = |tape: &mut Tape<T>, on: bool, f: fn(&mut Tape<T>, Var) -> Result<Var>| -> Result<Var> {
        let mut acc = scalar_zero(tape);
        if on {
            for &z in zs {
                let t = f(tape, z)?;
                acc = tape.add(acc, t)?;
            }
        }
        Ok(acc)
    };
    let orth = per_scale(tape, w.lambda_orth != 0.0, orth_penalty)?;
    let nuc = per_scale(tape, w.lambda_nuc != 0.0, nuclear_penalty)?;
    let wc = tape.scale(cov, T::from_f64_lossy(w.lambda_cov))?;
    let wo = tape.scale(orth, T::from_f64_lossy(w.lambda_orth))?;
    let wn = tape.scale(nuc, T::from_f64_lossy(w.lambda_nuc))?;
    let total = tape.add_all(&[nce, wc, wo, wn])?;
    Ok(AlignTerms {
        nce,
        cov,
        orth,
        nuc,
        total,
    })
}
