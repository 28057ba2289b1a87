//! Composite segmentation loss: summed per-region soft Jaccard distance
//! plus voxel-mean focal loss, averaged uniformly over output heads.

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const JACCARD_EPS: f64 = 1e-5;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub jaccard_eps: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            jaccard_eps: JACCARD_EPS,
            focal_gamma: FOCAL_GAMMA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Mean over heads of the summed Jaccard term.
    pub jaccard: f64,
    /// Mean over heads of the focal term.
    pub focal: f64,
    /// `(jaccard, focal)` per head, main head first.
    pub per_head: Vec<(f64, f64)>,
    pub total: f64,
}

impl LossTerms {
    fn from_heads(per_head: Vec<(f64, f64)>) -> Self {
        let n = per_head.len() as f64;
        let jaccard = per_head.iter().map(|h| h.0).sum::<f64>() / n;
        let focal = per_head.iter().map(|h| h.1).sum::<f64>() / n;
        let total = per_head.iter().map(|h| h.0 + h.1).sum::<f64>() / n;
        LossTerms {
            jaccard,
            focal,
            per_head,
            total,
        }
    }
}

fn per_channel_sums<F: Real>(pred: &[F], target: &[F], channels: usize) -> Vec<(F, F)> {
    let per = pred.len() / channels;
    (0..channels)
        .map(|c| {
            let mut inter = F::zero();
            let mut union = F::zero();
            for (&p, &g) in pred[c * per..(c + 1) * per].iter().zip(&target[c * per..(c + 1) * per]) {
                inter += p * g;
                union += p + g - p * g;
            }
            (inter, union)
        })
        .collect()
}

/// Per-channel `1 - (I + eps) / (U + eps)`.
pub(crate) fn jaccard_channels<F: Real>(pred: &[F], target: &[F], channels: usize, eps: F) -> Vec<F> {
    per_channel_sums(pred, target, channels)
        .into_iter()
        .map(|(i, u)| F::one() - (i + eps) / (u + eps))
        .collect()
}

pub(crate) fn jaccard_value<F: Real>(pred: &[F], target: &[F], channels: usize, eps: F) -> F {
    jaccard_channels(pred, target, channels, eps).into_iter().sum()
}

pub(crate) fn jaccard_grad<F: Real>(pred: &[F], target: &[F], channels: usize, eps: F) -> Vec<F> {
    let per = pred.len() / channels;
    let sums = per_channel_sums(pred, target, channels);
    let mut out = vec![F::zero(); pred.len()];
    for (c, (i, u)) in sums.into_iter().enumerate() {
        let (i, u) = (i + eps, u + eps);
        let u2 = u * u;
        for (o, &g) in out[c * per..(c + 1) * per].iter_mut().zip(&target[c * per..(c + 1) * per]) {
            // d/dp of -(I/U): -(g U - I (1 - g)) / U^2
            *o = -(g * u - i * (F::one() - g)) / u2;
        }
    }
    out
}

fn clamp_bounds<F: Real>() -> (F, F) {
    let lo = F::from_f64_lossy(PROB_CLAMP);
    (lo, F::one() - lo)
}

pub(crate) fn focal_value<F: Real>(pred: &[F], target: &[F], gamma: F) -> F {
    let (lo, hi) = clamp_bounds::<F>();
    let n = F::from_usize(pred.len().max(1)).unwrap();
    pred.iter()
        .zip(target)
        .map(|(&p, &g)| {
            let p = p.max(lo).min(hi);
            let pt = if g > F::from_f64_lossy(0.5) { p } else { F::one() - p };
            -(F::one() - pt).powf(gamma) * pt.ln()
        })
        .sum::<F>()
        / n
}

pub(crate) fn focal_grad<F: Real>(pred: &[F], target: &[F], gamma: F) -> Vec<F> {
    let (lo, hi) = clamp_bounds::<F>();
    let n = F::from_usize(pred.len().max(1)).unwrap();
    pred.iter()
        .zip(target)
        .map(|(&p, &g)| {
            if p < lo || p > hi {
                return F::zero();
            }
            let positive = g > F::from_f64_lossy(0.5);
            let pt = if positive { p } else { F::one() - p };
            let q = F::one() - pt;
            let shrink = if gamma == F::zero() { F::zero() } else { gamma * q.powf(gamma - F::one()) * pt.ln() };
            // d/dpt of -(1-pt)^g ln pt
            let d_pt = shrink - q.powf(gamma) / pt;
            let d_p = if positive { d_pt } else { -d_pt };
            d_p / n
        })
        .collect()
}

fn validate<F: Real>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.shape().is_empty() {
        return Err(Error::shape("loss inputs need a channel axis"));
    }
    if target.data().iter().any(|&g| g != F::zero() && g != F::one()) {
        return Err(Error::validation("target must be binary"));
    }
    // NaN passes through so a diverged model surfaces as a non-finite loss.
    if pred.data().iter().any(|&p| p < F::zero() || p > F::one()) {
        return Err(Error::validation("predictions must lie in [0, 1]"));
    }
    Ok(())
}

/// Summed soft Jaccard distance over the channels of `(C, D, H, W)` inputs.
pub fn jaccard_loss<F: Real>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<F> {
    validate(pred, target)?;
    Ok(jaccard_value(
        pred.data(),
        target.data(),
        pred.shape()[0],
        F::from_f64_lossy(JACCARD_EPS),
    ))
}

/// Per-channel Jaccard distances.
pub fn jaccard_per_channel<F: Real>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<Vec<F>> {
    validate(pred, target)?;
    Ok(jaccard_channels(
        pred.data(),
        target.data(),
        pred.shape()[0],
        F::from_f64_lossy(JACCARD_EPS),
    ))
}

pub fn focal_loss<F: Real>(pred: &Tensor<F>, target: &Tensor<F>, gamma: F) -> Result<F> {
    validate(pred, target)?;
    Ok(focal_value(pred.data(), target.data(), gamma))
}

/// Composite loss over the main head and every deep-supervision head.
pub fn total_loss<F: Real>(heads: &[&Tensor<F>], target: &Tensor<F>, cfg: &LossConfig) -> Result<LossTerms> {
    if heads.is_empty() {
        return Err(Error::validation("no output heads"));
    }
    let eps = F::from_f64_lossy(cfg.jaccard_eps);
    let gamma = F::from_f64_lossy(cfg.focal_gamma);
    let mut per_head = Vec::with_capacity(heads.len());
    for h in heads {
        validate(h, target)?;
        let c = h.shape()[0];
        let j = jaccard_value(h.data(), target.data(), c, eps);
        let f = focal_value(h.data(), target.data(), gamma);
        per_head.push((j.to_f64().unwrap(), f.to_f64().unwrap()));
    }
    Ok(LossTerms::from_heads(per_head))
}

/// Records the composite loss on a graph; returns the scalar node to
/// differentiate and the per-head breakdown.
pub fn total_loss_graph<F: Real>(
    g: &mut Graph<'_, F>,
    heads: &[Var],
    target: &Tensor<F>,
    cfg: &LossConfig,
) -> Result<(Var, LossTerms)> {
    if heads.is_empty() {
        return Err(Error::validation("no output heads"));
    }
    let eps = F::from_f64_lossy(cfg.jaccard_eps);
    let gamma = F::from_f64_lossy(cfg.focal_gamma);
    let mut terms = Vec::with_capacity(heads.len() * 2);
    let mut per_head = Vec::with_capacity(heads.len());
    for &h in heads {
        let j = g.jaccard(h, target, eps)?;
        let f = g.focal(h, target, gamma)?;
        if !g.is_shape_only() {
            per_head.push((g.scalar(j).to_f64().unwrap(), g.scalar(f).to_f64().unwrap()));
        }
        terms.push(j);
        terms.push(f);
    }
    let sum = g.sum(&terms)?;
    let total = g.scale(sum, F::one() / F::from_usize(heads.len()).unwrap());
    let breakdown = if per_head.is_empty() {
        LossTerms {
            jaccard: 0.0,
            focal: 0.0,
            per_head,
            total: 0.0,
        }
    } else {
        LossTerms::from_heads(per_head)
    };
    Ok((total, breakdown))
}
