//! Per-scale losses and their gradients with respect to the predictions.

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::pyramid::TokenMap;
use crate::scalar::Scalar;

/// Supervision for a run of consecutive scales.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a, S> {
    /// Discrete mode: predictions are logits, loss is cross-entropy.
    Tokens(&'a [TokenMap]),
    /// Continuous mode: predictions are latents, loss is squared error.
    Latents(&'a [Grid<S>]),
}

impl<'a, S> Targets<'a, S> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Tokens(t) => t.len(),
            Targets::Latents(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Targets from index `from` on.
    pub fn skip(self, from: usize) -> Self {
        match self {
            Targets::Tokens(t) => Targets::Tokens(&t[from..]),
            Targets::Latents(l) => Targets::Latents(&l[from..]),
        }
    }
}

/// A summed loss with its per-scale terms. `per_scale[k]` belongs to scale `first_scale + k` (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub first_scale: usize,
    pub per_scale: Vec<f64>,
}

impl LossBreakdown {
    pub fn zero(first_scale: usize, scales: usize) -> Self {
        Self {
            total: 0.0,
            first_scale,
            per_scale: vec![0.0; scales],
        }
    }
}

/// Mean cross-entropy over the selected positions of one map (all when `select` is `None`).
/// Adds `weight · ∂loss/∂logits` into `grad` when given. No selected positions → 0.
pub(crate) fn cross_entropy<S: Scalar>(
    logits: &Grid<S>,
    tokens: &TokenMap,
    select: Option<&[bool]>,
    weight: S,
    grad: Option<&mut Grid<S>>,
) -> Result<S> {
    let v = logits.channels();
    if tokens.side() != logits.side() {
        bail!(
            Usage,
            "token map side {} does not match logits side {}",
            tokens.side(),
            logits.side()
        );
    }
    if let Some(&t) = tokens.indices().iter().find(|&&t| t >= v) {
        bail!(
            Usage,
            "target token {t} outside {v} logits (mode mismatch?)"
        );
    }
    let chosen = |p: usize| select.map_or(true, |s| s[p]);
    let count = (0..logits.positions()).filter(|&p| chosen(p)).count();
    if count == 0 {
        return Ok(S::zero());
    }
    let inv = S::one() / S::of(count as f64);
    let mut grad = grad;
    let mut total = S::zero();
    let mut probs = vec![S::zero(); v];
    for p in 0..logits.positions() {
        if !chosen(p) {
            continue;
        }
        let l = logits.vector(p);
        let t = tokens.indices()[p];
        let max = l.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for (q, &x) in probs.iter_mut().zip(l) {
            *q = (x - max).exp();
            z += *q;
        }
        total += z.ln() + max - l[t];
        if let Some(g) = grad.as_deref_mut() {
            let gv = g.vector_mut(p);
            let k = weight * inv;
            for c in 0..v {
                let target = if c == t { S::one() } else { S::zero() };
                gv[c] += k * (probs[c] / z - target);
            }
        }
    }
    Ok(total * inv)
}

/// Mean squared error per element; adds `weight · ∂loss/∂pred` into `grad`.
pub(crate) fn squared_error<S: Scalar>(
    pred: &Grid<S>,
    target: &Grid<S>,
    weight: S,
    grad: Option<&mut Grid<S>>,
) -> Result<S> {
    if pred.side() != target.side() || pred.channels() != target.channels() {
        bail!(
            Usage,
            "prediction {}x{} does not match target {}x{} (mode mismatch?)",
            pred.side(),
            pred.channels(),
            target.side(),
            target.channels()
        );
    }
    let n = S::of(pred.as_slice().len() as f64);
    let mut total = S::zero();
    for (&p, &t) in pred.as_slice().iter().zip(target.as_slice()) {
        total += (p - t) * (p - t);
    }
    if let Some(g) = grad {
        let k = S::of(2.0) * weight / n;
        for ((gv, &p), &t) in g
            .as_mut_slice()
            .iter_mut()
            .zip(pred.as_slice())
            .zip(target.as_slice())
        {
            *gv += k * (p - t);
        }
    }
    Ok(total / n)
}

/// Sums per-scale losses of `preds` against `targets`, scale `k` weighted by
/// `weight` when `include[k]`. With `grads`, accumulates weighted gradients.
pub(crate) fn scale_losses<S: Scalar>(
    preds: &[Grid<S>],
    targets: Targets<'_, S>,
    first_scale: usize,
    include: Option<&[bool]>,
    weight: S,
    mut grads: Option<&mut [Grid<S>]>,
) -> Result<LossBreakdown> {
    if preds.len() != targets.len() {
        bail!(
            Usage,
            "{} predictions but {} targets",
            preds.len(),
            targets.len()
        );
    }
    let mut out = LossBreakdown::zero(first_scale, preds.len());
    let mut total = S::zero();
    for k in 0..preds.len() {
        if !include.map_or(true, |inc| inc[k]) {
            continue;
        }
        let g = grads.as_deref_mut().map(|g| &mut g[k]);
        let l = match targets {
            Targets::Tokens(t) => cross_entropy(&preds[k], &t[k], None, weight, g)?,
            Targets::Latents(f) => squared_error(&preds[k], &f[k], weight, g)?,
        };
        out.per_scale[k] = l.as_f64();
        total += l;
    }
    out.total = total.as_f64();
    Ok(out)
}

/// Teacher-forcing loss `Σ_i ℓ(f̂_i, f_i)`: mean cross-entropy per token
/// (discrete) or mean squared error per element (continuous), equal weight per scale.
pub fn loss_tf<S: Scalar>(preds: &[Grid<S>], targets: Targets<'_, S>) -> Result<LossBreakdown> {
    scale_losses(preds, targets, 1, None, S::one(), None)
}

/// Mean cross-entropy over the masked positions of a scale-1 logit map.
pub fn masked_cross_entropy<S: Scalar>(
    logits: &Grid<S>,
    tokens: &TokenMap,
    masked: &[bool],
) -> Result<f64> {
    if masked.len() != logits.positions() {
        bail!(
            Usage,
            "mask has {} entries for {} positions",
            masked.len(),
            logits.positions()
        );
    }
    Ok(cross_entropy(logits, tokens, Some(masked), S::one(), None)?.as_f64())
}

pub(crate) fn zeros_like<S: Scalar>(grids: &[Grid<S>]) -> Vec<Grid<S>> {
    grids
        .iter()
        .map(|g| Grid::zeros(g.side(), g.channels()))
        .collect()
}
