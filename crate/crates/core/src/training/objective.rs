//! Per-example objectives with their parameter gradients. A trainer step
//! averages these over the batch.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::loss::{cross_entropy, scale_losses, squared_error, zeros_like, LossBreakdown, Targets};
use super::rollout::{
    csfl_targets, run_passes, sample_prediction, sequential_inputs, RolloutTrace,
};
use super::{CsflTarget, Example, SfScales};
use crate::error::{bail, Result};
use crate::generator::{ClassLabel, Generator, MaskedScale1};
use crate::grid::Grid;
use crate::pyramid::{upsample, Codebook};
use crate::rng::Rng;
use crate::sampling::SamplerConfig;
use crate::scalar::Scalar;

/// Loss terms of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemLoss {
    /// The optimized quantity.
    pub objective: f64,
    pub loss_tf: f64,
    pub loss_csf: f64,
    pub per_scale_tf: Vec<f64>,
    pub nfe: usize,
}

impl ItemLoss {
    fn from_tf(l: &LossBreakdown, nfe: usize) -> Self {
        Self {
            objective: l.total,
            loss_tf: l.total,
            loss_csf: 0.0,
            per_scale_tf: l.per_scale.clone(),
            nfe,
        }
    }
}

fn backprop<S: Scalar>(
    generator: &Generator<S>,
    cache: &crate::generator::ForwardCache<S>,
    d: &[Grid<S>],
    grads: Option<&mut [S]>,
) -> Result<()> {
    match grads {
        Some(g) => generator.backward(cache, d, g),
        None => Ok(()),
    }
}

/// Teacher forcing: one pass on ground-truth shifted inputs.
pub fn tf_objective<S: Scalar>(
    generator: &Generator<S>,
    example: &Example<S>,
    label: ClassLabel,
    grads: Option<&mut [S]>,
) -> Result<ItemLoss> {
    let n = generator.schedule().len();
    let (preds, cache) = generator.forward_cached(label, &example.inputs, None, n)?;
    let mut d = zeros_like(&preds);
    let l = scale_losses(&preds, example.targets(), 1, None, S::one(), Some(&mut d))?;
    backprop(generator, &cache, &d, grads)?;
    Ok(ItemLoss::from_tf(&l, 1))
}

/// Options of the SAR objective `L_TF + γ·L_CSF`.
#[derive(Clone, Debug)]
pub struct SarOptions<'a> {
    pub gamma: f64,
    pub target: CsflTarget,
    pub sf_scales: SfScales,
    /// `false` also differentiates through the teacher target (continuous mode only).
    pub detach_teacher: bool,
    pub sampler: &'a SamplerConfig,
}

/// `L_TF(pass 1) + γ·L_CSF(pass 2)` for one example. `pick` chooses the single
/// scale under [`SfScales::SingleRandomK`].
pub fn sar_objective<S: Scalar>(
    generator: &Generator<S>,
    example: &Example<S>,
    label: ClassLabel,
    options: &SarOptions<'_>,
    codebook: Option<&Codebook<S>>,
    sample_rng: &mut Rng,
    pick_rng: &mut Rng,
    grads: Option<&mut [S]>,
) -> Result<(ItemLoss, RolloutTrace<S>)> {
    let passes = run_passes(
        generator,
        example,
        label,
        options.sampler,
        codebook,
        sample_rng,
        true,
    )?;
    let mut trace = passes.trace;
    let (cache1, cache2) = passes.caches.expect("caches requested");
    let n = generator.schedule().len();

    let mut d1 = zeros_like(&trace.tf_preds);
    trace.tf_loss = scale_losses(
        &trace.tf_preds,
        example.targets(),
        1,
        None,
        S::one(),
        Some(&mut d1),
    )?;

    let include: Vec<bool> = match options.sf_scales {
        SfScales::All => vec![true; n - 1],
        SfScales::SingleRandomK => {
            let k = pick_rng.random_range(0..n - 1);
            (0..n - 1).map(|i| i == k).collect()
        }
    };
    let gamma = S::of(options.gamma);
    let mut d2 = zeros_like(&trace.sf_preds);
    let targets = csfl_targets(&trace, example, options.target);
    trace.csf_loss = scale_losses(
        &trace.sf_preds,
        targets,
        2,
        Some(&include),
        gamma,
        Some(&mut d2),
    )?;

    let symmetric = !options.detach_teacher
        && options.target == CsflTarget::Teacher
        && trace.sampled_tokens.is_none();
    if symmetric && options.gamma != 0.0 {
        for k in 0..n - 1 {
            if include[k] {
                squared_error(
                    &trace.tf_preds[k + 1],
                    &trace.sf_preds[k],
                    gamma,
                    Some(&mut d1[k + 1]),
                )?;
            }
        }
    }

    if let Some(g) = grads {
        generator.backward(&cache1, &d1, g)?;
        if options.gamma != 0.0 {
            let mut d2_full = vec![Grid::zeros(
                trace.tf_preds[0].side(),
                trace.tf_preds[0].channels(),
            )];
            d2_full.extend(d2);
            generator.backward(&cache2, &d2_full, g)?;
        }
    }

    let loss = ItemLoss {
        objective: trace.tf_loss.total + options.gamma * trace.csf_loss.total,
        loss_tf: trace.tf_loss.total,
        loss_csf: trace.csf_loss.total,
        per_scale_tf: trace.tf_loss.per_scale.clone(),
        nfe: trace.nfe,
    };
    Ok((loss, trace))
}

/// Student forcing with ground truth up to scale `k` (`k = 0`: none) and
/// sequential self-conditioning afterwards; the loss compares the final pass
/// with the ground truth at every scale. NFE = `N − max(k, 1) + 1`.
pub fn naive_sf_objective<S: Scalar>(
    generator: &Generator<S>,
    example: &Example<S>,
    label: ClassLabel,
    k: usize,
    sampler: &SamplerConfig,
    codebook: Option<&Codebook<S>>,
    rng: &mut Rng,
    grads: Option<&mut [S]>,
) -> Result<(ItemLoss, Vec<Grid<S>>)> {
    let n = generator.schedule().len();
    if k > n {
        bail!(Usage, "hybrid boundary {k} outside [1, {n}]");
    }
    let (inputs, nfe) = sequential_inputs(generator, example, label, k, sampler, codebook, rng)?;
    let (preds, cache) = generator.forward_cached(label, &inputs, None, n)?;
    let mut d = zeros_like(&preds);
    let l = scale_losses(&preds, example.targets(), 1, None, S::one(), Some(&mut d))?;
    backprop(generator, &cache, &d, grads)?;
    Ok((ItemLoss::from_tf(&l, nfe + 1), inputs))
}

/// One TF pass, then one pass in which even-numbered scales (2, 4, ...) are
/// conditioned on the sampled TF prediction one scale below and odd-numbered
/// scales on ground truth. Loss on the second pass. NFE = 2.
pub fn interleave_objective<S: Scalar>(
    generator: &Generator<S>,
    example: &Example<S>,
    label: ClassLabel,
    sampler: &SamplerConfig,
    codebook: Option<&Codebook<S>>,
    rng: &mut Rng,
    grads: Option<&mut [S]>,
) -> Result<(ItemLoss, Vec<Grid<S>>)> {
    let schedule = generator.schedule();
    let n = schedule.len();
    let codebook = super::rollout::check_codebook(generator, codebook)?;
    let tf = generator.forward(label, &example.inputs, n)?;
    let mut nfe = 1;
    let uncond = if sampler.cfg_scale.is_some() {
        nfe += 1;
        Some(generator.forward(ClassLabel::Null, &example.inputs, n)?)
    } else {
        None
    };
    let mut inputs = Vec::with_capacity(n - 1);
    for scale in 2..=n {
        if scale % 2 == 0 {
            let i = scale - 2;
            let (_, latent) = sample_prediction(
                &tf[i],
                uncond.as_ref().map(|u| &u[i]),
                sampler,
                codebook,
                rng,
            )?;
            inputs.push(upsample(&latent, schedule.side(scale - 1))?);
        } else {
            inputs.push(example.inputs[scale - 2].clone());
        }
    }
    let (preds, cache) = generator.forward_cached(label, &inputs, None, n)?;
    nfe += 1;
    let mut d = zeros_like(&preds);
    let l = scale_losses(&preds, example.targets(), 1, None, S::one(), Some(&mut d))?;
    backprop(generator, &cache, &d, grads)?;
    Ok((ItemLoss::from_tf(&l, nfe), inputs))
}

/// Positions of the scale-1 map hidden behind the mask embedding: `ceil(ratio·n)` of them, chosen uniformly.
pub fn draw_mask(positions: usize, ratio: f64, rng: &mut Rng) -> Vec<bool> {
    let m = ((ratio.clamp(0.0, 1.0) * positions as f64).ceil() as usize).min(positions);
    let mut order: Vec<usize> = (0..positions).collect();
    order.shuffle(rng);
    let mut masked = vec![false; positions];
    for &p in &order[..m] {
        masked[p] = true;
    }
    masked
}

/// Masked coarse-scale modelling: scale-1 tokens are predicted from the visible
/// ones (loss on masked positions only), later scales are teacher-forced.
pub fn masked_objective<S: Scalar>(
    generator: &Generator<S>,
    example: &Example<S>,
    label: ClassLabel,
    masked: &[bool],
    grads: Option<&mut [S]>,
) -> Result<ItemLoss> {
    let Some(tokens) = &example.tokens else {
        bail!(
            Unsupported,
            "masked coarse-scale training needs discrete tokens"
        );
    };
    if !generator.config().is_discrete() {
        bail!(
            Unsupported,
            "masked coarse-scale training needs a discrete generator"
        );
    }
    let n = generator.schedule().len();
    let scale1 = MaskedScale1 {
        tokens: example.sources.map(0).clone(),
        masked: masked.to_vec(),
    };
    let (preds, cache) = generator.forward_cached(label, &example.inputs, Some(&scale1), n)?;
    let mut d = zeros_like(&preds);
    let first = cross_entropy(
        &preds[0],
        tokens.map(0),
        Some(masked),
        S::one(),
        Some(&mut d[0]),
    )?;
    let rest = scale_losses(
        &preds[1..],
        Targets::Tokens(&tokens.maps()[1..]),
        2,
        None,
        S::one(),
        Some(&mut d[1..]),
    )?;
    backprop(generator, &cache, &d, grads)?;
    let mut per_scale = vec![first.as_f64()];
    per_scale.extend(rest.per_scale);
    let total = first.as_f64() + rest.total;
    Ok(ItemLoss {
        objective: total,
        loss_tf: total,
        loss_csf: 0.0,
        per_scale_tf: per_scale,
        nfe: 1,
    })
}
