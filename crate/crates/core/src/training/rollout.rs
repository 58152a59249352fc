//! Stagger-scale rollout and the student-forced passes of the naive schedules.

use super::loss::{scale_losses, LossBreakdown, Targets};
use super::{CsflTarget, Example};
use crate::error::{bail, Result};
use crate::generator::{ClassLabel, ForwardCache, Generator};
use crate::grid::Grid;
use crate::pyramid::{dequantize_map, upsample, Codebook, TokenMap};
use crate::rng::Rng;
use crate::sampling::{cfg_combine_grid, sample_map, SamplerConfig};
use crate::scalar::Scalar;

/// The two aligned trajectories of one stagger-scale rollout.
#[derive(Clone, Debug)]
pub struct RolloutTrace<S> {
    pub label: ClassLabel,
    /// Teacher-forced predictions `f̂^(T)` for scales `1..=N`.
    pub tf_preds: Vec<Grid<S>>,
    /// Sampled tokens per scale (discrete mode only).
    pub sampled_tokens: Option<Vec<TokenMap>>,
    /// Sampled maps `f̃^(T)` for scales `1..=N` as latents (dequantized in discrete mode).
    pub sampled: Vec<Grid<S>>,
    /// `sf_inputs[k]` = `upsample(f̃^(T)_{k+1})`, the input of scale `k + 2`.
    pub sf_inputs: Vec<Grid<S>>,
    /// Student-forced predictions `f̂^(S)` for scales `2..=N`.
    pub sf_preds: Vec<Grid<S>>,
    pub tf_loss: LossBreakdown,
    pub csf_loss: LossBreakdown,
    pub nfe: usize,
}

/// Draws `f̃` from one prediction; `uncond` enables guidance.
pub(crate) fn sample_prediction<S: Scalar>(
    pred: &Grid<S>,
    uncond: Option<&Grid<S>>,
    sampler: &SamplerConfig,
    codebook: Option<&Codebook<S>>,
    rng: &mut Rng,
) -> Result<(Option<TokenMap>, Grid<S>)> {
    let guided;
    let pred = match (uncond, sampler.cfg_scale) {
        (Some(u), Some(s)) => {
            guided = cfg_combine_grid(pred, u, s);
            &guided
        }
        _ => pred,
    };
    match codebook {
        Some(cb) => {
            let t = sample_map(pred, sampler, rng);
            let latent = dequantize_map(&t, cb)?;
            Ok((Some(t), latent))
        }
        None => Ok((None, pred.clone())),
    }
}

pub(crate) struct Passes<S> {
    pub trace: RolloutTrace<S>,
    pub caches: Option<(ForwardCache<S>, ForwardCache<S>)>,
}

pub(crate) fn check_codebook<'a, S: Scalar>(
    generator: &Generator<S>,
    codebook: Option<&'a Codebook<S>>,
) -> Result<Option<&'a Codebook<S>>> {
    match (generator.config().is_discrete(), codebook) {
        (true, Some(cb))
            if cb.size() == generator.config().vocab
                && cb.dim() == generator.config().latent_dim =>
        {
            Ok(Some(cb))
        }
        (true, Some(_)) => bail!(Usage, "codebook does not match generator vocab/dim"),
        (true, None) => bail!(Usage, "discrete mode needs a codebook"),
        (false, _) => Ok(None),
    }
}

/// Pass 1 on ground-truth shifted inputs, sample every scale, shift the samples,
/// pass 2 on the shifted samples. The sampled bridge carries no gradient.
pub(crate) fn run_passes<S: Scalar>(
    generator: &Generator<S>,
    example: &Example<S>,
    label: ClassLabel,
    sampler: &SamplerConfig,
    codebook: Option<&Codebook<S>>,
    rng: &mut Rng,
    keep: bool,
) -> Result<Passes<S>> {
    let schedule = generator.schedule().clone();
    schedule.require_rollout()?;
    let codebook = check_codebook(generator, codebook)?;
    let n = schedule.len();
    let mut nfe = 0;
    let (tf_preds, cache1) = if keep {
        let (p, c) = generator.forward_cached(label, &example.inputs, None, n)?;
        (p, Some(c))
    } else {
        (generator.forward(label, &example.inputs, n)?, None)
    };
    nfe += 1;
    let uncond = if sampler.cfg_scale.is_some() {
        nfe += 1;
        Some(generator.forward(ClassLabel::Null, &example.inputs, n)?)
    } else {
        None
    };

    let mut sampled = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let (t, latent) = sample_prediction(
            &tf_preds[i],
            uncond.as_ref().map(|u| &u[i]),
            sampler,
            codebook,
            rng,
        )?;
        tokens.extend(t);
        sampled.push(latent);
    }
    let sf_inputs = (1..n)
        .map(|i| upsample(&sampled[i - 1], schedule.side(i)))
        .collect::<Result<Vec<_>>>()?;

    let (mut sf_all, cache2) = if keep {
        let (p, c) = generator.forward_cached(label, &sf_inputs, None, n)?;
        (p, Some(c))
    } else {
        (generator.forward(label, &sf_inputs, n)?, None)
    };
    nfe += 1;
    let sf_preds = sf_all.split_off(1);

    let trace = RolloutTrace {
        label,
        tf_loss: LossBreakdown::zero(1, n),
        csf_loss: LossBreakdown::zero(2, n - 1),
        tf_preds,
        sampled_tokens: codebook.map(|_| tokens),
        sampled,
        sf_inputs,
        sf_preds,
        nfe,
    };
    Ok(Passes {
        trace,
        caches: cache1.zip(cache2),
    })
}

/// CSF supervision for scales `2..=N`.
pub(crate) fn csfl_targets<'a, S: Scalar>(
    trace: &'a RolloutTrace<S>,
    example: &'a Example<S>,
    target: CsflTarget,
) -> Targets<'a, S> {
    match target {
        CsflTarget::GroundTruth => example.targets().skip(1),
        CsflTarget::Teacher => match &trace.sampled_tokens {
            Some(t) => Targets::Tokens(&t[1..]),
            None => Targets::Latents(&trace.tf_preds[1..]),
        },
    }
}

/// Runs a stagger-scale rollout: two generator forwards (three with guidance)
/// and the TF and CSF losses of the resulting trace.
pub fn ssr_rollout<S: Scalar>(
    generator: &Generator<S>,
    example: &Example<S>,
    label: ClassLabel,
    sampler: &SamplerConfig,
    codebook: Option<&Codebook<S>>,
    target: CsflTarget,
    rng: &mut Rng,
) -> Result<RolloutTrace<S>> {
    let mut trace = run_passes(generator, example, label, sampler, codebook, rng, false)?.trace;
    trace.tf_loss = scale_losses(&trace.tf_preds, example.targets(), 1, None, S::one(), None)?;
    trace.csf_loss = loss_csfl(&trace, example, target)?;
    Ok(trace)
}

/// Contrastive student-forcing loss `Σ_{i≥2} ℓ(f̂^(S)_i, target_i)` with the
/// target held constant: the sampled teacher tokens (discrete) or `f̂^(T)_i`
/// (continuous) in teacher mode, the ground truth otherwise.
pub fn loss_csfl<S: Scalar>(
    trace: &RolloutTrace<S>,
    example: &Example<S>,
    target: CsflTarget,
) -> Result<LossBreakdown> {
    scale_losses(
        &trace.sf_preds,
        csfl_targets(trace, example, target),
        2,
        None,
        S::one(),
        None,
    )
}

/// Shifted inputs for a student-forced pass in which scales `2..=k` see ground
/// truth and every later scale sees the upsampled sample of the model's own
/// prediction one scale below, produced by sequential prefix forwards.
/// `k = 0` is full student forcing. Returns the inputs and the forwards spent.
pub(crate) fn sequential_inputs<S: Scalar>(
    generator: &Generator<S>,
    example: &Example<S>,
    label: ClassLabel,
    k: usize,
    sampler: &SamplerConfig,
    codebook: Option<&Codebook<S>>,
    rng: &mut Rng,
) -> Result<(Vec<Grid<S>>, usize)> {
    let schedule = generator.schedule();
    let n = schedule.len();
    let codebook = check_codebook(generator, codebook)?;
    let first = k.max(1);
    let mut inputs: Vec<Grid<S>> = example.inputs[..first - 1].to_vec();
    let mut nfe = 0;
    for s in first..n {
        let pred = generator.forward(label, &inputs, s)?.pop().expect("prefix");
        nfe += 1;
        let uncond = if sampler.cfg_scale.is_some() {
            nfe += 1;
            generator.forward(ClassLabel::Null, &inputs, s)?.pop()
        } else {
            None
        };
        let (_, latent) = sample_prediction(&pred, uncond.as_ref(), sampler, codebook, rng)?;
        inputs.push(upsample(&latent, schedule.side(s))?);
    }
    Ok((inputs, nfe))
}
