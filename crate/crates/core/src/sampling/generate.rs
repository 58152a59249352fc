use std::f64::consts::FRAC_PI_2;

use super::{
    cfg_combine_grid, sample_map, sample_position, sampling_distribution, SamplerConfig, Strategy,
};
use crate::error::{bail, Result};
use crate::generator::{ClassLabel, Generator, MaskedScale1};
use crate::grid::Grid;
use crate::pyramid::{
    dequantize_map, upsample, Codebook, LatentPyramid, PatchEmbed, TokenMap, TokenPyramid,
};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// How the first scale is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Scale1Decoding {
    /// One prediction from the start token, like every other scale.
    #[default]
    Direct,
    /// Iterative masked decoding: start fully masked and commit the most
    /// confident positions over `steps` rounds (cosine unmasking schedule).
    /// Only meaningful for generators trained with the masked coarse-scale scheme.
    Masked { steps: usize },
}

/// One generated sample.
#[derive(Clone, Debug)]
pub struct Generation<S> {
    pub image: Grid<S>,
    /// `None` in continuous mode.
    pub tokens: Option<TokenPyramid>,
    pub latents: LatentPyramid<S>,
    /// Generator forwards spent on this sample.
    pub nfe: usize,
}

/// Scale-by-scale generation conditioned on the model's own samples.
pub fn generate<S: Scalar>(
    generator: &Generator<S>,
    label: usize,
    sampler: &SamplerConfig,
    codebook: Option<&Codebook<S>>,
    patch: &PatchEmbed<S>,
    rng: &mut Rng,
) -> Result<Generation<S>> {
    generate_with(
        generator,
        label,
        sampler,
        codebook,
        patch,
        Scale1Decoding::Direct,
        rng,
    )
}

struct Runner<'a, S> {
    generator: &'a Generator<S>,
    label: usize,
    sampler: &'a SamplerConfig,
    nfe: usize,
}

impl<S: Scalar> Runner<'_, S> {
    /// Guided prediction for the last scale of the prefix.
    fn predict(
        &mut self,
        inputs: &[Grid<S>],
        masked: Option<&MaskedScale1<S>>,
        scales: usize,
    ) -> Result<Grid<S>> {
        let cond =
            self.generator
                .forward_masked(ClassLabel::Class(self.label), inputs, masked, scales)?;
        self.nfe += 1;
        let cond = cond.into_iter().last().expect("non-empty prefix");
        match self.sampler.cfg_scale {
            None => Ok(cond),
            Some(s) => {
                let uncond =
                    self.generator
                        .forward_masked(ClassLabel::Null, inputs, masked, scales)?;
                self.nfe += 1;
                Ok(cfg_combine_grid(
                    &cond,
                    uncond.last().expect("non-empty prefix"),
                    s,
                ))
            }
        }
    }
}

pub fn generate_with<S: Scalar>(
    generator: &Generator<S>,
    label: usize,
    sampler: &SamplerConfig,
    codebook: Option<&Codebook<S>>,
    patch: &PatchEmbed<S>,
    scale1: Scale1Decoding,
    rng: &mut Rng,
) -> Result<Generation<S>> {
    sampler.validate()?;
    let config = generator.config();
    let schedule = generator.schedule().clone();
    let n = schedule.len();
    let codebook = match (config.is_discrete(), codebook) {
        (true, Some(cb)) => {
            if cb.size() != config.vocab || cb.dim() != config.latent_dim {
                bail!(
                    Usage,
                    "codebook {}x{} does not match generator vocab/dim",
                    cb.size(),
                    cb.dim()
                );
            }
            Some(cb)
        }
        (true, None) => bail!(Usage, "discrete generation needs a codebook"),
        (false, _) => None,
    };
    if let Scale1Decoding::Masked { steps } = scale1 {
        if codebook.is_none() {
            bail!(
                Unsupported,
                "masked scale-1 decoding needs a discrete generator"
            );
        }
        if steps == 0 {
            bail!(Config, "masked decoding needs at least one step");
        }
    }

    let mut run = Runner {
        generator,
        label,
        sampler,
        nfe: 0,
    };
    let mut inputs: Vec<Grid<S>> = Vec::with_capacity(n.saturating_sub(1));
    let mut latents = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(n);
    let mut masked_state = None;

    for i in 1..=n {
        let (latent, toks) = if i == 1 && matches!(scale1, Scale1Decoding::Masked { .. }) {
            let Scale1Decoding::Masked { steps } = scale1 else {
                unreachable!()
            };
            let cb = codebook.expect("checked above");
            let (t, m) = decode_masked(&mut run, cb, schedule.side(0), steps, rng)?;
            let latent = m.tokens.clone();
            masked_state = Some(m);
            (latent, Some(t))
        } else {
            let pred = run.predict(&inputs, masked_state.as_ref(), i)?;
            match codebook {
                Some(cb) => {
                    let t = sample_map(&pred, sampler, rng);
                    (dequantize_map(&t, cb)?, Some(t))
                }
                None => (pred, None),
            }
        };
        if i < n {
            inputs.push(upsample(&latent, schedule.side(i))?);
        }
        latents.push(latent);
        if let Some(t) = toks {
            tokens.push(t);
        }
    }

    let image = patch.decode(latents.last().expect("n >= 1"))?;
    let tokens = match codebook {
        Some(cb) => Some(TokenPyramid::new(schedule.clone(), cb.size(), tokens)?),
        None => None,
    };
    Ok(Generation {
        image,
        tokens,
        latents: LatentPyramid::new(schedule, latents)?,
        nfe: run.nfe,
    })
}

fn decode_masked<S: Scalar>(
    run: &mut Runner<'_, S>,
    codebook: &Codebook<S>,
    side: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<(TokenMap, MaskedScale1<S>)> {
    let n = side * side;
    let mut tokens = TokenMap::filled(side, 0);
    let mut state = MaskedScale1 {
        tokens: Grid::zeros(side, codebook.dim()),
        masked: vec![true; n],
    };
    for step in 0..steps {
        let logits = run.predict(&[], Some(&state), 1)?;
        let mut proposals = Vec::new();
        for p in 0..n {
            if !state.masked[p] {
                continue;
            }
            let t = sample_position(logits.vector(p), run.sampler, rng);
            let conf = match run.sampler.strategy {
                Strategy::Argmax => softmax_at(logits.vector(p), t),
                Strategy::Stochastic => sampling_distribution(logits.vector(p), run.sampler)[t],
            };
            proposals.push((p, t, conf));
        }
        let remain = if step + 1 == steps {
            0
        } else {
            ((n as f64) * (FRAC_PI_2 * (step + 1) as f64 / steps as f64).cos()).floor() as usize
        };
        let commit = proposals
            .len()
            .saturating_sub(remain)
            .max(1)
            .min(proposals.len());
        proposals.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        for &(p, t, _) in &proposals[..commit] {
            tokens.indices_mut()[p] = t;
            state.masked[p] = false;
            state.tokens.vector_mut(p).copy_from_slice(codebook.row(t));
        }
        if state.masked.iter().all(|m| !m) {
            break;
        }
    }
    Ok((tokens, state))
}

fn softmax_at<S: Scalar>(logits: &[S], t: usize) -> f64 {
    let max = logits
        .iter()
        .map(|l| l.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l.as_f64() - max).exp()).sum();
    (logits[t].as_f64() - max).exp() / z
}
