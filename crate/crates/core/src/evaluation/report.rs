use rayon::prelude::*;

use super::{fd_proxy, pr_proxy, FeatureMap, FeatureStats, DEFAULT_PR_K};
use crate::error::{bail, Result};
use crate::generator::Generator;
use crate::grid::Grid;
use crate::pyramid::{dequantize_map, upsample, Codebook, PatchEmbed};
use crate::rng::{stream, Stream};
use crate::sampling::{argmax, generate, Generation, SamplerConfig};
use crate::scalar::Scalar;
use crate::training::{Example, RolloutTrace, StepMetrics};

/// Generates one sample per label; sample `j` draws from its own stream.
pub fn generate_set<S: Scalar>(
    generator: &Generator<S>,
    labels: &[usize],
    sampler: &SamplerConfig,
    codebook: Option<&Codebook<S>>,
    patch: &PatchEmbed<S>,
    seed: u64,
) -> Result<Vec<Generation<S>>> {
    labels
        .par_iter()
        .enumerate()
        .map(|(j, &label)| {
            let mut rng = stream(seed, Stream::Generate, &[j as u64]);
            generate(generator, label, sampler, codebook, patch, &mut rng)
        })
        .collect()
}

fn lift<S: Scalar>(latent: &Grid<S>, top: usize, patch: &PatchEmbed<S>) -> Result<Grid<S>> {
    patch.decode(&upsample(latent, top)?)
}

/// Reference images for scale `scale` (1-based): the ground-truth map of that
/// scale (dequantized in discrete mode) upsampled to the top scale and decoded.
/// At the top scale these are the tokenizer reconstructions.
pub fn reference_images<S: Scalar>(
    examples: &[Example<S>],
    scale: usize,
    patch: &PatchEmbed<S>,
) -> Result<Vec<Grid<S>>> {
    examples
        .iter()
        .map(|ex| {
            let n = ex.sources.schedule().len();
            if scale == 0 || scale > n {
                bail!(Usage, "scale {scale} outside [1, {n}]");
            }
            lift(
                ex.sources.map(scale - 1),
                ex.sources.schedule().top(),
                patch,
            )
        })
        .collect()
}

fn stats_of<S: Scalar>(images: &[Grid<S>], features: &FeatureMap) -> Result<FeatureStats> {
    FeatureStats::from_features(&features.features_batch(images)?, features.id())
}

/// FD proxy between generated and ground-truth maps of one scale, both lifted to
/// the top resolution and decoded before feature extraction.
pub fn per_scale_fd_of<S: Scalar>(
    generations: &[Generation<S>],
    examples: &[Example<S>],
    scale: usize,
    patch: &PatchEmbed<S>,
    features: &FeatureMap,
) -> Result<f64> {
    let real = reference_images(examples, scale, patch)?;
    let fake = generations
        .iter()
        .map(|g| lift(g.latents.map(scale - 1), g.latents.schedule().top(), patch))
        .collect::<Result<Vec<_>>>()?;
    fd_proxy(&stats_of(&real, features)?, &stats_of(&fake, features)?)
}

/// Generates one sample per example label and returns the scale-`scale` FD proxy.
#[allow(clippy::too_many_arguments)]
pub fn per_scale_fd<S: Scalar>(
    generator: &Generator<S>,
    examples: &[Example<S>],
    scale: usize,
    sampler: &SamplerConfig,
    codebook: Option<&Codebook<S>>,
    patch: &PatchEmbed<S>,
    features: &FeatureMap,
    seed: u64,
) -> Result<f64> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let gens = generate_set(generator, &labels, sampler, codebook, patch, seed)?;
    per_scale_fd_of(&gens, examples, scale, patch, features)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fd: f64,
    pub precision: f64,
    pub recall: f64,
    /// `per_scale_fd[i]` is the FD proxy of scale `i + 1`; the last equals `fd`.
    pub per_scale_fd: Vec<f64>,
    pub nfe_per_image: usize,
    pub samples: usize,
}

/// Full evaluation against `examples`: one generated sample per example label.
pub fn evaluate<S: Scalar>(
    generator: &Generator<S>,
    examples: &[Example<S>],
    sampler: &SamplerConfig,
    codebook: Option<&Codebook<S>>,
    patch: &PatchEmbed<S>,
    features: &FeatureMap,
    seed: u64,
) -> Result<EvalReport> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let gens = generate_set(generator, &labels, sampler, codebook, patch, seed)?;
    let n = generator.schedule().len();
    let per_scale = (1..=n)
        .map(|i| per_scale_fd_of(&gens, examples, i, patch, features))
        .collect::<Result<Vec<_>>>()?;
    let real = features.features_batch(&reference_images(examples, n, patch)?)?;
    let fake =
        features.features_batch(&gens.iter().map(|g| g.image.clone()).collect::<Vec<_>>())?;
    let (precision, recall) = pr_proxy(&real, &fake, DEFAULT_PR_K)?;
    Ok(EvalReport {
        fd: per_scale[n - 1],
        precision,
        recall,
        per_scale_fd: per_scale,
        nfe_per_image: gens.first().map_or(0, |g| g.nfe),
        samples: gens.len(),
    })
}

/// Per-scale student-forcing deviation maps, one `h_i × h_i × 1` map per scale `2..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffMap {
    pub maps: Vec<Grid<f64>>,
}

impl DiffMap {
    /// Scale index (1-based) of `maps[0]`.
    pub const FIRST_SCALE: usize = 2;

    pub fn max(&self) -> f64 {
        self.maps
            .iter()
            .flat_map(|m| m.as_slice())
            .copied()
            .fold(0.0, f64::max)
    }

    pub fn mean_per_scale(&self) -> Vec<f64> {
        self.maps
            .iter()
            .map(|m| m.as_slice().iter().sum::<f64>() / m.positions() as f64)
            .collect()
    }
}

/// `Δ_i = mean_c |f_i − f̃^(S)_i|` for scales `2..=N`, where `f̃^(S)_i` is the
/// argmax token of the student-forced prediction, dequantized (discrete), or the
/// prediction itself (continuous), and `f_i` is the shifted ground-truth source.
pub fn diff_maps<S: Scalar>(
    trace: &RolloutTrace<S>,
    example: &Example<S>,
    codebook: Option<&Codebook<S>>,
) -> Result<DiffMap> {
    let mut maps = Vec::with_capacity(trace.sf_preds.len());
    for (k, pred) in trace.sf_preds.iter().enumerate() {
        let gt = example.sources.map(k + 1);
        let student = match codebook {
            Some(cb) => {
                let idx = (0..pred.positions())
                    .map(|p| argmax(pred.vector(p)))
                    .collect();
                dequantize_map(&crate::pyramid::TokenMap::new(pred.side(), idx)?, cb)?
            }
            None => pred.clone(),
        };
        if student.side() != gt.side() || student.channels() != gt.channels() {
            bail!(
                Usage,
                "trace does not match the example pyramid at scale {}",
                k + 2
            );
        }
        let d = gt.channels();
        let map = Grid::from_fn(gt.side(), 1, |r, c, _| {
            (0..d)
                .map(|ch| (gt.get(r, c, ch).as_f64() - student.get(r, c, ch).as_f64()).abs())
                .sum::<f64>()
                / d as f64
        });
        maps.push(map);
    }
    Ok(DiffMap { maps })
}

/// Forwards per step, aggregated per scheme in order of first appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct NfeRow {
    pub scheme: String,
    pub steps: usize,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

pub fn nfe_report(records: &[StepMetrics]) -> Vec<NfeRow> {
    let mut rows: Vec<NfeRow> = Vec::new();
    for r in records {
        match rows.iter_mut().find(|row| row.scheme == r.scheme) {
            Some(row) => {
                row.mean = (row.mean * row.steps as f64 + r.nfe as f64) / (row.steps + 1) as f64;
                row.steps += 1;
                row.min = row.min.min(r.nfe);
                row.max = row.max.max(r.nfe);
            }
            None => rows.push(NfeRow {
                scheme: r.scheme.clone(),
                steps: 1,
                min: r.nfe,
                max: r.nfe,
                mean: r.nfe as f64,
            }),
        }
    }
    rows
}
