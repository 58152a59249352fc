//! Composition of dataset, tokenizer, trainer and evaluation into runs.

use std::time::Instant;

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::dataset::{make_dataset, Dataset};
use crate::error::{bail, Result};
use crate::evaluation::{evaluate, EvalReport, FeatureMap};
use crate::generator::Generator;
use crate::grid::Grid;
use crate::pyramid::{
    build_pyramid, fit_codebook, Codebook, LatentPyramid, PatchEmbed, Pathway, ScaleSchedule,
};
use crate::rng::{stream, Stream};
use crate::sampling::{SamplerConfig, Strategy};
use crate::scalar::Scalar;
use crate::training::{Example, ScheduleKind, StepMetrics, TrainConfig, Trainer};

/// Fixed image ↔ latent machinery: the patch embed, the schedule, the pathway
/// and (in discrete mode) the frozen codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer<S> {
    pub schedule: ScaleSchedule,
    pub pathway: Pathway,
    pub patch: PatchEmbed<S>,
    pub codebook: Option<Codebook<S>>,
}

impl<S: Scalar> Tokenizer<S> {
    /// Seeds the patch embed from the run seed and fits the codebook to every
    /// latent vector of every scale of `dataset`.
    pub fn fit(config: &ExperimentConfig, dataset: &Dataset<S>) -> Result<Self> {
        let patch = PatchEmbed::seeded(
            config.patch_side(),
            config.dataset.channels,
            config.latent_dim,
            config.seed,
        )?;
        let mut tok = Self {
            schedule: config.schedule.clone(),
            pathway: config.pathway,
            patch,
            codebook: None,
        };
        if config.vocab > 0 {
            let pyramids = dataset
                .images
                .par_iter()
                .map(|im| tok.pyramid(im))
                .collect::<Result<Vec<_>>>()?;
            let samples: Vec<S> = pyramids
                .iter()
                .flat_map(|p| p.maps().iter().flat_map(|m| m.as_slice().iter().copied()))
                .collect();
            tok.codebook = Some(fit_codebook(
                &samples,
                config.latent_dim,
                config.vocab,
                config.seed,
            )?);
        }
        Ok(tok)
    }

    pub fn pyramid(&self, image: &Grid<S>) -> Result<LatentPyramid<S>> {
        let latent = self.patch.encode(image)?;
        build_pyramid(
            &latent,
            &self.schedule,
            self.pathway,
            Some(image),
            Some(&self.patch),
        )
    }

    pub fn examples(&self, dataset: &Dataset<S>) -> Result<Vec<Example<S>>> {
        dataset
            .images
            .par_iter()
            .zip(&dataset.labels)
            .map(|(im, &label)| Example::new(label, self.pyramid(im)?, self.codebook.as_ref()))
            .collect()
    }
}

/// Prepared data of one experiment.
#[derive(Clone, Debug)]
pub struct Workspace<S> {
    pub config: ExperimentConfig,
    pub tokenizer: Tokenizer<S>,
    pub train: Vec<Example<S>>,
    pub eval: Vec<Example<S>>,
    pub features: FeatureMap,
}

impl<S: Scalar> Workspace<S> {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = make_dataset::<S>(&config.dataset)?;
        let tokenizer = Tokenizer::fit(config, &data)?;
        Self::with_tokenizer(config, tokenizer, &data)
    }

    /// Rebuilds the data of a checkpointed run around its saved tokenizer.
    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        let config = &ckpt.config;
        let tokenizer = Tokenizer {
            schedule: config.schedule.clone(),
            pathway: config.pathway,
            patch: ckpt.patch.clone(),
            codebook: ckpt.codebook.clone(),
        };
        let data = make_dataset::<S>(&config.dataset)?;
        Self::with_tokenizer(config, tokenizer, &data)
    }

    fn with_tokenizer(
        config: &ExperimentConfig,
        tokenizer: Tokenizer<S>,
        data: &Dataset<S>,
    ) -> Result<Self> {
        let train = tokenizer.examples(data)?;
        let eval = tokenizer.examples(&make_dataset::<S>(&config.eval_dataset())?)?;
        let features = FeatureMap::new(config.dataset.side, config.dataset.channels, config.seed);
        Ok(Self {
            config: config.clone(),
            tokenizer,
            train,
            eval,
            features,
        })
    }

    /// Replaces the evaluation set, keeping the tokenizer.
    pub fn set_eval_dataset(&mut self, spec: &super::dataset::SyntheticDatasetSpec) -> Result<()> {
        self.eval = self.tokenizer.examples(&make_dataset::<S>(spec)?)?;
        Ok(())
    }

    pub fn new_generator(&self) -> Result<Generator<S>> {
        Generator::new(self.config.generator_config())
    }

    pub fn trainer(&self, generator: Generator<S>, train: TrainConfig) -> Result<Trainer<S>> {
        Trainer::new(generator, self.tokenizer.codebook.clone(), train)
    }

    pub fn evaluate(
        &self,
        generator: &Generator<S>,
        sampler: &SamplerConfig,
    ) -> Result<EvalReport> {
        evaluate(
            generator,
            &self.eval,
            sampler,
            self.tokenizer.codebook.as_ref(),
            &self.tokenizer.patch,
            &self.features,
            sampler.seed,
        )
    }

    pub fn checkpoint(&self, trainer: &Trainer<S>) -> Checkpoint<S> {
        Checkpoint {
            config: self.config.clone(),
            state: trainer.generator().state().clone(),
            codebook: self.tokenizer.codebook.clone(),
            patch: self.tokenizer.patch.clone(),
            optimizer: trainer.optimizer().clone(),
            step: trainer.steps_done(),
        }
    }

    /// Trainer restored from a checkpoint (model, moments and step counter).
    pub fn resume(&self, ckpt: &Checkpoint<S>, train: TrainConfig) -> Result<Trainer<S>> {
        let generator = Generator::from_state(self.config.generator_config(), ckpt.state.clone())?;
        Trainer::resume(
            generator,
            self.tokenizer.codebook.clone(),
            train,
            ckpt.optimizer.clone(),
            ckpt.step,
        )
    }
}

/// Distinct example indices for step `step`, drawn from the batch stream.
pub fn batch_indices(len: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = stream(seed, Stream::Batch, &[step]);
    rand::seq::index::sample(&mut rng, len, batch.min(len)).into_vec()
}

/// Runs `steps` steps of the trainer's configured scheme, calling `on_step`
/// with each record and its wall time in seconds.
pub fn train_loop<S: Scalar>(
    trainer: &mut Trainer<S>,
    examples: &[Example<S>],
    steps: usize,
    mut on_step: impl FnMut(&Trainer<S>, &StepMetrics, f64) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    if examples.is_empty() {
        bail!(Usage, "no training examples");
    }
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t0 = Instant::now();
        let idx = batch_indices(
            examples.len(),
            trainer.config().batch,
            trainer.config().seed,
            trainer.steps_done(),
        );
        let batch: Vec<Example<S>> = idx.iter().map(|&i| examples[i].clone()).collect();
        let m = trainer.step(&batch)?;
        on_step(trainer, &m, t0.elapsed().as_secs_f64())?;
        out.push(m);
    }
    Ok(out)
}

/// Guidance scale of the guided rollout variant in [`sampling_ablation`].
pub const ABLATION_CFG: f64 = 2.5;

/// Continuation schemes compared by the student-forcing ablation: teacher
/// forcing, full, alternate, interleave and hybrid(N-1), each on top of `base`.
pub fn sf_ablation(base: &TrainConfig, scales: usize) -> Vec<(String, TrainConfig)> {
    [
        ScheduleKind::Tf,
        ScheduleKind::SfFull,
        ScheduleKind::SfAlternate,
        ScheduleKind::SfInterleave,
        ScheduleKind::SfHybrid(scales.saturating_sub(1).max(1)),
    ]
    .into_iter()
    .map(|kind| {
        (
            kind.to_string(),
            TrainConfig {
                schedule_kind: kind,
                ..base.clone()
            },
        )
    })
    .collect()
}

/// Refinement runs differing only in how the student-forcing rollout samples:
/// argmax, stochastic, stochastic with guidance.
pub fn sampling_ablation(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let s = base.sampler_for_ssr.clone();
    [
        (
            "argmax",
            SamplerConfig {
                strategy: Strategy::Argmax,
                cfg_scale: None,
                ..s.clone()
            },
        ),
        (
            "stochastic",
            SamplerConfig {
                strategy: Strategy::Stochastic,
                cfg_scale: None,
                ..s.clone()
            },
        ),
        (
            "stochastic+cfg",
            SamplerConfig {
                strategy: Strategy::Stochastic,
                cfg_scale: Some(ABLATION_CFG),
                ..s
            },
        ),
    ]
    .into_iter()
    .map(|(name, sampler)| {
        (
            name.to_string(),
            TrainConfig {
                schedule_kind: ScheduleKind::Sar,
                sampler_for_ssr: sampler,
                ..base.clone()
            },
        )
    })
    .collect()
}
