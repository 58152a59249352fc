//! Training schemes: teacher forcing, the naive student-forcing schedules,
//! self-autoregressive refinement (stagger-scale rollout + contrastive
//! student-forcing loss), masked coarse-scale modelling, and AdamW.

mod loss;
mod objective;
mod optimizer;
mod rollout;

pub use loss::{loss_tf, masked_cross_entropy, LossBreakdown, Targets};
pub use objective::{
    draw_mask, interleave_objective, masked_objective, naive_sf_objective, sar_objective,
    tf_objective, ItemLoss, SarOptions,
};
pub use optimizer::{
    AdamW, AdamWConfig, ADAM_EPS, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_LR, DEFAULT_WEIGHT_DECAY,
};
pub use rollout::{loss_csfl, ssr_rollout, RolloutTrace};

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{bail, Error, Result};
use crate::generator::{ClassLabel, Generator};
use crate::grid::Grid;
use crate::pyramid::{dequantize, quantize, shift_inputs, Codebook, LatentPyramid, TokenPyramid};
use crate::rng::{stream, Stream};
use crate::sampling::SamplerConfig;
use crate::scalar::Scalar;

pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Tf,
    SfFull,
    SfAlternate,
    SfInterleave,
    /// Ground truth up to scale `k`, own predictions afterwards.
    SfHybrid(usize),
    Sar,
    MaskedCoarse,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "tf" => ScheduleKind::Tf,
            "sf_full" => ScheduleKind::SfFull,
            "sf_alternate" => ScheduleKind::SfAlternate,
            "sf_interleave" => ScheduleKind::SfInterleave,
            "sar" => ScheduleKind::Sar,
            "masked_coarse" => ScheduleKind::MaskedCoarse,
            _ => {
                let k = s
                    .strip_prefix("sf_hybrid(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|k| k.trim().parse().ok());
                match k {
                    Some(k) => ScheduleKind::SfHybrid(k),
                    None => bail!(Config, "unknown schedule kind {s:?}"),
                }
            }
        })
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Tf => f.write_str("tf"),
            ScheduleKind::SfFull => f.write_str("sf_full"),
            ScheduleKind::SfAlternate => f.write_str("sf_alternate"),
            ScheduleKind::SfInterleave => f.write_str("sf_interleave"),
            ScheduleKind::SfHybrid(k) => write!(f, "sf_hybrid({k})"),
            ScheduleKind::Sar => f.write_str("sar"),
            ScheduleKind::MaskedCoarse => f.write_str("masked_coarse"),
        }
    }
}

/// Naive student-forcing schedules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NaiveSf {
    Full,
    Alternate,
    Interleave,
    Hybrid(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsflTarget {
    /// Sampled teacher tokens (discrete) or teacher predictions (continuous).
    Teacher,
    GroundTruth,
}

impl CsflTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "teacher" => Ok(CsflTarget::Teacher),
            "ground_truth" => Ok(CsflTarget::GroundTruth),
            _ => bail!(Config, "unknown csfl target {s:?}"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CsflTarget::Teacher => "teacher",
            CsflTarget::GroundTruth => "ground_truth",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfScales {
    /// CSF loss on every scale `2..=N`.
    All,
    /// CSF loss on one uniformly drawn scale per example.
    SingleRandomK,
}

impl SfScales {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(SfScales::All),
            "single_random_k" => Ok(SfScales::SingleRandomK),
            _ => bail!(Config, "unknown sf_scales {s:?}"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SfScales::All => "all",
            SfScales::SingleRandomK => "single_random_k",
        }
    }
}

/// Distribution of the scale-1 mask ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskRatioSchedule {
    Constant(f64),
    /// `cos(π/2 · u)` with `u ~ U[0, 1)`.
    Cosine,
}

impl MaskRatioSchedule {
    pub fn draw(self, rng: &mut crate::rng::Rng) -> f64 {
        match self {
            MaskRatioSchedule::Constant(r) => r,
            MaskRatioSchedule::Cosine => (FRAC_PI_2 * rng.random::<f64>()).cos(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "cosine" {
            return Ok(MaskRatioSchedule::Cosine);
        }
        match s.parse::<f64>() {
            Ok(r) if (0.0..=1.0).contains(&r) => Ok(MaskRatioSchedule::Constant(r)),
            _ => bail!(
                Config,
                "mask ratio must be \"cosine\" or a number in [0, 1], got {s:?}"
            ),
        }
    }
}

impl fmt::Display for MaskRatioSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskRatioSchedule::Constant(r) => write!(f, "{r}"),
            MaskRatioSchedule::Cosine => f.write_str("cosine"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub csfl_target: CsflTarget,
    pub sf_scales: SfScales,
    /// Stop-gradient on the teacher target; `false` is the symmetric ablation.
    pub detach_teacher: bool,
    /// Sampler of the rollout bridge (also used by the naive SF schedules).
    pub sampler_for_ssr: SamplerConfig,
    pub schedule_kind: ScheduleKind,
    pub mask_ratio: MaskRatioSchedule,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            csfl_target: CsflTarget::Teacher,
            sf_scales: SfScales::All,
            detach_teacher: true,
            sampler_for_ssr: SamplerConfig::default(),
            schedule_kind: ScheduleKind::Tf,
            mask_ratio: MaskRatioSchedule::Cosine,
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            steps: 2000,
            batch: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            bail!(Config, "gamma must be >= 0");
        }
        if !(self.lr > 0.0) {
            bail!(Config, "lr must be positive");
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                bail!(Config, "{name} = {b} outside (0, 1)");
            }
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight_decay must be >= 0");
        }
        if self.batch == 0 {
            bail!(Config, "batch must be positive");
        }
        self.sampler_for_ssr.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
        }
    }
}

/// A labeled training example with its ground-truth pyramid.
#[derive(Clone, Debug)]
pub struct Example<S> {
    pub label: usize,
    /// Continuous ground truth `f_i`.
    pub latents: LatentPyramid<S>,
    /// Discrete ground truth `t_i` (discrete mode).
    pub tokens: Option<TokenPyramid>,
    /// The maps teacher forcing shifts: dequantized tokens, or the latents.
    pub sources: LatentPyramid<S>,
    /// `upsample(sources[i−1] → h_i)` for scales `2..=N`.
    pub inputs: Vec<Grid<S>>,
}

impl<S: Scalar> Example<S> {
    /// Quantizes against `codebook` when given (discrete mode).
    pub fn new(
        label: usize,
        latents: LatentPyramid<S>,
        codebook: Option<&Codebook<S>>,
    ) -> Result<Self> {
        let (tokens, sources) = match codebook {
            Some(cb) => {
                let t = quantize(&latents, cb)?;
                let d = dequantize(&t, cb)?;
                (Some(t), d)
            }
            None => (None, latents.clone()),
        };
        let inputs = shift_inputs(sources.maps(), sources.schedule())?;
        Ok(Self {
            label,
            latents,
            tokens,
            sources,
            inputs,
        })
    }

    pub fn targets(&self) -> Targets<'_, S> {
        match &self.tokens {
            Some(t) => Targets::Tokens(t.maps()),
            None => Targets::Latents(self.latents.maps()),
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// Zero-based index of the step just taken.
    pub step: u64,
    pub scheme: String,
    pub loss: f64,
    pub loss_tf: f64,
    pub loss_csf: f64,
    pub per_scale_tf: Vec<f64>,
    /// Generator forwards per example.
    pub nfe: usize,
}

/// Owns a generator and its optimizer; the single writer of the model state.
#[derive(Debug)]
pub struct Trainer<S> {
    generator: Generator<S>,
    optimizer: AdamW<S>,
    codebook: Option<Codebook<S>>,
    config: TrainConfig,
    step: u64,
}

impl<S: Scalar> Clone for Trainer<S> {
    fn clone(&self) -> Self {
        Self {
            generator: self.generator.clone(),
            optimizer: self.optimizer.clone(),
            codebook: self.codebook.clone(),
            config: self.config.clone(),
            step: self.step,
        }
    }
}

impl<S: Scalar> Trainer<S> {
    pub fn new(
        generator: Generator<S>,
        codebook: Option<Codebook<S>>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        rollout::check_codebook(&generator, codebook.as_ref())?;
        let optimizer = AdamW::new(config.adamw(), generator.state().len());
        Ok(Self {
            generator,
            optimizer,
            codebook,
            config,
            step: 0,
        })
    }

    /// Resumes with saved moments and step counter.
    pub fn resume(
        generator: Generator<S>,
        codebook: Option<Codebook<S>>,
        config: TrainConfig,
        optimizer: AdamW<S>,
        step: u64,
    ) -> Result<Self> {
        let mut t = Self::new(generator, codebook, config)?;
        if optimizer.moments().0.len() != t.generator.state().len() {
            bail!(Integrity, "optimizer moments do not match the model");
        }
        t.optimizer = AdamW::from_parts(
            t.config.adamw(),
            optimizer.moments().0.to_vec(),
            optimizer.moments().1.to_vec(),
            optimizer.steps(),
        )?;
        t.step = step;
        Ok(t)
    }

    pub fn generator(&self) -> &Generator<S> {
        &self.generator
    }

    pub fn into_generator(self) -> Generator<S> {
        self.generator
    }

    pub fn optimizer(&self) -> &AdamW<S> {
        &self.optimizer
    }

    pub fn codebook(&self) -> Option<&Codebook<S>> {
        self.codebook.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Switches scheme or hyperparameters, keeping model and optimizer moments.
    pub fn set_config(&mut self, config: TrainConfig) -> Result<()> {
        config.validate()?;
        self.optimizer.config = config.adamw();
        self.config = config;
        Ok(())
    }

    /// Steps taken so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// One step of the configured scheme.
    pub fn step(&mut self, batch: &[Example<S>]) -> Result<StepMetrics> {
        match self.config.schedule_kind {
            ScheduleKind::Tf => self.tf_step(batch),
            ScheduleKind::Sar => self.sar_step(batch),
            ScheduleKind::SfFull => self.naive_sf_step(batch, NaiveSf::Full, self.step),
            ScheduleKind::SfAlternate => self.naive_sf_step(batch, NaiveSf::Alternate, self.step),
            ScheduleKind::SfInterleave => self.naive_sf_step(batch, NaiveSf::Interleave, self.step),
            ScheduleKind::SfHybrid(k) => self.naive_sf_step(batch, NaiveSf::Hybrid(k), self.step),
            ScheduleKind::MaskedCoarse => self.hybrid_mask_step(batch, self.config.mask_ratio),
        }
    }

    fn label(&self, example: &Example<S>, item: usize) -> ClassLabel {
        let p = self.generator.config().label_drop_prob;
        let drop = p > 0.0
            && stream(
                self.config.seed,
                Stream::LabelDrop,
                &[self.step, item as u64],
            )
            .random::<f64>()
                < p;
        ClassLabel::select(example.label, drop)
    }

    fn item_rng(&self, tag: Stream, item: usize) -> crate::rng::Rng {
        stream(self.config.seed, tag, &[self.step, item as u64])
    }

    pub fn tf_step(&mut self, batch: &[Example<S>]) -> Result<StepMetrics> {
        self.run("tf", batch, |t, i, ex, g| {
            tf_objective(&t.generator, ex, t.label(ex, i), Some(g))
        })
    }

    pub fn sar_step(&mut self, batch: &[Example<S>]) -> Result<StepMetrics> {
        self.generator.schedule().require_rollout()?;
        self.run("sar", batch, |t, i, ex, g| {
            let options = SarOptions {
                gamma: t.config.gamma,
                target: t.config.csfl_target,
                sf_scales: t.config.sf_scales,
                detach_teacher: t.config.detach_teacher,
                sampler: &t.config.sampler_for_ssr,
            };
            let mut sample = t.item_rng(Stream::Sample, i);
            let mut pick = t.item_rng(Stream::ScalePick, i);
            let label = t.label(ex, i);
            Ok(sar_objective(
                &t.generator,
                ex,
                label,
                &options,
                t.codebook.as_ref(),
                &mut sample,
                &mut pick,
                Some(g),
            )?
            .0)
        })
    }

    pub fn naive_sf_step(
        &mut self,
        batch: &[Example<S>],
        kind: NaiveSf,
        iteration: u64,
    ) -> Result<StepMetrics> {
        let n = self.generator.schedule().len();
        let (name, k) = match kind {
            NaiveSf::Full => ("sf_full".to_string(), Some(0)),
            NaiveSf::Alternate if iteration % 2 == 0 => {
                let mut m = self.tf_step(batch)?;
                m.scheme = "sf_alternate".into();
                return Ok(m);
            }
            NaiveSf::Alternate => ("sf_alternate".to_string(), Some(0)),
            NaiveSf::Interleave => ("sf_interleave".to_string(), None),
            NaiveSf::Hybrid(k) => {
                if k < 1 || k > n {
                    bail!(Usage, "hybrid boundary {k} outside [1, {n}]");
                }
                (format!("sf_hybrid({k})"), Some(k))
            }
        };
        self.run(&name, batch, |t, i, ex, g| {
            let mut rng = t.item_rng(Stream::Sample, i);
            let label = t.label(ex, i);
            let sampler = &t.config.sampler_for_ssr;
            let cb = t.codebook.as_ref();
            Ok(match k {
                Some(k) => {
                    naive_sf_objective(&t.generator, ex, label, k, sampler, cb, &mut rng, Some(g))?
                        .0
                }
                None => {
                    interleave_objective(&t.generator, ex, label, sampler, cb, &mut rng, Some(g))?.0
                }
            })
        })
    }

    pub fn hybrid_mask_step(
        &mut self,
        batch: &[Example<S>],
        schedule: MaskRatioSchedule,
    ) -> Result<StepMetrics> {
        if !self.generator.config().is_discrete() {
            bail!(Unsupported, "masked coarse-scale training is discrete-only");
        }
        let side = self.generator.schedule().side(0);
        self.run("masked_coarse", batch, |t, i, ex, g| {
            let mut rng = t.item_rng(Stream::Mask, i);
            let ratio = schedule.draw(&mut rng);
            let masked = draw_mask(side * side, ratio, &mut rng);
            masked_objective(&t.generator, ex, t.label(ex, i), &masked, Some(g))
        })
    }

    /// Per-example gradients in parallel, reduced in batch order, averaged, then one AdamW step.
    fn run<F>(&mut self, scheme: &str, batch: &[Example<S>], f: F) -> Result<StepMetrics>
    where
        F: Fn(&Self, usize, &Example<S>, &mut [S]) -> Result<ItemLoss> + Sync,
    {
        if batch.is_empty() {
            bail!(Usage, "empty batch");
        }
        let len = self.generator.state().len();
        let this = &*self;
        let items: Vec<Result<(ItemLoss, Vec<S>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut g = vec![S::zero(); len];
                let l = f(this, i, ex, &mut g)?;
                Ok((l, g))
            })
            .collect();
        let mut grads = vec![S::zero(); len];
        let mut losses = Vec::with_capacity(batch.len());
        for item in items {
            let (l, g) = item?;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += *b;
            }
            losses.push(l);
        }
        let inv = S::one() / S::of(batch.len() as f64);
        for g in grads.iter_mut() {
            *g *= inv;
        }
        let b = batch.len() as f64;
        let mean = |f: &dyn Fn(&ItemLoss) -> f64| losses.iter().map(f).sum::<f64>() / b;
        let scales = losses[0].per_scale_tf.len();
        let metrics = StepMetrics {
            step: self.step,
            scheme: scheme.to_string(),
            loss: mean(&|l| l.objective),
            loss_tf: mean(&|l| l.loss_tf),
            loss_csf: mean(&|l| l.loss_csf),
            per_scale_tf: (0..scales).map(|k| mean(&|l| l.per_scale_tf[k])).collect(),
            nfe: losses.iter().map(|l| l.nfe).max().unwrap_or(0),
        };
        if !metrics.loss.is_finite() {
            let per_item: Vec<f64> = losses.iter().map(|l| l.objective).collect();
            return Err(Error::NonFinite(format!(
                "{scheme} step {}: loss {} (per item {per_item:?}, per scale {:?})",
                self.step, metrics.loss, metrics.per_scale_tf
            )));
        }
        self.optimizer
            .step(self.generator.state_mut().values_mut(), &grads)
            .map_err(|e| match e {
                Error::NonFinite(m) => {
                    Error::NonFinite(format!("{scheme} step {}: {m}", self.step))
                }
                e => e,
            })?;
        if !self.generator.state().is_finite() {
            return Err(Error::NonFinite(format!(
                "{scheme} step {}: parameters became non-finite",
                self.step
            )));
        }
        self.step += 1;
        Ok(metrics)
    }
}
