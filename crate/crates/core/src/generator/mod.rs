//! The scale-wise autoregressive transformer: one parallel pass over all scales
//! under a block-causal mask, and prefix inference for sequential rollout.

mod layout;
mod model;
mod params;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use layout::{AttentionMask, Position, SequenceLayout};
pub use model::ForwardCache;
pub use params::{ModelState, ParamLayout, ParamSpec, INIT_STD};

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::pyramid::{shift_inputs, LatentPyramid, ScaleSchedule};
use crate::scalar::Scalar;
use model::Model;
use params::Offsets;

pub const MLP_RATIO: usize = 4;

/// How positional embeddings are indexed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionalMode {
    /// One learned vector per `(scale, row, col)` slot.
    PerPosition,
    /// One learned vector per scale, shared by every slot of that scale.
    PerScale,
}

impl PositionalMode {
    pub fn name(self) -> &'static str {
        match self {
            PositionalMode::PerPosition => "position",
            PositionalMode::PerScale => "scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(PositionalMode::PerPosition),
            "scale" => Ok(PositionalMode::PerScale),
            _ => bail!(Config, "unknown positional mode {s:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub schedule: ScaleSchedule,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Codebook size; `0` selects continuous mode (latent regression).
    pub vocab: usize,
    pub latent_dim: usize,
    pub classes: usize,
    pub label_drop_prob: f64,
    pub seed: u64,
    pub positional: PositionalMode,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.width == 0
            || self.heads == 0
            || self.latent_dim == 0
            || self.classes == 0
        {
            bail!(
                Config,
                "depth, width, heads, latent_dim and classes must be positive"
            );
        }
        if self.width % self.heads != 0 {
            bail!(
                Config,
                "width {} is not divisible by heads {}",
                self.width,
                self.heads
            );
        }
        if !(0.0..=1.0).contains(&self.label_drop_prob) {
            bail!(
                Config,
                "label_drop_prob {} outside [0, 1]",
                self.label_drop_prob
            );
        }
        Ok(())
    }

    pub fn is_discrete(&self) -> bool {
        self.vocab > 0
    }

    /// Logit count (discrete) or latent dimension (continuous) per position.
    pub fn output_dim(&self) -> usize {
        if self.is_discrete() {
            self.vocab
        } else {
            self.latent_dim
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        MLP_RATIO * self.width
    }

    pub(crate) fn position_rows(&self) -> usize {
        match self.positional {
            PositionalMode::PerPosition => 1 + self.schedule.total_tokens(),
            PositionalMode::PerScale => 1 + self.schedule.len(),
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (w, d, n) = (self.width, self.latent_dim, self.schedule.len());
        let h = self.mlp_hidden();
        let per_layer =
            2 * w + (w * 3 * w + 3 * w) + (w * w + w) + 2 * w + (w * h + h) + (h * w + w);
        let embeds = w + (self.classes + 1) * w + w + self.position_rows() * w + n * (d * w + w);
        embeds + self.depth * per_layer + 2 * w + (w * self.output_dim() + self.output_dim())
    }
}

/// Which class embedding conditions a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassLabel {
    Class(usize),
    /// The unconditional embedding used for guidance.
    Null,
}

impl ClassLabel {
    pub fn select(label: usize, drop: bool) -> Self {
        if drop {
            ClassLabel::Null
        } else {
            ClassLabel::Class(label)
        }
    }

    fn row(self, classes: usize) -> usize {
        match self {
            ClassLabel::Class(c) => c,
            ClassLabel::Null => classes,
        }
    }
}

/// Scale-1 token inputs for masked coarse-scale modelling: visible slots carry
/// their code vector, masked slots carry the learned mask embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedScale1<S> {
    pub tokens: Grid<S>,
    pub masked: Vec<bool>,
}

/// A generator `g_θ` bound to its configuration, with an instrumented forward counter.
#[derive(Debug)]
pub struct Generator<S> {
    config: GeneratorConfig,
    layout: SequenceLayout,
    offsets: Offsets,
    state: ModelState<S>,
    forwards: AtomicUsize,
}

impl<S: Scalar> Clone for Generator<S> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            offsets: self.offsets.clone(),
            state: self.state.clone(),
            forwards: AtomicUsize::new(self.forwards.load(Ordering::Relaxed)),
        }
    }
}

impl<S: Scalar> Generator<S> {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let state = ModelState::init(&config);
        Self::from_state(config, state)
    }

    pub fn from_state(config: GeneratorConfig, state: ModelState<S>) -> Result<Self> {
        config.validate()?;
        let layout_p = ParamLayout::for_config(&config);
        if state.layout() != &layout_p {
            bail!(
                Integrity,
                "model state does not match generator configuration"
            );
        }
        let offsets = layout_p.offsets(&config);
        Ok(Self {
            layout: SequenceLayout::new(&config.schedule),
            offsets,
            config,
            state,
            forwards: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.config.schedule
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn state(&self) -> &ModelState<S> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ModelState<S> {
        &mut self.state
    }

    pub fn attention_mask(&self) -> AttentionMask {
        AttentionMask::new(&self.layout)
    }

    /// Generator forward evaluations since construction.
    pub fn nfe(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    fn model(&self) -> Model<'_, S> {
        Model {
            config: &self.config,
            layout: &self.layout,
            off: &self.offsets,
            params: self.state.values(),
        }
    }

    fn check_inputs(
        &self,
        inputs: &[Grid<S>],
        scales: usize,
        masked: Option<&MaskedScale1<S>>,
    ) -> Result<()> {
        let n = self.config.schedule.len();
        if scales == 0 || scales > n {
            bail!(Usage, "scale count {scales} outside [1, {n}]");
        }
        if inputs.len() + 1 < scales {
            bail!(
                Usage,
                "{scales} scales need {} shifted inputs, got {}",
                scales - 1,
                inputs.len()
            );
        }
        for (k, m) in inputs.iter().take(scales - 1).enumerate() {
            if m.side() != self.config.schedule.side(k + 1)
                || m.channels() != self.config.latent_dim
            {
                bail!(
                    Usage,
                    "shifted input for scale {} has shape {}x{}x{}",
                    k + 2,
                    m.side(),
                    m.side(),
                    m.channels()
                );
            }
        }
        if let Some(m) = masked {
            let h = self.config.schedule.side(0);
            if m.tokens.side() != h
                || m.tokens.channels() != self.config.latent_dim
                || m.masked.len() != h * h
            {
                bail!(Usage, "masked scale-1 input does not match the first scale");
            }
        }
        Ok(())
    }

    fn check_label(&self, label: ClassLabel) -> Result<()> {
        if let ClassLabel::Class(c) = label {
            if c >= self.config.classes {
                bail!(Usage, "label {c} outside [0, {})", self.config.classes);
            }
        }
        Ok(())
    }

    /// Predictions for scales `1..=scales` given already-shifted inputs
    /// (`inputs[k]` conditions scale `k + 2`).
    pub fn forward(
        &self,
        label: ClassLabel,
        inputs: &[Grid<S>],
        scales: usize,
    ) -> Result<Vec<Grid<S>>> {
        self.forward_masked(label, inputs, None, scales)
    }

    pub fn forward_masked(
        &self,
        label: ClassLabel,
        inputs: &[Grid<S>],
        masked: Option<&MaskedScale1<S>>,
        scales: usize,
    ) -> Result<Vec<Grid<S>>> {
        self.check_label(label)?;
        self.check_inputs(inputs, scales, masked)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        Ok(self.model().forward(label, inputs, masked, scales, false).0)
    }

    /// Teacher-forced pass: every scale is conditioned on the upsampled previous ground-truth map.
    pub fn forward_tf(
        &self,
        label: usize,
        pyramid: &LatentPyramid<S>,
        drop_label: bool,
    ) -> Result<Vec<Grid<S>>> {
        if pyramid.schedule() != self.schedule() {
            bail!(
                Usage,
                "pyramid schedule {} does not match generator schedule {}",
                pyramid.schedule(),
                self.schedule()
            );
        }
        let inputs = shift_inputs(pyramid.maps(), self.schedule())?;
        self.forward(
            ClassLabel::select(label, drop_label),
            &inputs,
            self.schedule().len(),
        )
    }

    /// Prediction for scale `scales` from the prefix `1..=scales`.
    pub fn forward_prefix(
        &self,
        label: usize,
        inputs: &[Grid<S>],
        scales: usize,
        drop_label: bool,
    ) -> Result<Grid<S>> {
        let mut preds = self.forward(ClassLabel::select(label, drop_label), inputs, scales)?;
        Ok(preds.pop().expect("at least one scale"))
    }

    /// Forward pass that also records what [`Generator::backward`] needs.
    pub fn forward_cached(
        &self,
        label: ClassLabel,
        inputs: &[Grid<S>],
        masked: Option<&MaskedScale1<S>>,
        scales: usize,
    ) -> Result<(Vec<Grid<S>>, ForwardCache<S>)> {
        self.check_label(label)?;
        self.check_inputs(inputs, scales, masked)?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let (p, c) = self.model().forward(label, inputs, masked, scales, true);
        Ok((p, c.expect("cache requested")))
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂prediction` for every scale of the cached pass.
    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        d_out: &[Grid<S>],
        grads: &mut [S],
    ) -> Result<()> {
        if grads.len() != self.state.len() {
            bail!(
                Usage,
                "gradient buffer has {} entries, model has {}",
                grads.len(),
                self.state.len()
            );
        }
        if d_out.len() != cache.scales() {
            bail!(
                Usage,
                "need {} gradient grids, got {}",
                cache.scales(),
                d_out.len()
            );
        }
        self.model().backward(cache, d_out, grads);
        Ok(())
    }
}
