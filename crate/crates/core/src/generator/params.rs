use std::ops::Range;

use rand_distr::{Distribution, StandardNormal};

use super::GeneratorConfig;
use crate::error::{bail, Result};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zero,
    One,
}

/// One named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub(crate) init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerOffsets {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub fc_w: Range<usize>,
    pub fc_b: Range<usize>,
    pub proj_w: Range<usize>,
    pub proj_b: Range<usize>,
}

/// Index ranges of every tensor, resolved once per configuration.
#[derive(Clone, Debug)]
pub(crate) struct Offsets {
    pub start: Range<usize>,
    pub class: Range<usize>,
    pub mask: Range<usize>,
    pub pos: Range<usize>,
    /// Input projections for scales 1..=N (zero-based by scale); weights are `[D][W]`.
    pub in_w: Vec<Range<usize>>,
    pub in_b: Vec<Range<usize>>,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
}

/// Ordered tensor table of a configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn for_config(config: &GeneratorConfig) -> Self {
        let mut b = Builder::default();
        let (w, d) = (config.width, config.latent_dim);
        b.push("tok.start", &[w], Init::Normal);
        b.push("tok.class", &[config.classes + 1, w], Init::Normal);
        b.push("tok.mask", &[w], Init::Normal);
        b.push("pos", &[config.position_rows(), w], Init::Normal);
        for s in 0..config.schedule.len() {
            b.push(&format!("in.{s}.w"), &[d, w], Init::Normal);
            b.push(&format!("in.{s}.b"), &[w], Init::Zero);
        }
        for l in 0..config.depth {
            let hid = config.mlp_hidden();
            b.push(&format!("blk.{l}.ln1.g"), &[w], Init::One);
            b.push(&format!("blk.{l}.ln1.b"), &[w], Init::Zero);
            b.push(&format!("blk.{l}.attn.qkv.w"), &[w, 3 * w], Init::Normal);
            b.push(&format!("blk.{l}.attn.qkv.b"), &[3 * w], Init::Zero);
            b.push(&format!("blk.{l}.attn.out.w"), &[w, w], Init::Normal);
            b.push(&format!("blk.{l}.attn.out.b"), &[w], Init::Zero);
            b.push(&format!("blk.{l}.ln2.g"), &[w], Init::One);
            b.push(&format!("blk.{l}.ln2.b"), &[w], Init::Zero);
            b.push(&format!("blk.{l}.mlp.fc.w"), &[w, hid], Init::Normal);
            b.push(&format!("blk.{l}.mlp.fc.b"), &[hid], Init::Zero);
            b.push(&format!("blk.{l}.mlp.proj.w"), &[hid, w], Init::Normal);
            b.push(&format!("blk.{l}.mlp.proj.b"), &[w], Init::Zero);
        }
        b.push("ln_f.g", &[w], Init::One);
        b.push("ln_f.b", &[w], Init::Zero);
        b.push("head.w", &[w, config.output_dim()], Init::Zero);
        b.push("head.b", &[config.output_dim()], Init::Zero);
        ParamLayout {
            total: b.total,
            specs: b.specs,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    fn range(&self, name: &str) -> Range<usize> {
        self.get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .range()
    }

    pub(crate) fn offsets(&self, config: &GeneratorConfig) -> Offsets {
        let r = |n: &str| self.range(n);
        Offsets {
            start: r("tok.start"),
            class: r("tok.class"),
            mask: r("tok.mask"),
            pos: r("pos"),
            in_w: (0..config.schedule.len())
                .map(|s| r(&format!("in.{s}.w")))
                .collect(),
            in_b: (0..config.schedule.len())
                .map(|s| r(&format!("in.{s}.b")))
                .collect(),
            layers: (0..config.depth)
                .map(|l| {
                    let p = |n: &str| r(&format!("blk.{l}.{n}"));
                    LayerOffsets {
                        ln1_g: p("ln1.g"),
                        ln1_b: p("ln1.b"),
                        qkv_w: p("attn.qkv.w"),
                        qkv_b: p("attn.qkv.b"),
                        out_w: p("attn.out.w"),
                        out_b: p("attn.out.b"),
                        ln2_g: p("ln2.g"),
                        ln2_b: p("ln2.b"),
                        fc_w: p("mlp.fc.w"),
                        fc_b: p("mlp.fc.b"),
                        proj_w: p("mlp.proj.w"),
                        proj_b: p("mlp.proj.b"),
                    }
                })
                .collect(),
            lnf_g: r("ln_f.g"),
            lnf_b: r("ln_f.b"),
            head_w: r("head.w"),
            head_b: r("head.b"),
        }
    }
}

#[derive(Default)]
struct Builder {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: &str, shape: &[usize], init: Init) {
        let spec = ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.total,
            init,
        };
        self.total += spec.len();
        self.specs.push(spec);
    }
}

/// All learnable parameters as one flat vector plus its tensor table.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    layout: ParamLayout,
    values: Vec<S>,
}

impl<S: Scalar> ModelState<S> {
    /// Truncated-normal (std 0.02, cut at two standard deviations) weights,
    /// zero biases, unit norm gains and a zero output head.
    pub fn init(config: &GeneratorConfig) -> Self {
        let layout = ParamLayout::for_config(config);
        let mut rng = rng::stream(config.seed, Stream::Init, &[]);
        let mut values = vec![S::zero(); layout.total()];
        for spec in layout.specs() {
            for v in &mut values[spec.range()] {
                *v = match spec.init {
                    Init::Zero => S::zero(),
                    Init::One => S::one(),
                    Init::Normal => loop {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break S::of(z * INIT_STD);
                        }
                    },
                };
            }
        }
        Self { layout, values }
    }

    pub fn from_values(config: &GeneratorConfig, values: Vec<S>) -> Result<Self> {
        let layout = ParamLayout::for_config(config);
        if values.len() != layout.total() {
            bail!(
                Integrity,
                "expected {} parameters, got {}",
                layout.total(),
                values.len()
            );
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[S]> {
        self.layout.get(name).map(|s| &self.values[s.range()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
