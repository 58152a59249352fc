//! Flat `section.key = value` experiment configuration.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are ignored.
//! Every key is optional and defaults to the desk-scale experiment. Unknown
//! keys are rejected so that typos cannot silently change a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use super::dataset::{Family, SyntheticDatasetSpec};
use crate::error::{bail, Result};
use crate::generator::{GeneratorConfig, PositionalMode};
use crate::pyramid::{Pathway, ScaleSchedule};
use crate::sampling::{SamplerConfig, Strategy, DEFAULT_TOP_K};
use crate::training::{CsflTarget, MaskRatioSchedule, ScheduleKind, SfScales, TrainConfig};

/// Parsed key/value pairs, in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected `key = value`", n + 1);
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty()
                || !k
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
            {
                bail!(Config, "line {}: bad key {k:?}", n + 1);
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                bail!(Config, "line {}: duplicate key {k}", n + 1);
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        s
    }
}

/// Everything that defines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: SyntheticDatasetSpec,
    pub eval_dataset_seed: u64,
    pub schedule: ScaleSchedule,
    pub pathway: Pathway,
    pub vocab: usize,
    pub latent_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub label_drop_prob: f64,
    pub positional: PositionalMode,
    pub train: TrainConfig,
    pub refine: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seed = 0;
        let train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let refine = TrainConfig {
            schedule_kind: ScheduleKind::Sar,
            steps: 400,
            ..train.clone()
        };
        Self {
            seed,
            dataset: SyntheticDatasetSpec::default(),
            eval_dataset_seed: 1,
            schedule: ScaleSchedule::new(vec![1, 2, 3, 4]).expect("valid schedule"),
            pathway: Pathway::LatentSupervision,
            vocab: 64,
            latent_dim: 8,
            depth: 4,
            width: 64,
            heads: 4,
            label_drop_prob: 0.1,
            positional: PositionalMode::PerPosition,
            train,
            refine,
            sampler: SamplerConfig {
                top_k: Some(DEFAULT_TOP_K.min(64)),
                ..SamplerConfig::default()
            },
            eval_every: 0,
            eval_samples: 1024,
            output: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    match v.parse() {
        Ok(x) => Ok(x),
        Err(_) => bail!(Config, "{key}: cannot parse {v:?}"),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!(Config, "{key}: expected true or false, got {v:?}"),
    }
}

fn parse_opt<T: FromStr>(key: &str, v: &str, off: &str) -> Result<Option<T>> {
    if v == off {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Argmax => "argmax",
        Strategy::Stochastic => "stochastic",
    }
}

fn opt_text<T: ToString>(v: Option<T>, off: &str) -> String {
    v.map_or(off.to_string(), |x| x.to_string())
}

fn apply_sampler(s: &mut SamplerConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "strategy" => {
            s.strategy = match v {
                "argmax" => Strategy::Argmax,
                "stochastic" => Strategy::Stochastic,
                _ => bail!(Config, "{key}: unknown strategy {v:?}"),
            }
        }
        "top_k" => s.top_k = parse_opt(key, v, "all")?,
        "top_p" => s.top_p = parse(key, v)?,
        "temperature" => s.temperature = parse(key, v)?,
        "cfg" => s.cfg_scale = parse_opt(key, v, "off")?,
        "seed" => s.seed = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn write_sampler(m: &mut ConfigMap, prefix: &str, s: &SamplerConfig) {
    m.set(&format!("{prefix}.strategy"), strategy_name(s.strategy));
    m.set(&format!("{prefix}.top_k"), opt_text(s.top_k, "all"));
    m.set(&format!("{prefix}.top_p"), s.top_p);
    m.set(&format!("{prefix}.temperature"), s.temperature);
    m.set(&format!("{prefix}.cfg"), opt_text(s.cfg_scale, "off"));
    m.set(&format!("{prefix}.seed"), s.seed);
}

fn apply_train(t: &mut TrainConfig, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "scheme" => t.schedule_kind = ScheduleKind::parse(v)?,
        "steps" => t.steps = parse(key, v)?,
        "batch" => t.batch = parse(key, v)?,
        "lr" => t.lr = parse(key, v)?,
        "beta1" => t.beta1 = parse(key, v)?,
        "beta2" => t.beta2 = parse(key, v)?,
        "weight_decay" => t.weight_decay = parse(key, v)?,
        "gamma" => t.gamma = parse(key, v)?,
        "csfl_target" => t.csfl_target = CsflTarget::parse(v)?,
        "sf_scales" => t.sf_scales = SfScales::parse(v)?,
        "detach_teacher" => t.detach_teacher = parse_bool(key, v)?,
        "mask_ratio" => t.mask_ratio = MaskRatioSchedule::parse(v)?,
        _ => {
            if let Some(f) = field.strip_prefix("ssr.") {
                return apply_sampler(&mut t.sampler_for_ssr, f, key, v);
            }
            return Ok(false);
        }
    }
    Ok(true)
}

fn write_train(m: &mut ConfigMap, prefix: &str, t: &TrainConfig) {
    m.set(&format!("{prefix}.scheme"), t.schedule_kind);
    m.set(&format!("{prefix}.steps"), t.steps);
    m.set(&format!("{prefix}.batch"), t.batch);
    m.set(&format!("{prefix}.lr"), t.lr);
    m.set(&format!("{prefix}.beta1"), t.beta1);
    m.set(&format!("{prefix}.beta2"), t.beta2);
    m.set(&format!("{prefix}.weight_decay"), t.weight_decay);
    m.set(&format!("{prefix}.gamma"), t.gamma);
    m.set(&format!("{prefix}.csfl_target"), t.csfl_target.name());
    m.set(&format!("{prefix}.sf_scales"), t.sf_scales.name());
    m.set(&format!("{prefix}.detach_teacher"), t.detach_teacher);
    m.set(&format!("{prefix}.mask_ratio"), t.mask_ratio);
    write_sampler(m, &format!("{prefix}.ssr"), &t.sampler_for_ssr);
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(&ConfigMap::parse(text)?)
    }

    /// Applies `map` on top of the defaults. `run.seed` seeds every stream not given explicitly.
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        if let Some(v) = map.get("run.seed") {
            let seed: u64 = parse("run.seed", v)?;
            c.seed = seed;
            c.dataset.seed = seed;
            c.eval_dataset_seed = seed.wrapping_add(1);
            c.train.seed = seed;
            c.refine.seed = seed;
            c.sampler.seed = seed;
        }
        // `train.*` values are inherited by `refine.*` unless overridden there.
        let mut refine_overrides = Vec::new();
        for (key, v) in map.iter() {
            let (section, field) = key.split_once('.').unwrap_or((key, ""));
            let known = match section {
                "run" => match field {
                    "seed" => true,
                    "output" => {
                        c.output = PathBuf::from(v);
                        true
                    }
                    _ => false,
                },
                "dataset" => {
                    let d = &mut c.dataset;
                    match field {
                        "family" => d.family = Family::parse(v)?,
                        "classes" => d.classes = parse(key, v)?,
                        "side" => d.side = parse(key, v)?,
                        "channels" => d.channels = parse(key, v)?,
                        "jitter" => d.jitter = parse(key, v)?,
                        "size" => d.size = parse(key, v)?,
                        "seed" => d.seed = parse(key, v)?,
                        "eval_seed" => c.eval_dataset_seed = parse(key, v)?,
                        _ => bail!(Config, "unknown key {key}"),
                    }
                    true
                }
                "tokenizer" => {
                    match field {
                        "schedule" => c.schedule = ScaleSchedule::parse(v)?,
                        "pathway" => c.pathway = Pathway::parse(v)?,
                        "vocab" => c.vocab = parse(key, v)?,
                        "latent_dim" => c.latent_dim = parse(key, v)?,
                        _ => bail!(Config, "unknown key {key}"),
                    }
                    true
                }
                "model" => {
                    match field {
                        "depth" => c.depth = parse(key, v)?,
                        "width" => c.width = parse(key, v)?,
                        "heads" => c.heads = parse(key, v)?,
                        "label_drop" => c.label_drop_prob = parse(key, v)?,
                        "positional" => c.positional = PositionalMode::parse(v)?,
                        _ => bail!(Config, "unknown key {key}"),
                    }
                    true
                }
                "train" => apply_train(&mut c.train, field, key, v)?,
                "refine" => {
                    refine_overrides.push((field.to_string(), key.to_string(), v.to_string()));
                    true
                }
                "sample" => apply_sampler(&mut c.sampler, field, key, v)?,
                "eval" => {
                    match field {
                        "every" => c.eval_every = parse(key, v)?,
                        "samples" => c.eval_samples = parse(key, v)?,
                        _ => bail!(Config, "unknown key {key}"),
                    }
                    true
                }
                _ => false,
            };
            if !known {
                bail!(Config, "unknown key {key}");
            }
        }
        let refine_steps = c.refine.steps;
        c.refine = TrainConfig {
            schedule_kind: ScheduleKind::Sar,
            steps: refine_steps,
            ..c.train.clone()
        };
        for (field, key, v) in refine_overrides {
            if !apply_train(&mut c.refine, &field, &key, &v)? {
                bail!(Config, "unknown key {key}");
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.generator_config().validate()?;
        self.train.validate()?;
        self.refine.validate()?;
        self.sampler.validate()?;
        if self.dataset.side % self.schedule.top() != 0 {
            bail!(
                Config,
                "image side {} is not a multiple of the top scale {}",
                self.dataset.side,
                self.schedule.top()
            );
        }
        if self.vocab == 1 {
            bail!(Config, "vocab must be 0 (continuous) or at least 2");
        }
        Ok(())
    }

    pub fn patch_side(&self) -> usize {
        self.dataset.side / self.schedule.top()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            schedule: self.schedule.clone(),
            depth: self.depth,
            width: self.width,
            heads: self.heads,
            vocab: self.vocab,
            latent_dim: self.latent_dim,
            classes: self.dataset.classes,
            label_drop_prob: self.label_drop_prob,
            seed: self.seed,
            positional: self.positional,
        }
    }

    pub fn eval_dataset(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            seed: self.eval_dataset_seed,
            size: self.eval_samples,
            ..self.dataset.clone()
        }
    }

    /// The fully resolved configuration; parsing it yields `self` again.
    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::default();
        m.set("run.seed", self.seed);
        m.set("run.output", self.output.display());
        let d = &self.dataset;
        m.set("dataset.family", d.family.name());
        m.set("dataset.classes", d.classes);
        m.set("dataset.side", d.side);
        m.set("dataset.channels", d.channels);
        m.set("dataset.jitter", d.jitter);
        m.set("dataset.size", d.size);
        m.set("dataset.seed", d.seed);
        m.set("dataset.eval_seed", self.eval_dataset_seed);
        m.set("tokenizer.schedule", &self.schedule);
        m.set("tokenizer.pathway", self.pathway.name());
        m.set("tokenizer.vocab", self.vocab);
        m.set("tokenizer.latent_dim", self.latent_dim);
        m.set("model.depth", self.depth);
        m.set("model.width", self.width);
        m.set("model.heads", self.heads);
        m.set("model.label_drop", self.label_drop_prob);
        m.set("model.positional", self.positional.name());
        write_train(&mut m, "train", &self.train);
        write_train(&mut m, "refine", &self.refine);
        write_sampler(&mut m, "sample", &self.sampler);
        m.set("eval.every", self.eval_every);
        m.set("eval.samples", self.eval_samples);
        m
    }

    pub fn to_text(&self) -> String {
        self.to_map().to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let c = ExperimentConfig::parse(
            "run.seed = 7\ntrain.steps = 10\nrefine.gamma = 1.0\nsample.cfg = 2.5\n",
        )
        .unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.refine.steps, 400);
        assert_eq!(c.refine.gamma, 1.0);
        assert_eq!(c.refine.schedule_kind, ScheduleKind::Sar);
        assert_eq!(c.dataset.seed, 7);
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_text(), c.to_text());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(ExperimentConfig::parse("train.stepz = 3").is_err());
        assert!(ExperimentConfig::parse("train.steps 3").is_err());
        assert!(ExperimentConfig::parse("train.steps = x").is_err());
        assert!(ExperimentConfig::parse("a.b = 1\na.b = 2").is_err());
    }

    #[test]
    fn paper_optimizer_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(
            (
                c.train.lr,
                c.train.beta1,
                c.train.beta2,
                c.train.weight_decay
            ),
            (1e-4, 0.9, 0.95, 0.05)
        );
    }
}
