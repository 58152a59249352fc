//! Token sampling (argmax, temperature, top-k, top-p, classifier-free guidance)
//! and full autoregressive generation.

mod generate;

pub use generate::{generate, generate_with, Generation, Scale1Decoding};

use rand::Rng as _;

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::pyramid::TokenMap;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Default nucleus mass and top-k, as used for stochastic sampling throughout.
pub const DEFAULT_TOP_K: usize = 900;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_CFG_SCALE: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Highest logit, lowest index on ties. Also the `temperature → 0⁺` limit.
    Argmax,
    Stochastic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    /// `None` keeps every entry.
    pub top_k: Option<usize>,
    pub top_p: f64,
    pub temperature: f64,
    /// `None` disables guidance.
    pub cfg_scale: Option<f64>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Stochastic,
            top_k: Some(DEFAULT_TOP_K),
            top_p: DEFAULT_TOP_P,
            temperature: 1.0,
            cfg_scale: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn argmax() -> Self {
        Self {
            strategy: Strategy::Argmax,
            ..Self::default()
        }
    }

    pub fn with_cfg(mut self, scale: f64) -> Self {
        self.cfg_scale = Some(scale);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == Some(0) {
            bail!(Config, "top_k must be positive");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            bail!(Config, "top_p {} outside (0, 1]", self.top_p);
        }
        if !(self.temperature > 0.0) {
            bail!(Config, "temperature must be positive");
        }
        if let Some(s) = self.cfg_scale {
            if !(s >= 0.0) {
                bail!(Config, "cfg scale must be >= 0");
            }
        }
        Ok(())
    }

    /// Human-readable tag used in result tables.
    pub fn label(&self) -> String {
        let base = match self.strategy {
            Strategy::Argmax => "argmax".to_string(),
            Strategy::Stochastic => "stochastic".to_string(),
        };
        match self.cfg_scale {
            Some(s) => format!("{base}+cfg{s}"),
            None => base,
        }
    }
}

/// Indices sorted by descending logit, ties by ascending index.
fn ranked<S: Scalar>(logits: &[S]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Keeps the `k` largest logits, then the shortest prefix of those (by
/// descending probability) whose mass reaches `p`. At least the best entry
/// always survives; everything else becomes `−∞`.
pub fn filter_top_k_top_p<S: Scalar>(logits: &[S], k: Option<usize>, p: f64) -> Vec<S> {
    let v = logits.len();
    if v == 0 {
        return Vec::new();
    }
    let order = ranked(logits);
    let k = k.unwrap_or(v).clamp(1, v);
    let mut keep = k;
    if p < 1.0 {
        let max = logits[order[0]].as_f64();
        let weights: Vec<f64> = order[..k]
            .iter()
            .map(|&i| (logits[i].as_f64() - max).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut cum = 0.0;
        keep = k;
        for (n, w) in weights.iter().enumerate() {
            cum += w / total;
            if cum >= p {
                keep = n + 1;
                break;
            }
        }
    }
    let mut out = vec![S::neg_infinity(); v];
    for &i in &order[..keep] {
        out[i] = logits[i];
    }
    out
}

/// Guided logits `u + s·(c − u)`, evaluated as `s·c + (1 − s)·u` so that
/// `s = 1` returns `c` and `s = 0` returns `u` exactly.
pub fn cfg_combine<S: Scalar>(cond: &[S], uncond: &[S], s: f64) -> Vec<S> {
    let (s, one_minus) = (S::of(s), S::of(1.0 - s));
    cond.iter()
        .zip(uncond)
        .map(|(&c, &u)| s * c + one_minus * u)
        .collect()
}

pub fn cfg_combine_grid<S: Scalar>(cond: &Grid<S>, uncond: &Grid<S>, s: f64) -> Grid<S> {
    Grid::from_vec(
        cond.side(),
        cond.channels(),
        cfg_combine(cond.as_slice(), uncond.as_slice(), s),
    )
    .expect("same shape")
}

pub fn argmax<S: Scalar>(logits: &[S]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// The categorical distribution a stochastic draw uses: temperature, then the
/// top-k/top-p filter, then softmax.
pub fn sampling_distribution<S: Scalar>(logits: &[S], sampler: &SamplerConfig) -> Vec<f64> {
    let scaled: Vec<f64> = logits
        .iter()
        .map(|l| l.as_f64() / sampler.temperature)
        .collect();
    let filtered = filter_top_k_top_p(&scaled, sampler.top_k, sampler.top_p);
    let max = filtered.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = filtered
        .iter()
        .map(|&l| {
            if l == f64::NEG_INFINITY {
                0.0
            } else {
                (l - max).exp()
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Draws one index from `logits` under `sampler`.
pub fn sample_position<S: Scalar>(logits: &[S], sampler: &SamplerConfig, rng: &mut Rng) -> usize {
    match sampler.strategy {
        Strategy::Argmax => argmax(logits),
        Strategy::Stochastic => {
            let probs = sampling_distribution(logits, sampler);
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut last = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    cum += p;
                    last = i;
                    if u < cum {
                        return i;
                    }
                }
            }
            last
        }
    }
}

/// Samples every position of a logit map independently, in raster order.
pub fn sample_map<S: Scalar>(logits: &Grid<S>, sampler: &SamplerConfig, rng: &mut Rng) -> TokenMap {
    let idx = (0..logits.positions())
        .map(|p| sample_position(logits.vector(p), sampler, rng))
        .collect();
    TokenMap::new(logits.side(), idx).expect("one token per position")
}
