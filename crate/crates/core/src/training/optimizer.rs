use crate::error::{bail, Result};
use crate::scalar::Scalar;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.95;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.05;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

/// AdamW with decoupled weight decay applied to every parameter.
///
/// One step, with `t` counting from 1:
/// `θ ← θ·(1 − lr·wd)`, `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
/// `θ ← θ − lr · (m / (1−β1ᵗ)) / (sqrt(v / (1−β2ᵗ)) + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            t: 0,
        }
    }

    pub fn from_parts(config: AdamWConfig, m: Vec<S>, v: Vec<S>, t: u64) -> Result<Self> {
        if m.len() != v.len() {
            bail!(Integrity, "optimizer moments have different lengths");
        }
        Ok(Self { config, m, v, t })
    }

    pub fn moments(&self) -> (&[S], &[S]) {
        (&self.m, &self.v)
    }

    /// Completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            bail!(
                Usage,
                "optimizer sized for {} parameters, got {} / {}",
                self.m.len(),
                params.len(),
                grads.len()
            );
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            bail!(NonFinite, "gradient entry {i} is {}", grads[i]);
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let decay = S::of(1.0 - c.lr * c.weight_decay);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (ob1, ob2) = (S::of(1.0 - c.beta1), S::of(1.0 - c.beta2));
        let bc1 = S::of(1.0 - c.beta1.powi(t));
        let bc2 = S::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (S::of(c.lr), S::of(ADAM_EPS));
        for i in 0..params.len() {
            let g = grads[i];
            let m = b1 * self.m[i] + ob1 * g;
            let v = b2 * self.v[i] + ob2 * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            params[i] = params[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}
