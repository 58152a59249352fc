//! Seeded synthetic class-conditional image families with closed-form class means.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng as _;

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// One Gaussian bump whose centre is uniform in a per-class box.
    Blobs,
    /// A sinusoidal grating with per-class frequency/orientation and uniform phase in a per-class interval.
    Stripes,
    /// A Gaussian ring around the image centre with uniform radius in a per-class interval.
    Rings,
}

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "blobs" => Ok(Family::Blobs),
            "stripes" => Ok(Family::Stripes),
            "rings" => Ok(Family::Rings),
            _ => bail!(Config, "unknown dataset family {s:?}"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Blobs => "blobs",
            Family::Stripes => "stripes",
            Family::Rings => "rings",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub family: Family,
    pub classes: usize,
    /// Image side `H` in pixels.
    pub side: usize,
    pub channels: usize,
    /// Width of every per-class parameter interval, as a fraction of its
    /// default width; `0` makes all images of a class identical.
    pub jitter: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            family: Family::Blobs,
            classes: 4,
            side: 16,
            channels: 1,
            jitter: 1.0,
            size: 512,
            seed: 0,
        }
    }
}

/// Per-class parameter intervals `[lo, hi]` of one family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassParams {
    Blobs {
        cx: (f64, f64),
        cy: (f64, f64),
        sigma: f64,
    },
    Stripes {
        freq: f64,
        angle: f64,
        phase: (f64, f64),
    },
    Rings {
        radius: (f64, f64),
        width: f64,
    },
}

/// Pixel coordinates are taken at pixel centres, `x = col + 0.5`.
fn centre(i: usize) -> f64 {
    i as f64 + 0.5
}

fn draw(rng: &mut crate::rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        lo + (hi - lo) * rng.random::<f64>()
    } else {
        lo
    }
}

/// `E[exp(−(x−c)²/(2σ²))]` for `c ~ U[a, b]` (the plain value when `a = b`).
fn gauss_mean(x: f64, (a, b): (f64, f64), sigma: f64) -> f64 {
    if b > a {
        let s = sigma * SQRT_2;
        sigma * (PI / 2.0).sqrt() / (b - a) * (erf((x - a) / s) - erf((x - b) / s))
    } else {
        (-(x - a) * (x - a) / (2.0 * sigma * sigma)).exp()
    }
}

/// Error function: Maclaurin series below 2.5, continued fraction for the tail.
pub(crate) fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.5 {
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x2 / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        sum * 2.0 / PI.sqrt()
    } else {
        let x2 = x * x;
        let mut f = x;
        let mut c = x;
        let mut d = 0.0;
        for k in 1..200 {
            let a = k as f64 / 2.0;
            d = x + a * d;
            d = 1.0 / d;
            c = x + a / c;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (-x2).exp() / (f * PI.sqrt())
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.side == 0 || self.channels == 0 {
            bail!(
                Config,
                "dataset classes, side and channels must be positive"
            );
        }
        if !(self.jitter >= 0.0 && self.jitter <= 1.0) {
            bail!(Config, "dataset jitter {} outside [0, 1]", self.jitter);
        }
        Ok(())
    }

    /// Class `c` of item `j` is `j mod classes`.
    pub fn label(&self, j: usize) -> usize {
        j % self.classes
    }

    pub fn class_params(&self, c: usize) -> ClassParams {
        let h = self.side as f64;
        let t = c as f64 / self.classes as f64;
        let j = self.jitter;
        match self.family {
            Family::Blobs => {
                let (cx, cy) = (
                    h * (0.5 + 0.25 * (2.0 * PI * t).cos()),
                    h * (0.5 + 0.25 * (2.0 * PI * t).sin()),
                );
                let r = j * h / 8.0;
                ClassParams::Blobs {
                    cx: (cx - r, cx + r),
                    cy: (cy - r, cy + r),
                    sigma: h / 8.0,
                }
            }
            Family::Stripes => {
                let p0 = 2.0 * PI * t;
                ClassParams::Stripes {
                    freq: 1.0 + (c % 3) as f64,
                    angle: PI * t,
                    phase: (p0, p0 + j * PI),
                }
            }
            Family::Rings => {
                let r0 = h * (0.15 + 0.3 * t);
                ClassParams::Rings {
                    radius: (r0, r0 + j * h / 8.0),
                    width: h / 16.0,
                }
            }
        }
    }

    /// Per-channel gain; channel `k` of every image is the base pattern times this.
    pub fn channel_gain(&self, k: usize) -> f64 {
        1.0 - 0.5 * k as f64 / self.channels as f64
    }

    fn render(&self, params: ClassParams, rng: &mut crate::rng::Rng) -> Grid<f64> {
        let h = self.side as f64;
        let base: Box<dyn Fn(f64, f64) -> f64> = match params {
            ClassParams::Blobs { cx, cy, sigma } => {
                let (cx, cy) = (draw(rng, cx), draw(rng, cy));
                Box::new(move |x, y| {
                    (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
                })
            }
            ClassParams::Stripes { freq, angle, phase } => {
                let phi = draw(rng, phase);
                Box::new(move |x, y| {
                    0.5 + 0.5
                        * (2.0 * PI * freq * (x * angle.cos() + y * angle.sin()) / h + phi).sin()
                })
            }
            ClassParams::Rings { radius, width } => {
                let r0 = draw(rng, radius);
                Box::new(move |x, y| {
                    let r = ((x - h / 2.0).powi(2) + (y - h / 2.0).powi(2)).sqrt();
                    (-(r - r0).powi(2) / (2.0 * width * width)).exp()
                })
            }
        };
        Grid::from_fn(self.side, self.channels, |row, col, k| {
            base(centre(col), centre(row)) * self.channel_gain(k)
        })
    }

    /// Closed-form expectation of a class-`c` image.
    pub fn analytic_mean(&self, c: usize) -> Grid<f64> {
        let h = self.side as f64;
        let params = self.class_params(c);
        Grid::from_fn(self.side, self.channels, |row, col, k| {
            let (x, y) = (centre(col), centre(row));
            let v = match params {
                ClassParams::Blobs { cx, cy, sigma } => {
                    gauss_mean(x, cx, sigma) * gauss_mean(y, cy, sigma)
                }
                ClassParams::Stripes {
                    freq,
                    angle,
                    phase: (a, b),
                } => {
                    let u = 2.0 * PI * freq * (x * angle.cos() + y * angle.sin()) / h;
                    if b > a {
                        0.5 + 0.5 * ((u + a).cos() - (u + b).cos()) / (b - a)
                    } else {
                        0.5 + 0.5 * (u + a).sin()
                    }
                }
                ClassParams::Rings { radius, width } => {
                    let r = ((x - h / 2.0).powi(2) + (y - h / 2.0).powi(2)).sqrt();
                    gauss_mean(r, radius, width)
                }
            };
            v * self.channel_gain(k)
        })
    }

    /// Item `j` of the dataset; independent of `size` and of every other item.
    pub fn item(&self, j: usize) -> (usize, Grid<f64>) {
        let c = self.label(j);
        let mut rng = stream(self.seed, Stream::Data, &[j as u64]);
        (c, self.render(self.class_params(c), &mut rng))
    }
}

/// A labeled image set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub spec: SyntheticDatasetSpec,
    pub labels: Vec<usize>,
    pub images: Vec<Grid<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn make_dataset<S: Scalar>(spec: &SyntheticDatasetSpec) -> Result<Dataset<S>> {
    spec.validate()?;
    let (labels, images) = (0..spec.size)
        .map(|j| {
            let (c, im) = spec.item(j);
            (c, im.cast())
        })
        .unzip();
    Ok(Dataset {
        spec: spec.clone(),
        labels,
        images,
    })
}
