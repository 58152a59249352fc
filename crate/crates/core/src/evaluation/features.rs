use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;

/// Random projections per feature vector (the channel means come on top).
pub const FEATURE_PROJECTIONS: usize = 32;

/// Fixed feature map for images of one shape: `F` seeded Gaussian projections of
/// the flattened pixels (scaled by `1/sqrt(pixels)`) followed by the per-channel means.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    side: usize,
    channels: usize,
    seed: u64,
    proj: Vec<f64>,
}

impl FeatureMap {
    pub fn new(side: usize, channels: usize, seed: u64) -> Self {
        let len = side * side * channels;
        let mut rng = stream(seed, Stream::Features, &[side as u64, channels as u64]);
        let scale = 1.0 / (len as f64).sqrt();
        let proj = (0..FEATURE_PROJECTIONS * len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            side,
            channels,
            seed,
            proj,
        }
    }

    /// Identifies the feature definition; statistics are comparable only under equal ids.
    pub fn id(&self) -> String {
        format!(
            "rp{FEATURE_PROJECTIONS}+mean/{}x{}x{}/seed{}",
            self.side, self.side, self.channels, self.seed
        )
    }

    pub fn dim(&self) -> usize {
        FEATURE_PROJECTIONS + self.channels
    }

    pub fn features<S: Scalar>(&self, image: &Grid<S>) -> Result<Vec<f64>> {
        if image.side() != self.side || image.channels() != self.channels {
            bail!(
                Usage,
                "feature map expects {0}x{0}x{1} images, got {2}x{2}x{3}",
                self.side,
                self.channels,
                image.side(),
                image.channels()
            );
        }
        let px: Vec<f64> = image.as_slice().iter().map(|v| v.as_f64()).collect();
        let mut out: Vec<f64> = self
            .proj
            .chunks(px.len())
            .map(|row| row.iter().zip(&px).map(|(a, b)| a * b).sum())
            .collect();
        let pos = image.positions() as f64;
        for c in 0..self.channels {
            out.push(px.iter().skip(c).step_by(self.channels).sum::<f64>() / pos);
        }
        Ok(out)
    }

    pub fn features_batch<S: Scalar>(&self, images: &[Grid<S>]) -> Result<Vec<Vec<f64>>> {
        images.par_iter().map(|im| self.features(im)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_part_and_means() {
        let fm = FeatureMap::new(2, 2, 3);
        let a = Grid::<f64>::from_fn(2, 2, |r, c, ch| (r + 2 * c) as f64 - ch as f64);
        let b = a.scaled(2.0);
        let fa = fm.features(&a).unwrap();
        let fb = fm.features(&b).unwrap();
        assert_eq!(fa.len(), fm.dim());
        for (x, y) in fa.iter().zip(&fb) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        assert_eq!(fa[FEATURE_PROJECTIONS], 1.5);
        assert_eq!(fa[FEATURE_PROJECTIONS + 1], 0.5);
        assert_eq!(fm, FeatureMap::new(2, 2, 3));
    }
}
