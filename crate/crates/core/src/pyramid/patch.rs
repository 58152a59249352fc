use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::rng::{self, Stream};
use crate::scalar::{dot, Scalar};

/// Fixed linear patch embedding standing in for an image tokenizer's encoder.
///
/// Maps each non-overlapping `patch × patch × channels` block to a `dim` vector
/// with a seeded matrix whose rows (or columns, when `dim` exceeds the patch
/// size) are orthonormal, so its transpose is the exact pseudo-inverse used by
/// [`PatchEmbed::decode`].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed<S> {
    patch: usize,
    channels: usize,
    dim: usize,
    /// `dim × (patch·patch·channels)`, row-major.
    weights: Vec<S>,
}

impl<S: Scalar> PatchEmbed<S> {
    pub fn seeded(patch: usize, channels: usize, dim: usize, seed: u64) -> Result<Self> {
        if patch == 0 || channels == 0 || dim == 0 {
            bail!(Config, "patch embed dimensions must be positive");
        }
        let k = patch * patch * channels;
        let mut rng = rng::stream(seed, Stream::Patch, &[]);
        let mut w: Vec<f64> = (0..dim * k)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        if dim <= k {
            orthonormalize(&mut w, dim, k, |i, j| i * k + j);
        } else {
            orthonormalize(&mut w, k, dim, |i, j| j * k + i);
        }
        Ok(Self {
            patch,
            channels,
            dim,
            weights: w.into_iter().map(S::of).collect(),
        })
    }

    pub fn from_weights(
        patch: usize,
        channels: usize,
        dim: usize,
        weights: Vec<S>,
    ) -> Result<Self> {
        if weights.len() != dim * patch * patch * channels {
            bail!(Integrity, "patch embed weight count mismatch");
        }
        Ok(Self {
            patch,
            channels,
            dim,
            weights,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Row `d` of the embedding matrix.
    pub fn row(&self, d: usize) -> &[S] {
        let k = self.patch_len();
        &self.weights[d * k..(d + 1) * k]
    }

    /// Encodes an image into a `(side/patch)²` latent grid.
    pub fn encode(&self, image: &Grid<S>) -> Result<Grid<S>> {
        if image.channels() != self.channels || image.side() % self.patch != 0 {
            bail!(
                Config,
                "image {}x{}x{} is not tiled by {}x{} patches of {} channels",
                image.side(),
                image.side(),
                image.channels(),
                self.patch,
                self.patch,
                self.channels
            );
        }
        let h = image.side() / self.patch;
        let mut buf = vec![S::zero(); self.patch_len()];
        let mut out = Grid::zeros(h, self.dim);
        for r in 0..h {
            for c in 0..h {
                self.gather(image, r, c, &mut buf);
                for d in 0..self.dim {
                    out.set(r, c, d, dot(self.row(d), &buf));
                }
            }
        }
        Ok(out)
    }

    /// Linear un-patchify: applies the transpose of the embedding to every latent vector.
    pub fn decode(&self, latent: &Grid<S>) -> Result<Grid<S>> {
        if latent.channels() != self.dim {
            bail!(
                Usage,
                "latent has {} channels, patch embed expects {}",
                latent.channels(),
                self.dim
            );
        }
        let h = latent.side();
        let side = h * self.patch;
        let mut img = Grid::zeros(side, self.channels);
        let k = self.patch_len();
        let mut buf = vec![S::zero(); k];
        for r in 0..h {
            for c in 0..h {
                buf.iter_mut().for_each(|v| *v = S::zero());
                for (d, &z) in latent.vector(r * h + c).iter().enumerate() {
                    crate::scalar::axpy(z, self.row(d), &mut buf);
                }
                let mut i = 0;
                for py in 0..self.patch {
                    for px in 0..self.patch {
                        for ch in 0..self.channels {
                            img.set(r * self.patch + py, c * self.patch + px, ch, buf[i]);
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(img)
    }

    /// Flattens patch `(r, c)` in `(py, px, channel)` order.
    pub fn gather(&self, image: &Grid<S>, r: usize, c: usize, buf: &mut [S]) {
        let mut i = 0;
        for py in 0..self.patch {
            for px in 0..self.patch {
                for ch in 0..self.channels {
                    buf[i] = image.get(r * self.patch + py, c * self.patch + px, ch);
                    i += 1;
                }
            }
        }
    }
}

/// Modified Gram–Schmidt over `n` vectors of length `len`, addressed through `at(vector, element)`.
fn orthonormalize(w: &mut [f64], n: usize, len: usize, at: impl Fn(usize, usize) -> usize) {
    for i in 0..n {
        for j in 0..i {
            let proj: f64 = (0..len).map(|e| w[at(i, e)] * w[at(j, e)]).sum();
            for e in 0..len {
                w[at(i, e)] -= proj * w[at(j, e)];
            }
        }
        let norm = (0..len).map(|e| w[at(i, e)].powi(2)).sum::<f64>().sqrt();
        for e in 0..len {
            w[at(i, e)] /= norm;
        }
    }
}
