use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// A square `side × side × channels` array stored row-major as `[row][col][channel]`.
///
/// Used for images, latent maps and per-position logits alike.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<S> {
    side: usize,
    channels: usize,
    data: Vec<S>,
}

impl<S: Scalar> Grid<S> {
    pub fn zeros(side: usize, channels: usize) -> Self {
        Self::filled(side, channels, S::zero())
    }

    pub fn filled(side: usize, channels: usize, value: S) -> Self {
        Self {
            side,
            channels,
            data: vec![value; side * side * channels],
        }
    }

    pub fn from_vec(side: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != side * side * channels {
            bail!(
                Usage,
                "grid {side}x{side}x{channels} needs {} values, got {}",
                side * side * channels,
                data.len()
            );
        }
        Ok(Self {
            side,
            channels,
            data,
        })
    }

    pub fn from_fn(
        side: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Self {
        let mut data = Vec::with_capacity(side * side * channels);
        for r in 0..side {
            for c in 0..side {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            side,
            channels,
            data,
        }
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn positions(&self) -> usize {
        self.side * self.side
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> S {
        self.data[(r * self.side + c) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: S) {
        self.data[(r * self.side + c) * self.channels + ch] = v;
    }

    /// Channel vector at raster position `p`.
    #[inline]
    pub fn vector(&self, p: usize) -> &[S] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn vector_mut(&mut self, p: usize) -> &mut [S] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, k: S) -> Self {
        Self {
            side: self.side,
            channels: self.channels,
            data: self.data.iter().map(|&v| v * k).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Grid<T> {
        Grid {
            side: self.side,
            channels: self.channels,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn squared_distance(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum()
    }
}
