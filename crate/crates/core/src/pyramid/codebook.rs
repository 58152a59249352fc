use rand::Rng as _;

use crate::error::{bail, Result};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;

pub const KMEANS_MAX_ITERS: usize = 50;
const DUPLICATE_TOL: f64 = 1e-8;

/// Frozen `V × D` table of code vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S> {
    size: usize,
    dim: usize,
    entries: Vec<S>,
}

impl<S: Scalar> Codebook<S> {
    /// Validates finiteness and that no two rows coincide within `1e-8`.
    pub fn new(size: usize, dim: usize, entries: Vec<S>) -> Result<Self> {
        if size == 0 || dim == 0 || entries.len() != size * dim {
            bail!(
                Config,
                "codebook needs {size}x{dim} entries, got {}",
                entries.len()
            );
        }
        if entries.iter().any(|v| !v.is_finite()) {
            bail!(Config, "codebook has non-finite entries");
        }
        let cb = Self { size, dim, entries };
        for i in 0..size {
            for j in 0..i {
                let d = squared_distance(cb.row(i), cb.row(j)).as_f64().sqrt();
                if d <= DUPLICATE_TOL {
                    bail!(Config, "codebook rows {j} and {i} coincide");
                }
            }
        }
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[S] {
        &self.entries
    }

    pub fn row(&self, k: usize) -> &[S] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the nearest row; ties go to the lowest index.
    pub fn nearest(&self, v: &[S]) -> usize {
        let mut best = 0;
        let mut best_d = S::infinity();
        for k in 0..self.size {
            let d = squared_distance(self.row(k), v);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

fn squared_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fits a `size`-entry codebook to `samples` (`n × dim`, row-major) with seeded
/// k-means++ initialization followed by at most 50 Lloyd iterations. Empty
/// clusters are re-seeded from the points farthest from their centroid.
pub fn fit_codebook<S: Scalar>(
    samples: &[S],
    dim: usize,
    size: usize,
    seed: u64,
) -> Result<Codebook<S>> {
    if dim == 0 || samples.len() % dim != 0 {
        bail!(Config, "sample buffer is not a multiple of dim {dim}");
    }
    let pts: Vec<f64> = samples.iter().map(|v| v.as_f64()).collect();
    let n = pts.len() / dim;
    let point = |i: usize| &pts[i * dim..(i + 1) * dim];

    let mut keys: Vec<Vec<u64>> = (0..n)
        .map(|i| point(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    if keys.len() < size {
        bail!(
            Config,
            "need at least {size} distinct samples for the codebook, found {}",
            keys.len()
        );
    }

    let mut rng = rng::stream(seed, Stream::Codebook, &[]);
    let mut centroids: Vec<f64> = Vec::with_capacity(size * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut nearest_d: Vec<f64> = (0..n).map(|i| dist2(point(i), point(first))).collect();
    for _ in 1..size {
        let total: f64 = nearest_d.iter().sum();
        let mut pick = n - 1;
        let mut u = rng.random::<f64>() * total;
        for (i, &d) in nearest_d.iter().enumerate() {
            if d > 0.0 && u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        if nearest_d[pick] == 0.0 {
            // Rounding pushed past the end; take the farthest remaining point.
            pick = argmax(&nearest_d);
        }
        let c = point(pick).to_vec();
        for (i, nd) in nearest_d.iter_mut().enumerate() {
            *nd = nd.min(dist2(point(i), &c));
        }
        centroids.extend_from_slice(&c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (mut best, mut bd) = (0, f64::INFINITY);
            for k in 0..size {
                let d = dist2(point(i), &centroids[k * dim..(k + 1) * dim]);
                if d < bd {
                    bd = d;
                    best = k;
                }
            }
            dists[i] = bd;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; size * dim];
        let mut counts = vec![0usize; size];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * dim..(assign[i] + 1) * dim]
                .iter_mut()
                .zip(point(i))
            {
                *s += v;
            }
        }
        for k in 0..size {
            if counts[k] > 0 {
                for d in 0..dim {
                    centroids[k * dim + d] = sums[k * dim + d] / counts[k] as f64;
                }
            } else {
                let far = argmax(&dists);
                centroids[k * dim..(k + 1) * dim].copy_from_slice(point(far));
                dists[far] = 0.0;
                assign[far] = k;
            }
        }
    }
    Codebook::new(size, dim, centroids.into_iter().map(S::of).collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ties_break_to_lowest_index() {
        let cb = Codebook::<f64>::new(3, 1, vec![-1.0, 1.0, 3.0]).unwrap();
        assert_eq!(cb.nearest(&[0.0]), 0);
        assert_eq!(cb.nearest(&[2.0]), 1);
        assert_eq!(cb.nearest(&[3.0]), 2);
    }

    #[test]
    fn rejects_duplicate_rows() {
        assert!(Codebook::<f64>::new(2, 2, vec![1.0, 2.0, 1.0, 2.0 + 1e-10]).is_err());
    }

    #[test]
    fn exact_fit_recovers_samples() {
        let samples: Vec<f64> = (0..12)
            .map(|i| (i * i % 7) as f64 + i as f64 * 0.1)
            .collect();
        let cb = fit_codebook(&samples, 2, 6, 5).unwrap();
        let mut got: Vec<Vec<f64>> = (0..6).map(|k| cb.row(k).to_vec()).collect();
        let mut want: Vec<Vec<f64>> = samples.chunks(2).map(|c| c.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn two_blobs_converge_to_blob_means() {
        let mut rng = rng::stream(1, Stream::Data, &[]);
        let mut samples = Vec::new();
        let mut means = [[0.0f64; 2]; 2];
        for b in 0..2 {
            let centre = if b == 0 { [-10.0, -10.0] } else { [10.0, 12.0] };
            for _ in 0..200 {
                for d in 0..2 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let v = centre[d] + z;
                    means[b][d] += v / 200.0;
                    samples.push(v);
                }
            }
        }
        let cb = fit_codebook(&samples, 2, 2, 77).unwrap();
        for m in means {
            let k = cb.nearest(&m);
            for d in 0..2 {
                assert!((cb.row(k)[d] - m[d]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_same_codebook_and_too_few_samples_rejected() {
        let samples: Vec<f32> = (0..200).map(|i| ((i * 37) % 101) as f32 * 0.01).collect();
        let a = fit_codebook(&samples, 4, 8, 3).unwrap();
        let b = fit_codebook(&samples, 4, 8, 3).unwrap();
        assert_eq!(a, b);
        let dup = vec![1.0f32; 40];
        assert!(matches!(
            fit_codebook(&dup, 4, 2, 0),
            Err(crate::Error::Config(_))
        ));
    }
}
