//! Fréchet-distance and precision/recall proxies on a fixed random feature
//! space, per-scale fidelity, student-forcing difference maps and NFE accounting.

mod features;
mod report;

pub use features::{FeatureMap, FEATURE_PROJECTIONS};
pub use report::{
    diff_maps, evaluate, generate_set, nfe_report, per_scale_fd, per_scale_fd_of, reference_images,
    DiffMap, EvalReport, NfeRow,
};

use nalgebra::DMatrix;

use crate::error::{bail, Result};

pub const DEFAULT_PR_K: usize = 3;

/// Gaussian fit of a feature set: mean and unbiased covariance (row-major `F × F`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
    pub count: usize,
    pub feature_id: String,
}

impl FeatureStats {
    pub fn new(
        mean: Vec<f64>,
        cov: Vec<f64>,
        count: usize,
        feature_id: impl Into<String>,
    ) -> Result<Self> {
        let f = mean.len();
        if cov.len() != f * f {
            bail!(
                Usage,
                "covariance has {} entries for dimension {f}",
                cov.len()
            );
        }
        Ok(Self {
            mean,
            cov,
            count,
            feature_id: feature_id.into(),
        })
    }

    pub fn from_features(features: &[Vec<f64>], feature_id: impl Into<String>) -> Result<Self> {
        let Some(first) = features.first() else {
            bail!(Usage, "no features");
        };
        let (n, f) = (features.len(), first.len());
        if features.iter().any(|x| x.len() != f) {
            bail!(Usage, "ragged feature vectors");
        }
        let mut mean = vec![0.0; f];
        for x in features {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; f * f];
        for x in features {
            for a in 0..f {
                let da = x[a] - mean[a];
                for b in a..f {
                    cov[a * f + b] += da * (x[b] - mean[b]);
                }
            }
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        for a in 0..f {
            for b in a..f {
                let v = cov[a * f + b] / denom;
                cov[a * f + b] = v;
                cov[b * f + a] = v;
            }
        }
        Self::new(mean, cov, n, feature_id)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn matrix(v: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, v)
}

/// Square root of a symmetric positive semidefinite matrix (row-major) via
/// eigendecomposition; negative eigenvalues are clamped to zero.
pub fn sqrtm_psd(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = matrix(m, n);
    a = (&a + a.transpose()) * 0.5;
    let eig = a.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let r = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = r[(i, j)];
        }
    }
    out
}

/// `Tr((Σ1 Σ2)^{1/2})`, through the symmetric form `(Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2}`.
fn trace_sqrt_product(a: &[f64], b: &[f64], n: usize) -> f64 {
    let ra = matrix(&sqrtm_psd(a, n), n);
    let mut m = &ra * matrix(b, n) * &ra;
    m = (&m + m.transpose()) * 0.5;
    m.symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`.
pub fn fd_proxy(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.feature_id != b.feature_id {
        bail!(
            Usage,
            "feature definitions differ: {} vs {}",
            a.feature_id,
            b.feature_id
        );
    }
    let f = a.dim();
    if b.dim() != f {
        bail!(Usage, "feature dimensions differ: {f} vs {}", b.dim());
    }
    if a.count < f + 1 || b.count < f + 1 {
        bail!(
            Usage,
            "need at least {} samples per set for {f} features",
            f + 1
        );
    }
    let dm: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr: f64 = (0..f).map(|i| a.cov[i * f + i] + b.cov[i * f + i]).sum();
    let fd = dm + tr - 2.0 * trace_sqrt_product(&a.cov, &b.cov, f);
    Ok(fd.max(0.0))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii2(set: &[Vec<f64>], k: usize) -> Vec<f64> {
    set.iter()
        .enumerate()
        .map(|(i, x)| {
            let mut d: Vec<f64> = set
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, y)| dist2(x, y))
                .collect();
            d.sort_by(|a, b| a.total_cmp(b));
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &[Vec<f64>], radii2: &[f64], queries: &[Vec<f64>]) -> f64 {
    let hit = queries
        .iter()
        .filter(|q| manifold.iter().zip(radii2).any(|(m, &r)| dist2(q, m) <= r))
        .count();
    hit as f64 / queries.len() as f64
}

/// k-NN manifold precision and recall. A point is covered when it lies in the
/// closed ball of some point of the other set, radius = distance to that
/// point's `k`-th nearest neighbour within its own set.
pub fn pr_proxy(real: &[Vec<f64>], generated: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        bail!(Usage, "k must be positive");
    }
    if real.len() < k + 1 || generated.len() < k + 1 {
        bail!(Usage, "need at least k + 1 = {} points per set", k + 1);
    }
    let precision = coverage(real, &knn_radii2(real, k), generated);
    let recall = coverage(generated, &knn_radii2(generated, k), real);
    Ok((precision, recall))
}
