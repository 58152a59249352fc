mod common;

use common::*;
use rand::Rng as _;
use sarlab::evaluation::{
    diff_maps, fd_proxy, nfe_report, pr_proxy, sqrtm_psd, FeatureMap, FeatureStats,
    FEATURE_PROJECTIONS,
};
use sarlab::generator::ClassLabel;
use sarlab::pyramid::{dequantize_map, Codebook, TokenMap};
use sarlab::rng::{stream, Stream};
use sarlab::sampling::{argmax, SamplerConfig};
use sarlab::training::{ssr_rollout, CsflTarget, Example, StepMetrics};
use sarlab::Grid;

fn gaussian_points(
    n: usize,
    dim: usize,
    shift: f64,
    r: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|d| r.random_range(-1.0..1.0) * (1.0 + d as f64 * 0.3) + shift)
                .collect()
        })
        .collect()
}

/// `‖Δμ‖² + Tr Σ1 + Tr Σ2 − 2 Tr (Σ1 Σ2)^{1/2}` with the square root of the
/// (non-symmetric) product taken by Denman-Beavers.
fn fd_oracle(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let f = a.dim();
    let dm: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let root = denman_beavers(&matmul(&a.cov, &b.cov, f), f);
    let tr = |m: &[f64]| (0..f).map(|i| m[i * f + i]).sum::<f64>();
    dm + tr(&a.cov) + tr(&b.cov) - 2.0 * tr(&root)
}

#[test]
fn matrix_root_agrees_with_denman_beavers() {
    let mut r = rng(1);
    for n in [1, 2, 5, 12] {
        let a = random_spd(n, 0.5, &mut r);
        let got = sqrtm_psd(&a, n);
        let want = denman_beavers(&a, n);
        assert!(max_abs(&got, &want) < 1e-6, "n = {n}");
        assert!(max_abs(&matmul(&got, &got, n), &a) < 1e-9);
    }
}

#[test]
fn fd_agrees_with_product_root_route() {
    let mut r = rng(2);
    for trial in 0..5 {
        let dim = 3 + trial;
        let a = FeatureStats::from_features(&gaussian_points(40, dim, 0.0, &mut r), "t").unwrap();
        let b = FeatureStats::from_features(&gaussian_points(40, dim, 0.3, &mut r), "t").unwrap();
        let got = fd_proxy(&a, &b).unwrap();
        let want = fd_oracle(&a, &b);
        assert!(
            (got - want).abs() < 1e-8 * (1.0 + want.abs()),
            "{got} vs {want}"
        );
    }
}

#[test]
fn fd_of_a_set_with_itself_is_zero() {
    let mut r = rng(3);
    let a = FeatureStats::from_features(&gaussian_points(60, 10, 0.5, &mut r), "t").unwrap();
    assert!(fd_proxy(&a, &a).unwrap().abs() < 1e-8);
}

#[test]
fn fd_closed_form_in_one_dimension() {
    // (0 − 1)² + 1 + 4 − 2·sqrt(1·4) = 2.
    let a = FeatureStats::new(vec![0.0], vec![1.0], 2, "x").unwrap();
    let b = FeatureStats::new(vec![1.0], vec![4.0], 2, "x").unwrap();
    assert_eq!(fd_proxy(&a, &b).unwrap(), 2.0);
}

#[test]
fn fd_is_invariant_under_rotations() {
    let mut r = rng(4);
    let dim = 6;
    let xa = gaussian_points(50, dim, 0.0, &mut r);
    let xb = gaussian_points(50, dim, 0.2, &mut r);
    // Gram-Schmidt on a random matrix.
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|a| a / norm).collect());
    }
    let rot = |x: &[Vec<f64>]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|p| {
                q.iter()
                    .map(|row| row.iter().zip(p).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    };
    let plain = fd_proxy(
        &FeatureStats::from_features(&xa, "t").unwrap(),
        &FeatureStats::from_features(&xb, "t").unwrap(),
    )
    .unwrap();
    let rotated = fd_proxy(
        &FeatureStats::from_features(&rot(&xa), "t").unwrap(),
        &FeatureStats::from_features(&rot(&xb), "t").unwrap(),
    )
    .unwrap();
    assert!((plain - rotated).abs() < 1e-9 * (1.0 + plain));
}

#[test]
fn fd_needs_more_samples_than_features() {
    let mut r = rng(5);
    let a = FeatureStats::from_features(&gaussian_points(4, 4, 0.0, &mut r), "t").unwrap();
    let b = FeatureStats::from_features(&gaussian_points(5, 4, 0.0, &mut r), "t").unwrap();
    assert!(fd_proxy(&a, &b).is_err());
    assert!(fd_proxy(&b, &b).is_ok());
}

fn pr_oracle(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> (f64, f64) {
    let d = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let radius = |set: &[Vec<f64>], i: usize| {
        let mut ds: Vec<f64> = (0..set.len())
            .filter(|&j| j != i)
            .map(|j| d(&set[i], &set[j]))
            .collect();
        ds.sort_by(f64::total_cmp);
        ds[k - 1]
    };
    let covered =
        |q: &[f64], set: &[Vec<f64>]| (0..set.len()).any(|i| d(q, &set[i]) <= radius(set, i));
    let p = fake.iter().filter(|q| covered(q, real)).count() as f64 / fake.len() as f64;
    let rc = real.iter().filter(|q| covered(q, fake)).count() as f64 / real.len() as f64;
    (p, rc)
}

#[test]
fn precision_recall_brute_force() {
    let mut r = rng(6);
    for shift in [0.0, 0.5, 1.5] {
        let real = gaussian_points(20, 2, 0.0, &mut r);
        let fake = gaussian_points(20, 2, shift, &mut r);
        assert_eq!(
            pr_proxy(&real, &fake, 3).unwrap(),
            pr_oracle(&real, &fake, 3)
        );
    }
    // Integer grid: many exact ties on the ball boundary.
    let real: Vec<Vec<f64>> = (0..20)
        .map(|i| vec![(i % 5) as f64, (i / 5) as f64])
        .collect();
    let fake: Vec<Vec<f64>> = (0..20)
        .map(|i| vec![(i % 4) as f64 + 1.0, (i / 4) as f64])
        .collect();
    assert_eq!(
        pr_proxy(&real, &fake, 3).unwrap(),
        pr_oracle(&real, &fake, 3)
    );
}

#[test]
fn features_are_seeded_and_shape_checked() {
    let fm = FeatureMap::new(4, 1, 0);
    assert_eq!(fm.dim(), FEATURE_PROJECTIONS + 1);
    assert_ne!(fm.id(), FeatureMap::new(4, 1, 1).id());
    let img = Grid::<f32>::filled(4, 1, 0.5);
    assert_eq!(
        fm.features(&img).unwrap(),
        FeatureMap::new(4, 1, 0).features(&img).unwrap()
    );
    assert!(fm.features(&Grid::<f32>::filled(3, 1, 0.5)).is_err());
}

#[test]
fn difference_maps_by_hand() {
    for vocab in [5, 0] {
        let cfg = config(&[1, 2, 3], 1, 8, 2, vocab, 2);
        let mut r = rng(7);
        let cb = (vocab > 0)
            .then(|| Codebook::new(5, 2, random_grid::<f64>(1, 10, &mut r).into_vec()).unwrap());
        let g = random_generator::<f64>(&cfg, 8, 0.5);
        let ex = Example::new(0, random_pyramid(&cfg.schedule, 2, &mut r), cb.as_ref()).unwrap();
        let mut s = stream(0, Stream::Sample, &[]);
        let trace = ssr_rollout(
            &g,
            &ex,
            ClassLabel::Class(0),
            &SamplerConfig::default(),
            cb.as_ref(),
            CsflTarget::Teacher,
            &mut s,
        )
        .unwrap();
        let dm = diff_maps(&trace, &ex, cb.as_ref()).unwrap();
        assert_eq!(dm.maps.len(), 2);
        for (k, map) in dm.maps.iter().enumerate() {
            let pred = &trace.sf_preds[k];
            let student = match &cb {
                Some(cb) => {
                    let idx = (0..pred.positions())
                        .map(|p| argmax(pred.vector(p)))
                        .collect();
                    dequantize_map(&TokenMap::new(pred.side(), idx).unwrap(), cb).unwrap()
                }
                None => pred.clone(),
            };
            let gt = ex.sources.map(k + 1);
            for p in 0..gt.positions() {
                let want = gt
                    .vector(p)
                    .iter()
                    .zip(student.vector(p))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / 2.0;
                assert!((map.vector(p)[0] - want).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn nfe_rows_aggregate_per_scheme() {
    let rec = |scheme: &str, nfe: usize| StepMetrics {
        step: 0,
        scheme: scheme.into(),
        loss: 0.0,
        loss_tf: 0.0,
        loss_csf: 0.0,
        per_scale_tf: vec![],
        nfe,
    };
    let rows = nfe_report(&[
        rec("sf_alternate", 1),
        rec("sf_alternate", 4),
        rec("sar", 2),
        rec("sf_alternate", 1),
    ]);
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].steps, rows[0].min, rows[0].max), (3, 1, 4));
    assert!((rows[0].mean - 2.0).abs() < 1e-12);
    assert_eq!((rows[1].scheme.as_str(), rows[1].mean), ("sar", 2.0));
}
