mod common;

use common::*;
use sarlab::generator::{ClassLabel, Generator, GeneratorConfig, PositionalMode};
use sarlab::pyramid::{shift_inputs, ScaleSchedule};
use sarlab::Grid;

/// Straightforward reference transformer: dense `[len x len]` score matrix with
/// `-inf` on disallowed pairs, exact GELU-tanh, textbook layer norm.
fn reference_forward(g: &Generator<f64>, label: usize, inputs: &[Grid<f64>]) -> Vec<Vec<f64>> {
    let cfg = g.config();
    let st = g.state();
    let t = |n: &str| st.tensor(n).unwrap().to_vec();
    let (w, d, heads) = (cfg.width, cfg.latent_dim, cfg.heads);
    let hd = w / heads;
    let sched = cfg.schedule.resolutions().to_vec();

    // Slot list: start, then each scale in raster order.
    let mut slot_scale = vec![0usize];
    let mut slot_local = vec![0usize];
    for (s, &h) in sched.iter().enumerate() {
        for k in 0..h * h {
            slot_scale.push(s + 1);
            slot_local.push(k);
        }
    }
    let len = slot_scale.len();
    let pos = t("pos");
    let class = t("tok.class");
    let start = t("tok.start");
    let mut x = vec![vec![0.0; w]; len];
    for i in 0..len {
        let s = slot_scale[i];
        let prow = match cfg.positional {
            PositionalMode::PerPosition => i,
            PositionalMode::PerScale => s,
        };
        for c in 0..w {
            x[i][c] = pos[prow * w + c];
        }
        if s <= 1 {
            for c in 0..w {
                x[i][c] += start[c] + class[label * w + c];
            }
        }
        if s >= 2 {
            let iw = t(&format!("in.{}.w", s - 1));
            let ib = t(&format!("in.{}.b", s - 1));
            let u = inputs[s - 2].vector(slot_local[i]);
            for c in 0..w {
                x[i][c] += ib[c] + (0..d).map(|j| u[j] * iw[j * w + c]).sum::<f64>();
            }
        }
    }
    let ln = |v: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
        v.iter()
            .enumerate()
            .map(|(k, a)| (a - m) / (var + 1e-5).sqrt() * g[k] + b[k])
            .collect()
    };
    let lin = |v: &[f64], wt: &[f64], b: &[f64], n_out: usize| -> Vec<f64> {
        (0..n_out)
            .map(|o| {
                b[o] + v
                    .iter()
                    .enumerate()
                    .map(|(k, a)| a * wt[k * n_out + o])
                    .sum::<f64>()
            })
            .collect()
    };
    let gelu = |v: f64| {
        0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
    };
    for l in 0..cfg.depth {
        let p = |n: &str| t(&format!("blk.{l}.{n}"));
        let a: Vec<Vec<f64>> = x.iter().map(|v| ln(v, &p("ln1.g"), &p("ln1.b"))).collect();
        let qkv: Vec<Vec<f64>> = a
            .iter()
            .map(|v| lin(v, &p("attn.qkv.w"), &p("attn.qkv.b"), 3 * w))
            .collect();
        let mut ctx = vec![vec![0.0; w]; len];
        for h in 0..heads {
            for i in 0..len {
                let scores: Vec<f64> = (0..len)
                    .map(|j| {
                        if slot_scale[j] <= slot_scale[i]
                            || (slot_scale[i] == 0 && slot_scale[j] == 0)
                        {
                            (0..hd)
                                .map(|c| qkv[i][h * hd + c] * qkv[j][w + h * hd + c])
                                .sum::<f64>()
                                / (hd as f64).sqrt()
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..len {
                    for c in 0..hd {
                        ctx[i][h * hd + c] += e[j] / z * qkv[j][2 * w + h * hd + c];
                    }
                }
            }
        }
        for i in 0..len {
            let o = lin(&ctx[i], &p("attn.out.w"), &p("attn.out.b"), w);
            for c in 0..w {
                x[i][c] += o[c];
            }
            let m = ln(&x[i], &p("ln2.g"), &p("ln2.b"));
            let f: Vec<f64> = lin(&m, &p("mlp.fc.w"), &p("mlp.fc.b"), cfg.mlp_hidden())
                .into_iter()
                .map(gelu)
                .collect();
            let o = lin(&f, &p("mlp.proj.w"), &p("mlp.proj.b"), w);
            for c in 0..w {
                x[i][c] += o[c];
            }
        }
    }
    (1..len)
        .map(|i| {
            lin(
                &ln(&x[i], &t("ln_f.g"), &t("ln_f.b")),
                &t("head.w"),
                &t("head.b"),
                cfg.output_dim(),
            )
        })
        .collect()
}

#[test]
fn forward_matches_dense_reference() {
    for (case, positional) in [PositionalMode::PerPosition, PositionalMode::PerScale]
        .into_iter()
        .enumerate()
    {
        let mut cfg = config(&[1, 2, 3], 2, 8, 2, 5, 3);
        cfg.positional = positional;
        let g = random_generator::<f64>(&cfg, 11 + case as u64, 0.5);
        let mut r = rng(3);
        let pyr = random_pyramid(&cfg.schedule, 3, &mut r);
        let preds = g.forward_tf(1, &pyr, false).unwrap();
        let inputs = shift_inputs(pyr.maps(), &cfg.schedule).unwrap();
        let want = reference_forward(&g, 1, &inputs);
        let got: Vec<f64> = preds.iter().flat_map(|p| p.as_slice().to_vec()).collect();
        let want: Vec<f64> = want.concat();
        assert!(
            max_abs(&got, &want) < 1e-10,
            "deviation {}",
            max_abs(&got, &want)
        );
    }
}

#[test]
fn prefix_runs_are_exact_slices_of_the_full_run() {
    let cfg = config(&[1, 2, 3, 4], 2, 16, 4, 6, 4);
    for seed in 0..5 {
        let g = random_generator::<f32>(&cfg, seed, 0.3);
        let mut r = rng(100 + seed);
        let pyr = random_pyramid(&cfg.schedule, 4, &mut r);
        let full = g.forward_tf(2, &pyr, false).unwrap();
        let inputs = shift_inputs(pyr.maps(), &cfg.schedule).unwrap();
        for k in 1..=4 {
            let p = g.forward_prefix(2, &inputs, k, false).unwrap();
            assert_eq!(p.as_slice(), full[k - 1].as_slice(), "scale {k}");
        }
    }
}

#[test]
fn later_scales_never_influence_earlier_predictions() {
    let cfg = config(&[1, 2, 3, 4], 2, 16, 4, 6, 4);
    let g = random_generator::<f64>(&cfg, 5, 0.3);
    let mut r = rng(9);
    let pyr = random_pyramid(&cfg.schedule, 4, &mut r);
    let inputs = shift_inputs(pyr.maps(), &cfg.schedule).unwrap();
    let base = g.forward(ClassLabel::Class(0), &inputs, 4).unwrap();
    for j in 0..inputs.len() {
        let mut pert = inputs.clone();
        pert[j] = random_grid(pert[j].side(), 4, &mut r);
        let out = g.forward(ClassLabel::Class(0), &pert, 4).unwrap();
        // inputs[j] feeds scale j + 2, i.e. prediction index j + 1.
        for i in 0..=j {
            assert_eq!(out[i], base[i]);
        }
        assert_ne!(out[j + 1], base[j + 1]);
    }
}

#[test]
fn per_scale_embeddings_make_scales_permutation_equivariant() {
    let mut cfg = config(&[1, 2, 3], 2, 8, 2, 5, 3);
    cfg.positional = PositionalMode::PerScale;
    let g = random_generator::<f64>(&cfg, 21, 0.5);
    let mut r = rng(4);
    let pyr = random_pyramid(&cfg.schedule, 3, &mut r);
    let inputs = shift_inputs(pyr.maps(), &cfg.schedule).unwrap();
    let base = g.forward(ClassLabel::Class(2), &inputs, 3).unwrap();
    // Reverse the raster order of the scale-3 input.
    let src = &inputs[1];
    let n = src.positions();
    let flipped = Grid::from_fn(src.side(), 3, |row, col, ch| {
        let k = n - 1 - (row * src.side() + col);
        src.vector(k)[ch]
    });
    let permuted = vec![inputs[0].clone(), flipped];
    let out = g.forward(ClassLabel::Class(2), &permuted, 3).unwrap();
    assert!(out[0].max_abs_diff(&base[0]) == 0.0);
    assert!(out[1].max_abs_diff(&base[1]) == 0.0);
    for k in 0..n {
        let a = out[2].vector(k);
        let b = base[2].vector(n - 1 - k);
        assert!(max_abs(a, b) < 1e-12);
    }
}

#[test]
fn fresh_model_predicts_uniform_logits() {
    let cfg = config(&[1, 2], 1, 8, 2, 7, 3);
    let g = Generator::<f32>::new(cfg.clone()).unwrap();
    let mut r = rng(1);
    let pyr = random_pyramid(&cfg.schedule, 3, &mut r);
    for p in g.forward_tf(0, &pyr, false).unwrap() {
        assert!(p.as_slice().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn parameter_count_matches_hand_count() {
    // width 8, heads 2, depth 2, vocab 5, latent 3, classes 3, schedule [1,2] (5 tokens + start).
    let cfg = config(&[1, 2], 2, 8, 2, 5, 3);
    let embeds = 8 + 4 * 8 + 8 + 6 * 8 + 2 * (3 * 8 + 8);
    let layer = 8 + 8 + 8 * 24 + 24 + 8 * 8 + 8 + 8 + 8 + 8 * 32 + 32 + 32 * 8 + 8;
    let head = 8 + 8 + 8 * 5 + 5;
    let total = embeds + 2 * layer + head;
    assert_eq!(cfg.param_count(), total);
    let g = Generator::<f32>::new(cfg).unwrap();
    assert_eq!(g.state().len(), total);

    let mut per_scale = config(&[1, 2], 2, 8, 2, 5, 3);
    per_scale.positional = PositionalMode::PerScale;
    assert_eq!(per_scale.param_count(), total - 6 * 8 + 3 * 8);
}

#[test]
fn counter_tracks_every_forward() {
    let cfg = config(&[1, 2, 3], 1, 8, 2, 5, 3);
    let g = Generator::<f32>::new(cfg.clone()).unwrap();
    let mut r = rng(2);
    let pyr = random_pyramid(&cfg.schedule, 3, &mut r);
    g.forward_tf(0, &pyr, false).unwrap();
    let inputs = shift_inputs(pyr.maps(), &cfg.schedule).unwrap();
    g.forward_prefix(0, &inputs, 2, true).unwrap();
    g.forward_cached(ClassLabel::Null, &inputs, None, 3)
        .unwrap();
    assert_eq!(g.nfe(), 3);
}

fn check_backward(cfg: &GeneratorConfig, seed: u64) {
    let g = random_generator::<f64>(cfg, seed, 0.4);
    let mut r = rng(seed + 1);
    let pyr = random_pyramid(&cfg.schedule, cfg.latent_dim, &mut r);
    let inputs = shift_inputs(pyr.maps(), &cfg.schedule).unwrap();
    let n = cfg.schedule.len();
    let (preds, cache) = g
        .forward_cached(ClassLabel::Class(1), &inputs, None, n)
        .unwrap();
    let dy: Vec<Grid<f64>> = preds
        .iter()
        .map(|p| random_grid(p.side(), p.channels(), &mut r))
        .collect();
    let mut grads = vec![0.0; g.state().len()];
    g.backward(&cache, &dy, &mut grads).unwrap();
    let x0 = g.state().values().to_vec();
    let numeric = numeric_grad(&x0, 1e-5, |p| {
        let mut h = g.clone();
        h.state_mut().values_mut().copy_from_slice(p);
        let out = h.forward(ClassLabel::Class(1), &inputs, n).unwrap();
        out.iter()
            .zip(&dy)
            .map(|(o, d)| {
                o.as_slice()
                    .iter()
                    .zip(d.as_slice())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    });
    let err = max_rel_err(&grads, &numeric, 1e-6);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn backward_matches_finite_differences() {
    check_backward(&config(&[1, 2], 2, 8, 2, 4, 2), 31);
    let mut cont = config(&[1, 2], 1, 4, 2, 0, 3);
    cont.positional = PositionalMode::PerScale;
    check_backward(&cont, 32);
}

#[test]
fn masked_keys_do_not_leak_across_labels() {
    // Class and null conditioning differ only through the class row.
    let cfg = config(&[1, 2], 1, 8, 2, 4, 2);
    let g = random_generator::<f64>(&cfg, 3, 0.5);
    let mut r = rng(0);
    let pyr = random_pyramid(&cfg.schedule, 2, &mut r);
    let a = g.forward_tf(0, &pyr, false).unwrap();
    let b = g.forward_tf(0, &pyr, true).unwrap();
    assert!(a[0].max_abs_diff(&b[0]) > 0.0);
    let _ = ScaleSchedule::new(vec![1]).unwrap();
}
