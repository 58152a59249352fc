//! Area downsampling and half-pixel bilinear upsampling.
//!
//! Both operate separably. Area weights are integer overlap lengths measured in
//! units of `1/out`, and the weighted mean is accumulated as an offset from the
//! first tap, so a constant window reproduces its value exactly. Bilinear uses
//! `a + w·(b − a)` for the same reason.

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;

/// For each output cell, the input taps and their integer overlap lengths
/// (which sum to `input`).
fn area_taps(input: usize, output: usize) -> Vec<Vec<(usize, usize)>> {
    (0..output)
        .map(|o| {
            // Output cell o spans [o*input, (o+1)*input) in units of 1/output.
            let lo = o * input;
            let hi = (o + 1) * input;
            let first = lo / output;
            let last = (hi - 1) / output;
            (first..=last)
                .map(|p| {
                    let plo = p * output;
                    let phi = (p + 1) * output;
                    (p, hi.min(phi) - lo.max(plo))
                })
                .filter(|&(_, w)| w > 0)
                .collect()
        })
        .collect()
}

/// Interpolation source for each output coordinate: `(i0, i1, frac)`.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w)
        })
        .collect()
}

/// Resamples along rows then columns with a per-axis kernel.
fn separable<S: Scalar>(
    map: &Grid<S>,
    target: usize,
    mut kernel: impl FnMut(&dyn Fn(usize) -> S, usize) -> S,
) -> Grid<S> {
    let (side, ch) = (map.side(), map.channels());
    // Resample columns: side x target
    let mut tmp = vec![S::zero(); side * target * ch];
    for r in 0..side {
        for c in 0..ch {
            for o in 0..target {
                let at = |i: usize| map.get(r, i, c);
                tmp[(r * target + o) * ch + c] = kernel(&at, o);
            }
        }
    }
    let mut out = Grid::zeros(target, ch);
    for oc in 0..target {
        for c in 0..ch {
            for o in 0..target {
                let at = |i: usize| tmp[(i * target + oc) * ch + c];
                out.set(o, oc, c, kernel(&at, o));
            }
        }
    }
    out
}

/// Area (block-mean) downsampling to `target × target`; supports non-integer ratios.
pub fn area_downsample<S: Scalar>(map: &Grid<S>, target: usize) -> Result<Grid<S>> {
    let side = map.side();
    if target == 0 || target > side {
        bail!(
            Usage,
            "area_downsample: target {target} must be in [1, {side}]"
        );
    }
    if target == side {
        return Ok(map.clone());
    }
    let taps = area_taps(side, target);
    let norm = S::of(side as f64);
    Ok(separable(map, target, |at, o| {
        let t = &taps[o];
        let base = at(t[0].0);
        let mut acc = S::zero();
        for &(i, w) in t {
            acc += S::of(w as f64) * (at(i) - base);
        }
        base + acc / norm
    }))
}

/// Bilinear upsampling with the half-pixel-center convention
/// (`src = (dst + 0.5)·in/out − 0.5`, clamped to the edge). Identity when `target == side`.
pub fn upsample<S: Scalar>(map: &Grid<S>, target: usize) -> Result<Grid<S>> {
    let side = map.side();
    if target < side {
        bail!(
            Usage,
            "upsample: target {target} is smaller than source {side}; use area_downsample"
        );
    }
    if target == side {
        return Ok(map.clone());
    }
    let taps: Vec<(usize, usize, S)> = bilinear_taps(side, target)
        .into_iter()
        .map(|(a, b, w)| (a, b, S::of(w)))
        .collect();
    Ok(separable(map, target, |at, o| {
        let (i0, i1, w) = taps[o];
        let a = at(i0);
        a + w * (at(i1) - a)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn area_taps_sum_to_input() {
        for (i, o) in [(16, 12), (4, 3), (7, 2), (5, 5), (9, 1)] {
            for taps in area_taps(i, o) {
                assert_eq!(taps.iter().map(|t| t.1).sum::<usize>(), i);
            }
        }
    }

    #[test]
    fn block_mean_oracle() {
        let map = Grid::<f64>::from_fn(4, 2, |r, c, ch| {
            ((r * 7 + c * 3 + ch * 11) % 13) as f64 * 0.37 - 1.0
        });
        let one = area_downsample(&map, 1).unwrap();
        let two = area_downsample(&map, 2).unwrap();
        for ch in 0..2 {
            let mean: f64 = (0..4)
                .flat_map(|r| (0..4).map(move |c| (r, c)))
                .map(|(r, c)| map.get(r, c, ch))
                .sum::<f64>()
                / 16.0;
            assert!((one.get(0, 0, ch) - mean).abs() < 1e-12);
            for qr in 0..2 {
                for qc in 0..2 {
                    let q: f64 = (0..2)
                        .flat_map(|dr| (0..2).map(move |dc| (dr, dc)))
                        .map(|(dr, dc)| map.get(2 * qr + dr, 2 * qc + dc, ch))
                        .sum::<f64>()
                        / 4.0;
                    assert!((two.get(qr, qc, ch) - q).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fractional_area_matches_integral() {
        // 4 -> 3: output cell 1 covers input [4/3, 8/3): 2/3 of pixel 1 and 2/3 of pixel 2.
        let map = Grid::<f64>::from_fn(4, 1, |r, c, _| (r * 4 + c) as f64);
        let d = area_downsample(&map, 3).unwrap();
        let row = |r: usize| -> f64 {
            // column-integrated at output col 1
            let v = |c: usize| map.get(r, c, 0);
            (v(1) * (2.0 / 3.0) + v(2) * (2.0 / 3.0)) / (4.0 / 3.0)
        };
        let expected = (row(1) * (2.0 / 3.0) + row(2) * (2.0 / 3.0)) / (4.0 / 3.0);
        assert!((d.get(1, 1, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn bilinear_ramp_hand_weights() {
        // 2x2 -> 4x4: per-axis weights on a,b are (1,0), (.75,.25), (.25,.75), (0,1).
        let vals = [[1.0, 3.0], [5.0, 11.0]];
        let map = Grid::<f64>::from_fn(2, 1, |r, c, _| vals[r][c]);
        let up = upsample(&map, 4).unwrap();
        let w = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            for c in 0..4 {
                let top = vals[0][0] * (1.0 - w[c]) + vals[0][1] * w[c];
                let bot = vals[1][0] * (1.0 - w[c]) + vals[1][1] * w[c];
                let e = top * (1.0 - w[r]) + bot * w[r];
                assert!(
                    (up.get(r, c, 0) - e).abs() < 1e-12,
                    "({r},{c}) {} vs {e}",
                    up.get(r, c, 0)
                );
            }
        }
    }

    #[test]
    fn identity_cases_are_bit_exact() {
        let map = Grid::<f32>::from_fn(3, 2, |r, c, ch| {
            (r as f32 - 0.3) * (c as f32 + 0.7) + ch as f32
        });
        assert_eq!(upsample(&map, 3).unwrap(), map);
        assert_eq!(area_downsample(&map, 3).unwrap(), map);
        assert!(upsample(&map, 2).is_err());
        assert!(area_downsample(&map, 4).is_err());
    }

    proptest! {
        #[test]
        fn constant_maps_survive_up_then_down(v in -1e6f64..1e6, from in 1usize..6, extra in 0usize..7) {
            let to = from + extra;
            let map = Grid::<f64>::filled(from, 3, v);
            let up = upsample(&map, to).unwrap();
            prop_assert!(up.as_slice().iter().all(|&x| x == v));
            let down = area_downsample(&up, from).unwrap();
            prop_assert!(down.as_slice().iter().all(|&x| x == v));
        }

        #[test]
        fn area_downsample_is_linear(k in -4.0f64..4.0, seed in 0u64..1000) {
            let map = Grid::<f64>::from_fn(6, 2, |r, c, ch| (((r * 31 + c * 17 + ch * 5) as u64 ^ seed) % 97) as f64 / 9.0);
            let a = area_downsample(&map.scaled(k), 4).unwrap();
            let b = area_downsample(&map, 4).unwrap().scaled(k);
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }
    }
}
