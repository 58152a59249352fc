//! Forward and backward passes of the block-causal transformer.
//!
//! Weights are stored `[in][out]` so the forward is a sequence of `axpy`s and
//! the input-gradient is a sequence of dots. Each query attends only to keys
//! before the end of its own scale; masked keys are skipped rather than added
//! as zeros, which makes a prefix run bit-identical to the matching slice of
//! a full run.

use super::layout::SequenceLayout;
use super::params::{LayerOffsets, Offsets};
use super::{ClassLabel, GeneratorConfig, MaskedScale1, PositionalMode};
use crate::grid::Grid;
use crate::scalar::{axpy, dot, Scalar};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    len: usize,
    scales: usize,
    class_row: usize,
    inputs: Vec<Grid<S>>,
    masked: Option<MaskedScale1<S>>,
    layers: Vec<LayerCache<S>>,
    xhat_f: Vec<S>,
    rstd_f: Vec<S>,
    y_f: Vec<S>,
}

impl<S> ForwardCache<S> {
    pub fn scales(&self) -> usize {
        self.scales
    }
}

#[derive(Clone, Debug)]
struct LayerCache<S> {
    xhat1: Vec<S>,
    rstd1: Vec<S>,
    a: Vec<S>,
    qkv: Vec<S>,
    probs: Vec<S>,
    ctx: Vec<S>,
    xhat2: Vec<S>,
    rstd2: Vec<S>,
    m: Vec<S>,
    fc: Vec<S>,
    g: Vec<S>,
}

pub(crate) struct Model<'a, S> {
    pub config: &'a GeneratorConfig,
    pub layout: &'a SequenceLayout,
    pub off: &'a Offsets,
    pub params: &'a [S],
}

fn linear_fwd<S: Scalar>(
    x: &[S],
    rows: usize,
    w: &[S],
    b: &[S],
    n_in: usize,
    n_out: usize,
    y: &mut [S],
) {
    for r in 0..rows {
        let yr = &mut y[r * n_out..(r + 1) * n_out];
        yr.copy_from_slice(b);
        let xr = &x[r * n_in..(r + 1) * n_in];
        for (i, &xi) in xr.iter().enumerate() {
            axpy(xi, &w[i * n_out..(i + 1) * n_out], yr);
        }
    }
}

/// Accumulates `dw`, `db` and writes `dx` (if given) for `y = x·w + b`.
#[allow(clippy::too_many_arguments)]
fn linear_bwd<S: Scalar>(
    x: &[S],
    dy: &[S],
    rows: usize,
    w: &[S],
    n_in: usize,
    n_out: usize,
    dx: Option<&mut [S]>,
    dw: &mut [S],
    db: &mut [S],
) {
    for r in 0..rows {
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        for (d, &g) in db.iter_mut().zip(dyr) {
            *d += g;
        }
        let xr = &x[r * n_in..(r + 1) * n_in];
        for (i, &xi) in xr.iter().enumerate() {
            axpy(xi, dyr, &mut dw[i * n_out..(i + 1) * n_out]);
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * n_out..(r + 1) * n_out];
            for i in 0..n_in {
                dx[r * n_in + i] = dot(dyr, &w[i * n_out..(i + 1) * n_out]);
            }
        }
    }
}

fn layer_norm_fwd<S: Scalar>(
    x: &[S],
    rows: usize,
    n: usize,
    g: &[S],
    b: &[S],
    xhat: &mut [S],
    rstd: &mut [S],
    y: &mut [S],
) {
    let inv_n = S::one() / S::of(n as f64);
    let eps = S::of(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mean = xr.iter().copied().sum::<S>() * inv_n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..n {
            let h = (xr[i] - mean) * rs;
            xhat[r * n + i] = h;
            y[r * n + i] = h * g[i] + b[i];
        }
    }
}

/// Adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_bwd<S: Scalar>(
    dy: &[S],
    rows: usize,
    n: usize,
    g: &[S],
    xhat: &[S],
    rstd: &[S],
    dx: &mut [S],
    dg: &mut [S],
    db: &mut [S],
) {
    let inv_n = S::one() / S::of(n as f64);
    let mut dxhat = vec![S::zero(); n];
    for r in 0..rows {
        let dyr = &dy[r * n..(r + 1) * n];
        let xh = &xhat[r * n..(r + 1) * n];
        let mut mean_d = S::zero();
        let mut mean_dx = S::zero();
        for i in 0..n {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d *= inv_n;
        mean_dx *= inv_n;
        for i in 0..n {
            dx[r * n + i] += rstd[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
}

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let t = (S::of(GELU_C) * (x + S::of(GELU_A) * x * x * x)).tanh();
    half * x * (S::one() + t)
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

impl<'a, S: Scalar> Model<'a, S> {
    fn p(&self, r: &std::ops::Range<usize>) -> &'a [S] {
        &self.params[r.clone()]
    }

    fn pos_row(&self, slot: usize) -> usize {
        match self.config.positional {
            PositionalMode::PerPosition => slot,
            PositionalMode::PerScale => self.layout.positions()[slot].scale,
        }
    }

    fn embed(
        &self,
        class_row: usize,
        inputs: &[Grid<S>],
        masked: Option<&MaskedScale1<S>>,
        len: usize,
    ) -> Vec<S> {
        let w = self.config.width;
        let d = self.config.latent_dim;
        let pos = self.p(&self.off.pos);
        let start = self.p(&self.off.start);
        let class = &self.p(&self.off.class)[class_row * w..(class_row + 1) * w];
        let mut x = vec![S::zero(); len * w];
        for slot in 0..len {
            let xr = &mut x[slot * w..(slot + 1) * w];
            let pr = self.pos_row(slot);
            xr.copy_from_slice(&pos[pr * w..(pr + 1) * w]);
            let s = self.layout.positions()[slot].scale;
            if s <= 1 {
                axpy(S::one(), start, xr);
                axpy(S::one(), class, xr);
            }
            if s == 1 {
                if let Some(m) = masked {
                    let k = slot - self.layout.scale_range(1).start;
                    if m.masked[k] {
                        axpy(S::one(), self.p(&self.off.mask), xr);
                    } else {
                        self.project(0, m.tokens.vector(k), xr, d);
                    }
                }
            } else if s >= 2 {
                let k = slot - self.layout.scale_range(s).start;
                self.project(s - 1, inputs[s - 2].vector(k), xr, d);
            }
        }
        x
    }

    fn project(&self, scale: usize, u: &[S], xr: &mut [S], d: usize) {
        let w = self.config.width;
        let wt = self.p(&self.off.in_w[scale]);
        axpy(S::one(), self.p(&self.off.in_b[scale]), xr);
        for i in 0..d {
            axpy(u[i], &wt[i * w..(i + 1) * w], xr);
        }
    }

    /// Runs the prefix covering scales `1..=scales` and returns one prediction grid per scale.
    pub fn forward(
        &self,
        label: ClassLabel,
        inputs: &[Grid<S>],
        masked: Option<&MaskedScale1<S>>,
        scales: usize,
        keep: bool,
    ) -> (Vec<Grid<S>>, Option<ForwardCache<S>>) {
        let cfg = self.config;
        let (w, heads) = (cfg.width, cfg.heads);
        let hid = cfg.mlp_hidden();
        let len = self.layout.prefix_len(scales);
        let class_row = label.row(cfg.classes);
        let mut x = self.embed(class_row, inputs, masked, len);
        let mut layers = Vec::with_capacity(if keep { cfg.depth } else { 0 });
        for lo in &self.off.layers {
            let mut c = LayerCache {
                xhat1: vec![S::zero(); len * w],
                rstd1: vec![S::zero(); len],
                a: vec![S::zero(); len * w],
                qkv: vec![S::zero(); len * 3 * w],
                probs: vec![S::zero(); heads * len * len],
                ctx: vec![S::zero(); len * w],
                xhat2: vec![S::zero(); len * w],
                rstd2: vec![S::zero(); len],
                m: vec![S::zero(); len * w],
                fc: vec![S::zero(); len * hid],
                g: vec![S::zero(); len * hid],
            };
            layer_norm_fwd(
                &x,
                len,
                w,
                self.p(&lo.ln1_g),
                self.p(&lo.ln1_b),
                &mut c.xhat1,
                &mut c.rstd1,
                &mut c.a,
            );
            linear_fwd(
                &c.a,
                len,
                self.p(&lo.qkv_w),
                self.p(&lo.qkv_b),
                w,
                3 * w,
                &mut c.qkv,
            );
            self.attention(&c.qkv, len, &mut c.probs, &mut c.ctx);
            let mut o = vec![S::zero(); len * w];
            linear_fwd(
                &c.ctx,
                len,
                self.p(&lo.out_w),
                self.p(&lo.out_b),
                w,
                w,
                &mut o,
            );
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += *oi;
            }
            layer_norm_fwd(
                &x,
                len,
                w,
                self.p(&lo.ln2_g),
                self.p(&lo.ln2_b),
                &mut c.xhat2,
                &mut c.rstd2,
                &mut c.m,
            );
            linear_fwd(
                &c.m,
                len,
                self.p(&lo.fc_w),
                self.p(&lo.fc_b),
                w,
                hid,
                &mut c.fc,
            );
            for (gi, fi) in c.g.iter_mut().zip(&c.fc) {
                *gi = gelu(*fi);
            }
            linear_fwd(
                &c.g,
                len,
                self.p(&lo.proj_w),
                self.p(&lo.proj_b),
                hid,
                w,
                &mut o,
            );
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += *oi;
            }
            if keep {
                layers.push(c);
            }
        }
        let mut xhat_f = vec![S::zero(); len * w];
        let mut rstd_f = vec![S::zero(); len];
        let mut y_f = vec![S::zero(); len * w];
        layer_norm_fwd(
            &x,
            len,
            w,
            self.p(&self.off.lnf_g),
            self.p(&self.off.lnf_b),
            &mut xhat_f,
            &mut rstd_f,
            &mut y_f,
        );
        let out_dim = cfg.output_dim();
        let mut out = vec![S::zero(); len * out_dim];
        // The start slot has no prediction; compute rows 1.. only.
        linear_fwd(
            &y_f[w..],
            len - 1,
            self.p(&self.off.head_w),
            self.p(&self.off.head_b),
            w,
            out_dim,
            &mut out[out_dim..],
        );
        let preds = (1..=scales)
            .map(|s| {
                let r = self.layout.scale_range(s);
                let side = cfg.schedule.side(s - 1);
                Grid::from_vec(
                    side,
                    out_dim,
                    out[r.start * out_dim..r.end * out_dim].to_vec(),
                )
                .expect("shape")
            })
            .collect();
        let cache = keep.then(|| ForwardCache {
            len,
            scales,
            class_row,
            inputs: inputs[..scales.saturating_sub(1)].to_vec(),
            masked: masked.cloned(),
            layers,
            xhat_f,
            rstd_f,
            y_f,
        });
        (preds, cache)
    }

    fn attention(&self, qkv: &[S], len: usize, probs: &mut [S], ctx: &mut [S]) {
        let w = self.config.width;
        let heads = self.config.heads;
        let hd = w / heads;
        let scale = S::one() / S::of(hd as f64).sqrt();
        for h in 0..heads {
            for i in 0..len {
                let end = self.layout.key_end(i);
                let q = &qkv[i * 3 * w + h * hd..i * 3 * w + (h + 1) * hd];
                let row = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                let mut max = S::neg_infinity();
                for j in 0..end {
                    let k = &qkv[j * 3 * w + w + h * hd..j * 3 * w + w + (h + 1) * hd];
                    let s = dot(q, k) * scale;
                    row[j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut sum = S::zero();
                for v in &mut row[..end] {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in &mut row[..end] {
                    *v /= sum;
                }
                let c = &mut ctx[i * w + h * hd..i * w + (h + 1) * hd];
                c.iter_mut().for_each(|v| *v = S::zero());
                for j in 0..end {
                    let v = &qkv[j * 3 * w + 2 * w + h * hd..j * 3 * w + 2 * w + (h + 1) * hd];
                    axpy(row[j], v, c);
                }
            }
        }
    }

    /// Accumulates parameter gradients for upstream prediction gradients `d_out` (one grid per scale).
    pub fn backward(&self, cache: &ForwardCache<S>, d_out: &[Grid<S>], grads: &mut [S]) {
        let cfg = self.config;
        let (w, heads) = (cfg.width, cfg.heads);
        let hid = cfg.mlp_hidden();
        let len = cache.len;
        let out_dim = cfg.output_dim();
        let mut dout = vec![S::zero(); len * out_dim];
        for (s, g) in d_out.iter().enumerate().take(cache.scales) {
            let r = self.layout.scale_range(s + 1);
            dout[r.start * out_dim..r.end * out_dim].copy_from_slice(g.as_slice());
        }
        let mut dyf = vec![S::zero(); len * w];
        {
            let (dw, db) = split2(grads, &self.off.head_w, &self.off.head_b);
            linear_bwd(
                &cache.y_f[w..],
                &dout[out_dim..],
                len - 1,
                self.p(&self.off.head_w),
                w,
                out_dim,
                Some(&mut dyf[w..]),
                dw,
                db,
            );
        }
        let mut dx = vec![S::zero(); len * w];
        {
            let (dg, db) = split2(grads, &self.off.lnf_g, &self.off.lnf_b);
            layer_norm_bwd(
                &dyf,
                len,
                w,
                self.p(&self.off.lnf_g),
                &cache.xhat_f,
                &cache.rstd_f,
                &mut dx,
                dg,
                db,
            );
        }
        for (lo, c) in self.off.layers.iter().zip(&cache.layers).rev() {
            self.layer_backward(lo, c, len, w, heads, hid, &mut dx, grads);
        }
        self.embed_backward(cache, &dx, grads);
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        lo: &LayerOffsets,
        c: &LayerCache<S>,
        len: usize,
        w: usize,
        heads: usize,
        hid: usize,
        dx: &mut [S],
        grads: &mut [S],
    ) {
        // MLP branch
        let mut dg = vec![S::zero(); len * hid];
        {
            let (dw, db) = split2(grads, &lo.proj_w, &lo.proj_b);
            linear_bwd(
                &c.g,
                dx,
                len,
                self.p(&lo.proj_w),
                hid,
                w,
                Some(&mut dg),
                dw,
                db,
            );
        }
        for (d, f) in dg.iter_mut().zip(&c.fc) {
            *d *= gelu_grad(*f);
        }
        let mut dm = vec![S::zero(); len * w];
        {
            let (dw, db) = split2(grads, &lo.fc_w, &lo.fc_b);
            linear_bwd(
                &c.m,
                &dg,
                len,
                self.p(&lo.fc_w),
                w,
                hid,
                Some(&mut dm),
                dw,
                db,
            );
        }
        {
            let (dgam, dbet) = split2(grads, &lo.ln2_g, &lo.ln2_b);
            layer_norm_bwd(
                &dm,
                len,
                w,
                self.p(&lo.ln2_g),
                &c.xhat2,
                &c.rstd2,
                dx,
                dgam,
                dbet,
            );
        }
        // Attention branch
        let mut dctx = vec![S::zero(); len * w];
        {
            let (dw, db) = split2(grads, &lo.out_w, &lo.out_b);
            linear_bwd(
                &c.ctx,
                dx,
                len,
                self.p(&lo.out_w),
                w,
                w,
                Some(&mut dctx),
                dw,
                db,
            );
        }
        let mut dqkv = vec![S::zero(); len * 3 * w];
        let hd = w / heads;
        let scale = S::one() / S::of(hd as f64).sqrt();
        let mut dp = vec![S::zero(); len];
        for h in 0..heads {
            for i in 0..len {
                let end = self.layout.key_end(i);
                let p = &c.probs[(h * len + i) * len..(h * len + i) * len + end];
                let dci = &dctx[i * w + h * hd..i * w + (h + 1) * hd];
                let mut pdp = S::zero();
                for j in 0..end {
                    let v = &c.qkv[j * 3 * w + 2 * w + h * hd..j * 3 * w + 2 * w + (h + 1) * hd];
                    dp[j] = dot(dci, v);
                    pdp += p[j] * dp[j];
                }
                let qi = i * 3 * w + h * hd;
                for j in 0..end {
                    let ds = p[j] * (dp[j] - pdp) * scale;
                    let kj = j * 3 * w + w + h * hd;
                    let vj = j * 3 * w + 2 * w + h * hd;
                    axpy(p[j], dci, &mut dqkv[vj..vj + hd]);
                    axpy(ds, &c.qkv[kj..kj + hd], &mut dqkv[qi..qi + hd]);
                    axpy(ds, &c.qkv[qi..qi + hd], &mut dqkv[kj..kj + hd]);
                }
            }
        }
        let mut da = vec![S::zero(); len * w];
        {
            let (dw, db) = split2(grads, &lo.qkv_w, &lo.qkv_b);
            linear_bwd(
                &c.a,
                &dqkv,
                len,
                self.p(&lo.qkv_w),
                w,
                3 * w,
                Some(&mut da),
                dw,
                db,
            );
        }
        let (dgam, dbet) = split2(grads, &lo.ln1_g, &lo.ln1_b);
        layer_norm_bwd(
            &da,
            len,
            w,
            self.p(&lo.ln1_g),
            &c.xhat1,
            &c.rstd1,
            dx,
            dgam,
            dbet,
        );
    }

    fn embed_backward(&self, cache: &ForwardCache<S>, dx: &[S], grads: &mut [S]) {
        let w = self.config.width;
        let d = self.config.latent_dim;
        for slot in 0..cache.len {
            let dxr = &dx[slot * w..(slot + 1) * w];
            let pr = self.pos_row(slot);
            axpy(
                S::one(),
                dxr,
                &mut grads[self.off.pos.start + pr * w..self.off.pos.start + (pr + 1) * w],
            );
            let s = self.layout.positions()[slot].scale;
            if s <= 1 {
                axpy(S::one(), dxr, &mut grads[self.off.start.clone()]);
                let cs = self.off.class.start + cache.class_row * w;
                axpy(S::one(), dxr, &mut grads[cs..cs + w]);
            }
            let (scale, u) = if s == 1 {
                match &cache.masked {
                    Some(m) => {
                        let k = slot - self.layout.scale_range(1).start;
                        if m.masked[k] {
                            axpy(S::one(), dxr, &mut grads[self.off.mask.clone()]);
                            continue;
                        }
                        (0, m.tokens.vector(k))
                    }
                    None => continue,
                }
            } else if s >= 2 {
                let k = slot - self.layout.scale_range(s).start;
                (s - 1, cache.inputs[s - 2].vector(k))
            } else {
                continue;
            };
            axpy(S::one(), dxr, &mut grads[self.off.in_b[scale].clone()]);
            let ws = self.off.in_w[scale].start;
            for i in 0..d {
                axpy(u[i], dxr, &mut grads[ws + i * w..ws + (i + 1) * w]);
            }
        }
    }
}

/// Two disjoint mutable sub-slices of the gradient buffer.
fn split2<'g, S>(
    g: &'g mut [S],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'g mut [S], &'g mut [S]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.end - b.start])
}
