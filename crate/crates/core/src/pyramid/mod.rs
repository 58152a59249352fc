//! Multi-scale ground-truth latents, tokenization and the resampling operators
//! used for scale shift.

mod codebook;
mod patch;
pub mod resample;
mod schedule;

pub use codebook::{fit_codebook, Codebook, KMEANS_MAX_ITERS};
pub use patch::PatchEmbed;
pub use resample::{area_downsample, upsample};
pub use schedule::ScaleSchedule;

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;

/// How per-scale targets are derived from an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathway {
    /// Downsample the full-resolution latent.
    LatentSupervision,
    /// Downsample the image, then encode each resized image.
    ImageSupervision,
}

impl Pathway {
    pub fn name(self) -> &'static str {
        match self {
            Pathway::LatentSupervision => "latent",
            Pathway::ImageSupervision => "image",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Pathway::LatentSupervision),
            "image" => Ok(Pathway::ImageSupervision),
            _ => bail!(Config, "unknown pathway {s:?} (expected latent|image)"),
        }
    }
}

/// Continuous feature maps `f_1..f_N`; map `i` is `h_i × h_i × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPyramid<S> {
    schedule: ScaleSchedule,
    maps: Vec<Grid<S>>,
}

impl<S: Scalar> LatentPyramid<S> {
    pub fn new(schedule: ScaleSchedule, maps: Vec<Grid<S>>) -> Result<Self> {
        if maps.len() != schedule.len() {
            bail!(
                Usage,
                "pyramid has {} maps for {} scales",
                maps.len(),
                schedule.len()
            );
        }
        let dim = maps[0].channels();
        for (i, m) in maps.iter().enumerate() {
            if m.side() != schedule.side(i) || m.channels() != dim {
                bail!(
                    Usage,
                    "pyramid map {i} is {}x{}x{}, expected side {}",
                    m.side(),
                    m.side(),
                    m.channels(),
                    schedule.side(i)
                );
            }
            if !m.is_finite() {
                bail!(Invariant, "pyramid map {i} has non-finite entries");
            }
        }
        Ok(Self { schedule, maps })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn maps(&self) -> &[Grid<S>] {
        &self.maps
    }

    pub fn map(&self, i: usize) -> &Grid<S> {
        &self.maps[i]
    }

    pub fn dim(&self) -> usize {
        self.maps[0].channels()
    }

    pub fn into_maps(self) -> Vec<Grid<S>> {
        self.maps
    }

    pub fn scaled(&self, k: S) -> Self {
        Self {
            schedule: self.schedule.clone(),
            maps: self.maps.iter().map(|m| m.scaled(k)).collect(),
        }
    }
}

/// Discrete index map `t_i` of one scale, raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMap {
    side: usize,
    indices: Vec<usize>,
}

impl TokenMap {
    pub fn new(side: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != side * side {
            bail!(
                Usage,
                "token map of side {side} needs {} indices",
                side * side
            );
        }
        Ok(Self { side, indices })
    }

    pub fn filled(side: usize, value: usize) -> Self {
        Self {
            side,
            indices: vec![value; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn indices_mut(&mut self) -> &mut [usize] {
        &mut self.indices
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.indices[r * self.side + c]
    }
}

/// Token maps `t_1..t_N` over a vocabulary of size `vocab`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPyramid {
    schedule: ScaleSchedule,
    vocab: usize,
    maps: Vec<TokenMap>,
}

impl TokenPyramid {
    pub fn new(schedule: ScaleSchedule, vocab: usize, maps: Vec<TokenMap>) -> Result<Self> {
        if maps.len() != schedule.len() {
            bail!(
                Usage,
                "token pyramid has {} maps for {} scales",
                maps.len(),
                schedule.len()
            );
        }
        for (i, m) in maps.iter().enumerate() {
            if m.side() != schedule.side(i) {
                bail!(
                    Usage,
                    "token map {i} has side {}, expected {}",
                    m.side(),
                    schedule.side(i)
                );
            }
            if let Some(&bad) = m.indices().iter().find(|&&t| t >= vocab) {
                bail!(
                    Invariant,
                    "token {bad} at scale {i} is outside vocabulary {vocab}"
                );
            }
        }
        Ok(Self {
            schedule,
            vocab,
            maps,
        })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn maps(&self) -> &[TokenMap] {
        &self.maps
    }

    pub fn map(&self, i: usize) -> &TokenMap {
        &self.maps[i]
    }
}

/// Builds the per-scale ground-truth latents of one image.
///
/// `latent` must be the full-resolution encoding (`h_N × h_N × D`). The image
/// and patch embed are required for [`Pathway::ImageSupervision`] only. The top
/// map is `latent` itself in both pathways.
pub fn build_pyramid<S: Scalar>(
    latent: &Grid<S>,
    schedule: &ScaleSchedule,
    pathway: Pathway,
    image: Option<&Grid<S>>,
    patch: Option<&PatchEmbed<S>>,
) -> Result<LatentPyramid<S>> {
    if latent.side() != schedule.top() {
        bail!(
            Usage,
            "latent side {} does not match top scale {}",
            latent.side(),
            schedule.top()
        );
    }
    let n = schedule.len();
    let mut maps = Vec::with_capacity(n);
    match pathway {
        Pathway::LatentSupervision => {
            for i in 0..n - 1 {
                maps.push(area_downsample(latent, schedule.side(i))?);
            }
        }
        Pathway::ImageSupervision => {
            let (Some(image), Some(patch)) = (image, patch) else {
                bail!(
                    Usage,
                    "image supervision needs the source image and patch embed"
                );
            };
            if image.side() != schedule.top() * patch.patch() {
                bail!(
                    Usage,
                    "image side {} does not match top scale x patch",
                    image.side()
                );
            }
            for i in 0..n - 1 {
                let small = area_downsample(image, schedule.side(i) * patch.patch())?;
                maps.push(patch.encode(&small)?);
            }
        }
    }
    maps.push(latent.clone());
    LatentPyramid::new(schedule.clone(), maps)
}

/// Maps every latent vector to its nearest codebook row (lowest index on ties).
pub fn quantize<S: Scalar>(
    pyramid: &LatentPyramid<S>,
    codebook: &Codebook<S>,
) -> Result<TokenPyramid> {
    if pyramid.dim() != codebook.dim() {
        bail!(
            Usage,
            "pyramid dim {} does not match codebook dim {}",
            pyramid.dim(),
            codebook.dim()
        );
    }
    let maps = pyramid
        .maps()
        .iter()
        .map(|m| quantize_map(m, codebook))
        .collect();
    TokenPyramid::new(pyramid.schedule().clone(), codebook.size(), maps)
}

pub fn quantize_map<S: Scalar>(map: &Grid<S>, codebook: &Codebook<S>) -> TokenMap {
    TokenMap {
        side: map.side(),
        indices: (0..map.positions())
            .map(|p| codebook.nearest(map.vector(p)))
            .collect(),
    }
}

/// Codebook lookup per position. An out-of-range index is an invariant violation.
pub fn dequantize<S: Scalar>(
    tokens: &TokenPyramid,
    codebook: &Codebook<S>,
) -> Result<LatentPyramid<S>> {
    let maps = tokens
        .maps()
        .iter()
        .map(|t| dequantize_map(t, codebook))
        .collect::<Result<Vec<_>>>()?;
    LatentPyramid::new(tokens.schedule().clone(), maps)
}

pub fn dequantize_map<S: Scalar>(tokens: &TokenMap, codebook: &Codebook<S>) -> Result<Grid<S>> {
    let dim = codebook.dim();
    let mut data = Vec::with_capacity(tokens.indices().len() * dim);
    for &t in tokens.indices() {
        if t >= codebook.size() {
            bail!(
                Invariant,
                "token {t} outside codebook of size {}",
                codebook.size()
            );
        }
        data.extend_from_slice(codebook.row(t));
    }
    Grid::from_vec(tokens.side(), dim, data)
}

/// Scale-shifted inputs: entry `i - 1` is `upsample(maps[i - 1] → h_i)` for scales `i = 1..N-1`
/// (zero-based), i.e. the conditioning for every scale after the first.
pub fn shift_inputs<S: Scalar>(
    sources: &[Grid<S>],
    schedule: &ScaleSchedule,
) -> Result<Vec<Grid<S>>> {
    if sources.len() + 1 < schedule.len() {
        bail!(
            Usage,
            "need {} source maps to shift, got {}",
            schedule.len() - 1,
            sources.len()
        );
    }
    (1..schedule.len())
        .map(|i| upsample(&sources[i - 1], schedule.side(i)))
        .collect()
}

/// `‖f_N − upsample(f_{N−1})‖²`, the detail the finest scale must add.
pub fn finest_residual_energy<S: Scalar>(pyramid: &LatentPyramid<S>) -> Result<f64> {
    let n = pyramid.schedule().len();
    if n < 2 {
        return Ok(0.0);
    }
    let up = upsample(pyramid.map(n - 2), pyramid.schedule().top())?;
    Ok(pyramid.map(n - 1).squared_distance(&up).as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(v: &[usize]) -> ScaleSchedule {
        ScaleSchedule::new(v.to_vec()).unwrap()
    }

    #[test]
    fn constant_latent_gives_constant_scales() {
        let lat = Grid::<f64>::filled(4, 3, 0.625);
        let p = build_pyramid(
            &lat,
            &sched(&[1, 2, 3, 4]),
            Pathway::LatentSupervision,
            None,
            None,
        )
        .unwrap();
        for m in p.maps() {
            assert!(m.as_slice().iter().all(|&v| v == 0.625));
        }
        assert_eq!(p.map(3), &lat);
    }

    #[test]
    fn image_supervision_requires_image() {
        let lat = Grid::<f64>::zeros(4, 3);
        let r = build_pyramid(&lat, &sched(&[2, 4]), Pathway::ImageSupervision, None, None);
        assert!(matches!(r, Err(crate::Error::Usage(_))));
    }

    #[test]
    fn image_supervision_encodes_resized_images() {
        let pe = PatchEmbed::<f64>::seeded(2, 1, 3, 4).unwrap();
        let img = Grid::from_fn(8, 1, |r, c, _| ((r * 5 + c * 3) % 7) as f64 / 7.0);
        let lat = pe.encode(&img).unwrap();
        let s = sched(&[1, 2, 4]);
        let p = build_pyramid(&lat, &s, Pathway::ImageSupervision, Some(&img), Some(&pe)).unwrap();
        let expect = pe.encode(&area_downsample(&img, 4).unwrap()).unwrap();
        assert!(p.map(1).max_abs_diff(&expect) < 1e-12);
        assert_eq!(p.map(2), &lat);
    }

    #[test]
    fn quantize_round_trips_codebook_rows() {
        let cb = Codebook::<f64>::new(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let s = sched(&[1, 2]);
        let tokens = TokenPyramid::new(
            s.clone(),
            4,
            vec![
                TokenMap::new(1, vec![3]).unwrap(),
                TokenMap::new(2, vec![0, 1, 2, 3]).unwrap(),
            ],
        )
        .unwrap();
        let lat = dequantize(&tokens, &cb).unwrap();
        assert_eq!(quantize(&lat, &cb).unwrap(), tokens);
        assert_eq!(lat.map(1).vector(2), cb.row(2));
    }

    #[test]
    fn random_vectors_match_exhaustive_scan() {
        let mut x = 99u64;
        let mut next = || {
            x = x
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((x >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        let cb = Codebook::new(8, 2, (0..16).map(|_| next()).collect()).unwrap();
        for _ in 0..500 {
            let v = [next(), next()];
            let mut best = (f64::INFINITY, 0);
            for k in 0..8 {
                let d = (cb.row(k)[0] - v[0]).powi(2) + (cb.row(k)[1] - v[1]).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            assert_eq!(cb.nearest(&v), best.1);
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let cb = Codebook::<f32>::new(2, 1, vec![0.0, 1.0]).unwrap();
        let bad = TokenMap::new(1, vec![5]).unwrap();
        assert!(matches!(
            dequantize_map(&bad, &cb),
            Err(crate::Error::Invariant(_))
        ));
    }

    #[test]
    fn quantize_is_idempotent_through_dequantize() {
        let cb = Codebook::<f64>::new(
            5,
            2,
            vec![0.0, 0.0, 1.0, 0.5, -1.0, 2.0, 0.3, -0.7, 2.0, 2.0],
        )
        .unwrap();
        let s = sched(&[2, 3]);
        let lat = LatentPyramid::new(
            s,
            vec![
                Grid::from_fn(2, 2, |r, c, d| (r as f64 - c as f64) * 0.9 + d as f64 * 0.2),
                Grid::from_fn(3, 2, |r, c, d| (r * c) as f64 * 0.4 - d as f64),
            ],
        )
        .unwrap();
        let q = quantize(&lat, &cb).unwrap();
        let q2 = quantize(&dequantize(&q, &cb).unwrap(), &cb).unwrap();
        assert_eq!(q, q2);
    }
}
