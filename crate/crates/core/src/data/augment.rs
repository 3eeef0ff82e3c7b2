//! Geometric jitter, rectangle occlusion and the per-epoch pipeline.

use rand::Rng;

use super::preprocess::{preprocess, LcnConfig};
use super::{stream_rng, Dataset, Sample};
use crate::error::{config, Result};
use crate::exec::Exec;
use crate::metrics::{Keypoint, KeypointSet};
use crate::tensor::Tensor4;

/// Symmetric jitter ranges: translation and scale as fractions (of the
/// keypoint bounding box and of unit scale), rotation in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterSpec {
    pub translate: f64,
    pub scale: f64,
    pub rotate: f64,
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self { translate: 0.10, scale: 0.10, rotate: 40.0 }
    }
}

impl JitterSpec {
    pub fn none() -> Self {
        Self { translate: 0.0, scale: 0.0, rotate: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.translate >= 0.0 && (0.0..1.0).contains(&self.scale) && self.rotate >= 0.0) {
            return config(format!("invalid jitter ranges {self:?}"));
        }
        Ok(())
    }
}

/// One black rectangle with independently drawn side lengths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionSpec {
    pub min_side: usize,
    pub max_side: usize,
    pub fill: f64,
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self { min_side: 20, max_side: 50, fill: 0.0 }
    }
}

impl OcclusionSpec {
    pub fn validate(&self, size: usize) -> Result<()> {
        if self.min_side > self.max_side || self.max_side > size {
            return config(format!(
                "occlusion sides {}..{} invalid for a {size}px image",
                self.min_side, self.max_side
            ));
        }
        Ok(())
    }
}

/// 2×3 affine map on `(x, y)` = `(col, row)` coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    /// `p ↦ c + s·R(θ)·(p − c) + t`.
    pub fn similarity(center: (f64, f64), theta: f64, scale: f64, t: (f64, f64)) -> Self {
        let (sin, cos) = theta.sin_cos();
        let (a, b, c, d) = (scale * cos, -scale * sin, scale * sin, scale * cos);
        Self([
            [a, b, center.0 - a * center.0 - b * center.1 + t.0],
            [c, d, center.1 - c * center.0 - d * center.1 + t.1],
        ])
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let m = &self.0;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn inverse(&self) -> Option<Self> {
        let m = &self.0;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 {
            return None;
        }
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Some(Self([[a, b, -(a * m[0][2] + b * m[1][2])], [c, d, -(c * m[0][2] + d * m[1][2])]]))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine) -> Self {
        let (a, b) = (&self.0, &other.0);
        let mut out = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + if j == 2 { a[i][2] } else { 0.0 };
            }
        }
        Self(out)
    }
}

fn keypoint_box(kps: &KeypointSet) -> ((f64, f64), (f64, f64)) {
    let pts = kps.points();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for p in pts {
        r0 = r0.min(p.row);
        r1 = r1.max(p.row);
        c0 = c0.min(p.col);
        c1 = c1.max(p.col);
    }
    (((c0 + c1) as f64 / 2.0, (r0 + r1) as f64 / 2.0), ((c1 - c0) as f64, (r1 - r0) as f64))
}

fn draw_affine<R: Rng + ?Sized>(spec: &JitterSpec, center: (f64, f64), extent: (f64, f64), rng: &mut R) -> Affine {
    let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let theta = sym(spec.rotate).to_radians();
    let scale = 1.0 + sym(spec.scale);
    let t = (sym(spec.translate) * extent.0, sym(spec.translate) * extent.1);
    Affine::similarity(center, theta, scale, t)
}

/// Moves every keypoint by `map`, rounding to the grid; `None` if any lands
/// outside `size × size`.
pub fn map_keypoints(kps: &KeypointSet, map: &Affine, size: usize) -> Option<KeypointSet> {
    let s = size as f64;
    kps.points()
        .iter()
        .map(|p| {
            let (x, y) = map.apply((p.col as f64, p.row as f64));
            let (r, c) = (y.round(), x.round());
            (r >= 0.0 && c >= 0.0 && r < s && c < s).then(|| Keypoint::new(r as usize, c as usize))
        })
        .collect::<Option<Vec<_>>>()
        .map(KeypointSet::new)
}

/// Resamples `image` so that output pixel `q` shows input point
/// `map⁻¹(q)`, bilinearly, with zeros outside.
pub fn warp_image(image: &Tensor4, map: &Affine) -> Tensor4 {
    let d = image.dims();
    let inv = map.inverse().expect("jitter maps are invertible");
    let (h, w) = (d.h as isize, d.w as isize);
    let src = image.plane(0, 0);
    let at = |r: isize, c: isize| if r >= 0 && c >= 0 && r < h && c < w { src[(r * w + c) as usize] } else { 0.0 };
    Tensor4::from_fn(d, |_, _, i, j| {
        let (x, y) = inv.apply((j as f64, i as f64));
        let (c0, r0) = (x.floor(), y.floor());
        let (fx, fy) = (x - c0, y - r0);
        let (c0, r0) = (c0 as isize, r0 as isize);
        (1.0 - fy) * ((1.0 - fx) * at(r0, c0) + fx * at(r0, c0 + 1))
            + fy * ((1.0 - fx) * at(r0 + 1, c0) + fx * at(r0 + 1, c0 + 1))
    })
}

const JITTER_TRIES: usize = 20;

/// Applies one random similarity transform to image and keypoints. Returns
/// the sample unchanged when 20 draws all push a keypoint off the image.
pub fn jitter_augment<R: Rng + ?Sized>(sample: &Sample, spec: &JitterSpec, rng: &mut R) -> Sample {
    jitter_with_map(sample, spec, rng).0
}

pub(crate) fn jitter_with_map<R: Rng + ?Sized>(sample: &Sample, spec: &JitterSpec, rng: &mut R) -> (Sample, Affine) {
    let (center, extent) = keypoint_box(&sample.keypoints);
    for _ in 0..JITTER_TRIES {
        let map = draw_affine(spec, center, extent, rng);
        if let Some(kps) = map_keypoints(&sample.keypoints, &map, sample.size()) {
            if map == Affine::identity() {
                return (sample.clone(), Affine::identity());
            }
            let image = warp_image(&sample.image, &map);
            return (Sample { id: sample.id.clone(), image, keypoints: kps }, map);
        }
    }
    (sample.clone(), Affine::identity())
}

/// Fills one uniformly placed rectangle, kept fully inside the image.
pub fn occlude<R: Rng + ?Sized>(sample: &Sample, spec: &OcclusionSpec, rng: &mut R) -> Sample {
    let mut out = sample.clone();
    occlude_in_place(&mut out.image, spec, rng);
    out
}

pub(crate) fn occlude_in_place<R: Rng + ?Sized>(image: &mut Tensor4, spec: &OcclusionSpec, rng: &mut R) -> (usize, usize, usize, usize) {
    let d = image.dims();
    let h = rng.random_range(spec.min_side..=spec.max_side).min(d.h);
    let w = rng.random_range(spec.min_side..=spec.max_side).min(d.w);
    let top = rng.random_range(0..=d.h - h);
    let left = rng.random_range(0..=d.w - w);
    for i in top..top + h {
        for j in left..left + w {
            image.set(0, 0, i, j, spec.fill);
        }
    }
    (top, left, h, w)
}

/// Relative order of the two augmentations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StageOrder {
    #[default]
    JitterFirst,
    OccludeFirst,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentConfig {
    pub jitter: Option<JitterSpec>,
    pub occlusion: Option<OcclusionSpec>,
    pub order: StageOrder,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.jitter.is_none() && self.occlusion.is_none()
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if let Some(j) = &self.jitter {
            j.validate()?;
        }
        if let Some(o) = &self.occlusion {
            o.validate(size)?;
        }
        Ok(())
    }

    /// Augments one sample with the RNG stream of `(seed, epoch, index)`.
    pub fn apply(&self, sample: &Sample, seed: u64, epoch: u64, index: u64) -> Sample {
        if self.is_identity() {
            return sample.clone();
        }
        let mut rng = stream_rng(seed, &[epoch, index]);
        let mut s = sample.clone();
        let jitter = |s: &Sample, rng: &mut _| match &self.jitter {
            Some(j) => jitter_augment(s, j, rng),
            None => s.clone(),
        };
        match self.order {
            StageOrder::JitterFirst => {
                s = jitter(&s, &mut rng);
                if let Some(o) = &self.occlusion {
                    occlude_in_place(&mut s.image, o, &mut rng);
                }
            }
            StageOrder::OccludeFirst => {
                if let Some(o) = &self.occlusion {
                    occlude_in_place(&mut s.image, o, &mut rng);
                }
                s = jitter(&s, &mut rng);
            }
        }
        s
    }
}

/// Augment-then-preprocess stage producing network-ready batches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pipeline {
    pub augment: AugmentConfig,
    pub lcn: LcnConfig,
    pub exec: Exec,
}

impl Pipeline {
    pub fn new(augment: AugmentConfig) -> Self {
        Self { augment, ..Self::default() }
    }

    /// Preprocessed `(n, 1, S, S)` images and keypoints for the samples at
    /// `indices` of epoch `epoch`.
    pub fn batch(&self, data: &Dataset, indices: &[usize], seed: u64, epoch: u64) -> Result<(Tensor4, Vec<KeypointSet>)> {
        let prepared: Vec<Result<(Tensor4, KeypointSet)>> = self.exec.map(indices.len(), |b| {
            let i = indices[b];
            let s = self.augment.apply(&data.samples()[i], seed, epoch, i as u64);
            Ok((preprocess(&s.image, &self.lcn)?, s.keypoints))
        });
        let mut images = Vec::with_capacity(indices.len());
        let mut truth = Vec::with_capacity(indices.len());
        for p in prepared {
            let (img, kps) = p?;
            images.push(img);
            truth.push(kps);
        }
        let refs: Vec<&Tensor4> = images.iter().collect();
        Ok((Tensor4::stack(&refs)?, truth))
    }

    /// Preprocesses the whole dataset without augmentation.
    pub fn clean(&self, data: &Dataset) -> Result<Tensor4> {
        let plain = Pipeline { augment: AugmentConfig::default(), ..self.clone() };
        let idx: Vec<usize> = (0..data.len()).collect();
        Ok(plain.batch(data, &idx, 0, 0)?.0)
    }
}
