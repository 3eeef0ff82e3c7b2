//! Samples, datasets, synthetic faces, preprocessing and augmentation.

mod augment;
mod io;
mod preprocess;
mod synth;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{jitter_augment, map_keypoints, occlude, warp_image, Affine, AugmentConfig, JitterSpec, OcclusionSpec, Pipeline, StageOrder};
pub use io::{load_dataset, read_pgm, save_dataset, write_pgm, MANIFEST_FILE, META_FILE};
pub use preprocess::{lcn, preprocess, to_gray, LcnConfig};
pub use synth::{generate_synthetic, generate_with_geometry, FaceGeometry, SynthSpec};

use crate::error::{input, Result};
use crate::metrics::{EvalConfig, KeypointSet};
use crate::tensor::Tensor4;

/// One raw grayscale image `(1, 1, S, S)` with values in `[0, 1]` and its
/// keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor4,
    pub keypoints: KeypointSet,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.dims().h
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.image.dims();
        if d.n != 1 || d.c != 1 || d.h != d.w || d.h == 0 {
            return input(format!("sample {}: image dims {d} are not (1, 1, S, S)", self.id));
        }
        if !self.image.all_finite() {
            return input(format!("sample {}: image has non-finite values", self.id));
        }
        if let Err(e) = self.keypoints.check_bounds(d.h, d.w) {
            return input(format!("sample {}: {e}", self.id));
        }
        Ok(())
    }
}

/// An ordered collection of samples sharing K and the image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    keypoint_names: Vec<String>,
    eval: EvalConfig,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, keypoint_names: Vec<String>, eval: EvalConfig) -> Result<Self> {
        let k = keypoint_names.len();
        eval.validate(k)?;
        let size = samples.first().map_or(0, Sample::size);
        let mut ids = HashSet::new();
        for s in &samples {
            s.validate()?;
            if s.keypoints.len() != k {
                return input(format!("sample {} has {} keypoints, expected {k}", s.id, s.keypoints.len()));
            }
            if s.size() != size {
                return input(format!("sample {} is {}px, expected {size}px", s.id, s.size()));
            }
            if !ids.insert(s.id.as_str()) {
                return input(format!("duplicate sample id {}", s.id));
            }
        }
        Ok(Self { samples, keypoint_names, eval })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoint_names.len()
    }

    pub fn image_size(&self) -> usize {
        self.samples.first().map_or(0, Sample::size)
    }

    pub fn keypoint_names(&self) -> &[String] {
        &self.keypoint_names
    }

    pub fn eval_config(&self) -> EvalConfig {
        self.eval
    }

    pub fn truth(&self) -> Vec<KeypointSet> {
        self.samples.iter().map(|s| s.keypoints.clone()).collect()
    }

    /// A dataset holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            keypoint_names: self.keypoint_names.clone(),
            eval: self.eval,
        }
    }

    /// Stacks the raw images into one `(n, 1, S, S)` batch.
    pub fn images(&self) -> Tensor4 {
        let refs: Vec<&Tensor4> = self.samples.iter().map(|s| &s.image).collect();
        Tensor4::stack(&refs).expect("uniform sample dims")
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream for `(seed, parts...)`, e.g. `(seed, epoch, index)`.
pub fn stream_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}
