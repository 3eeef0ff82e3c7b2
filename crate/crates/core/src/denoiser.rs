//! Keypoint-location denoiser and the joint predictor.

use rand::seq::index::sample;
use rand::Rng;

use crate::arch::{ModelConfig, Network};
use crate::error::{config, input, Result};
use crate::kv::KvMap;
use crate::metrics::{Keypoint, KeypointSet, ProbMaps};
use crate::ops::{NllTerm, PROB_FLOOR};
use crate::params::ParamStore;
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub num_keypoints: usize,
    pub map_size: usize,
    pub layers: usize,
    pub kernel: usize,
    pub channels: usize,
    pub corrupt_count: usize,
    pub init_seed: u64,
}

impl DenoiserConfig {
    pub const TAG: &'static str = "DEN";

    /// Defaults: 5 layers of 9×9 kernels with 64 channels; 35 corrupted
    /// keypoints for K=68, 2 for K=5, otherwise about half.
    pub fn new(num_keypoints: usize, map_size: usize) -> Self {
        let corrupt_count = match num_keypoints {
            68 => 35,
            5 => 2,
            k => k.div_ceil(2).max(1),
        };
        Self { num_keypoints, map_size, layers: 5, kernel: 9, channels: 64, corrupt_count, init_seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return config(format!("denoiser kernel must be odd, got {}", self.kernel));
        }
        if self.num_keypoints == 0 || self.map_size == 0 || self.layers == 0 || self.channels == 0 {
            return config("denoiser keypoints, map size, layers and channels must be positive");
        }
        if self.corrupt_count == 0 || self.corrupt_count > self.num_keypoints {
            return config(format!(
                "corrupt count {} outside [1, {}]",
                self.corrupt_count, self.num_keypoints
            ));
        }
        Ok(())
    }

    /// Side of the square region one output unit can see.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers * (self.kernel - 1)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("arch", Self::TAG);
        kv.set("num_keypoints", self.num_keypoints);
        kv.set("map_size", self.map_size);
        kv.set("layers", self.layers);
        kv.set("kernel", self.kernel);
        kv.set("channels", self.channels);
        kv.set("corrupt_count", self.corrupt_count);
        kv.set("init_seed", self.init_seed);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let arch: String = kv.require("arch")?;
        if arch != Self::TAG {
            return config(format!("expected arch {}, got {arch}", Self::TAG));
        }
        let cfg = Self {
            num_keypoints: kv.require("num_keypoints")?,
            map_size: kv.require("map_size")?,
            layers: kv.require("layers")?,
            kernel: kv.require("kernel")?,
            channels: kv.require("channels")?,
            corrupt_count: kv.require("corrupt_count")?,
            init_seed: kv.require("init_seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which keypoints of one sample were corrupted, and where they really were.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptionRecord {
    pub indices: Vec<usize>,
    pub original: Vec<Keypoint>,
}

/// `(n, K, S, S)` maps holding a single 1 at each keypoint.
pub fn one_hot_maps(locations: &[KeypointSet], size: usize) -> Result<Tensor4> {
    let k = locations.first().map_or(0, KeypointSet::len);
    let mut out = Tensor4::zeros((locations.len(), k, size, size));
    for (n, set) in locations.iter().enumerate() {
        if set.len() != k {
            return input(format!("sample {n} has {} keypoints, expected {k}", set.len()));
        }
        set.check_bounds(size, size)?;
        for (j, p) in set.points().iter().enumerate() {
            out.set(n, j, p.row, p.col, 1.0);
        }
    }
    Ok(out)
}

/// Moves a uniformly chosen subset of `count` keypoints to uniform random
/// positions on the `size × size` grid.
pub fn corrupt_keypoints<R: Rng + ?Sized>(
    truth: &KeypointSet,
    count: usize,
    size: usize,
    rng: &mut R,
) -> Result<(KeypointSet, CorruptionRecord)> {
    let k = truth.len();
    if count == 0 || count > k {
        return input(format!("corrupt count {count} outside [1, {k}]"));
    }
    let mut indices = sample(rng, k, count).into_vec();
    indices.sort_unstable();
    let mut out = truth.clone();
    let mut original = Vec::with_capacity(count);
    for &i in &indices {
        original.push(truth.0[i]);
        out.0[i] = Keypoint::new(rng.random_range(0..size), rng.random_range(0..size));
    }
    Ok((out, CorruptionRecord { indices, original }))
}

pub fn build_denoiser(config: &DenoiserConfig) -> Result<Network> {
    Network::new(ModelConfig::Denoiser(config.clone()))
}

/// Likelihood terms over the corrupted keypoints only, each weighted
/// `1 / (N · |C_n|)`.
pub fn denoiser_terms(truth: &[KeypointSet], records: &[CorruptionRecord]) -> Result<Vec<NllTerm>> {
    if truth.len() != records.len() {
        return input(format!("{} keypoint sets for {} corruption records", truth.len(), records.len()));
    }
    let n = truth.len();
    let mut terms = Vec::new();
    for (i, (set, rec)) in truth.iter().zip(records).enumerate() {
        if rec.indices.is_empty() {
            return input(format!("sample {i} has an empty corrupted set"));
        }
        let w = 1.0 / (n * rec.indices.len()) as f64;
        for &k in &rec.indices {
            let p = set.0.get(k).ok_or_else(|| {
                crate::Error::Input(format!("sample {i}: corrupted index {k} out of range"))
            })?;
            terms.push(NllTerm { n: i, k, row: p.row, col: p.col, weight: w });
        }
    }
    Ok(terms)
}

/// Negative log-likelihood restricted to the corrupted keypoints, averaged
/// over samples and corrupted keypoints, plus `lambda·‖W‖²`.
pub fn denoiser_loss(
    probs: &ProbMaps,
    truth: &[KeypointSet],
    records: &[CorruptionRecord],
    lambda: f64,
    params: &ParamStore,
) -> Result<f64> {
    let d = probs.dims();
    if truth.len() != d.n {
        return input(format!("{} keypoint sets for {} samples", truth.len(), d.n));
    }
    for set in truth {
        set.check_bounds(d.h, d.w)?;
    }
    let floor = PROB_FLOOR.ln();
    let mut total = 0.0;
    for t in denoiser_terms(truth, records)? {
        if t.k >= d.c {
            return input(format!("keypoint index {} beyond {} maps", t.k, d.c));
        }
        total -= t.weight * probs.map(t.n, t.k)[t.row * d.w + t.col].ln().max(floor);
    }
    Ok(total + lambda * params.sum_squares())
}

/// Sums the keypoint network's pre-softmax scores with the denoiser's
/// scores on the one-hot encoding of the network's own hard predictions.
pub fn joint_predict(net: &Network, den: &Network, images: &Tensor4) -> Result<ProbMaps> {
    net.ensure_same_grid(den)?;
    if !matches!(den.config(), ModelConfig::Denoiser(_)) {
        return config("second network of joint prediction must be a denoiser");
    }
    let mut z = net.pre_softmax(images)?;
    let hard = ProbMaps::from_logits(&z).argmax();
    let zd = den.pre_softmax(&one_hot_maps(&hard, net.map_size())?)?;
    z.add_assign(&zd);
    Ok(ProbMaps::from_logits(&z))
}
