use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{pool_for, Arch, NetworkConfig, UpsampleMode};
use crate::denoiser::DenoiserConfig;
use crate::error::{config, shape, Error, Result};
use crate::kv::KvMap;
use crate::metrics::{KeypointSet, ProbMaps};
use crate::ops::{AxisMap, NllTerm};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

/// Configuration of any model that shares the network machinery.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelConfig {
    Keypoint(NetworkConfig),
    Denoiser(DenoiserConfig),
}

impl ModelConfig {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelConfig::Keypoint(c) => c.arch.tag(),
            ModelConfig::Denoiser(_) => DenoiserConfig::TAG,
        }
    }

    pub fn num_keypoints(&self) -> usize {
        match self {
            ModelConfig::Keypoint(c) => c.num_keypoints,
            ModelConfig::Denoiser(c) => c.num_keypoints,
        }
    }

    /// Side of the (square) input and output maps.
    pub fn map_size(&self) -> usize {
        match self {
            ModelConfig::Keypoint(c) => c.input_size,
            ModelConfig::Denoiser(c) => c.map_size,
        }
    }

    pub fn input_channels(&self) -> usize {
        match self {
            ModelConfig::Keypoint(_) => 1,
            ModelConfig::Denoiser(c) => c.num_keypoints,
        }
    }

    pub fn to_kv(&self) -> KvMap {
        match self {
            ModelConfig::Keypoint(c) => c.to_kv(),
            ModelConfig::Denoiser(c) => c.to_kv(),
        }
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        match kv.get_str("arch") {
            Some(DenoiserConfig::TAG) => Ok(ModelConfig::Denoiser(DenoiserConfig::from_kv(kv)?)),
            _ => Ok(ModelConfig::Keypoint(NetworkConfig::from_kv(kv)?)),
        }
    }
}

/// One convolution layer of the realized graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub relu: bool,
}

impl LayerSpec {
    fn new(name: String, in_c: usize, out_c: usize, kernel: usize, relu: bool) -> Self {
        Self { name, in_c, out_c, kernel, relu }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Topology {
    Keypoint {
        sizes: Vec<usize>,
        /// Per level (index 0 = coarsest).
        trunk: Vec<Vec<LayerSpec>>,
        /// Per level; `None` when masked.
        branches: Vec<Option<Vec<LayerSpec>>>,
        /// SumNet branches that exist as parameters but are masked off.
        dormant: Vec<Option<Vec<LayerSpec>>>,
    },
    Denoiser {
        layers: Vec<LayerSpec>,
    },
}

pub const ALPHA: &str = "sum.alpha";

fn keypoint_topology(cfg: &NetworkConfig) -> Result<Topology> {
    cfg.validate()?;
    let r_max = cfg.num_branches;
    let sizes = cfg.level_sizes()?;
    let k = cfg.conv_kernel;
    let mut trunk = Vec::with_capacity(r_max);
    for level in 1..=r_max {
        let c = cfg.level_channels(level);
        let in_c = if level == r_max { 1 } else { cfg.level_channels(level + 1) };
        trunk.push(
            (0..cfg.trunk_depth)
                .map(|i| LayerSpec::new(format!("trunk.{level}.conv{i}"), if i == 0 { in_c } else { c }, c, k, true))
                .collect(),
        );
    }
    let mut branches = Vec::with_capacity(r_max);
    let mut dormant = Vec::with_capacity(r_max);
    match cfg.arch {
        Arch::SumNet => {
            for level in 1..=r_max {
                let c = cfg.level_channels(level);
                let mut layers: Vec<LayerSpec> = (0..cfg.branch_depth - 1)
                    .map(|i| LayerSpec::new(format!("branch.{level}.conv{i}"), c, c, k, true))
                    .collect();
                layers.push(LayerSpec::new(format!("branch.{level}.head"), c, cfg.num_keypoints, k, false));
                if cfg.branch_mask.is_active(level) {
                    branches.push(Some(layers));
                    dormant.push(None);
                } else {
                    branches.push(None);
                    dormant.push(Some(layers));
                }
            }
        }
        Arch::Rcn => {
            // channels carried in from coarser branches, per active branch
            let mut carried: Vec<usize> = Vec::new();
            for level in 1..=r_max {
                dormant.push(None);
                if !cfg.branch_mask.is_active(level) {
                    branches.push(None);
                    continue;
                }
                let c = cfg.level_channels(level);
                let extra: usize = if cfg.skip {
                    carried.iter().sum()
                } else {
                    carried.last().copied().unwrap_or(0)
                };
                let mut layers: Vec<LayerSpec> = (0..cfg.branch_depth)
                    .map(|i| LayerSpec::new(format!("branch.{level}.conv{i}"), if i == 0 { c + extra } else { c }, c, k, true))
                    .collect();
                if level == r_max {
                    layers.extend(
                        (0..cfg.extra_final_1x1).map(|i| LayerSpec::new(format!("branch.{level}.pw{i}"), c, c, 1, true)),
                    );
                    layers.push(LayerSpec::new(format!("branch.{level}.head"), c, cfg.num_keypoints, k, false));
                }
                branches.push(Some(layers));
                carried.push(c);
            }
        }
    }
    Ok(Topology::Keypoint { sizes, trunk, branches, dormant })
}

fn denoiser_topology(cfg: &DenoiserConfig) -> Result<Topology> {
    cfg.validate()?;
    let k = cfg.num_keypoints;
    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers - 1 {
        let in_c = if i == 0 { k } else { cfg.channels };
        layers.push(LayerSpec::new(format!("den.conv{i}"), in_c, cfg.channels, cfg.kernel, true));
    }
    let in_c = if cfg.layers == 1 { k } else { cfg.channels };
    layers.push(LayerSpec::new("den.head".into(), in_c, k, cfg.kernel, false));
    Ok(Topology::Denoiser { layers })
}

impl Topology {
    /// Every layer in parameter-initialization order.
    fn all_layers(&self) -> Vec<&LayerSpec> {
        match self {
            Topology::Keypoint { trunk, branches, dormant, .. } => trunk
                .iter()
                .flatten()
                .chain(
                    branches
                        .iter()
                        .zip(dormant)
                        .flat_map(|(a, b)| a.iter().chain(b.iter()).flatten()),
                )
                .collect(),
            Topology::Denoiser { layers } => layers.iter().collect(),
        }
    }
}

/// Uniform `±sqrt(6 / (fan_in + fan_out))` kernels and zero biases.
fn init_params(topology: &Topology, cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for layer in topology.all_layers() {
        let kk = layer.kernel * layer.kernel;
        let bound = (6.0 / ((layer.in_c + layer.out_c) * kk) as f64).sqrt();
        let w = Tensor4::from_fn((layer.out_c, layer.in_c, layer.kernel, layer.kernel), |_, _, _, _| {
            rng.random_range(-bound..bound)
        });
        params.insert(layer.weight_name(), w);
        params.insert(layer.bias_name(), Tensor4::zeros((layer.out_c, 1, 1, 1)));
    }
    if let ModelConfig::Keypoint(c) = cfg {
        if c.arch == Arch::SumNet {
            let s = c.input_size;
            params.insert(
                ALPHA,
                Tensor4::full((c.num_branches, c.num_keypoints, s, s), 1.0 / c.num_branches as f64),
            );
        }
    }
    params
}

/// A realized model: configuration, topology and parameters `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: ModelConfig,
    topology: Topology,
    params: ParamStore,
}

/// Parameters registered as leaves on a tape.
pub type ParamVars = BTreeMap<String, Var>;

/// Builds a SumNet from `config` (which must have `arch == SumNet`).
pub fn build_sumnet(config: &NetworkConfig) -> Result<Network> {
    if config.arch != Arch::SumNet {
        return crate::error::config(format!("build_sumnet called with arch {}", config.arch));
    }
    Network::new(ModelConfig::Keypoint(config.clone()))
}

/// Builds an RCN from `config` (which must have `arch == Rcn`).
pub fn build_rcn(config: &NetworkConfig) -> Result<Network> {
    if config.arch != Arch::Rcn {
        return crate::error::config(format!("build_rcn called with arch {}", config.arch));
    }
    Network::new(ModelConfig::Keypoint(config.clone()))
}

impl Network {
    /// Builds the topology and initializes parameters from the configured
    /// seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (topology, seed) = match &config {
            ModelConfig::Keypoint(c) => (keypoint_topology(c)?, c.init_seed),
            ModelConfig::Denoiser(c) => (denoiser_topology(c)?, c.init_seed),
        };
        let params = init_params(&topology, &config, seed);
        Ok(Self { config, topology, params })
    }

    /// Rebuilds a network around previously trained parameters.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(config)?;
        if !net.params.same_layout(&params) {
            return crate::error::config("parameter names or shapes do not match the configuration");
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn keypoint_config(&self) -> Option<&NetworkConfig> {
        match &self.config {
            ModelConfig::Keypoint(c) => Some(c),
            ModelConfig::Denoiser(_) => None,
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.config.num_keypoints()
    }

    pub fn map_size(&self) -> usize {
        self.config.map_size()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        if !self.params.same_layout(&params) {
            return crate::error::config("parameter layout mismatch");
        }
        self.params = params;
        Ok(())
    }

    /// Spatial size at every level, coarsest first (keypoint networks).
    pub fn level_sizes(&self) -> Vec<usize> {
        match &self.topology {
            Topology::Keypoint { sizes, .. } => sizes.clone(),
            Topology::Denoiser { .. } => vec![self.map_size()],
        }
    }

    /// Every conv layer of the realized graph, including dormant ones.
    pub fn layers(&self) -> Vec<LayerSpec> {
        self.topology.all_layers().into_iter().cloned().collect()
    }

    /// Names of parameters that can influence the output.
    pub fn live_params(&self) -> BTreeSet<String> {
        let mut live = BTreeSet::new();
        let mut add = |l: &LayerSpec| {
            live.insert(l.weight_name());
            live.insert(l.bias_name());
        };
        match &self.topology {
            Topology::Keypoint { trunk, branches, .. } => {
                let coarsest = branches.iter().position(Option::is_some).unwrap_or(0);
                for level in trunk.iter().skip(coarsest) {
                    level.iter().for_each(&mut add);
                }
                branches.iter().flatten().flatten().for_each(&mut add);
                if self.params.get(ALPHA).is_some() {
                    live.insert(ALPHA.to_string());
                }
            }
            Topology::Denoiser { layers } => layers.iter().for_each(add),
        }
        live
    }

    /// Registers every parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        self.params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone())))
            .collect()
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let d = x.dims();
        let s = self.map_size();
        let c = self.config.input_channels();
        if d.c != c || d.h != s || d.w != s || d.n == 0 {
            return shape(format!("network expects (n, {c}, {s}, {s}) input, got {d}"));
        }
        Ok(())
    }

    fn apply_layers(tape: &mut Tape, mut x: Var, layers: &[LayerSpec], pv: &ParamVars) -> Result<Var> {
        for l in layers {
            let w = pv[&l.weight_name()];
            let b = pv[&l.bias_name()];
            x = tape.conv2d(x, w, b)?;
            if l.relu {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    fn upsample_maps(mode: UpsampleMode, from: usize, to: usize) -> AxisMap {
        match mode {
            UpsampleMode::Tile => AxisMap::tile(from, to),
            UpsampleMode::Bilinear => AxisMap::linear(from, to),
        }
    }

    /// Records the forward pass up to the pre-softmax scores. For SumNet the
    /// upsampled branch maps `(level, M)` are returned too.
    pub fn record_with_branches(
        &self,
        tape: &mut Tape,
        input: Var,
        pv: &ParamVars,
    ) -> Result<(Var, Vec<(usize, Var)>)> {
        self.check_input(tape.value(input))?;
        let (sizes, trunk, branches) = match &self.topology {
            Topology::Denoiser { layers } => {
                return Ok((Self::apply_layers(tape, input, layers, pv)?, Vec::new()));
            }
            Topology::Keypoint { sizes, trunk, branches, .. } => (sizes, trunk, branches),
        };
        let cfg = self.keypoint_config().expect("keypoint topology");
        let r_max = cfg.num_branches;
        let coarsest = branches.iter().position(Option::is_some).expect("validated mask") + 1;

        // trunk, finest level first; feats[level-1] = T^(level)
        let mut feats: Vec<Option<Var>> = vec![None; r_max];
        let mut x = input;
        for level in (coarsest..=r_max).rev() {
            if level < r_max {
                let (size, stride) = pool_for(sizes[level])?;
                x = tape.maxpool(x, size, stride)?;
            }
            x = Self::apply_layers(tape, x, &trunk[level - 1], pv)?;
            feats[level - 1] = Some(x);
        }

        let s = cfg.input_size;
        match cfg.arch {
            Arch::SumNet => {
                let mut maps = Vec::new();
                let mut idx = Vec::new();
                for level in coarsest..=r_max {
                    let Some(layers) = &branches[level - 1] else { continue };
                    let t = feats[level - 1].expect("trunk computed");
                    let mut m = Self::apply_layers(tape, t, layers, pv)?;
                    let from = sizes[level - 1];
                    if from != s {
                        m = tape.resize(
                            m,
                            Self::upsample_maps(cfg.upsample, from, s),
                            Self::upsample_maps(cfg.upsample, from, s),
                        )?;
                    }
                    maps.push(m);
                    idx.push(level - 1);
                }
                let alpha = pv[ALPHA];
                let out = tape.weighted_sum(&maps, &idx, alpha)?;
                let levels = idx.iter().map(|i| i + 1).zip(maps).collect();
                Ok((out, levels))
            }
            Arch::Rcn => {
                // outputs of coarser branches, resampled to the current level
                let mut coarser: Vec<Var> = Vec::new();
                let mut out = None;
                for level in coarsest..=r_max {
                    if level > coarsest {
                        let (from, to) = (sizes[level - 2], sizes[level - 1]);
                        for v in coarser.iter_mut() {
                            *v = tape.resize(
                                *v,
                                Self::upsample_maps(cfg.upsample, from, to),
                                Self::upsample_maps(cfg.upsample, from, to),
                            )?;
                        }
                    }
                    let Some(layers) = &branches[level - 1] else { continue };
                    let t = feats[level - 1].expect("trunk computed");
                    let inp = if coarser.is_empty() {
                        t
                    } else {
                        let mut parts = vec![t];
                        parts.extend(coarser.iter().rev().copied());
                        tape.concat(&parts)?
                    };
                    let y = Self::apply_layers(tape, inp, layers, pv)?;
                    if !cfg.skip {
                        coarser.clear();
                    }
                    coarser.push(y);
                    out = Some(y);
                }
                Ok((out.expect("finest branch active"), Vec::new()))
            }
        }
    }

    /// Records the forward pass and returns the pre-softmax scores.
    pub fn record(&self, tape: &mut Tape, input: Var, pv: &ParamVars) -> Result<Var> {
        Ok(self.record_with_branches(tape, input, pv)?.0)
    }

    /// Pre-softmax scores `(n, K, S, S)`.
    pub fn pre_softmax(&self, images: &Tensor4) -> Result<Tensor4> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let x = tape.leaf(images.clone());
        let z = self.record(&mut tape, x, &pv)?;
        Ok(tape.into_value(z))
    }

    /// Location probability maps for a batch of preprocessed images.
    pub fn forward(&self, images: &Tensor4) -> Result<ProbMaps> {
        Ok(ProbMaps::from_logits(&self.pre_softmax(images)?))
    }

    /// Upsampled per-branch score maps `(level, M^(level))` of a SumNet.
    pub fn branch_maps(&self, images: &Tensor4) -> Result<Vec<(usize, Tensor4)>> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let x = tape.leaf(images.clone());
        let (_, maps) = self.record_with_branches(&mut tape, x, &pv)?;
        Ok(maps.into_iter().map(|(l, v)| (l, tape.value(v).clone())).collect())
    }

    /// Likelihood terms for full keypoint supervision, each weighted `1/N`.
    pub fn keypoint_terms(&self, truth: &[KeypointSet]) -> Result<Vec<NllTerm>> {
        keypoint_terms(truth, self.num_keypoints(), self.map_size())
    }

    /// Objective `Σ terms + λ‖W‖²` and its gradient for every parameter.
    pub fn loss_and_grads(&self, inputs: &Tensor4, terms: &[NllTerm], lambda: f64) -> Result<(f64, ParamStore)> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let x = tape.leaf(inputs.clone());
        let z = self.record(&mut tape, x, &pv)?;
        let loss = tape.nll(z, terms)?;
        let data_loss = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss);
        let mut out = ParamStore::new();
        for (name, var) in &pv {
            let mut g = grads.take(*var);
            if lambda != 0.0 {
                let w = self.params.get(name).expect("registered");
                for (gi, wi) in g.data_mut().iter_mut().zip(w.data()) {
                    *gi += 2.0 * lambda * wi;
                }
            }
            out.insert(name.clone(), g);
        }
        Ok((data_loss + lambda * self.params.sum_squares(), out))
    }

    /// Objective value only.
    pub fn loss(&self, inputs: &Tensor4, terms: &[NllTerm], lambda: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let x = tape.leaf(inputs.clone());
        let z = self.record(&mut tape, x, &pv)?;
        let loss = tape.nll(z, terms)?;
        Ok(tape.value(loss).data()[0] + lambda * self.params.sum_squares())
    }

    /// Objective plus a fingerprint of every ReLU sign and pooling winner,
    /// used to skip finite-difference probes that cross a kink.
    pub fn loss_with_fingerprint(&self, inputs: &Tensor4, terms: &[NllTerm], lambda: f64) -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape);
        let x = tape.leaf(inputs.clone());
        let z = self.record(&mut tape, x, &pv)?;
        let loss = tape.nll(z, terms)?;
        Ok((tape.value(loss).data()[0] + lambda * self.params.sum_squares(), tape.kink_fingerprint()))
    }

    /// Sum of squared parameter values `‖W‖²`.
    pub fn weight_norm_sq(&self) -> f64 {
        self.params.sum_squares()
    }

    pub(crate) fn ensure_same_grid(&self, other: &Network) -> Result<()> {
        if self.num_keypoints() != other.num_keypoints() || self.map_size() != other.map_size() {
            return config(format!(
                "keypoint/map mismatch: {} has K={} S={}, {} has K={} S={}",
                self.config.tag(),
                self.num_keypoints(),
                self.map_size(),
                other.config.tag(),
                other.num_keypoints(),
                other.map_size()
            ));
        }
        Ok(())
    }
}

/// Likelihood terms for full supervision of `k` keypoints on a
/// `size × size` grid, each weighted `1/N`.
pub fn keypoint_terms(truth: &[KeypointSet], k: usize, size: usize) -> Result<Vec<NllTerm>> {
    let n = truth.len();
    let mut terms = Vec::with_capacity(n * k);
    for (i, set) in truth.iter().enumerate() {
        if set.len() != k {
            return Err(Error::Input(format!("sample {i} has {} keypoints, network predicts {k}", set.len())));
        }
        set.check_bounds(size, size)?;
        for (j, p) in set.points().iter().enumerate() {
            terms.push(NllTerm { n: i, k: j, row: p.row, col: p.col, weight: 1.0 / n as f64 });
        }
    }
    Ok(terms)
}
