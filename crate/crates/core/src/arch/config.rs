use std::fmt;
use std::str::FromStr;

use crate::error::{config, Error, Result};
use crate::kv::{join_list, parse_list, KvMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    /// Branch score maps upsampled to full resolution and combined by a
    /// learned per-pixel weighted sum.
    SumNet,
    /// Recombinator network: each branch output is upsampled and
    /// concatenated into the next finer branch.
    Rcn,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::SumNet => "sumnet",
            Arch::Rcn => "rcn",
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sumnet" => Ok(Arch::SumNet),
            "rcn" => Ok(Arch::Rcn),
            other => config(format!("unknown architecture `{other}` (expected sumnet or rcn)")),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum UpsampleMode {
    #[default]
    Tile,
    Bilinear,
}

impl FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tile" => Ok(UpsampleMode::Tile),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            other => config(format!("unknown upsample mode `{other}`")),
        }
    }
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMode::Tile => "tile",
            UpsampleMode::Bilinear => "bilinear",
        })
    }
}

/// Which branches participate, ordered coarsest to finest.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BranchMask(Vec<bool>);

impl BranchMask {
    pub fn all(branches: usize) -> Self {
        Self(vec![true; branches])
    }

    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether branch `level` (1 = coarsest) is on.
    pub fn is_active(&self, level: usize) -> bool {
        self.0[level - 1]
    }

    pub fn is_full(&self) -> bool {
        self.0.iter().all(|&b| b)
    }
}

impl FromStr for BranchMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits: Vec<u8> = parse_list(s, "mask")?;
        if bits.iter().any(|&b| b > 1) {
            return config(format!("mask `{s}` must contain only 0 and 1"));
        }
        Ok(Self(bits.into_iter().map(|b| b == 1).collect()))
    }
}

impl fmt::Display for BranchMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits: Vec<u8> = self.0.iter().map(|&b| b as u8).collect();
        f.write_str(&join_list(&bits))
    }
}

/// Declarative description of a SumNet or RCN model.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub arch: Arch,
    pub input_size: usize,
    pub num_keypoints: usize,
    pub num_branches: usize,
    /// Channels per level, coarsest first.
    pub channels: Vec<usize>,
    pub conv_kernel: usize,
    /// Conv+ReLU layers per trunk level.
    pub trunk_depth: usize,
    /// Conv layers per branch. For SumNet the last one produces the K score
    /// maps; for RCN these are the feature layers before the head.
    pub branch_depth: usize,
    pub skip: bool,
    pub branch_mask: BranchMask,
    /// 1×1 conv+ReLU layers inserted before the RCN output head.
    pub extra_final_1x1: usize,
    pub upsample: UpsampleMode,
    pub init_seed: u64,
}

pub const MAX_BRANCHES: usize = 7;

impl NetworkConfig {
    pub fn new(arch: Arch, input_size: usize, num_keypoints: usize, num_branches: usize) -> Self {
        Self {
            arch,
            input_size,
            num_keypoints,
            num_branches,
            channels: vec![48; num_branches],
            conv_kernel: 3,
            trunk_depth: 2,
            branch_depth: match arch {
                Arch::SumNet => 3,
                Arch::Rcn => 2,
            },
            skip: false,
            branch_mask: BranchMask::all(num_branches),
            extra_final_1x1: 0,
            upsample: UpsampleMode::Tile,
            init_seed: 0,
        }
    }

    pub fn sumnet(input_size: usize, num_keypoints: usize, num_branches: usize) -> Self {
        Self::new(Arch::SumNet, input_size, num_keypoints, num_branches)
    }

    pub fn rcn(input_size: usize, num_keypoints: usize, num_branches: usize) -> Self {
        Self::new(Arch::Rcn, input_size, num_keypoints, num_branches)
    }

    /// The 68-keypoint RCN: 5 branches, 64 channels and two 1×1 layers
    /// before the head.
    pub fn rcn_68() -> Self {
        Self {
            channels: vec![64; 5],
            extra_final_1x1: 2,
            ..Self::rcn(80, 68, 5)
        }
    }

    pub fn with_channels(mut self, c: usize) -> Self {
        self.channels = vec![c; self.num_branches];
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn with_skip(mut self, skip: bool) -> Self {
        self.skip = skip;
        self
    }

    /// Channels at `level` (1 = coarsest).
    pub fn level_channels(&self, level: usize) -> usize {
        self.channels[level - 1]
    }

    /// Spatial size of every level, coarsest first. Each coarser level halves
    /// the finer one; a 5×5 map is reduced to 2×2 with a 3×3 stride-2 pool.
    pub fn level_sizes(&self) -> Result<Vec<usize>> {
        let mut sizes = vec![self.input_size];
        for _ in 1..self.num_branches {
            let s = *sizes.last().expect("nonempty");
            let (size, stride) = pool_for(s)?;
            sizes.push((s - size) / stride + 1);
        }
        sizes.reverse();
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.num_branches;
        if !(1..=MAX_BRANCHES).contains(&r) {
            return config(format!("branch count {r} outside 1..={MAX_BRANCHES}"));
        }
        if self.num_keypoints == 0 {
            return config("at least one keypoint is required");
        }
        if self.channels.len() != r || self.channels.contains(&0) {
            return config(format!("need {r} positive channel counts, got {:?}", self.channels));
        }
        if self.conv_kernel % 2 == 0 {
            return config(format!("convolution kernel {} must be odd", self.conv_kernel));
        }
        if self.trunk_depth == 0 || self.branch_depth == 0 {
            return config("trunk and branch depths must be at least 1");
        }
        if self.branch_mask.len() != r {
            return config(format!("mask has {} bits for {r} branches", self.branch_mask.len()));
        }
        if !self.branch_mask.bits().iter().any(|&b| b) {
            return config("branch mask disables every branch");
        }
        if self.arch == Arch::Rcn && !self.branch_mask.is_active(r) {
            return config("an RCN cannot mask its finest branch: it holds the output head");
        }
        if self.arch == Arch::SumNet && (self.skip || self.extra_final_1x1 > 0) {
            return config("skip connections and extra 1x1 layers apply to RCN only");
        }
        self.level_sizes()?;
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("arch", self.arch);
        kv.set("input_size", self.input_size);
        kv.set("num_keypoints", self.num_keypoints);
        kv.set("num_branches", self.num_branches);
        kv.set("channels", join_list(&self.channels));
        kv.set("conv_kernel", self.conv_kernel);
        kv.set("trunk_depth", self.trunk_depth);
        kv.set("branch_depth", self.branch_depth);
        kv.set("skip", self.skip);
        kv.set("branch_mask", &self.branch_mask);
        kv.set("extra_final_1x1", self.extra_final_1x1);
        kv.set("upsample", self.upsample);
        kv.set("init_seed", self.init_seed);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let arch: Arch = kv.require::<String>("arch")?.parse()?;
        let cfg = Self {
            arch,
            input_size: kv.require("input_size")?,
            num_keypoints: kv.require("num_keypoints")?,
            num_branches: kv.require("num_branches")?,
            channels: parse_list(&kv.require::<String>("channels")?, "channels")?,
            conv_kernel: kv.require("conv_kernel")?,
            trunk_depth: kv.require("trunk_depth")?,
            branch_depth: kv.require("branch_depth")?,
            skip: kv.require("skip")?,
            branch_mask: kv.require::<String>("branch_mask")?.parse()?,
            extra_final_1x1: kv.require("extra_final_1x1")?,
            upsample: kv.require::<String>("upsample")?.parse()?,
            init_seed: kv.require("init_seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Pool window and stride that take a level of size `s` to the next coarser
/// level.
pub fn pool_for(s: usize) -> Result<(usize, usize)> {
    match s {
        5 => Ok((3, 2)),
        s if s >= 2 && s % 2 == 0 => Ok((2, 2)),
        s => config(format!(
            "a {s}x{s} map cannot be pooled further (only even sizes and 5 are supported)"
        )),
    }
}

/// Returns `config` with `mask` applied, checking it against the
/// architecture's masking rules.
pub fn apply_branch_mask(config: &NetworkConfig, mask: &BranchMask) -> Result<NetworkConfig> {
    if mask.len() != config.num_branches {
        return crate::error::config(format!(
            "mask `{mask}` has {} bits but the network has {} branches",
            mask.len(),
            config.num_branches
        ));
    }
    let out = NetworkConfig {
        branch_mask: mask.clone(),
        ..config.clone()
    };
    out.validate()?;
    Ok(out)
}
