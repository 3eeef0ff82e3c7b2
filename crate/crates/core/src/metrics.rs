//! Keypoint sets, probability maps, the training criterion and the
//! interocular-normalized error.

use std::io::Write;

use crate::error::{input, Error, Result};
use crate::ops::{spatial_softmax, PROB_FLOOR};
use crate::params::ParamStore;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Keypoint {
    pub row: usize,
    pub col: usize,
}

impl Keypoint {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

/// One integer grid location per keypoint.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct KeypointSet(pub Vec<Keypoint>);

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Self {
        Self(points)
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self(pairs.iter().map(|&(r, c)| Keypoint::new(r, c)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Keypoint] {
        &self.0
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.0.iter().all(|p| p.row < height && p.col < width)
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        match self.0.iter().position(|p| p.row >= height || p.col >= width) {
            None => Ok(()),
            Some(k) => input(format!(
                "keypoint {k} at ({}, {}) outside {height}x{width} grid",
                self.0[k].row, self.0[k].col
            )),
        }
    }
}

/// Indices of the two eye keypoints that define the interocular distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    pub left_eye: usize,
    pub right_eye: usize,
}

impl EvalConfig {
    pub fn validate(&self, num_keypoints: usize) -> Result<()> {
        if self.left_eye == self.right_eye {
            return Err(Error::Config("eye indices must differ".into()));
        }
        if self.left_eye >= num_keypoints || self.right_eye >= num_keypoints {
            return Err(Error::Config(format!(
                "eye indices ({}, {}) out of range for {num_keypoints} keypoints",
                self.left_eye, self.right_eye
            )));
        }
        Ok(())
    }

    pub fn interocular(&self, truth: &KeypointSet) -> f64 {
        truth.0[self.left_eye].distance(&truth.0[self.right_eye])
    }
}

/// Spatially normalized location distributions, dims `(n, K, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMaps(Tensor4);

impl ProbMaps {
    /// Applies the spatial softmax to pre-softmax scores.
    pub fn from_logits(logits: &Tensor4) -> Self {
        Self(spatial_softmax(logits))
    }

    /// Wraps maps that are already normalized; each plane must sum to one.
    pub fn from_normalized(maps: Tensor4) -> Result<Self> {
        let d = maps.dims();
        for n in 0..d.n {
            for k in 0..d.c {
                let p = maps.plane(n, k);
                if p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                    return input(format!("map ({n}, {k}) is not a probability distribution"));
                }
            }
        }
        Ok(Self(maps))
    }

    pub fn dims(&self) -> Dims {
        self.0.dims()
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.0
    }

    pub fn map(&self, n: usize, k: usize) -> &[f64] {
        self.0.plane(n, k)
    }

    /// Hard predictions: the arg-max location of every map.
    pub fn argmax(&self) -> Vec<KeypointSet> {
        let d = self.dims();
        (0..d.n)
            .map(|n| {
                KeypointSet(
                    (0..d.c)
                        .map(|k| argmax_location(self.map(n, k), d.w))
                        .collect(),
                )
            })
            .collect()
    }
}

/// Location of the largest value of a row-major `?×width` map; the first
/// occurrence wins ties.
pub fn argmax_location(map: &[f64], width: usize) -> Keypoint {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    Keypoint::new(best / width, best % width)
}

/// Mean negative log-likelihood of the true locations plus `lambda·‖W‖²`:
/// `(1/N) Σ_n Σ_k −log p_k(y_k) + λ‖W‖²`, with `log p` floored at
/// `log(1e-30)`.
pub fn nll_loss(probs: &ProbMaps, truth: &[KeypointSet], lambda: f64, params: &ParamStore) -> Result<f64> {
    let d = probs.dims();
    if truth.len() != d.n {
        return input(format!("{} keypoint sets for {} samples", truth.len(), d.n));
    }
    let floor = PROB_FLOOR.ln();
    let mut total = 0.0;
    for (n, set) in truth.iter().enumerate() {
        if set.len() != d.c {
            return input(format!("sample {n} has {} keypoints, maps have {}", set.len(), d.c));
        }
        set.check_bounds(d.h, d.w)?;
        for (k, p) in set.0.iter().enumerate() {
            total -= probs.map(n, k)[p.row * d.w + p.col].ln().max(floor);
        }
    }
    Ok(total / d.n as f64 + lambda * params.sum_squares())
}

/// Per-sample, per-keypoint Euclidean errors divided by the interocular
/// distance of the true keypoints.
pub fn normalized_errors(pred: &[KeypointSet], truth: &[KeypointSet], eval: &EvalConfig) -> Result<Vec<Vec<f64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} ground-truth samples",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Eval("no samples to evaluate".into()));
    }
    pred.iter()
        .zip(truth)
        .enumerate()
        .map(|(n, (p, t))| {
            if p.len() != t.len() {
                return Err(Error::Eval(format!("sample {n}: keypoint counts differ")));
            }
            eval.validate(t.len())?;
            let d = eval.interocular(t);
            if d <= 0.0 {
                return Err(Error::Eval(format!("sample {n} has zero interocular distance")));
            }
            Ok(p.0.iter().zip(&t.0).map(|(a, b)| a.distance(b) / d).collect())
        })
        .collect()
}

/// Mean interocular-normalized error over all samples and keypoints.
pub fn interocular_error(pred: &[KeypointSet], truth: &[KeypointSet], eval: &EvalConfig) -> Result<f64> {
    let errs = normalized_errors(pred, truth, eval)?;
    let count: usize = errs.iter().map(Vec::len).sum();
    let total: f64 = errs.iter().flatten().sum();
    Ok(total / count as f64)
}

/// Writes the per-keypoint evaluation CSV.
pub fn write_eval_csv<W: Write>(
    out: W,
    ids: &[String],
    pred: &[KeypointSet],
    truth: &[KeypointSet],
    eval: &EvalConfig,
) -> Result<()> {
    let errs = normalized_errors(pred, truth, eval)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "sample_id",
        "keypoint_id",
        "pred_row",
        "pred_col",
        "true_row",
        "true_col",
        "normalized_error",
    ])?;
    for (n, e) in errs.iter().enumerate() {
        for (k, err) in e.iter().enumerate() {
            let (p, t) = (pred[n].0[k], truth[n].0[k]);
            w.write_record([
                ids[n].clone(),
                k.to_string(),
                p.row.to_string(),
                p.col.to_string(),
                t.row.to_string(),
                t.col.to_string(),
                format!("{err}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
