//! Central finite-difference checks of the analytic gradients.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::ops::{AxisMap, NllTerm};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

/// The differentiable primitives that can be checked in isolation.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Conv2d,
    MaxPool { size: usize, stride: usize },
    Relu,
    UpsampleTile { factor: usize },
    UpsampleBilinear { factor: usize },
    Concat,
    WeightedSum,
    SpatialSoftmax,
    SoftmaxNll,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv2d => "conv2d",
            Primitive::MaxPool { .. } => "maxpool",
            Primitive::Relu => "relu",
            Primitive::UpsampleTile { .. } => "upsample_tile",
            Primitive::UpsampleBilinear { .. } => "upsample_bilinear",
            Primitive::Concat => "concat",
            Primitive::WeightedSum => "weighted_sum",
            Primitive::SpatialSoftmax => "spatial_softmax",
            Primitive::SoftmaxNll => "softmax_nll",
        }
    }

    /// One representative configuration of every primitive.
    pub fn all() -> Vec<Primitive> {
        vec![
            Primitive::Conv2d,
            Primitive::MaxPool { size: 2, stride: 2 },
            Primitive::MaxPool { size: 3, stride: 2 },
            Primitive::Relu,
            Primitive::UpsampleTile { factor: 2 },
            Primitive::UpsampleBilinear { factor: 3 },
            Primitive::Concat,
            Primitive::WeightedSum,
            Primitive::SpatialSoftmax,
            Primitive::SoftmaxNll,
        ]
    }

    /// Records the primitive on `tape`. Input order: conv `[x, kernels,
    /// bias]`, concat `[a, b]`, weighted sum `[map_0, .., map_{R-1}, alpha]`,
    /// everything else `[x]`.
    pub fn record(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var> {
        let x = inputs[0];
        match self {
            Primitive::Conv2d => tape.conv2d(x, inputs[1], inputs[2]),
            Primitive::MaxPool { size, stride } => tape.maxpool(x, *size, *stride),
            Primitive::Relu => Ok(tape.relu(x)),
            Primitive::UpsampleTile { factor } | Primitive::UpsampleBilinear { factor } => {
                let d = tape.value(x).dims();
                let (rows, cols) = if matches!(self, Primitive::UpsampleTile { .. }) {
                    (AxisMap::tile(d.h, d.h * factor), AxisMap::tile(d.w, d.w * factor))
                } else {
                    (AxisMap::linear(d.h, d.h * factor), AxisMap::linear(d.w, d.w * factor))
                };
                tape.resize(x, rows, cols)
            }
            Primitive::Concat => tape.concat(inputs),
            Primitive::WeightedSum => {
                let (maps, alpha) = inputs.split_at(inputs.len() - 1);
                let branches: Vec<usize> = (0..maps.len()).collect();
                tape.weighted_sum(maps, &branches, alpha[0])
            }
            Primitive::SpatialSoftmax => Ok(tape.softmax(x)),
            Primitive::SoftmaxNll => {
                let d = tape.value(x).dims();
                let terms: Vec<NllTerm> = (0..d.n)
                    .flat_map(|n| {
                        (0..d.c).map(move |k| NllTerm {
                            n,
                            k,
                            row: (n + 2 * k) % d.h,
                            col: (3 * n + k) % d.w,
                            weight: 1.0 / d.n as f64,
                        })
                    })
                    .collect();
                tape.nll(x, &terms)
            }
        }
    }

    /// Random inputs placed away from non-differentiable points: ReLU inputs
    /// keep a margin from zero and pooling windows have no near-ties.
    pub fn random_inputs<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor4> {
        let u = |dims: (usize, usize, usize, usize), rng: &mut R| Tensor4::uniform(dims, -1.0, 1.0, rng);
        match self {
            Primitive::Conv2d => vec![
                u((2, 3, 5, 5), rng),
                u((4, 3, 3, 3), rng),
                u((4, 1, 1, 1), rng),
            ],
            Primitive::MaxPool { .. } => {
                // distinct values spaced 0.05 apart, shuffled
                let mut vals: Vec<f64> = (0..2 * 2 * 7 * 7).map(|i| i as f64 * 0.05 - 4.0).collect();
                vals.shuffle(rng);
                vec![Tensor4::from_vec((2, 2, 7, 7), vals).expect("dims")]
            }
            Primitive::Relu => {
                let mut t = u((2, 2, 4, 4), rng);
                for v in t.data_mut() {
                    if v.abs() < 0.05 {
                        *v += 0.1f64.copysign(*v);
                    }
                }
                vec![t]
            }
            Primitive::UpsampleTile { .. } | Primitive::UpsampleBilinear { .. } => {
                vec![u((2, 2, 3, 4), rng)]
            }
            Primitive::Concat => vec![u((2, 2, 3, 3), rng), u((2, 3, 3, 3), rng)],
            Primitive::WeightedSum => vec![
                u((2, 2, 4, 4), rng),
                u((2, 2, 4, 4), rng),
                u((2, 2, 4, 4), rng),
                u((3, 2, 4, 4), rng),
            ],
            Primitive::SpatialSoftmax | Primitive::SoftmaxNll => vec![Tensor4::uniform((2, 3, 4, 5), -2.0, 2.0, rng)],
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Flip the sign of the analytic gradient before comparing. Used to
    /// prove the checker detects broken backward passes.
    pub inject_sign_error: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            tolerance: 1e-4,
            inject_sign_error: false,
        }
    }
}

/// One coordinate whose analytic and numeric derivatives disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }

    /// `Err` listing the offending coordinates when the check failed.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let list: Vec<String> = self
            .mismatches
            .iter()
            .take(8)
            .map(|m| {
                format!(
                    "{}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                    m.input, m.index, m.analytic, m.numeric, m.rel_error
                )
            })
            .collect();
        Err(Error::GradCheck(format!(
            "{}: {} of {} coordinates exceed {:.1e}: {}",
            self.name,
            self.mismatches.len(),
            self.checked,
            self.tolerance,
            list.join("; ")
        )))
    }
}

/// `|a − n| / max(|a|, |n|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// A scalar function of several tensors with its analytic gradient.
pub trait ScalarFn {
    /// Value and a fingerprint of the active pieces (ReLU signs, pooling
    /// winners); perturbations that change the fingerprint are skipped.
    fn eval(&self, inputs: &[Tensor4]) -> Result<(f64, u64)>;
    fn grad(&self, inputs: &[Tensor4]) -> Result<Vec<Tensor4>>;
}

/// Compares analytic and central-difference derivatives at the coordinates
/// `coords` (pairs of input index and flat offset).
pub fn check_coords<F: ScalarFn>(
    name: &str,
    labels: &[String],
    f: &F,
    inputs: &[Tensor4],
    coords: &[(usize, usize)],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = f.grad(inputs)?;
    let (_, base_print) = f.eval(inputs)?;
    let mut work: Vec<Tensor4> = inputs.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
        mismatches: Vec::new(),
    };
    for &(i, idx) in coords {
        let orig = work[i].data()[idx];
        work[i].data_mut()[idx] = orig + opts.epsilon;
        let (plus, p1) = f.eval(&work)?;
        work[i].data_mut()[idx] = orig - opts.epsilon;
        let (minus, p2) = f.eval(&work)?;
        work[i].data_mut()[idx] = orig;
        if p1 != base_print || p2 != base_print {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let mut a = analytic[i].data()[idx];
        if opts.inject_sign_error {
            a = -a;
        }
        let rel = relative_error(a, numeric);
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel);
        if rel > opts.tolerance {
            report.mismatches.push(Mismatch {
                input: labels.get(i).cloned().unwrap_or_else(|| format!("input{i}")),
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

/// Fingerprint of every kink-bearing op on a tape.
pub(crate) fn tape_fingerprint(tape: &Tape, vars: impl Iterator<Item = Var>) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in vars {
        for x in tape.value(v).data() {
            (*x > 0.0).hash(&mut h);
        }
    }
    h.finish()
}

struct PrimitiveFn<'a> {
    op: &'a Primitive,
    probe: Option<Tensor4>,
}

impl PrimitiveFn<'_> {
    fn build(&self, inputs: &[Tensor4]) -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = self.op.record(&mut tape, &vars)?;
        Ok((tape, vars, out))
    }

    fn fingerprint(&self, inputs: &[Tensor4], tape: &Tape, out: Var) -> u64 {
        match self.op {
            Primitive::Relu => tape_fingerprint(tape, std::iter::once(out)),
            Primitive::MaxPool { size, stride } => {
                let (_, arg) = crate::ops::maxpool_forward(&inputs[0], *size, *stride).expect("checked");
                use std::hash::{Hash, Hasher};
                let mut h = std::collections::hash_map::DefaultHasher::new();
                arg.hash(&mut h);
                h.finish()
            }
            _ => 0,
        }
    }
}

impl ScalarFn for PrimitiveFn<'_> {
    fn eval(&self, inputs: &[Tensor4]) -> Result<(f64, u64)> {
        let (tape, _, out) = self.build(inputs)?;
        let y = tape.value(out);
        let value = match &self.probe {
            Some(g) => g.dot(y),
            None => y.data()[0],
        };
        Ok((value, self.fingerprint(inputs, &tape, out)))
    }

    fn grad(&self, inputs: &[Tensor4]) -> Result<Vec<Tensor4>> {
        let (tape, vars, out) = self.build(inputs)?;
        let mut g = match &self.probe {
            Some(p) => tape.backward_with_seed(out, p.clone()),
            None => tape.backward(out),
        };
        Ok(vars.into_iter().map(|v| g.take(v)).collect())
    }
}

/// Checks one primitive at `inputs`. Non-scalar outputs are reduced with a
/// fixed random projection `L = Σ g ⊙ op(inputs)`. Every input coordinate
/// is checked.
pub fn grad_check<R: Rng + ?Sized>(
    op: &Primitive,
    inputs: &[Tensor4],
    opts: GradCheckOptions,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let shell = PrimitiveFn { op, probe: None };
    let (tape, _, out) = shell.build(inputs)?;
    let out_dims = tape.value(out).dims();
    let probe = (!matches!(op, Primitive::SoftmaxNll)).then(|| Tensor4::uniform(out_dims, -1.0, 1.0, rng));
    let f = PrimitiveFn { op, probe };
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let labels: Vec<String> = (0..inputs.len()).map(|i| format!("{}.input{i}", op.name())).collect();
    check_coords(op.name(), &labels, &f, inputs, &coords, opts)
}

/// Runs [`grad_check`] on freshly sampled inputs for every primitive in
/// `ops`.
pub fn check_primitives<R: Rng + ?Sized>(
    ops: &[Primitive],
    opts: GradCheckOptions,
    rng: &mut R,
) -> Result<Vec<GradCheckReport>> {
    ops.iter()
        .map(|op| {
            let inputs = op.random_inputs(rng);
            grad_check(op, &inputs, opts, rng)
        })
        .collect()
}

struct NetworkFn<'a> {
    net: &'a Network,
    names: Vec<String>,
    inputs: &'a Tensor4,
    terms: &'a [NllTerm],
    lambda: f64,
}

impl NetworkFn<'_> {
    fn with(&self, params: &[Tensor4]) -> Result<Network> {
        let mut store = ParamStore::new();
        for (name, t) in self.names.iter().zip(params) {
            store.insert(name.clone(), t.clone());
        }
        Network::with_params(self.net.config().clone(), store)
    }
}

impl ScalarFn for NetworkFn<'_> {
    fn eval(&self, params: &[Tensor4]) -> Result<(f64, u64)> {
        self.with(params)?.loss_with_fingerprint(self.inputs, self.terms, self.lambda)
    }

    fn grad(&self, params: &[Tensor4]) -> Result<Vec<Tensor4>> {
        let (_, grads) = self.with(params)?.loss_and_grads(self.inputs, self.terms, self.lambda)?;
        self.names.iter().map(|n| grads.require(n).cloned()).collect()
    }
}

/// Checks the training loss of `net` against its parameters, sampling at
/// most `per_param` coordinates from every parameter tensor.
pub fn check_network<R: Rng + ?Sized>(
    net: &Network,
    inputs: &Tensor4,
    terms: &[NllTerm],
    lambda: f64,
    per_param: usize,
    opts: GradCheckOptions,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let names: Vec<String> = net.params().names().map(str::to_string).collect();
    let params: Vec<Tensor4> = net.params().iter().map(|(_, t)| t.clone()).collect();
    let mut coords = Vec::new();
    for (i, t) in params.iter().enumerate() {
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.shuffle(rng);
        idx.truncate(per_param);
        idx.sort_unstable();
        coords.extend(idx.into_iter().map(|j| (i, j)));
    }
    let f = NetworkFn { net, names: names.clone(), inputs, terms, lambda };
    check_coords(net.config().tag(), &names, &f, &params, &coords, opts)
}
