//! Operation tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes once in reverse and routes gradients to their inputs.

use crate::error::{shape, Result};
use crate::exec::Exec;
use crate::ops::{self, AxisMap, NllTerm};
use crate::tensor::{Dims, Tensor4};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { input: Var, kernels: Var, bias: Var },
    Relu(Var),
    MaxPool { input: Var, argmax: Vec<u32> },
    Resize { input: Var, rows: AxisMap, cols: AxisMap },
    Concat(Vec<Var>),
    WeightedSum { maps: Vec<Var>, branches: Vec<usize>, alpha: Var },
    Softmax(Var),
    Add(Var, Var),
    /// Fused softmax + negative log-likelihood; `dlogits` is d(loss)/d(logits).
    Nll { logits: Var, dlogits: Tensor4 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "maxpool",
            Op::Resize { .. } => "resize",
            Op::Concat(_) => "concat",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Softmax(_) => "softmax",
            Op::Add(..) => "add",
            Op::Nll { .. } => "nll",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
    dims: Vec<Dims>,
    visits: Vec<u32>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor4> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`; all zeros when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var) -> Tensor4 {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor4::zeros(self.dims[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor4 {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor4::zeros(self.dims[v.0]))
    }

    /// How many times the backward pass processed each node.
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded ops in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor4 {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor4::zeros((0, 0, 0, 0)))
    }

    /// Hash of every ReLU sign pattern and pooling winner on the tape.
    pub fn kink_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => node.value.data().iter().for_each(|x| (*x > 0.0).hash(&mut h)),
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor4, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor4) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same-padded convolution. `bias` is a tensor of `out_c` values (any
    /// dims with that many elements).
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let y = ops::conv2d_forward(
            self.value(input),
            self.value(kernels),
            self.value(bias).data(),
            self.exec,
        )?;
        Ok(self.push(y, Op::Conv { input, kernels, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = ops::relu(self.value(input));
        self.push(y, Op::Relu(input))
    }

    pub fn maxpool(&mut self, input: Var, size: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = ops::maxpool_forward(self.value(input), size, stride)?;
        Ok(self.push(y, Op::MaxPool { input, argmax }))
    }

    pub fn resize(&mut self, input: Var, rows: AxisMap, cols: AxisMap) -> Result<Var> {
        let y = ops::resize_forward(self.value(input), &rows, &cols)?;
        Ok(self.push(y, Op::Resize { input, rows, cols }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor4> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_forward(&refs)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// Weighted sum of branch maps; `branches[i]` selects the weight grid
    /// (first axis of `alpha`) used for `maps[i]`.
    pub fn weighted_sum(&mut self, maps: &[Var], branches: &[usize], alpha: Var) -> Result<Var> {
        let refs: Vec<&Tensor4> = maps.iter().map(|&m| self.value(m)).collect();
        let y = ops::weighted_sum_forward(&refs, branches, self.value(alpha))?;
        Ok(self.push(
            y,
            Op::WeightedSum {
                maps: maps.to_vec(),
                branches: branches.to_vec(),
                alpha,
            },
        ))
    }

    pub fn softmax(&mut self, input: Var) -> Var {
        let y = ops::spatial_softmax(self.value(input));
        self.push(y, Op::Softmax(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dims() != y.dims() {
            return shape(format!("cannot add {} and {}", x.dims(), y.dims()));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Scalar `Σ weight·(−log softmax(logits)[target])` over `terms`.
    pub fn nll(&mut self, logits: Var, terms: &[NllTerm]) -> Result<Var> {
        let (loss, _, dlogits) = ops::nll_forward_backward(self.value(logits), terms)?;
        let y = Tensor4::full((1, 1, 1, 1), loss);
        Ok(self.push(y, Op::Nll { logits, dlogits }))
    }

    /// Reverse pass from a scalar root with seed 1.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Tensor4::full(self.value(root).dims(), 1.0);
        self.backward_with_seed(root, seed)
    }

    /// Reverse pass seeding `root` with `seed` (same dims as the root value).
    pub fn backward_with_seed(&self, root: Var, seed: Tensor4) -> Gradients {
        assert_eq!(seed.dims(), self.value(root).dims(), "seed dims");
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor4>> = vec![None; self.nodes.len()];
        let mut visits = vec![0u32; self.nodes.len()];
        grads[root.0] = Some(seed);

        fn acc(grads: &mut [Option<Tensor4>], v: Var, g: Tensor4) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visits[i] += 1;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { input, kernels, bias } => {
                    let (dx, dk, db) =
                        ops::conv2d_backward(self.value(*input), self.value(*kernels), &g, self.exec);
                    let bd = self.value(*bias).dims();
                    acc(&mut grads, *input, dx);
                    acc(&mut grads, *kernels, dk);
                    acc(&mut grads, *bias, Tensor4::from_vec(bd, db).expect("bias dims"));
                }
                Op::Relu(x) => {
                    let dx = ops::relu_backward(&node.value, &g);
                    acc(&mut grads, *x, dx);
                }
                Op::MaxPool { input, argmax } => {
                    let dx = ops::maxpool_backward(self.value(*input).dims(), argmax, &g);
                    acc(&mut grads, *input, dx);
                }
                Op::Resize { input, rows, cols } => {
                    let dx = ops::resize_backward(self.value(*input).dims(), rows, cols, &g);
                    acc(&mut grads, *input, dx);
                }
                Op::Concat(parts) => {
                    let dims: Vec<Dims> = parts.iter().map(|&p| self.value(p).dims()).collect();
                    for (p, dp) in parts.iter().zip(ops::concat_backward(&dims, &g)) {
                        acc(&mut grads, *p, dp);
                    }
                }
                Op::WeightedSum { maps, branches, alpha } => {
                    let refs: Vec<&Tensor4> = maps.iter().map(|&m| self.value(m)).collect();
                    let (dmaps, dalpha) =
                        ops::weighted_sum_backward(&refs, branches, self.value(*alpha), &g);
                    for (m, dm) in maps.iter().zip(dmaps) {
                        acc(&mut grads, *m, dm);
                    }
                    acc(&mut grads, *alpha, dalpha);
                }
                Op::Softmax(x) => {
                    let dx = ops::softmax_backward(&node.value, &g);
                    acc(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Nll { logits, dlogits } => {
                    let mut dz = dlogits.clone();
                    dz.scale(g.data()[0]);
                    acc(&mut grads, *logits, dz);
                }
            }
        }
        let dims = self.nodes.iter().map(|n| n.value.dims()).collect();
        Gradients { grads, dims, visits }
    }
}
