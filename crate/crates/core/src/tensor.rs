//! Dense rank-4 `f64` tensors in `(n, c, h, w)` row-major layout.

use std::fmt;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{shape, Error, Result};

/// Magic prefix of the binary tensor block.
pub const TENSOR_MAGIC: &[u8; 4] = b"T4v1";

/// Tensor dimensions `(batch, channels, rows, cols)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one sample, `c * h * w`.
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Elements in one spatial plane, `h * w`.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn index(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.c + c) * self.h + i) * self.w + j
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Debug for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<(usize, usize, usize, usize)> for Dims {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Self { n, c, h, w }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor4 {
    pub fn zeros(dims: impl Into<Dims>) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: impl Into<Dims>, value: f64) -> Self {
        let dims = dims.into();
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: impl Into<Dims>, data: Vec<f64>) -> Result<Self> {
        let dims = dims.into();
        if data.len() != dims.len() {
            return shape(format!(
                "{} values supplied for dims {dims} ({} expected)",
                data.len(),
                dims.len()
            ));
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor by evaluating `f(n, c, i, j)` at every coordinate.
    pub fn from_fn(
        dims: impl Into<Dims>,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let dims = dims.into();
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for i in 0..dims.h {
                    for j in 0..dims.w {
                        data.push(f(n, c, i, j));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: impl Into<Dims>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let dims = dims.into();
        let data = (0..dims.len()).map(|_| rng.random_range(lo..hi)).collect();
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.dims.index(n, c, i, j)]
    }

    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: f64) {
        let idx = self.dims.index(n, c, i, j);
        self.data[idx] = v;
    }

    /// One sample `n` as a flat `c*h*w` slice.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.dims.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.dims.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// The `h*w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(self, dims: impl Into<Dims>) -> Result<Self> {
        let dims = dims.into();
        if dims.len() != self.data.len() {
            return shape(format!("cannot reshape {} into {dims}", self.dims));
        }
        Ok(Self { dims, data: self.data })
    }

    /// Copies samples `range` into a new tensor.
    pub fn slice_batch(&self, range: std::ops::Range<usize>) -> Self {
        let len = self.dims.sample_len();
        let dims = Dims::new(range.len(), self.dims.c, self.dims.h, self.dims.w);
        Self {
            dims,
            data: self.data[range.start * len..range.end * len].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(parts: &[&Tensor4]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?
            .dims;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.dims.c, p.dims.h, p.dims.w) != (first.c, first.h, first.w) {
                return shape(format!("cannot stack {} with {}", p.dims, first));
            }
            n += p.dims.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            dims: Dims::new(n, first.c, first.h, first.w),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Tensor4) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.dims, other.dims, "dims differ");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the `T4v1` block: magic, four little-endian `u64` dims, then
    /// the values as little-endian `f64` in row-major order.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        for d in self.dims.as_array() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut dims = [0usize; 4];
        let mut word = [0u8; 8];
        for d in dims.iter_mut() {
            input.read_exact(&mut word)?;
            *d = usize::try_from(u64::from_le_bytes(word))
                .map_err(|_| Error::Format("tensor dim overflows usize".into()))?;
        }
        let dims = Dims::new(dims[0], dims[1], dims[2], dims[3]);
        let len = dims
            .n
            .checked_mul(dims.c)
            .and_then(|v| v.checked_mul(dims.h))
            .and_then(|v| v.checked_mul(dims.w))
            .filter(|&l| l <= 1 << 32)
            .ok_or_else(|| Error::Format(format!("implausible tensor dims {dims}")))?;
        let mut bytes = vec![0u8; len * 8];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(36 + self.data.len() * 8);
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }
}
