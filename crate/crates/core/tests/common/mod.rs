//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use rcn::metrics::{EvalConfig, KeypointSet};
use rcn::Tensor4;

/// Direct six-loop same-padded convolution.
pub fn conv_oracle(x: &Tensor4, k: &Tensor4, bias: &[f64]) -> Tensor4 {
    let (xd, kd) = (x.dims(), k.dims());
    let (ph, pw) = (kd.h as isize / 2, kd.w as isize / 2);
    let mut out = Tensor4::zeros((xd.n, kd.n, xd.h, xd.w));
    for n in 0..xd.n {
        for o in 0..kd.n {
            for i in 0..xd.h {
                for j in 0..xd.w {
                    let mut acc = bias[o];
                    for c in 0..xd.c {
                        for di in 0..kd.h {
                            for dj in 0..kd.w {
                                let si = i as isize + di as isize - ph;
                                let sj = j as isize + dj as isize - pw;
                                if si < 0 || sj < 0 || si >= xd.h as isize || sj >= xd.w as isize {
                                    continue;
                                }
                                acc += k.get(o, c, di, dj) * x.get(n, c, si as usize, sj as usize);
                            }
                        }
                    }
                    out.set(n, o, i, j, acc);
                }
            }
        }
    }
    out
}

pub fn maxpool_oracle(x: &Tensor4, size: usize, stride: usize) -> Tensor4 {
    let d = x.dims();
    let (oh, ow) = ((d.h - size) / stride + 1, (d.w - size) / stride + 1);
    let mut out = Tensor4::zeros((d.n, d.c, oh, ow));
    for n in 0..d.n {
        for c in 0..d.c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..size {
                        for b in 0..size {
                            m = m.max(x.get(n, c, i * stride + a, j * stride + b));
                        }
                    }
                    out.set(n, c, i, j, m);
                }
            }
        }
    }
    out
}

pub fn tile_oracle(x: &Tensor4, f: usize) -> Tensor4 {
    let d = x.dims();
    let mut out = Tensor4::zeros((d.n, d.c, d.h * f, d.w * f));
    for n in 0..d.n {
        for c in 0..d.c {
            for i in 0..d.h * f {
                for j in 0..d.w * f {
                    out.set(n, c, i, j, x.get(n, c, i / f, j / f));
                }
            }
        }
    }
    out
}

/// Bilinear sampling with corner-aligned source coordinates.
pub fn bilinear_oracle(x: &Tensor4, f: usize) -> Tensor4 {
    let d = x.dims();
    let (oh, ow) = (d.h * f, d.w * f);
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_in == 1 {
            return (0, 0, 0.0);
        }
        let p = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (p.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, p - lo as f64)
    };
    let mut out = Tensor4::zeros((d.n, d.c, oh, ow));
    for n in 0..d.n {
        for c in 0..d.c {
            for i in 0..oh {
                let (r0, r1, tr) = coord(i, d.h, oh);
                for j in 0..ow {
                    let (c0, c1, tc) = coord(j, d.w, ow);
                    let top = x.get(n, c, r0, c0) * (1.0 - tc) + x.get(n, c, r0, c1) * tc;
                    let bot = x.get(n, c, r1, c0) * (1.0 - tc) + x.get(n, c, r1, c1) * tc;
                    out.set(n, c, i, j, top * (1.0 - tr) + bot * tr);
                }
            }
        }
    }
    out
}

pub fn concat_oracle(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    let (da, db) = (a.dims(), b.dims());
    let mut out = Tensor4::zeros((da.n, da.c + db.c, da.h, da.w));
    for n in 0..da.n {
        for i in 0..da.h {
            for j in 0..da.w {
                for c in 0..da.c {
                    out.set(n, c, i, j, a.get(n, c, i, j));
                }
                for c in 0..db.c {
                    out.set(n, da.c + c, i, j, b.get(n, c, i, j));
                }
            }
        }
    }
    out
}

pub fn weighted_sum_oracle(maps: &[Tensor4], alpha: &Tensor4) -> Tensor4 {
    let d = maps[0].dims();
    let mut out = Tensor4::zeros(d);
    for n in 0..d.n {
        for k in 0..d.c {
            for i in 0..d.h {
                for j in 0..d.w {
                    let v: f64 = maps.iter().enumerate().map(|(r, m)| alpha.get(r, k, i, j) * m.get(n, k, i, j)).sum();
                    out.set(n, k, i, j, v);
                }
            }
        }
    }
    out
}

/// Softmax straight from the definition, without shifting.
pub fn softmax_oracle(z: &Tensor4) -> Tensor4 {
    let d = z.dims();
    let mut out = Tensor4::zeros(d);
    for n in 0..d.n {
        for k in 0..d.c {
            let total: f64 = z.plane(n, k).iter().map(|v| v.exp()).sum();
            for i in 0..d.h {
                for j in 0..d.w {
                    out.set(n, k, i, j, z.get(n, k, i, j).exp() / total);
                }
            }
        }
    }
    out
}

/// `(1/N) Σ −ln p` over the true locations.
pub fn nll_oracle(p: &Tensor4, truth: &[KeypointSet]) -> f64 {
    let mut total = 0.0;
    for (n, set) in truth.iter().enumerate() {
        for (k, kp) in set.points().iter().enumerate() {
            total -= p.get(n, k, kp.row, kp.col).ln();
        }
    }
    total / truth.len() as f64
}

pub fn error_oracle(pred: &[KeypointSet], truth: &[KeypointSet], eval: &EvalConfig) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (p, t) in pred.iter().zip(truth) {
        let (l, r) = (t.points()[eval.left_eye], t.points()[eval.right_eye]);
        let d = ((l.row as f64 - r.row as f64).powi(2) + (l.col as f64 - r.col as f64).powi(2)).sqrt();
        for (a, b) in p.points().iter().zip(t.points()) {
            total += ((a.row as f64 - b.row as f64).powi(2) + (a.col as f64 - b.col as f64).powi(2)).sqrt() / d;
            count += 1;
        }
    }
    total / count as f64
}

pub fn max_diff(a: &Tensor4, b: &Tensor4) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.max_abs_diff(b)
}
