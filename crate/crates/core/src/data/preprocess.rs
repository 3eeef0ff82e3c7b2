use crate::error::{config, shape, Result};
use crate::exec::Exec;
use crate::tensor::Tensor4;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Gaussian local contrast normalization settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LcnConfig {
    pub window: usize,
    pub sigma: f64,
    pub epsilon: f64,
}

impl Default for LcnConfig {
    fn default() -> Self {
        Self { window: 9, sigma: 3.0, epsilon: 1e-4 }
    }
}

impl LcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || !(self.sigma > 0.0) || !(self.epsilon > 0.0) {
            return config(format!(
                "LCN needs an odd window and positive sigma/epsilon, got {}/{}/{}",
                self.window, self.sigma, self.epsilon
            ));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as isize;
        let mut k = Vec::with_capacity(self.window * self.window);
        for di in -r..=r {
            for dj in -r..=r {
                k.push((-((di * di + dj * dj) as f64) / (2.0 * self.sigma * self.sigma)).exp());
            }
        }
        k
    }
}

/// Luminance grayscale. One-channel input is returned unchanged.
pub fn to_gray(image: &Tensor4) -> Result<Tensor4> {
    let d = image.dims();
    match d.c {
        1 => Ok(image.clone()),
        3 => Ok(Tensor4::from_fn((d.n, 1, d.h, d.w), |n, _, i, j| {
            (0..3).map(|c| LUMA[c] * image.get(n, c, i, j)).sum()
        })),
        c => shape(format!("expected 1 or 3 channels, got {c}")),
    }
}

/// Window-weighted average of `f(i', j')` around `(i, j)`; weights are
/// renormalized over the in-bounds part of the window.
fn local_mean(plane: &[f64], h: usize, w: usize, i: usize, j: usize, kernel: &[f64], win: usize, f: impl Fn(f64) -> f64) -> f64 {
    let r = win / 2;
    let (mut acc, mut norm) = (0.0, 0.0);
    for a in 0..win {
        let Some(y) = (i + a).checked_sub(r).filter(|&y| y < h) else { continue };
        for b in 0..win {
            let Some(x) = (j + b).checked_sub(r).filter(|&x| x < w) else { continue };
            let wt = kernel[a * win + b];
            acc += wt * f(plane[y * w + x]);
            norm += wt;
        }
    }
    acc / norm
}

fn lcn_plane(plane: &[f64], h: usize, w: usize, cfg: &LcnConfig, kernel: &[f64], out: &mut [f64]) {
    let win = cfg.window;
    // centered values: mean of (x_center - x_neighbour) so constant regions
    // cancel exactly
    let mut centered = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let c = plane[i * w + j];
            centered[i * w + j] = local_mean(plane, h, w, i, j, kernel, win, |x| c - x);
        }
    }
    for i in 0..h {
        for j in 0..w {
            let var = local_mean(&centered, h, w, i, j, kernel, win, |v| v * v);
            out[i * w + j] = centered[i * w + j] / var.sqrt().max(cfg.epsilon);
        }
    }
}

/// Subtracts the Gaussian-weighted local mean and divides by the local
/// standard deviation (floored at `epsilon`), per channel.
pub fn lcn(image: &Tensor4, cfg: &LcnConfig) -> Result<Tensor4> {
    cfg.validate()?;
    let d = image.dims();
    let kernel = cfg.kernel();
    let mut out = Tensor4::zeros(d);
    let plane = d.h * d.w;
    Exec::default().for_each_chunk(out.data_mut(), plane, |p, chunk| {
        lcn_plane(&image.data()[p * plane..(p + 1) * plane], d.h, d.w, cfg, &kernel, chunk);
    });
    Ok(out)
}

/// Grayscale conversion followed by local contrast normalization.
pub fn preprocess(image: &Tensor4, cfg: &LcnConfig) -> Result<Tensor4> {
    if image.dims().h == 0 || image.dims().w == 0 {
        return shape("image has an empty side");
    }
    lcn(&to_gray(image)?, cfg)
}
