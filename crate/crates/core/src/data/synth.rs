//! Procedural face-like images with exactly known keypoints.

use rand::Rng;

use super::{stream_rng, Dataset, Sample};
use crate::error::{config, Error, Result};
use crate::exec::Exec;
use crate::metrics::{EvalConfig, Keypoint, KeypointSet};
use crate::tensor::Tensor4;

/// Layout parameters of the generator. Lengths are in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub num_keypoints: usize,
    /// Range of the distance between the two eye keypoints.
    pub interocular: (f64, f64),
    /// Maximum head roll in degrees.
    pub max_roll: f64,
    /// Maximum shift of the face centre as a fraction of the image size.
    pub max_shift: f64,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
    /// Eye- and mouth-like distractors drawn in the background.
    pub clutter: usize,
}

impl SynthSpec {
    pub fn new(size: usize, num_keypoints: usize) -> Self {
        let s = size as f64;
        Self {
            size,
            num_keypoints,
            interocular: (0.30 * s, 0.40 * s),
            max_roll: 20.0,
            max_shift: 0.10,
            noise: 0.02,
            clutter: 0,
        }
    }

    pub fn with_pose(mut self, max_shift: f64, max_roll: f64) -> Self {
        self.max_shift = max_shift;
        self.max_roll = max_roll;
        self
    }

    pub fn with_clutter(mut self, clutter: usize) -> Self {
        self.clutter = clutter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_keypoints != 5 && self.num_keypoints != 68 {
            return config(format!("synthetic faces have 5 or 68 keypoints, not {}", self.num_keypoints));
        }
        let (lo, hi) = self.interocular;
        if self.size < 8 || !(lo > 0.0) || hi < lo || hi > self.size as f64 {
            return config(format!("bad synthetic layout: size {} interocular {lo}..{hi}", self.size));
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        match self.num_keypoints {
            68 => EvalConfig { left_eye: 36, right_eye: 45 },
            _ => EvalConfig { left_eye: 0, right_eye: 1 },
        }
    }

    pub fn keypoint_names(&self) -> Vec<String> {
        match self.num_keypoints {
            5 => ["left_eye", "right_eye", "nose", "mouth_left", "mouth_right"].map(String::from).to_vec(),
            k => (0..k).map(|i| format!("p{i}")).collect(),
        }
    }
}

/// Analytic head ellipse of one generated face, in pixel coordinates
/// (`x` = column, `y` = row).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceGeometry {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub roll: f64,
}

impl FaceGeometry {
    /// Normalized ellipse radius of `(x, y)`: below 1 inside the head.
    pub fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.roll.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2)).sqrt()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.radius(x, y) < 1.0
    }
}

/// Face frame: unit `u` across the eyes, `v` downwards, both scaled by the
/// interocular distance and anchored at the eye midpoint.
struct Frame {
    origin: (f64, f64),
    d: f64,
    cos: f64,
    sin: f64,
}

impl Frame {
    fn point(&self, u: f64, v: f64) -> (f64, f64) {
        let (u, v) = (u * self.d, v * self.d);
        (self.origin.0 + self.cos * u - self.sin * v, self.origin.1 + self.sin * u + self.cos * v)
    }
}

const HEAD_CENTER_V: f64 = 0.35;
const HEAD_AXES: (f64, f64) = (0.95, 1.25);

fn face_points_5<R: Rng>(rng: &mut R) -> Vec<(f64, f64)> {
    let mut j = || rng.random_range(-0.03..0.03);
    vec![
        (-0.5, 0.0),
        (0.5, 0.0),
        (j(), 0.45 + j()),
        (-0.35 + j(), 0.8 + j()),
        (0.35 + j(), 0.8 + j()),
    ]
}

fn face_points_68<R: Rng>(rng: &mut R) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(68);
    let (ax, ay) = (HEAD_AXES.0 * 0.9, HEAD_AXES.1 * 0.9);
    for i in 0..17 {
        let phi = std::f64::consts::PI * (1.0 - i as f64 / 16.0);
        pts.push((ax * phi.cos(), HEAD_CENTER_V + ay * phi.sin()));
    }
    let arch = rng.random_range(0.04..0.08);
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let t = i as f64 / 4.0;
            let u = if side < 0.0 { -0.75 + 0.5 * t } else { 0.25 + 0.5 * t };
            let bend = 1.0 - (2.0 * t - 1.0).powi(2);
            pts.push((u, -0.3 - arch * bend));
        }
    }
    for i in 0..4 {
        pts.push((0.0, -0.05 + 0.1 * i as f64 + 0.033 * i as f64));
    }
    for i in 0..5 {
        let u = -0.15 + 0.075 * i as f64;
        pts.push((u, 0.45 + 0.03 * (1.0 - (u / 0.15).powi(2))));
    }
    let eye_h = rng.random_range(0.05..0.07);
    for center in [-0.36, 0.36] {
        // outer/inner corner first depends on the side; keep the usual
        // clockwise order starting at the image-left corner
        for a in [180.0f64, 120.0, 60.0, 0.0, -60.0, -120.0] {
            let a = a.to_radians();
            pts.push((center + 0.14 * a.cos(), -eye_h * a.sin()));
        }
    }
    let open = rng.random_range(0.03..0.06);
    for i in 0..12 {
        let a = std::f64::consts::PI - i as f64 * std::f64::consts::PI / 6.0;
        pts.push((0.35 * a.cos(), 0.8 - 0.12 * a.sin()));
    }
    for i in 0..8 {
        let a = std::f64::consts::PI - i as f64 * std::f64::consts::PI / 4.0;
        pts.push((0.25 * a.cos(), 0.8 - open * a.sin()));
    }
    pts
}

fn coverage(signed_dist: f64) -> f64 {
    (0.5 - signed_dist).clamp(0.0, 1.0)
}

fn segment_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Signed distance to a convex polygon (negative inside), exact inside and
/// a lower bound outside.
fn polygon_dist(p: (f64, f64), poly: &[(f64, f64)]) -> f64 {
    let mut inside = f64::NEG_INFINITY;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (ex, ey) = (b.0 - a.0, b.1 - a.1);
        let len = (ex * ex + ey * ey).sqrt();
        // outward normal for clockwise-in-screen ordering is fixed up by abs
        let side = ((p.0 - a.0) * ey - (p.1 - a.1) * ex) / len;
        inside = inside.max(side);
    }
    inside
}

fn orient(poly: &mut [(f64, f64)]) {
    let area: f64 = (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    if area < 0.0 {
        poly.reverse();
    }
}

struct Face {
    geometry: FaceGeometry,
    frame: Frame,
    keypoints: KeypointSet,
    num_keypoints: usize,
}

fn draw_face<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Option<Face> {
    let s = spec.size as f64;
    let d = rng.random_range(spec.interocular.0..=spec.interocular.1);
    let roll = rng.random_range(-spec.max_roll..=spec.max_roll).to_radians();
    let shift = spec.max_shift * s;
    let origin = (
        (s - 1.0) / 2.0 + rng.random_range(-shift..=shift),
        0.42 * s + rng.random_range(-shift..=shift),
    );
    let frame = Frame { origin, d, cos: roll.cos(), sin: roll.sin() };
    let stretch = rng.random_range(0.95..1.05);
    let geometry = FaceGeometry {
        center: frame.point(0.0, HEAD_CENTER_V),
        semi_axes: (HEAD_AXES.0 * d * stretch, HEAD_AXES.1 * d * stretch),
        roll,
    };
    let pts = match spec.num_keypoints {
        68 => face_points_68(rng),
        _ => face_points_5(rng),
    };
    let mut kps = Vec::with_capacity(pts.len());
    for (u, v) in pts {
        let (x, y) = frame.point(u, v);
        let (r, c) = (y.round(), x.round());
        if r < 0.0 || c < 0.0 || r >= s || c >= s || !geometry.contains(c, r) {
            return None;
        }
        kps.push(Keypoint::new(r as usize, c as usize));
    }
    Some(Face { geometry, frame, keypoints: KeypointSet::new(kps), num_keypoints: spec.num_keypoints })
}

fn render<R: Rng>(spec: &SynthSpec, face: &Face, rng: &mut R) -> Tensor4 {
    let n = spec.size;
    let d = face.frame.d;
    let bg = rng.random_range(0.05..0.35);
    let skin = rng.random_range(0.55..0.85);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let px = |k: &Keypoint| (k.col as f64, k.row as f64);
    let kp = face.keypoints.points();
    let (eyes, nose, mouth): ([(f64, f64); 2], (f64, f64), [(f64, f64); 2]) = if face.num_keypoints == 68 {
        let centre = |a: usize| {
            let (x0, y0) = px(&kp[a]);
            let (x1, y1) = px(&kp[a + 3]);
            ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
        };
        ([centre(36), centre(42)], px(&kp[33]), [px(&kp[48]), px(&kp[54])])
    } else {
        ([px(&kp[0]), px(&kp[1])], px(&kp[2]), [px(&kp[3]), px(&kp[4])])
    };
    let f = &face.frame;
    let (ux, uy) = (f.cos, f.sin);
    let (vx, vy) = (-f.sin, f.cos);
    let mut wedge = [
        nose,
        (nose.0 - 0.12 * d * ux - 0.3 * d * vx, nose.1 - 0.12 * d * uy - 0.3 * d * vy),
        (nose.0 + 0.12 * d * ux - 0.3 * d * vx, nose.1 + 0.12 * d * uy - 0.3 * d * vy),
    ];
    // apex at the tip, widening upwards
    orient(&mut wedge);
    let brows: Vec<((f64, f64), (f64, f64))> =
        [-1.0, 1.0].iter().map(|&sd| (f.point(sd * 0.7, -0.33), f.point(sd * 0.25, -0.33))).collect();
    let sclera_r = 0.2 * d;
    let pupil_r = 0.09 * d;
    let lip = 0.06 * d;
    let s = n as f64;
    let mut blobs = Vec::new();
    let mut bars = Vec::new();
    for i in 0..spec.clutter {
        // background only, clear of the head outline
        for _ in 0..20 {
            let c = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            if face.geometry.radius(c.0, c.1) < 1.0 + sclera_r / face.geometry.semi_axes.0 {
                continue;
            }
            if i % 2 == 0 {
                blobs.push(c);
            } else {
                let a = rng.random_range(0.0..std::f64::consts::PI);
                let half = rng.random_range(0.2..0.4) * d;
                bars.push(((c.0 - half * a.cos(), c.1 - half * a.sin()), (c.0 + half * a.cos(), c.1 + half * a.sin())));
            }
            break;
        }
    }

    let mut img = Tensor4::zeros((1, 1, n, n));
    let data = img.data_mut();
    for row in 0..n {
        for col in 0..n {
            let p = (col as f64, row as f64);
            let mut v = bg + waves.iter().map(|(a, fx, fy, ph)| a * (fx * p.0 + fy * p.1 + ph).sin()).sum::<f64>();
            let head = (face.geometry.radius(p.0, p.1) - 1.0) * face.geometry.semi_axes.0.min(face.geometry.semi_axes.1);
            v += (skin - v) * coverage(head);
            for &b in &blobs {
                let r = ((p.0 - b.0).powi(2) + (p.1 - b.1).powi(2)).sqrt();
                v += (0.95 - v) * coverage(r - sclera_r);
                v += (0.05 - v) * coverage(r - pupil_r);
            }
            for &(a, b) in &bars {
                v += (0.2 - v) * coverage(segment_dist(p, a, b) - lip);
            }
            for &(a, b) in &brows {
                v += (0.3 * skin - v) * coverage(segment_dist(p, a, b) - 0.05 * d);
            }
            for &e in &eyes {
                let r = ((p.0 - e.0).powi(2) + (p.1 - e.1).powi(2)).sqrt();
                v += (0.95 - v) * coverage(r - sclera_r);
                v += (0.05 - v) * coverage(r - pupil_r);
            }
            v += (0.6 * skin - v) * coverage(polygon_dist(p, &wedge));
            v += (0.2 - v) * coverage(segment_dist(p, mouth[0], mouth[1]) - lip);
            if spec.noise > 0.0 {
                v += rng.random_range(-spec.noise..=spec.noise);
            }
            data[row * n + col] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    img
}

const MAX_ATTEMPTS: usize = 100;

fn generate_one(spec: &SynthSpec, seed: u64, index: usize) -> Result<(Sample, FaceGeometry)> {
    let mut rng = stream_rng(seed, &[index as u64]);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(face) = draw_face(spec, &mut rng) {
            let image = render(spec, &face, &mut rng);
            let sample = Sample { id: format!("s{index:05}"), image, keypoints: face.keypoints.clone() };
            return Ok((sample, face.geometry));
        }
    }
    Err(Error::Config(format!(
        "synthetic layout left keypoints out of bounds {MAX_ATTEMPTS} times for sample {index}"
    )))
}

/// Renders `count` faces and returns them with each head's ellipse.
pub fn generate_with_geometry(count: usize, seed: u64, spec: &SynthSpec) -> Result<(Dataset, Vec<FaceGeometry>)> {
    spec.validate()?;
    if count == 0 {
        return config("synthetic dataset needs at least one sample");
    }
    let drawn: Vec<Result<(Sample, FaceGeometry)>> = Exec::default().map(count, |i| generate_one(spec, seed, i));
    let mut samples = Vec::with_capacity(count);
    let mut geometry = Vec::with_capacity(count);
    for r in drawn {
        let (s, g) = r?;
        samples.push(s);
        geometry.push(g);
    }
    Ok((Dataset::new(samples, spec.keypoint_names(), spec.eval_config())?, geometry))
}

/// Renders `count` faces, deterministically for a given `seed`.
pub fn generate_synthetic(count: usize, seed: u64, spec: &SynthSpec) -> Result<Dataset> {
    Ok(generate_with_geometry(count, seed, spec)?.0)
}
