//! Dataset directories: `manifest.csv`, 8-bit PGM images and `dataset.meta`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::kv::{join_list, KvMap};
use crate::metrics::{EvalConfig, Keypoint, KeypointSet};
use crate::tensor::Tensor4;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const META_FILE: &str = "dataset.meta";

fn load_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), msg: msg.into() }
}

/// Writes a binary (P5) PGM. Values are clamped to `[0, 1]` and rounded to
/// the nearest 1/255.
pub fn write_pgm(path: &Path, plane: &[f64], h: usize, w: usize) -> Result<()> {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(plane.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads an 8-bit P5 PGM into `(h, w, values / 255)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let file = fs::File::open(path).map_err(|e| load_err(path, e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut fields = Vec::new();
    let mut line = String::new();
    while fields.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(load_err(path, "truncated PGM header"));
        }
        let content = line.split('#').next().unwrap_or("");
        fields.extend(content.split_whitespace().map(str::to_string));
    }
    let bad = || load_err(path, "not an 8-bit P5 PGM");
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let mut buf = vec![0u8; w * h];
    r.read_exact(&mut buf).map_err(|_| load_err(path, "PGM pixel data truncated"))?;
    Ok((h, w, buf.into_iter().map(|b| b as f64 / 255.0).collect()))
}

pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let k = data.num_keypoints();
    let mut header = vec!["id".to_string(), "image_file".to_string()];
    for i in 0..k {
        header.push(format!("row{i}"));
        header.push(format!("col{i}"));
    }
    let mut out = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    out.write_record(&header)?;
    for s in data.samples() {
        let file = format!("{}.pgm", s.id);
        let d = s.image.dims();
        write_pgm(&dir.join(&file), s.image.plane(0, 0), d.h, d.w)?;
        let mut rec = vec![s.id.clone(), file];
        for p in s.keypoints.points() {
            rec.push(p.row.to_string());
            rec.push(p.col.to_string());
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    let mut meta = KvMap::new();
    let eval = data.eval_config();
    meta.set("num_keypoints", k);
    meta.set("image_size", data.image_size());
    meta.set("left_eye", eval.left_eye);
    meta.set("right_eye", eval.right_eye);
    meta.set("keypoint_names", join_list(data.keypoint_names()));
    let mut f = fs::File::create(dir.join(META_FILE))?;
    f.write_all(meta.to_text().as_bytes())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| load_err(&meta_path, e.to_string()))?;
    let meta = KvMap::parse(&text).map_err(|e| load_err(&meta_path, e.to_string()))?;
    let k: usize = meta.require("num_keypoints")?;
    let size: usize = meta.require("image_size")?;
    let eval = EvalConfig { left_eye: meta.require("left_eye")?, right_eye: meta.require("right_eye")? };
    let names: Vec<String> = meta
        .require::<String>("keypoint_names")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if names.len() != k {
        return Err(load_err(&meta_path, format!("{} keypoint names for {k} keypoints", names.len())));
    }

    let manifest = dir.join(MANIFEST_FILE);
    let mut reader = csv::Reader::from_path(&manifest).map_err(|e| load_err(&manifest, e.to_string()))?;
    let mut samples = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| load_err(&manifest, e.to_string()))?;
        let ctx = |msg: String| load_err(&manifest, format!("record {}: {msg}", line + 1));
        if rec.len() != 2 + 2 * k {
            return Err(ctx(format!("{} fields, expected {}", rec.len(), 2 + 2 * k)));
        }
        let id = rec[0].to_string();
        let coord = |i: usize| -> Result<usize> {
            rec[i].trim().parse().map_err(|_| ctx(format!("sample {id}: bad coordinate `{}`", &rec[i])))
        };
        let mut kps = Vec::with_capacity(k);
        for j in 0..k {
            kps.push(Keypoint::new(coord(2 + 2 * j)?, coord(3 + 2 * j)?));
        }
        let keypoints = KeypointSet::new(kps);
        if !keypoints.in_bounds(size, size) {
            return Err(ctx(format!("sample {id}: keypoint outside the {size}x{size} image")));
        }
        let img_path = dir.join(&rec[1]);
        let (h, w, values) = read_pgm(&img_path)?;
        if h != size || w != size {
            return Err(ctx(format!("sample {id}: image {} is {h}x{w}, expected {size}x{size}", &rec[1])));
        }
        let image = Tensor4::from_vec((1, 1, h, w), values)?;
        samples.push(Sample { id, image, keypoints });
    }
    Dataset::new(samples, names, eval).map_err(|e| load_err(&manifest, e.to_string()))
}
