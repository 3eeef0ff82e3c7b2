//! Static heatmap and overlay images.

use std::path::Path;

use anyhow::Result;
use rcn::{KeypointSet, Tensor4};

/// 8-bit PGM of one probability map, scaled so its maximum is 255. Values
/// are floored, so only maximal pixels reach 255.
pub fn write_heatmap(path: &Path, map: &[f64], width: usize) -> Result<()> {
    let h = map.len() / width;
    let max = map.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut bytes = format!("P5\n{width} {h}\n255\n").into_bytes();
    bytes.extend(map.iter().map(|&v| (v * scale).floor().clamp(0.0, 255.0) as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Color PPM of the raw image with the truth in green and the prediction in
/// red (yellow where they coincide).
pub fn write_overlay(path: &Path, image: &Tensor4, pred: &KeypointSet, truth: &KeypointSet) -> Result<()> {
    let d = image.dims();
    let mut rgb: Vec<[u8; 3]> = image
        .plane(0, 0)
        .iter()
        .map(|v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g]
        })
        .collect();
    for p in truth.points() {
        rgb[p.row * d.w + p.col] = [0, 255, 0];
    }
    for p in pred.points() {
        let px = &mut rgb[p.row * d.w + p.col];
        *px = if *px == [0, 255, 0] { [255, 255, 0] } else { [255, 0, 0] };
    }
    let mut bytes = format!("P6\n{} {}\n255\n", d.w, d.h).into_bytes();
    bytes.extend(rgb.into_iter().flatten());
    std::fs::write(path, bytes)?;
    Ok(())
}
