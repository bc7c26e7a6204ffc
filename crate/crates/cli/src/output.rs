//! Metrics CSV and binary PGM writers.

use drmm_core::learning::LossReport;
use drmm_core::{DrmmError, Result, Tensor};
use std::fs;
use std::path::Path;

/// Writes `metrics.csv`: one row per epoch. All columns except
/// `wall_seconds` are deterministic for a fixed seed.
pub fn write_metrics(path: &Path, rows: &[(LossReport, f64)]) -> Result<()> {
    let mut out = String::from("epoch,train_error,test_error,cross_entropy,recon,kl,total,wall_seconds\n");
    for (r, wall) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            r.epoch, r.train_error, r.test_error, r.cross_entropy, r.reconstruction, r.kl, r.total, wall
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Interprets a tensor as a grayscale image: `[h, w]` or `[h, w, 1]`
/// directly, rank 1 as a square when the length is a perfect square,
/// otherwise as a single row.
pub fn image_extent(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w] => Ok((*h, *w)),
        [h, w, 1] => Ok((*h, *w)),
        [d] => {
            let side = (*d as f64).sqrt().round() as usize;
            if side * side == *d {
                Ok((side, side))
            } else {
                Ok((1, *d))
            }
        }
        other => Err(DrmmError::shape("PGM image", "[h, w, 1] or [d]", format!("{:?}", other))),
    }
}

/// Binary PGM (P5, maxval 255). Values are min-max scaled to [0, 255],
/// rounded, and clamped; a constant image renders black.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = image_extent(image)?;
    let data = image.data();
    let mut mn = f64::INFINITY;
    let mut mx = f64::NEG_INFINITY;
    for &v in data {
        mn = mn.min(v);
        mx = mx.max(v);
    }
    let scale = if mx > mn { 255.0 / (mx - mn) } else { 0.0 };
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.extend(data.iter().map(|&v| ((v - mn) * scale).round().clamp(0.0, 255.0) as u8));
    fs::write(path, out)?;
    Ok(())
}
