//! Density-map visualization: a grayscale raster plus a sidecar text file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::head::DensityMap;
use crate::metrics::{regional_counts, regional_point_counts, MAX_GAME_LEVEL};
use crate::synth::{write_pnm, Point};

/// Map normalized by its maximum and upsampled by nearest neighbour to the
/// source image size, `[H, W, 1]`.
pub fn density_raster(d: &DensityMap) -> Tensor {
    let n = d.side();
    let (h, w) = d.source_size;
    let max = d.grid.data().iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let r = (y * n / h).min(n - 1);
        for x in 0..w {
            let c = (x * n / w).min(n - 1);
            data.push(d.grid.at(r, c) * scale);
        }
    }
    Tensor::new([h, w, 1], data).unwrap()
}

/// Sidecar contents: predicted count and the regional counts of every GAME
/// level, with ground truth alongside when given.
pub fn sidecar_text(d: &DensityMap, gt: Option<&[Point]>) -> Result<String> {
    let mut s = String::new();
    writeln!(s, "predicted_count = {}", d.predicted_count()).unwrap();
    if let Some(gt) = gt {
        writeln!(s, "gt_count = {}", gt.len()).unwrap();
    }
    for l in 0..=MAX_GAME_LEVEL {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
        writeln!(s, "game{l}.pred = {}", fmt(&regional_counts(d, l)?)).unwrap();
        if let Some(gt) = gt {
            writeln!(s, "game{l}.gt = {}", fmt(&regional_point_counts(gt, d.source_size, l)?)).unwrap();
        }
    }
    Ok(s)
}

/// Writes `out` (PGM) and `out` with a `.txt` extension; returns the sidecar
/// path.
pub fn render_density(d: &DensityMap, out: &Path, gt: Option<&[Point]>) -> Result<PathBuf> {
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_pnm(out, &density_raster(d))?;
    let sidecar = out.with_extension("txt");
    fs::write(&sidecar, sidecar_text(d, gt)?)?;
    Ok(sidecar)
}
