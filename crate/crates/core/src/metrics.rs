//! Grid Average Mean absolute Error (GAME) and RMSE of image counts.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::head::DensityMap;
use crate::synth::Point;

pub const MAX_GAME_LEVEL: u32 = 3;

fn check_level(level: u32) -> Result<usize> {
    if level > MAX_GAME_LEVEL {
        return Err(Error::Config(format!("GAME level {level} outside 0..={MAX_GAME_LEVEL}")));
    }
    Ok(1 << level)
}

/// Overlap of cell `c` (of `n`) with region `k` (of `r`) as a fraction of
/// the cell, computed on the common `n*r` integer lattice.
fn overlap_fraction(c: usize, n: usize, k: usize, r: usize) -> f64 {
    let (c0, c1) = (c * r, (c + 1) * r);
    let (k0, k1) = (k * n, (k + 1) * n);
    let ov = c1.min(k1).saturating_sub(c0.max(k0));
    ov as f64 / r as f64
}

/// Counts in the `2^l x 2^l` image regions, row-major. Cells straddling a
/// region boundary are split by overlap area.
pub fn regional_counts(d: &DensityMap, level: u32) -> Result<Vec<f64>> {
    let r = check_level(level)?;
    let n = d.side();
    let frac: Vec<f64> = (0..n)
        .flat_map(|c| (0..r).map(move |k| overlap_fraction(c, n, k, r)))
        .collect();
    let mut out = vec![0.0; r * r];
    for row in 0..n {
        for col in 0..n {
            let v = d.grid.at(row, col);
            if v == 0.0 {
                continue;
            }
            for ky in 0..r {
                let fy = frac[row * r + ky];
                if fy == 0.0 {
                    continue;
                }
                for kx in 0..r {
                    out[ky * r + kx] += v * fy * frac[col * r + kx];
                }
            }
        }
    }
    Ok(out)
}

/// Ground-truth counts per region; a point belongs to the region containing
/// its coordinate.
pub fn regional_point_counts(points: &[Point], size: (usize, usize), level: u32) -> Result<Vec<f64>> {
    let r = check_level(level)?;
    let mut out = vec![0.0; r * r];
    let idx = |v: f64, extent: usize| ((v / extent as f64 * r as f64).floor().max(0.0) as usize).min(r - 1);
    for p in points {
        out[idx(p.y, size.0) * r + idx(p.x, size.1)] += 1.0;
    }
    Ok(out)
}

fn check_pairs(preds: &[DensityMap], gts: &[Vec<Point>]) -> Result<()> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "need matching non-empty prediction/ground-truth lists, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Summed absolute regional error of one image.
pub fn image_game(pred: &DensityMap, gt: &[Point], level: u32) -> Result<f64> {
    let p = regional_counts(pred, level)?;
    let t = regional_point_counts(gt, pred.source_size, level)?;
    Ok(p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum())
}

pub fn game(preds: &[DensityMap], gts: &[Vec<Point>], level: u32) -> Result<f64> {
    check_pairs(preds, gts)?;
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(gts) {
        total += image_game(p, t, level)?;
    }
    Ok(total / preds.len() as f64)
}

pub fn rmse(preds: &[DensityMap], gts: &[Vec<Point>]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let p: Vec<f64> = preds.iter().map(DensityMap::predicted_count).collect();
    let t: Vec<f64> = gts.iter().map(|g| g.len() as f64).collect();
    rmse_counts(&p, &t)
}

/// RMSE of total counts given directly.
pub fn rmse_counts(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Shape("need matching non-empty count lists".into()));
    }
    let se: f64 = pred.iter().zip(gt).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// GAME(0) through GAME(3).
    pub game: [f64; 4],
    pub rmse: f64,
    pub n_images: usize,
}

impl MetricReport {
    pub fn compute(preds: &[DensityMap], gts: &[Vec<Point>]) -> Result<Self> {
        let mut game_l = [0.0; 4];
        for (l, slot) in game_l.iter_mut().enumerate() {
            *slot = game(preds, gts, l as u32)?;
        }
        Ok(Self {
            game: game_l,
            rmse: rmse(preds, gts)?,
            n_images: preds.len(),
        })
    }

    pub const COLUMNS: [&'static str; 5] = ["GAME(0)", "GAME(1)", "GAME(2)", "GAME(3)", "RMSE"];

    fn values(&self) -> [f64; 5] {
        [self.game[0], self.game[1], self.game[2], self.game[3], self.rmse]
    }

    /// Two-decimal plain-text table with a header row.
    pub fn table(&self) -> String {
        table(&[("", self)])
    }

    /// `key = value` lines at full precision.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for (l, v) in self.game.iter().enumerate() {
            writeln!(s, "game{l} = {v}").unwrap();
        }
        writeln!(s, "rmse = {}", self.rmse).unwrap();
        writeln!(s, "n_images = {}", self.n_images).unwrap();
        s
    }
}

/// Multi-row table; the first column holds the row labels when any is set.
pub fn table(rows: &[(&str, &MetricReport)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let mut s = String::new();
    if label_w > 0 {
        write!(s, "{:<label_w$}  ", "variant").unwrap();
    }
    let header: Vec<String> = MetricReport::COLUMNS.iter().map(|c| format!("{c:>8}")).collect();
    writeln!(s, "{}", header.join(" ")).unwrap();
    for (label, r) in rows {
        if label_w > 0 {
            write!(s, "{label:<label_w$}  ").unwrap();
        }
        let cells: Vec<String> = r.values().iter().map(|v| format!("{v:>8.2}")).collect();
        writeln!(s, "{}", cells.join(" ")).unwrap();
    }
    s
}
