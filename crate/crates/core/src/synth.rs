//! Synthetic RGB-T scenes with point ground truth, and the on-disk formats
//! for images, annotations and manifests.
//!
//! People are Gaussian blobs that are dark in colour and warm in thermal.
//! Three optional regimes stress the model the way real RGB-T data does:
//! low light (colour contrast collapses, thermal unaffected), thermal clutter
//! (non-person hot blobs in thermal only) and scale variation (blob radius
//! grows linearly with the row coordinate).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::backbone::make_thermal_input;
use crate::error::{Error, Result};

/// Head position in pixel coordinates, `x` along the width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Regime {
    LowLight,
    ThermalClutter,
    ScaleVariation,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::LowLight, Regime::ThermalClutter, Regime::ScaleVariation];
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::LowLight => "low_light",
            Regime::ThermalClutter => "thermal_clutter",
            Regime::ScaleVariation => "scale_variation",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_light" => Ok(Regime::LowLight),
            "thermal_clutter" => Ok(Regime::ThermalClutter),
            "scale_variation" => Ok(Regime::ScaleVariation),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_people: usize,
    pub max_people: usize,
    pub regimes: BTreeSet<Regime>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 224,
            width: 224,
            min_people: 10,
            max_people: 30,
            regimes: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    /// `[H, W, 3]` in `[0, 1]`
    pub rgb: Tensor,
    /// `[H, W, 1]` in `[0, 1]`
    pub thermal: Tensor,
    pub points: Vec<Point>,
    pub tags: BTreeSet<Regime>,
}

impl ScenePair {
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// Colour-contrast attenuation applied to low-light scenes.
pub const LOW_LIGHT_CONTRAST: (f64, f64) = (0.05, 0.2);

const PERSON_SIGMA: f64 = 3.0;
const SCALE_SIGMA: (f64, f64) = (1.5, 7.5);

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<ScenePair> {
    let (h, w) = (cfg.height, cfg.width);
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!("scene size {h}x{w} must be a positive multiple of 32")));
    }
    if cfg.min_people > cfg.max_people {
        return Err(Error::Config("min_people exceeds max_people".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rgb = vec![0.0; h * w * 3];
    let mut thermal = vec![0.0; h * w];

    // background: base colour, linear gradient, a few low-frequency waves
    let base: [f64; 3] = [rng.gen_range(0.35..0.7), rng.gen_range(0.35..0.7), rng.gen_range(0.35..0.7)];
    let grad = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.01..0.06),
                rng.gen_range(0.01..0.06),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    let t_base = rng.gen_range(0.15..0.3);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
            let wave: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * x as f64 + ky * y as f64 + ph).sin())
                .sum();
            let shade = grad.0 * fx + grad.1 * fy + wave;
            for c in 0..3 {
                rgb[(y * w + x) * 3 + c] = base[c] + shade + rng.gen_range(-0.02..0.02);
            }
            thermal[y * w + x] = t_base + 0.3 * shade + rng.gen_range(-0.01..0.01);
        }
    }

    let n = rng.gen_range(cfg.min_people..=cfg.max_people);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let p = Point::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let sigma = if cfg.regimes.contains(&Regime::ScaleVariation) {
            SCALE_SIGMA.0 + (SCALE_SIGMA.1 - SCALE_SIGMA.0) * p.y / h as f64
        } else {
            PERSON_SIGMA
        };
        let tone: [f64; 3] = [rng.gen_range(0.0..0.2), rng.gen_range(0.0..0.2), rng.gen_range(0.0..0.2)];
        let heat = rng.gen_range(0.5..0.7);
        splat(h, w, p, sigma, |idx, a| {
            for c in 0..3 {
                let v = &mut rgb[idx * 3 + c];
                *v = *v * (1.0 - a) + tone[c] * a;
            }
            thermal[idx] += heat * a;
        });
        points.push(p);
    }

    if cfg.regimes.contains(&Regime::ThermalClutter) {
        for _ in 0..rng.gen_range(2..=4) {
            let c = Point::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
            let sigma = rng.gen_range(8.0..14.0);
            let heat = rng.gen_range(0.4..0.6);
            splat(h, w, c, sigma, |idx, a| thermal[idx] += heat * a);
        }
    }

    if cfg.regimes.contains(&Regime::LowLight) {
        let factor = rng.gen_range(LOW_LIGHT_CONTRAST.0..=LOW_LIGHT_CONTRAST.1);
        let mean = rgb.iter().sum::<f64>() / rgb.len() as f64;
        for v in &mut rgb {
            *v = 0.3 * mean + (*v - mean) * factor;
        }
    }

    for v in rgb.iter_mut().chain(thermal.iter_mut()) {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(ScenePair {
        rgb: Tensor::new([h, w, 3], rgb)?,
        thermal: Tensor::new([h, w, 1], thermal)?,
        points,
        tags: cfg.regimes.clone(),
    })
}

/// Calls `f(pixel_index, weight)` for a Gaussian footprint truncated at 3 sigma.
fn splat(h: usize, w: usize, p: Point, sigma: f64, mut f: impl FnMut(usize, f64)) {
    let r = (3.0 * sigma).ceil() as isize;
    let (cx, cy) = (p.x.floor() as isize, p.y.floor() as isize);
    for y in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
            let dx = x as f64 + 0.5 - p.x;
            let dy = y as f64 + 0.5 - p.y;
            let a = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            f(y as usize * w + x as usize, a);
        }
    }
}

/// Standard deviation of colour luminance: the contrast statistic that
/// separates low-light scenes.
pub fn rgb_contrast(rgb: &Tensor) -> f64 {
    let lum: Vec<f64> = rgb
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let mean = lum.iter().sum::<f64>() / lum.len() as f64;
    (lum.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / lum.len() as f64).sqrt()
}

/// Adds one unit of mass per point to the `n x n` cell containing it.
pub fn bin_points_to_grid(points: &[Point], height: usize, width: usize, n: usize) -> Tensor {
    let mut grid = Tensor::zeros([n, n]);
    for p in points {
        let (r, c) = cell_of(p, height, width, n);
        grid.data_mut()[r * n + c] += 1.0;
    }
    grid
}

pub(crate) fn cell_of(p: &Point, height: usize, width: usize, n: usize) -> (usize, usize) {
    let idx = |v: f64, extent: usize| ((v / extent as f64 * n as f64).floor().max(0.0) as usize).min(n - 1);
    (idx(p.y, height), idx(p.x, width))
}

// ----------------------------------------------------------------------------
// annotations

/// `count <n>` then one `x y` line per point.
pub fn write_annotation(path: &Path, points: &[Point]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "count {}", points.len())?;
    for p in points {
        writeln!(out, "{} {}", p.x, p.y)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_annotation(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path)?;
    parse_annotation(&text, path)
}

pub fn parse_annotation(text: &str, path: &Path) -> Result<Vec<Point>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing `count <n>` header".into()))?;
    let count: usize = header
        .trim()
        .strip_prefix("count")
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| err(1, format!("bad header `{header}`")))?;
    let mut points = Vec::with_capacity(count);
    for (i, line) in lines {
        let mut it = line.split_whitespace();
        let parsed = (it.next(), it.next(), it.next());
        let (Some(x), Some(y), None) = parsed else {
            return Err(err(i + 1, format!("expected `x y`, got `{line}`")));
        };
        let coord = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(i + 1, format!("bad coordinate `{s}`")))
        };
        points.push(Point::new(coord(x)?, coord(y)?));
    }
    if points.len() != count {
        return Err(err(
            text.lines().count().max(1),
            format!("header says {count} points, found {}", points.len()),
        ));
    }
    Ok(points)
}

// ----------------------------------------------------------------------------
// rasters

/// Binary PGM (`P5`, one channel) or PPM (`P6`, three channels), 8 bit.
pub fn write_pnm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let magic = match s {
        [_, _, 1] => "P5",
        [_, _, 3] => "P6",
        _ => return Err(Error::Shape(format!("cannot write raster of shape {s:?}"))),
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    write!(out, "{magic}\n{} {}\n255\n", s[1], s[0])?;
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let err = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: msg.to_string(),
    };
    // header: magic, width, height, maxval separated by whitespace/comments
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace before the raster
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(err("only binary P5/P6 rasters are supported")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(err("only 8-bit rasters are supported"));
    }
    let n = w * h * channels;
    if bytes.len() < pos + n {
        return Err(err("truncated raster data"));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new([h, w, channels], data)
}

// ----------------------------------------------------------------------------
// manifests and samples

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub thermal: PathBuf,
    pub annotation: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Writes `# split`/`# seed` comment lines then one tab-separated
/// `rgb thermal annotation` triple per line, paths relative to the manifest.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "# split {}", manifest.split)?;
    writeln!(out, "# seed {}", manifest.seed)?;
    for e in &manifest.entries {
        writeln!(out, "{}\t{}\t{}", rel(&e.rgb), rel(&e.thermal), rel(&e.annotation))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a manifest, resolving relative paths against its directory and
/// checking every referenced file exists.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(path)?);
    let mut manifest = DatasetManifest {
        split: String::new(),
        seed: 0,
        entries: Vec::new(),
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let mut kv = comment.split_whitespace();
            match (kv.next(), kv.next()) {
                (Some("split"), Some(v)) => manifest.split = v.to_string(),
                (Some("seed"), Some(v)) => {
                    manifest.seed = v.parse().map_err(|_| err(format!("bad seed `{v}`")))?
                }
                _ => {}
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 tab-separated paths, got {}", cols.len())));
        }
        let resolve = |p: &str| {
            let p = Path::new(p.trim());
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            if full.exists() {
                Ok(full)
            } else {
                Err(err(format!("missing file {}", full.display())))
            }
        };
        manifest.entries.push(ManifestEntry {
            rgb: resolve(cols[0])?,
            thermal: resolve(cols[1])?,
            annotation: resolve(cols[2])?,
        });
    }
    Ok(manifest)
}

/// Model-ready pair: both images `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: Tensor,
    pub thermal: Tensor,
    pub points: Vec<Point>,
}

impl Sample {
    pub fn from_scene(scene: &ScenePair) -> Result<Self> {
        Ok(Self {
            rgb: scene.rgb.clone(),
            thermal: make_thermal_input(&scene.thermal)?,
            points: scene.points.clone(),
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.rgb.shape()[0], self.rgb.shape()[1])
    }

    pub fn load(entry: &ManifestEntry) -> Result<Self> {
        let rgb = read_pnm(&entry.rgb)?;
        if rgb.shape()[2] != 3 {
            return Err(Error::Shape(format!("{} is not a colour image", entry.rgb.display())));
        }
        let thermal = make_thermal_input(&read_pnm(&entry.thermal)?)?;
        if thermal.shape() != rgb.shape() {
            return Err(Error::Shape("colour and thermal sizes differ".into()));
        }
        let points = read_annotation(&entry.annotation)?;
        let (h, w) = (rgb.shape()[0] as f64, rgb.shape()[1] as f64);
        if let Some(p) = points.iter().find(|p| p.x < 0.0 || p.y < 0.0 || p.x >= w || p.y >= h) {
            return Err(Error::Parse {
                path: entry.annotation.clone(),
                line: 0,
                msg: format!("point ({}, {}) outside the {w}x{h} image", p.x, p.y),
            });
        }
        Ok(Self { rgb, thermal, points })
    }
}

pub fn load_manifest_samples(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    manifest.entries.par_iter().map(Sample::load).collect()
}

/// Scene seeds for a split, derived from the master seed.
pub fn scene_seeds(master: u64, split: &str, count: usize) -> Vec<u64> {
    let salt = split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ salt);
    (0..count).map(|_| rng.gen()).collect()
}

/// Regime tags for a generated scene: each regime independently with
/// probability 1/3.
fn scene_regimes(seed: u64) -> BTreeSet<Regime> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ 0x5eed);
    Regime::ALL.into_iter().filter(|_| rng.gen_bool(1.0 / 3.0)).collect()
}

/// Writes `<split>/scene_XXXX_{rgb.ppm,thermal.pgm,points.txt}` plus
/// `<split>.tsv` for every split; returns the manifest paths.
pub fn generate_dataset(
    out_dir: &Path,
    master_seed: u64,
    splits: &[(&str, usize)],
    base: &SceneConfig,
) -> Result<Vec<PathBuf>> {
    let mut manifests = Vec::with_capacity(splits.len());
    for &(split, count) in splits {
        let dir = out_dir.join(split);
        fs::create_dir_all(&dir)?;
        let seeds = scene_seeds(master_seed, split, count);
        let entries = seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| {
                let cfg = SceneConfig {
                    regimes: scene_regimes(seed),
                    ..base.clone()
                };
                let scene = generate_scene(seed, &cfg)?;
                let entry = ManifestEntry {
                    rgb: dir.join(format!("scene_{i:04}_rgb.ppm")),
                    thermal: dir.join(format!("scene_{i:04}_thermal.pgm")),
                    annotation: dir.join(format!("scene_{i:04}_points.txt")),
                };
                write_pnm(&entry.rgb, &scene.rgb)?;
                write_pnm(&entry.thermal, &scene.thermal)?;
                write_annotation(&entry.annotation, &scene.points)?;
                Ok(entry)
            })
            .collect::<Result<Vec<_>>>()?;
        let path = out_dir.join(format!("{split}.tsv"));
        write_manifest(
            &path,
            &DatasetManifest {
                split: split.to_string(),
                seed: master_seed,
                entries,
            },
        )?;
        manifests.push(path);
    }
    Ok(manifests)
}
