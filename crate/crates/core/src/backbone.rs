//! Four-stage feature pyramid used for both the colour and the thermal
//! stream.
//!
//! Each stage is a patch merge (space-to-depth by the stride ratio), a
//! pointwise projection to the stage width, a per-channel normalization over
//! spatial positions with learned affine, and `blocks_per_stage` residual
//! pointwise MLP blocks.

use std::rc::Rc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Linear, Mlp2, LN_EPS};
use crate::params::{Init, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [16, 32, 64, 128],
            stage_strides: [4, 8, 16, 32],
            blocks_per_stage: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut prev = 1;
        for &s in &self.stage_strides {
            if s <= prev || s % prev != 0 {
                return Err(Error::Config(format!(
                    "stage strides {:?} must be strictly increasing multiples",
                    self.stage_strides
                )));
            }
            prev = s;
        }
        if self.in_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Input height/width must be a multiple of this.
    pub fn max_stride(&self) -> usize {
        self.stage_strides[3]
    }

    pub fn level_shape(&self, level: usize, height: usize, width: usize) -> [usize; 3] {
        let s = self.stage_strides[level];
        [height / s, width / s, self.stage_channels[level]]
    }

    /// Closed-form parameter count of one stream.
    pub fn num_params(&self) -> usize {
        let mut prev_c = self.in_channels;
        let mut prev_s = 1;
        let mut total = 0;
        for (&c, &s) in self.stage_channels.iter().zip(&self.stage_strides) {
            let p = s / prev_s;
            total += Linear::num_params(p * p * prev_c, c) + 2 * c;
            total += self.blocks_per_stage * Mlp2::num_params(c, 2 * c, c);
            prev_c = c;
            prev_s = s;
        }
        total
    }
}

/// The four levels of one stream, finest first. Level `i` holds a
/// `[h_i * w_i, c_i]` token matrix in row-major spatial order.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
    /// `(h, w, c)` per level.
    pub shapes: [(usize, usize, usize); 4],
}

impl FeaturePyramid {
    pub fn values(&self, g: &Graph) -> Vec<Tensor> {
        self.levels
            .iter()
            .zip(&self.shapes)
            .map(|(&v, &(h, w, c))| g.value(v).clone().reshape([h, w, c]).unwrap())
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    ratio: usize,
    in_channels: usize,
    proj: Linear,
    norm_gamma: String,
    norm_beta: String,
    blocks: Vec<Mlp2>,
}

#[derive(Clone, Debug)]
pub struct PyramidBackbone {
    pub config: BackboneConfig,
    stages: Vec<Stage>,
}

impl PyramidBackbone {
    pub fn new(init: &mut Init, name: &str, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut prev_c = config.in_channels;
        let mut prev_s = 1;
        for (i, (&c, &s)) in config
            .stage_channels
            .iter()
            .zip(&config.stage_strides)
            .enumerate()
        {
            let ratio = s / prev_s;
            let prefix = format!("{name}.stage{}", i + 1);
            let proj = Linear::new(init, &format!("{prefix}.proj"), ratio * ratio * prev_c, c);
            let norm_gamma = init.constant(&format!("{prefix}.norm.gamma"), &[c], 1.0);
            let norm_beta = init.constant(&format!("{prefix}.norm.beta"), &[c], 0.0);
            let blocks = (0..config.blocks_per_stage)
                .map(|b| Mlp2::new(init, &format!("{prefix}.block{b}"), c, 2 * c, c))
                .collect();
            stages.push(Stage {
                ratio,
                in_channels: prev_c,
                proj,
                norm_gamma,
                norm_beta,
                blocks,
            });
            prev_c = c;
            prev_s = s;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    /// Runs the stream on an `[H, W, in_channels]` image already on the graph.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<FeaturePyramid> {
        let shape = g.value(image).shape().to_vec();
        validate_image(&shape, &self.config)?;
        if !g.value(image).all_finite() {
            return Err(Error::NonFinite("backbone input".into()));
        }
        let (mut h, mut w) = (shape[0], shape[1]);
        let mut x = g.reshape(image, [h * w, shape[2]]);
        let mut levels = Vec::with_capacity(4);
        let mut shapes = [(0, 0, 0); 4];
        for (i, stage) in self.stages.iter().enumerate() {
            let (nh, nw) = (h / stage.ratio, w / stage.ratio);
            let index = patch_merge_index(h, w, stage.in_channels, stage.ratio);
            let merged = g.gather(
                x,
                index,
                vec![nh * nw, stage.ratio * stage.ratio * stage.in_channels],
            );
            let mut y = stage.proj.forward(g, store, merged)?;
            y = spatial_norm(g, store, y, &stage.norm_gamma, &stage.norm_beta)?;
            for block in &stage.blocks {
                let r = block.forward(g, store, y)?;
                y = g.add(y, r);
            }
            let c = self.config.stage_channels[i];
            levels.push(y);
            shapes[i] = (nh, nw, c);
            x = y;
            h = nh;
            w = nw;
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
            shapes,
        })
    }

    /// Convenience: run on a fresh graph and return the level tensors
    /// (`[h_i, w_i, c_i]` each).
    pub fn extract_features(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let pyr = self.forward(&mut g, store, x)?;
        Ok(pyr.values(&g))
    }
}

fn validate_image(shape: &[usize], config: &BackboneConfig) -> Result<()> {
    if shape.len() != 3 || shape[2] != config.in_channels {
        return shape_err(format!(
            "expected [H, W, {}] image, got {shape:?}",
            config.in_channels
        ));
    }
    let m = config.max_stride();
    if shape[0] == 0 || shape[1] == 0 || !shape[0].is_multiple_of(m) || !shape[1].is_multiple_of(m) {
        return shape_err(format!(
            "image {}x{} is not divisible by {m}",
            shape[0], shape[1]
        ));
    }
    Ok(())
}

/// Space-to-depth gather: output row `(i, j)` holds the `ratio x ratio`
/// patch in `(dy, dx, c)` order.
fn patch_merge_index(h: usize, w: usize, c: usize, ratio: usize) -> Rc<[usize]> {
    let (nh, nw) = (h / ratio, w / ratio);
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..nh {
        for j in 0..nw {
            for dy in 0..ratio {
                for dx in 0..ratio {
                    let base = ((i * ratio + dy) * w + j * ratio + dx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx.into()
}

/// Standardizes every channel over spatial positions, then applies the
/// per-channel affine.
fn spatial_norm(g: &mut Graph, store: &ParamStore, x: Var, gamma: &str, beta: &str) -> Result<Var> {
    let t = g.transpose(x);
    let t = g.standardize_rows(t, LN_EPS);
    let y = g.transpose(t);
    let gamma = g.param(store, gamma)?;
    let beta = g.param(store, beta)?;
    let y = g.mul_row(y, gamma);
    Ok(g.add_row(y, beta))
}

/// Replicates a single-channel thermal frame to three channels; three-channel
/// input passes through.
pub fn make_thermal_input(thermal: &Tensor) -> Result<Tensor> {
    let s = thermal.shape();
    if s.len() != 3 {
        return shape_err(format!("expected [H, W, C] thermal image, got {s:?}"));
    }
    match s[2] {
        3 => Ok(thermal.clone()),
        1 => {
            let data = thermal.data().iter().flat_map(|&v| [v, v, v]).collect();
            Tensor::new([s[0], s[1], 3], data)
        }
        c => shape_err(format!("thermal image must have 1 or 3 channels, got {c}")),
    }
}
