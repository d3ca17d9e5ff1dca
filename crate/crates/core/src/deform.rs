//! Modality-guided enhancement with multi-scale deformable attention.
//!
//! Queries are the fused thermal tokens plus the count token; keys/values are
//! four colour levels `{G_r, F_r^3, F_r^2, F_r^1}` (coarse to fine), each
//! projected to `C` channels. Every query predicts, per head, `K` sampling
//! offsets and `K` logits on every level; the logits are softmaxed jointly over
//! the `4K` samples of that head and the bilinearly sampled values are summed
//! with those weights.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp2};
use crate::params::{Init, ParamStore};

pub const NUM_LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DeformConfig {
    pub heads: usize,
    pub sample_points_per_level: usize,
    pub layers: usize,
    pub channels: usize,
}

impl DeformConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            heads: 4,
            sample_points_per_level: 4,
            layers: 1,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "deformable channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.sample_points_per_level == 0 || self.layers == 0 {
            return Err(Error::Config("deformable points and layers must be >= 1".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count given the colour level widths
    /// (`[G_r, F_r^3, F_r^2, F_r^1]`).
    pub fn num_params(&self, level_channels: [usize; 4]) -> usize {
        let c = self.channels;
        let hlk = self.heads * NUM_LEVELS * self.sample_points_per_level;
        let proj: usize = level_channels.iter().map(|&w| Linear::num_params(w, c)).sum();
        let attn = Linear::num_params(c, 2 * hlk) + Linear::num_params(c, hlk) + 2 * Linear::num_params(c, c);
        let layer = 2 * (2 * c) + attn + Mlp2::num_params(c, 2 * c, c);
        proj + self.layers * layer
    }
}

/// Flattened multi-level value tokens.
#[derive(Clone, Debug)]
pub struct MultiScaleValueSet {
    /// `[sum_l h_l w_l, C]`
    pub tokens: Var,
    /// `(h, w)` per level, coarse to fine.
    pub shapes: [(usize, usize); NUM_LEVELS],
    pub starts: [usize; NUM_LEVELS],
}

impl MultiScaleValueSet {
    pub fn total_len(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }
}

/// Maps the four colour levels to `C` channels and flattens them.
/// `levels` are `(tokens [h*w, c_l], h, w)` in order `G_r, F^3, F^2, F^1`.
pub fn project_levels(
    g: &mut Graph,
    store: &ParamStore,
    levels: [(Var, usize, usize); NUM_LEVELS],
    projections: &[Linear],
) -> Result<MultiScaleValueSet> {
    let mut parts = Vec::with_capacity(NUM_LEVELS);
    let mut shapes = [(0, 0); NUM_LEVELS];
    let mut starts = [0; NUM_LEVELS];
    let mut offset = 0;
    for (l, ((tokens, h, w), proj)) in levels.into_iter().zip(projections).enumerate() {
        let (rows, cols) = g.value(tokens).dims2();
        if rows != h * w || cols != proj.in_dim {
            return shape_err(format!(
                "level {l}: expected [{}, {}] tokens, got [{rows}, {cols}]",
                h * w,
                proj.in_dim
            ));
        }
        parts.push(proj.forward(g, store, tokens)?);
        shapes[l] = (h, w);
        starts[l] = offset;
        offset += h * w;
    }
    Ok(MultiScaleValueSet {
        tokens: g.concat_rows(&parts),
        shapes,
        starts,
    })
}

/// Cell-centre reference points of an `n x n` grid in row-major order, as
/// normalized `(x, y)`, followed by `(0.5, 0.5)` for the count token.
pub fn reference_points_for(n: usize, with_count: bool) -> Tensor {
    let mut data = Vec::with_capacity(2 * (n * n + 1));
    for i in 0..n {
        for j in 0..n {
            data.push((j as f64 + 0.5) / n as f64);
            data.push((i as f64 + 0.5) / n as f64);
        }
    }
    if with_count {
        data.extend([0.5, 0.5]);
    }
    let rows = data.len() / 2;
    Tensor::new([rows, 2], data).unwrap()
}

/// Bilinear interpolation of an `[h, w, C]` grid at normalized `(x, y)`,
/// pixel centres at `(j + 0.5) / w`; zero outside the grid.
pub fn bilinear_sample(grid: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    let s = grid.shape();
    if s.len() != 3 {
        return shape_err(format!("expected [h, w, C] grid, got {s:?}"));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; c];
    for (idx, weight) in bilinear_taps(h, w, x * w as f64 - 0.5, y * h as f64 - 0.5).iter().flatten() {
        for (o, v) in out.iter_mut().zip(&grid.data()[idx * c..(idx + 1) * c]) {
            *o += weight * v;
        }
    }
    Ok(out)
}

/// The four neighbour taps `(flat index, weight)` of pixel-space `(px, py)`;
/// `None` where the neighbour is outside the grid.
fn bilinear_taps(h: usize, w: usize, px: f64, py: f64) -> [Option<(usize, f64)>; 4] {
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let mut taps = [None; 4];
    for (t, (dx, dy, wt)) in [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
        (1.0, 0.0, fx * (1.0 - fy)),
        (0.0, 1.0, (1.0 - fx) * fy),
        (1.0, 1.0, fx * fy),
    ]
    .into_iter()
    .enumerate()
    {
        let (xi, yi) = (x0 + dx, y0 + dy);
        if xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 {
            taps[t] = Some((yi as usize * w + xi as usize, wt));
        }
    }
    taps
}

/// Geometry shared by the sampling op's forward and backward passes.
struct SampleSpec {
    heads: usize,
    points: usize,
    shapes: [(usize, usize); NUM_LEVELS],
    starts: [usize; NUM_LEVELS],
    refs: Tensor,
}

impl SampleSpec {
    /// Pixel-space location of sample `(q, h, l, k)`; offsets are in level
    /// pixels.
    fn location(&self, offsets: &[f64], q: usize, h: usize, l: usize, k: usize) -> (f64, f64) {
        let per_q = self.heads * NUM_LEVELS * self.points * 2;
        let o = q * per_q + ((h * NUM_LEVELS + l) * self.points + k) * 2;
        let (lh, lw) = self.shapes[l];
        let px = self.refs.at(q, 0) * lw as f64 + offsets[o] - 0.5;
        let py = self.refs.at(q, 1) * lh as f64 + offsets[o + 1] - 0.5;
        (px, py)
    }
}

/// The sampling core: `values [S, C]`, raw `offsets [Q, H*4*K*2]`, softmaxed
/// `weights [Q, H*4*K]` to `[Q, C]`.
fn ms_deform_sample(g: &mut Graph, values: Var, offsets: Var, weights: Var, spec: SampleSpec) -> Var {
    let (_, c) = g.value(values).dims2();
    let q_count = spec.refs.rows();
    let hd = c / spec.heads;
    let lk = NUM_LEVELS * spec.points;
    let mut out = vec![0.0; q_count * c];
    {
        let (v, off, a) = (g.value(values).data(), g.value(offsets).data(), g.value(weights).data());
        for q in 0..q_count {
            for h in 0..spec.heads {
                let orow = &mut out[q * c + h * hd..q * c + (h + 1) * hd];
                for l in 0..NUM_LEVELS {
                    let (lh, lw) = spec.shapes[l];
                    for k in 0..spec.points {
                        let wt = a[q * spec.heads * lk + h * lk + l * spec.points + k];
                        let (px, py) = spec.location(off, q, h, l, k);
                        for (idx, bw) in bilinear_taps(lh, lw, px, py).iter().flatten() {
                            let base = (spec.starts[l] + idx) * c + h * hd;
                            for (o, val) in orow.iter_mut().zip(&v[base..base + hd]) {
                                *o += wt * bw * val;
                            }
                        }
                    }
                }
            }
        }
    }
    let value = Tensor::new([q_count, c], out).unwrap();
    g.custom(value, &[values, offsets, weights], move |ctx| {
        let (v, off, a) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
        let gout = ctx.grad.data();
        let mut dv = vec![0.0; v.len()];
        let mut doff = vec![0.0; off.len()];
        let mut da = vec![0.0; a.len()];
        let per_q = spec.heads * lk * 2;
        for q in 0..q_count {
            for h in 0..spec.heads {
                let grow = &gout[q * c + h * hd..q * c + (h + 1) * hd];
                for l in 0..NUM_LEVELS {
                    let (lh, lw) = spec.shapes[l];
                    for k in 0..spec.points {
                        let ai = q * spec.heads * lk + h * lk + l * spec.points + k;
                        let wt = a[ai];
                        let (px, py) = spec.location(off, q, h, l, k);
                        let (fx, fy) = (px - px.floor(), py - py.floor());
                        // d(tap weight)/d(px), d(tap weight)/d(py) in tap order
                        let dwx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
                        let dwy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
                        let (mut gsx, mut gsy, mut gs) = (0.0, 0.0, 0.0);
                        for (t, tap) in bilinear_taps(lh, lw, px, py).iter().enumerate() {
                            let Some((idx, bw)) = tap else { continue };
                            let base = (spec.starts[l] + idx) * c + h * hd;
                            let dot: f64 = grow.iter().zip(&v[base..base + hd]).map(|(g, v)| g * v).sum();
                            gs += bw * dot;
                            gsx += dwx[t] * dot;
                            gsy += dwy[t] * dot;
                            if ctx.needs[0] {
                                for (d, g) in dv[base..base + hd].iter_mut().zip(grow) {
                                    *d += wt * bw * g;
                                }
                            }
                        }
                        da[ai] += gs;
                        let o = q * per_q + ((h * NUM_LEVELS + l) * spec.points + k) * 2;
                        doff[o] += wt * gsx;
                        doff[o + 1] += wt * gsy;
                    }
                }
            }
        }
        vec![
            ctx.needs[0].then(|| Tensor::new(ctx.inputs[0].shape().to_vec(), dv).unwrap()),
            ctx.needs[1].then(|| Tensor::new(ctx.inputs[1].shape().to_vec(), doff).unwrap()),
            ctx.needs[2].then(|| Tensor::new(ctx.inputs[2].shape().to_vec(), da).unwrap()),
        ]
    })
}

/// One multi-scale deformable attention block (no residual).
#[derive(Clone, Debug)]
pub struct DeformAttention {
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub points: usize,
}

impl DeformAttention {
    pub fn new(init: &mut Init, name: &str, cfg: &DeformConfig) -> Self {
        let (c, h, k) = (cfg.channels, cfg.heads, cfg.sample_points_per_level);
        let hlk = h * NUM_LEVELS * k;
        let offsets = Linear {
            weight: init.constant(&format!("{name}.offsets.weight"), &[c, 2 * hlk], 0.0),
            bias: init.tensor(&format!("{name}.offsets.bias"), radial_offsets(h, k)),
            in_dim: c,
            out_dim: 2 * hlk,
        };
        let weights = Linear {
            weight: init.constant(&format!("{name}.weights.weight"), &[c, hlk], 0.0),
            bias: init.constant(&format!("{name}.weights.bias"), &[hlk], 0.0),
            in_dim: c,
            out_dim: hlk,
        };
        Self {
            offsets,
            weights,
            value: Linear::new(init, &format!("{name}.value"), c, c),
            output: Linear::new(init, &format!("{name}.output"), c, c),
            heads: h,
            points: k,
        }
    }

    /// Softmaxed sampling weights `[Q, H*4*K]` for `query`.
    pub fn attention_weights(&self, g: &mut Graph, store: &ParamStore, query: Var) -> Result<Var> {
        let q_count = g.value(query).rows();
        let lk = NUM_LEVELS * self.points;
        let logits = self.weights.forward(g, store, query)?;
        let logits = g.reshape(logits, [q_count * self.heads, lk]);
        let a = g.softmax_rows(logits);
        Ok(g.reshape(a, [q_count, self.heads * lk]))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        values: &MultiScaleValueSet,
        refs: &Tensor,
    ) -> Result<Var> {
        let (q_count, c) = g.value(query).dims2();
        if refs.shape() != [q_count, 2] {
            return shape_err(format!("need [{q_count}, 2] reference points, got {:?}", refs.shape()));
        }
        let offsets = self.offsets.forward(g, store, query)?;
        let weights = self.attention_weights(g, store, query)?;
        let v = self.value.forward(g, store, values.tokens)?;
        if g.value(v).cols() != c {
            return shape_err("value width differs from query width");
        }
        let sampled = ms_deform_sample(
            g,
            v,
            offsets,
            weights,
            SampleSpec {
                heads: self.heads,
                points: self.points,
                shapes: values.shapes,
                starts: values.starts,
                refs: refs.clone(),
            },
        );
        self.output.forward(g, store, sampled)
    }
}

/// Initial offset bias: head `h` points along angle `2 pi h / H`, sample `k`
/// at radius `k + 1` level pixels, identical on every level.
fn radial_offsets(heads: usize, points: usize) -> Tensor {
    let mut data = Vec::with_capacity(heads * NUM_LEVELS * points * 2);
    for h in 0..heads {
        let theta = 2.0 * PI * h as f64 / heads as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        let norm = dx.abs().max(dy.abs());
        for _ in 0..NUM_LEVELS {
            for k in 0..points {
                data.push(dx / norm * (k + 1) as f64);
                data.push(dy / norm * (k + 1) as f64);
            }
        }
    }
    Tensor::new([data.len()], data).unwrap()
}

/// Pre-norm decoder layer: deformable attention then feed-forward, both
/// residual.
#[derive(Clone, Debug)]
pub struct DeformLayer {
    pub norm_query: LayerNorm,
    pub attn: DeformAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp2,
}

impl DeformLayer {
    pub fn new(init: &mut Init, name: &str, cfg: &DeformConfig) -> Self {
        let c = cfg.channels;
        Self {
            norm_query: LayerNorm::new(init, &format!("{name}.norm_query"), c),
            attn: DeformAttention::new(init, &format!("{name}.attn"), cfg),
            norm_ffn: LayerNorm::new(init, &format!("{name}.norm_ffn"), c),
            ffn: Mlp2::new(init, &format!("{name}.ffn"), c, 2 * c, c),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        values: &MultiScaleValueSet,
        refs: &Tensor,
    ) -> Result<Var> {
        let h = self.norm_query.forward(g, store, query)?;
        let h = self.attn.forward(g, store, h, values, refs)?;
        let x = g.add(query, h);
        let h = self.norm_ffn.forward(g, store, x)?;
        let h = self.ffn.forward(g, store, h)?;
        let x = g.add(x, h);
        if !g.value(x).all_finite() {
            return Err(Error::NonFinite("deformable attention layer".into()));
        }
        Ok(x)
    }
}

/// Thermal-plus-count queries attending to the colour pyramid.
#[derive(Clone, Debug)]
pub struct MsdTrans {
    pub config: DeformConfig,
    pub level_proj: Vec<Linear>,
    pub layers: Vec<DeformLayer>,
}

/// Enhanced thermal tokens and count token.
#[derive(Clone, Copy, Debug)]
pub struct Enhanced {
    pub o_t: Var,
    pub o_count: Option<Var>,
}

impl MsdTrans {
    /// `level_channels` are the widths of `G_r, F_r^3, F_r^2, F_r^1`.
    pub fn new(init: &mut Init, name: &str, cfg: &DeformConfig, level_channels: [usize; 4]) -> Result<Self> {
        cfg.validate()?;
        let level_proj = level_channels
            .iter()
            .enumerate()
            .map(|(l, &w)| Linear::new(init, &format!("{name}.level_proj{l}"), w, cfg.channels))
            .collect();
        let layers = (0..cfg.layers)
            .map(|i| DeformLayer::new(init, &format!("{name}.layer{i}"), cfg))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            level_proj,
            layers,
        })
    }

    /// `levels` as for [`project_levels`]; `g_t` is `[N², C]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        g_t: Var,
        g_count: Option<Var>,
        levels: [(Var, usize, usize); NUM_LEVELS],
    ) -> Result<Enhanced> {
        let (n2, c) = g.value(g_t).dims2();
        let n = levels[0].1;
        if n * n != n2 || levels[0].2 != n || c != self.config.channels {
            return shape_err(format!("thermal tokens [{n2}, {c}] do not match a {n}x{n} grid"));
        }
        let values = project_levels(g, store, levels, &self.level_proj)?;
        let query = match g_count {
            Some(k) => g.concat_rows(&[g_t, k]),
            None => g_t,
        };
        let refs = reference_points_for(n, g_count.is_some());
        let mut x = query;
        for layer in &self.layers {
            x = layer.forward(g, store, x, &values, &refs)?;
        }
        let o_t = g.slice_rows(x, 0, n2);
        let o_count = g_count.map(|_| g.slice_rows(x, n2, 1));
        Ok(Enhanced { o_t, o_count })
    }
}
