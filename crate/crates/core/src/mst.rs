//! Count-guided multi-scale token fusion.
//!
//! The level-4 colour and thermal tokens and the shared count token are
//! arranged into three sequences of decreasing length:
//!
//! | sequence | layout                                  | length    |
//! |----------|-----------------------------------------|-----------|
//! | initial  | `N²` colour, `N²` thermal, count         | `2N² + 1` |
//! | middle   | `N` merged colour, `N` merged thermal, count | `2N + 1` |
//! | large    | 1 colour, 1 thermal, count               | `3`       |
//!
//! Each runs through its own stack of self-attention layers. The middle and
//! large outputs are expanded back to the initial length segment by segment,
//! mixed with the initial sequence, and the three branches are fused back to
//! `C` channels. The count token is always the last row.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Linear, Mlp2, TransformerLayer};
use crate::params::{Init, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Side of the level-4 token grid.
    pub token_grid_n: usize,
    pub channels: usize,
    pub heads: usize,
    pub mhsa_layers_per_branch: usize,
    pub enable_count_token: bool,
    pub enable_multiscale: bool,
}

impl FusionConfig {
    pub fn new(token_grid_n: usize, channels: usize) -> Self {
        Self {
            token_grid_n,
            channels,
            heads: 4,
            mhsa_layers_per_branch: 2,
            enable_count_token: true,
            enable_multiscale: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_grid_n == 0 {
            return Err(Error::Config("token grid side must be >= 1".into()));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "fusion channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    fn count_slots(&self) -> usize {
        usize::from(self.enable_count_token)
    }

    /// Closed-form parameter count of the module (the count token itself is
    /// owned by the model).
    pub fn num_params(&self) -> usize {
        let (n, c) = (self.token_grid_n, self.channels);
        let layer = TransformerLayer::num_params(c);
        let branch = self.mhsa_layers_per_branch * layer;
        if !self.enable_multiscale {
            return branch;
        }
        let merges = 2 * Linear::num_params(n * c, c) + 2 * Linear::num_params(n * n * c, c);
        let count_fc = self.count_slots() * Linear::num_params(c, c);
        let restores = 2 * Linear::num_params(c, n * c)
            + 2 * Linear::num_params(c, n * n * c)
            + 2 * count_fc;
        let combines = 2 * Mlp2::num_params(2 * c, 2 * c, c);
        let fuse = Mlp2::num_params(3 * c, 3 * c, c);
        3 * branch + merges + restores + combines + fuse
    }
}

/// Segment sizes of a token sequence, in order colour, thermal, count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub color: usize,
    pub thermal: usize,
    pub count: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.color + self.thermal + self.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_row(&self) -> Option<usize> {
        (self.count == 1).then(|| self.color + self.thermal)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    /// `[L, C]`
    pub tokens: Var,
    pub layout: Layout,
}

/// Fusion output split by segment.
#[derive(Clone, Copy, Debug)]
pub struct FusedState {
    pub g_r: Var,
    pub g_t: Var,
    pub g_count: Option<Var>,
}

fn check_pair(g: &Graph, f_r4: Var, f_t4: Var) -> Result<(usize, usize)> {
    let (a, b) = (g.value(f_r4).shape(), g.value(f_t4).shape());
    if a.len() != 2 || a != b {
        return shape_err(format!("colour/thermal token shapes differ: {a:?} vs {b:?}"));
    }
    Ok((a[0], a[1]))
}

fn with_count(g: &mut Graph, parts: &mut Vec<Var>, count: Option<Var>, channels: usize) -> Result<usize> {
    match count {
        Some(c) => {
            if g.value(c).shape() != [1, channels] {
                return shape_err(format!(
                    "count token must be [1, {channels}], got {:?}",
                    g.value(c).shape()
                ));
            }
            parts.push(c);
            Ok(1)
        }
        None => Ok(0),
    }
}

/// `[F_r, F_t, count]` along the token axis.
pub fn build_initial_sequence(
    g: &mut Graph,
    f_r4: Var,
    f_t4: Var,
    count: Option<Var>,
) -> Result<TokenSequence> {
    let (n2, c) = check_pair(g, f_r4, f_t4)?;
    let mut parts = vec![f_r4, f_t4];
    let count_slots = with_count(g, &mut parts, count, c)?;
    Ok(TokenSequence {
        tokens: g.concat_rows(&parts),
        layout: Layout {
            color: n2,
            thermal: n2,
            count: count_slots,
        },
    })
}

/// Reshapes `[A, C]` to `[B, (A/B) C]` (consecutive row-major groups) and
/// applies `fc` to get `[B, C]`.
pub fn merge_tokens(g: &mut Graph, store: &ParamStore, seq: Var, target: usize, fc: &Linear) -> Result<Var> {
    let (a, c) = g.value(seq).dims2();
    if target == 0 || a % target != 0 {
        return shape_err(format!("cannot merge {a} tokens into {target} groups"));
    }
    if fc.in_dim != (a / target) * c {
        return shape_err(format!(
            "merge map expects width {}, groups have {}",
            fc.in_dim,
            (a / target) * c
        ));
    }
    let grouped = g.reshape(seq, [target, (a / target) * c]);
    fc.forward(g, store, grouped)
}

/// Per-modality merge maps for one target length.
#[derive(Clone, Debug)]
pub struct MergePair {
    pub color: Linear,
    pub thermal: Linear,
    pub target: usize,
}

impl MergePair {
    fn new(init: &mut Init, name: &str, n2: usize, target: usize, c: usize) -> Self {
        let width = (n2 / target) * c;
        Self {
            color: Linear::new(init, &format!("{name}.color"), width, c),
            thermal: Linear::new(init, &format!("{name}.thermal"), width, c),
            target,
        }
    }
}

fn build_merged_sequence(
    g: &mut Graph,
    store: &ParamStore,
    f_r4: Var,
    f_t4: Var,
    count: Option<Var>,
    merge: &MergePair,
) -> Result<TokenSequence> {
    let (_, c) = check_pair(g, f_r4, f_t4)?;
    let r = merge_tokens(g, store, f_r4, merge.target, &merge.color)?;
    let t = merge_tokens(g, store, f_t4, merge.target, &merge.thermal)?;
    let mut parts = vec![r, t];
    let count_slots = with_count(g, &mut parts, count, c)?;
    Ok(TokenSequence {
        tokens: g.concat_rows(&parts),
        layout: Layout {
            color: merge.target,
            thermal: merge.target,
            count: count_slots,
        },
    })
}

/// `[merge(F_r) -> N, merge(F_t) -> N, count]`, length `2N + 1`.
pub fn build_middle_sequence(
    g: &mut Graph,
    store: &ParamStore,
    f_r4: Var,
    f_t4: Var,
    count: Option<Var>,
    merge: &MergePair,
) -> Result<TokenSequence> {
    build_merged_sequence(g, store, f_r4, f_t4, count, merge)
}

/// `[merge(F_r) -> 1, merge(F_t) -> 1, count]`, length 3.
pub fn build_large_sequence(
    g: &mut Graph,
    store: &ParamStore,
    f_r4: Var,
    f_t4: Var,
    count: Option<Var>,
    merge: &MergePair,
) -> Result<TokenSequence> {
    build_merged_sequence(g, store, f_r4, f_t4, count, merge)
}

/// Stack of self-attention layers; shape and layout preserved.
pub fn mhsa_branch(
    g: &mut Graph,
    store: &ParamStore,
    seq: TokenSequence,
    layers: &[TransformerLayer],
) -> Result<TokenSequence> {
    let mut x = seq.tokens;
    for layer in layers {
        x = layer.forward(g, store, x)?;
    }
    if !g.value(x).all_finite() {
        return Err(Error::NonFinite("self-attention branch".into()));
    }
    Ok(TokenSequence {
        tokens: x,
        layout: seq.layout,
    })
}

/// Expansion maps taking a short sequence back to the initial layout.
#[derive(Clone, Debug)]
pub struct Restore {
    pub color: Linear,
    pub thermal: Linear,
    pub count: Option<Linear>,
    /// Rows produced per source token in the colour/thermal segments.
    pub factor: usize,
}

impl Restore {
    fn new(init: &mut Init, name: &str, factor: usize, c: usize, count: bool) -> Self {
        Self {
            color: Linear::new(init, &format!("{name}.color"), c, factor * c),
            thermal: Linear::new(init, &format!("{name}.thermal"), c, factor * c),
            count: count.then(|| Linear::new(init, &format!("{name}.count"), c, c)),
            factor,
        }
    }
}

/// Expands each segment separately: a source row becomes `factor`
/// consecutive rows; the count slot stays one row.
pub fn restore_length(
    g: &mut Graph,
    store: &ParamStore,
    seq: TokenSequence,
    target: Layout,
    restore: &Restore,
) -> Result<Var> {
    let (l, c) = g.value(seq.tokens).dims2();
    let src = seq.layout;
    if l != src.len()
        || src.color * restore.factor != target.color
        || src.thermal * restore.factor != target.thermal
        || src.count != target.count
        || restore.count.is_some() != (src.count == 1)
    {
        return shape_err(format!(
            "cannot restore layout {src:?} (x{}) to {target:?}",
            restore.factor
        ));
    }
    let mut parts = Vec::with_capacity(3);
    for (start, len, fc) in [
        (0, src.color, &restore.color),
        (src.color, src.thermal, &restore.thermal),
    ] {
        let seg = g.slice_rows(seq.tokens, start, len);
        let wide = fc.forward(g, store, seg)?;
        parts.push(g.reshape(wide, [len * restore.factor, c]));
    }
    if let (Some(row), Some(fc)) = (src.count_row(), &restore.count) {
        let seg = g.slice_rows(seq.tokens, row, 1);
        parts.push(fc.forward(g, store, seg)?);
    }
    Ok(g.concat_rows(&parts))
}

/// `MLP(concat_channels(g_i, f_1))`: `[L, 2C] -> [L, C]`.
pub fn residual_combine(g: &mut Graph, store: &ParamStore, g_i: Var, f_1: Var, mlp: &Mlp2) -> Result<Var> {
    if g.value(g_i).shape() != g.value(f_1).shape() {
        return shape_err(format!(
            "residual combine shapes {:?} vs {:?}",
            g.value(g_i).shape(),
            g.value(f_1).shape()
        ));
    }
    let cat = g.concat_cols(&[g_i, f_1]);
    mlp.forward(g, store, cat)
}

/// Splits `[L, C]` tokens into colour/thermal/count parts.
pub fn split_fused(g: &mut Graph, tokens: Var, layout: Layout) -> FusedState {
    let g_r = g.slice_rows(tokens, 0, layout.color);
    let g_t = g.slice_rows(tokens, layout.color, layout.thermal);
    let g_count = layout.count_row().map(|r| g.slice_rows(tokens, r, 1));
    FusedState { g_r, g_t, g_count }
}

/// `MLP(concat_channels(f1', g2', g3'))` split by layout.
pub fn fuse_branches(
    g: &mut Graph,
    store: &ParamStore,
    f1p: Var,
    g2p: Var,
    g3p: Var,
    layout: Layout,
    mlp: &Mlp2,
) -> Result<FusedState> {
    let s = g.value(f1p).shape().to_vec();
    if g.value(g2p).shape() != s.as_slice() || g.value(g3p).shape() != s.as_slice() || s[0] != layout.len() {
        return shape_err("fuse_branches inputs must share the initial layout");
    }
    let cat = g.concat_cols(&[f1p, g2p, g3p]);
    let fused = mlp.forward(g, store, cat)?;
    Ok(split_fused(g, fused, layout))
}

#[derive(Clone, Debug)]
pub struct MultiScaleParts {
    pub merge_mid: MergePair,
    pub merge_large: MergePair,
    pub branch_mid: Vec<TransformerLayer>,
    pub branch_large: Vec<TransformerLayer>,
    pub restore_mid: Restore,
    pub restore_large: Restore,
    pub combine_mid: Mlp2,
    pub combine_large: Mlp2,
    pub fuse: Mlp2,
}

#[derive(Clone, Debug)]
pub struct MstFusion {
    pub config: FusionConfig,
    pub branch_initial: Vec<TransformerLayer>,
    pub multiscale: Option<MultiScaleParts>,
}

impl MstFusion {
    pub fn new(init: &mut Init, name: &str, config: &FusionConfig) -> Result<Self> {
        config.validate()?;
        let (n, c, heads) = (config.token_grid_n, config.channels, config.heads);
        let branch = |init: &mut Init, b: &str| -> Vec<TransformerLayer> {
            (0..config.mhsa_layers_per_branch)
                .map(|i| TransformerLayer::new(init, &format!("{name}.{b}.layer{i}"), c, heads))
                .collect()
        };
        let branch_initial = branch(init, "branch_initial");
        let multiscale = config.enable_multiscale.then(|| {
            let count = config.enable_count_token;
            MultiScaleParts {
                merge_mid: MergePair::new(init, &format!("{name}.merge_mid"), n * n, n, c),
                merge_large: MergePair::new(init, &format!("{name}.merge_large"), n * n, 1, c),
                branch_mid: branch(init, "branch_mid"),
                branch_large: branch(init, "branch_large"),
                restore_mid: Restore::new(init, &format!("{name}.restore_mid"), n, c, count),
                restore_large: Restore::new(init, &format!("{name}.restore_large"), n * n, c, count),
                combine_mid: Mlp2::new(init, &format!("{name}.combine_mid"), 2 * c, 2 * c, c),
                combine_large: Mlp2::new(init, &format!("{name}.combine_large"), 2 * c, 2 * c, c),
                fuse: Mlp2::new(init, &format!("{name}.fuse"), 3 * c, 3 * c, c),
            }
        });
        Ok(Self {
            config: config.clone(),
            branch_initial,
            multiscale,
        })
    }

    /// Full fusion forward. `count` must be `Some` exactly when the count
    /// token is enabled.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_r4: Var,
        f_t4: Var,
        count: Option<Var>,
    ) -> Result<FusedState> {
        let (n2, c) = check_pair(g, f_r4, f_t4)?;
        let n = self.config.token_grid_n;
        if n2 != n * n || c != self.config.channels {
            return shape_err(format!(
                "fusion configured for [{}, {}] tokens, got [{n2}, {c}]",
                n * n,
                self.config.channels
            ));
        }
        if count.is_some() != self.config.enable_count_token {
            return Err(Error::Config("count token presence does not match fusion config".into()));
        }
        let f1 = build_initial_sequence(g, f_r4, f_t4, count)?;
        let f1p = mhsa_branch(g, store, f1, &self.branch_initial)?;
        let Some(ms) = &self.multiscale else {
            return Ok(split_fused(g, f1p.tokens, f1.layout));
        };
        let f2 = build_middle_sequence(g, store, f_r4, f_t4, count, &ms.merge_mid)?;
        let f3 = build_large_sequence(g, store, f_r4, f_t4, count, &ms.merge_large)?;
        let f2p = mhsa_branch(g, store, f2, &ms.branch_mid)?;
        let f3p = mhsa_branch(g, store, f3, &ms.branch_large)?;
        let g2 = restore_length(g, store, f2p, f1.layout, &ms.restore_mid)?;
        let g3 = restore_length(g, store, f3p, f1.layout, &ms.restore_large)?;
        let g2p = residual_combine(g, store, g2, f1.tokens, &ms.combine_mid)?;
        let g3p = residual_combine(g, store, g3, f1.tokens, &ms.combine_large)?;
        fuse_branches(g, store, f1p.tokens, g2p, g3p, f1.layout, &ms.fuse)
    }
}
