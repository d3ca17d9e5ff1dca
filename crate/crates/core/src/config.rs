//! Run configuration: a flat `key = value` text file. Every key is optional
//! (defaults apply) but unknown or repeated keys are errors.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::deform::DeformConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::mst::FusionConfig;

/// Model variants of the module and token ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Baseline,
    Mst,
    Msd,
    Full,
    NoCount,
    NoMultiscale,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Mst,
        Variant::Msd,
        Variant::Full,
        Variant::NoCount,
        Variant::NoMultiscale,
    ];

    /// `(use_mst, use_msd, use_count_token, use_multiscale)`.
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Variant::Baseline => (false, false, false, false),
            Variant::Mst => (true, false, true, true),
            Variant::Msd => (false, true, true, false),
            Variant::Full => (true, true, true, true),
            Variant::NoCount => (true, true, false, true),
            Variant::NoMultiscale => (true, true, true, false),
        }
    }

    pub fn from_flags(flags: (bool, bool, bool, bool)) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.flags() == flags)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Mst => "mst",
            Variant::Msd => "msd",
            Variant::Full => "full",
            Variant::NoCount => "no-count",
            Variant::NoMultiscale => "no-multiscale",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub fusion_heads: usize,
    pub fusion_layers: usize,
    pub deform_heads: usize,
    pub deform_points: usize,
    pub deform_layers: usize,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    /// Worker threads for per-sample parallelism; 1 is strictly serial,
    /// 0 uses the global pool.
    pub threads: usize,
    pub use_mst: bool,
    pub use_msd: bool,
    pub use_count_token: bool,
    pub use_multiscale: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 224,
            backbone: BackboneConfig::default(),
            fusion_heads: 4,
            fusion_layers: 2,
            deform_heads: 4,
            deform_points: 4,
            deform_layers: 1,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            batch_size: 8,
            max_steps: 1000,
            eval_every: 10,
            patience: 20,
            threads: 0,
            use_mst: true,
            use_msd: true,
            use_count_token: true,
            use_multiscale: true,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_channels(value: &str) -> std::result::Result<[usize; 4], String> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("invalid channel list `{value}`"))?;
    parts
        .try_into()
        .map_err(|_| format!("expected 4 comma-separated channel widths, got `{value}`"))
}

impl RunConfig {
    pub const KEYS: [&'static str; 27] = [
        "seed",
        "image_size",
        "backbone.stage_channels",
        "backbone.blocks_per_stage",
        "fusion.heads",
        "fusion.layers",
        "deform.heads",
        "deform.points",
        "deform.layers",
        "loss.ot_weight",
        "loss.tv_weight",
        "loss.sinkhorn_reg",
        "loss.sinkhorn_iters",
        "loss.count_token_weight",
        "optim.lr",
        "optim.weight_decay",
        "optim.beta1",
        "optim.beta2",
        "batch_size",
        "max_steps",
        "eval_every",
        "patience",
        "threads",
        "use_mst",
        "use_msd",
        "use_count_token",
        "use_multiscale",
    ];

    /// Desk-scale config small enough for finite-difference checks:
    /// 64x64 input (N = 2), C = 8, two heads.
    pub fn tiny() -> Self {
        Self {
            image_size: 64,
            backbone: BackboneConfig {
                stage_channels: [4, 4, 8, 8],
                ..Default::default()
            },
            fusion_heads: 2,
            fusion_layers: 1,
            deform_heads: 2,
            deform_points: 2,
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "image_size" => self.image_size = parse_value(key, v)?,
            "backbone.stage_channels" => self.backbone.stage_channels = parse_channels(v)?,
            "backbone.blocks_per_stage" => self.backbone.blocks_per_stage = parse_value(key, v)?,
            "fusion.heads" => self.fusion_heads = parse_value(key, v)?,
            "fusion.layers" => self.fusion_layers = parse_value(key, v)?,
            "deform.heads" => self.deform_heads = parse_value(key, v)?,
            "deform.points" => self.deform_points = parse_value(key, v)?,
            "deform.layers" => self.deform_layers = parse_value(key, v)?,
            "loss.ot_weight" => self.loss.ot_weight = parse_value(key, v)?,
            "loss.tv_weight" => self.loss.tv_weight = parse_value(key, v)?,
            "loss.sinkhorn_reg" => self.loss.sinkhorn_reg = parse_value(key, v)?,
            "loss.sinkhorn_iters" => self.loss.sinkhorn_iters = parse_value(key, v)?,
            "loss.count_token_weight" => self.loss.count_token_weight = parse_value(key, v)?,
            "optim.lr" => self.optim.lr = parse_value(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_value(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse_value(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "max_steps" => self.max_steps = parse_value(key, v)?,
            "eval_every" => self.eval_every = parse_value(key, v)?,
            "patience" => self.patience = parse_value(key, v)?,
            "threads" => self.threads = parse_value(key, v)?,
            "use_mst" => self.use_mst = parse_value(key, v)?,
            "use_msd" => self.use_msd = parse_value(key, v)?,
            "use_count_token" => self.use_count_token = parse_value(key, v)?,
            "use_multiscale" => self.use_multiscale = parse_value(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let c = &self.backbone.stage_channels;
        Some(match key {
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "backbone.stage_channels" => format!("{},{},{},{}", c[0], c[1], c[2], c[3]),
            "backbone.blocks_per_stage" => self.backbone.blocks_per_stage.to_string(),
            "fusion.heads" => self.fusion_heads.to_string(),
            "fusion.layers" => self.fusion_layers.to_string(),
            "deform.heads" => self.deform_heads.to_string(),
            "deform.points" => self.deform_points.to_string(),
            "deform.layers" => self.deform_layers.to_string(),
            "loss.ot_weight" => self.loss.ot_weight.to_string(),
            "loss.tv_weight" => self.loss.tv_weight.to_string(),
            "loss.sinkhorn_reg" => self.loss.sinkhorn_reg.to_string(),
            "loss.sinkhorn_iters" => self.loss.sinkhorn_iters.to_string(),
            "loss.count_token_weight" => self.loss.count_token_weight.to_string(),
            "optim.lr" => self.optim.lr.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.beta1" => self.optim.beta1.to_string(),
            "optim.beta2" => self.optim.beta2.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "patience" => self.patience.to_string(),
            "threads" => self.threads.to_string(),
            "use_mst" => self.use_mst.to_string(),
            "use_msd" => self.use_msd.to_string(),
            "use_count_token" => self.use_count_token.to_string(),
            "use_multiscale" => self.use_multiscale.to_string(),
            _ => return None,
        })
    }

    /// Parses config text; `path` is only used in error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    /// Canonical text with every key, in [`Self::KEYS`] order.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::from_flags((self.use_mst, self.use_msd, self.use_count_token, self.use_multiscale))
    }

    pub fn with_variant(&self, v: Variant) -> Self {
        let (mst, msd, count, ms) = v.flags();
        Self {
            use_mst: mst,
            use_msd: msd,
            use_count_token: count,
            use_multiscale: ms,
            ..self.clone()
        }
    }

    pub fn token_grid_n(&self) -> usize {
        self.image_size / self.backbone.max_stride()
    }

    pub fn channels(&self) -> usize {
        self.backbone.stage_channels[3]
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            heads: self.fusion_heads,
            mhsa_layers_per_branch: self.fusion_layers,
            enable_count_token: self.use_count_token,
            enable_multiscale: self.use_multiscale,
            ..FusionConfig::new(self.token_grid_n(), self.channels())
        }
    }

    pub fn deform_config(&self) -> DeformConfig {
        DeformConfig {
            heads: self.deform_heads,
            sample_points_per_level: self.deform_points,
            layers: self.deform_layers,
            ..DeformConfig::new(self.channels())
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.in_channels != 3 {
            return Err(Error::Config("backbone input must have 3 channels".into()));
        }
        let m = self.backbone.max_stride();
        if self.image_size == 0 || !self.image_size.is_multiple_of(m) {
            return Err(Error::Config(format!("image_size must be a positive multiple of {m}")));
        }
        if self.use_multiscale && !self.use_mst {
            return Err(Error::Config("use_multiscale requires use_mst".into()));
        }
        if self.variant().is_none() {
            return Err(Error::Config("ablation flags do not name a known variant".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.weight_decay > 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config("optim.lr and optim.weight_decay must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be >= 1".into()));
        }
        self.loss.validate()?;
        self.fusion_config().validate()?;
        self.deform_config().validate()?;
        if self.channels() < 4 {
            return Err(Error::Config("level-4 width must be >= 4 for the regression head".into()));
        }
        Ok(())
    }
}
