//! Full counting model: two backbones, optional token fusion, optional
//! deformable enhancement, density head and count readout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::backbone::PyramidBackbone;
use crate::config::{RunConfig, Variant};
use crate::deform::MsdTrans;
use crate::error::{shape_err, Result};
use crate::head::{CountReadout, DensityMap, RegressionHead};
use crate::losses::{total_loss_graph, LossVars};
use crate::mst::MstFusion;
use crate::params::{Init, ParamStore};
use crate::synth::Sample;

pub const COUNT_TOKEN: &str = "count_token";
pub const COUNT_TOKEN_INIT: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct CrowdCounter {
    pub config: RunConfig,
    pub rgb_backbone: PyramidBackbone,
    pub thermal_backbone: PyramidBackbone,
    pub fusion: Option<MstFusion>,
    pub deform: Option<MsdTrans>,
    pub head: RegressionHead,
    pub readout: Option<CountReadout>,
}

/// Graph outputs of one forward pass plus the shape of every stage.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[N, N]`
    pub density: Var,
    /// `[1, 1]` count-token readout, when the variant has a count token.
    pub count: Option<Var>,
    pub shapes: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub density: DensityMap,
    pub count_token: Option<f64>,
}

impl CrowdCounter {
    /// Builds the model and freshly initialized parameters from `config.seed`.
    pub fn new(config: &RunConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let model = Self::build(&mut init, config)?;
        Ok((model, store))
    }

    /// Builds the module structure only; parameters go to `init`.
    pub fn build(init: &mut Init, config: &RunConfig) -> Result<Self> {
        let c = config.channels();
        let rgb_backbone = PyramidBackbone::new(init, "rgb_backbone", &config.backbone)?;
        let thermal_backbone = PyramidBackbone::new(init, "thermal_backbone", &config.backbone)?;
        if config.use_count_token {
            init.uniform(COUNT_TOKEN, &[1, c], COUNT_TOKEN_INIT);
        }
        let fusion = if config.use_mst {
            Some(MstFusion::new(init, "mst", &config.fusion_config())?)
        } else {
            None
        };
        let deform = if config.use_msd {
            Some(MsdTrans::new(init, "msd", &config.deform_config(), Self::msd_level_channels(config))?)
        } else {
            None
        };
        let baseline = config.variant() == Some(Variant::Baseline);
        let head = RegressionHead::new(init, "head", if baseline { 2 * c } else { c })?;
        let readout = config
            .use_count_token
            .then(|| CountReadout::new(init, "count_readout", c));
        Ok(Self {
            config: config.clone(),
            rgb_backbone,
            thermal_backbone,
            fusion,
            deform,
            head,
            readout,
        })
    }

    fn msd_level_channels(config: &RunConfig) -> [usize; 4] {
        let ch = config.backbone.stage_channels;
        [ch[3], ch[2], ch[1], ch[0]]
    }

    /// Closed-form parameter count of the configured variant.
    pub fn num_params(config: &RunConfig) -> usize {
        let c = config.channels();
        let mut total = 2 * config.backbone.num_params();
        if config.use_count_token {
            total += c + crate::nn::Linear::num_params(c, 1);
        }
        if config.use_mst {
            total += config.fusion_config().num_params();
        }
        if config.use_msd {
            total += config.deform_config().num_params(Self::msd_level_channels(config));
        }
        let head_in = if config.variant() == Some(Variant::Baseline) { 2 * c } else { c };
        total + RegressionHead::num_params(head_in)
    }

    /// Forward pass on `[H, W, 3]` colour and thermal images.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, rgb: &Tensor, thermal: &Tensor) -> Result<ForwardOutput> {
        let size = self.config.image_size;
        if rgb.shape() != [size, size, 3] || thermal.shape() != [size, size, 3] {
            return shape_err(format!(
                "model expects two [{size}, {size}, 3] images, got {:?} and {:?}",
                rgb.shape(),
                thermal.shape()
            ));
        }
        let mut shapes = Vec::new();
        let mut record = |g: &Graph, name: &str, v: Var| shapes.push((name.to_string(), g.value(v).shape().to_vec()));

        let rgb_in = g.constant(rgb.clone());
        let thermal_in = g.constant(thermal.clone());
        let pyr_r = self.rgb_backbone.forward(g, store, rgb_in)?;
        let pyr_t = self.thermal_backbone.forward(g, store, thermal_in)?;
        for (i, (&lr, &lt)) in pyr_r.levels.iter().zip(&pyr_t.levels).enumerate() {
            record(g, &format!("rgb.level{}", i + 1), lr);
            record(g, &format!("thermal.level{}", i + 1), lt);
        }
        let (f_r4, f_t4) = (pyr_r.levels[3], pyr_t.levels[3]);
        let n = self.config.token_grid_n();

        let count = if self.config.use_count_token {
            Some(g.param(store, COUNT_TOKEN)?)
        } else {
            None
        };

        let (o_t, o_count) = if self.fusion.is_none() && self.deform.is_none() {
            let x = g.concat_cols(&[f_r4, f_t4]);
            record(g, "baseline.concat", x);
            (x, None)
        } else {
            let (g_r, g_t, g_count) = match &self.fusion {
                Some(fusion) => {
                    let s = fusion.forward(g, store, f_r4, f_t4, count)?;
                    record(g, "mst.g_r", s.g_r);
                    record(g, "mst.g_t", s.g_t);
                    if let Some(k) = s.g_count {
                        record(g, "mst.g_count", k);
                    }
                    (s.g_r, s.g_t, s.g_count)
                }
                None => (f_r4, f_t4, count),
            };
            match &self.deform {
                Some(msd) => {
                    let level = |i: usize| (pyr_r.levels[i], pyr_r.shapes[i].0, pyr_r.shapes[i].1);
                    let levels = [(g_r, n, n), level(2), level(1), level(0)];
                    let e = msd.forward(g, store, g_t, g_count, levels)?;
                    record(g, "msd.o_t", e.o_t);
                    if let Some(k) = e.o_count {
                        record(g, "msd.o_count", k);
                    }
                    (e.o_t, e.o_count)
                }
                None => (g_t, g_count),
            }
        };

        let density = self.head.forward(g, store, o_t)?;
        record(g, "density", density);
        let count = match (&self.readout, o_count) {
            (Some(r), Some(k)) => {
                let c = r.forward(g, store, k)?;
                record(g, "count", c);
                Some(c)
            }
            _ => None,
        };
        Ok(ForwardOutput { density, count, shapes })
    }

    /// Forward plus the training objective for one sample.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, sample: &Sample) -> Result<(LossVars, ForwardOutput)> {
        let out = self.forward(g, store, &sample.rgb, &sample.thermal)?;
        let vars = total_loss_graph(g, out.density, &sample.points, sample.size(), out.count, &self.config.loss)?;
        Ok((vars, out))
    }

    pub fn predict(&self, store: &ParamStore, rgb: &Tensor, thermal: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, rgb, thermal)?;
        let size = (rgb.shape()[0], rgb.shape()[1]);
        Ok(Prediction {
            density: DensityMap::new(g.value(out.density).clone(), size)?,
            count_token: out.count.map(|c| g.value(c).item()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts_match_closed_form_for_every_variant() {
        for v in Variant::ALL {
            let cfg = RunConfig::tiny().with_variant(v);
            let (_, store) = CrowdCounter::new(&cfg).unwrap();
            assert_eq!(store.num_scalars(), CrowdCounter::num_params(&cfg), "{v}");
        }
    }

    #[test]
    fn variant_structure() {
        let names = |v: Variant| -> Vec<String> {
            let (_, s) = CrowdCounter::new(&RunConfig::tiny().with_variant(v)).unwrap();
            s.names().map(str::to_string).collect()
        };
        let full = names(Variant::Full);
        let base = names(Variant::Baseline);
        let trunk: Vec<&String> = base.iter().filter(|n| n.contains("backbone")).collect();
        assert!(!trunk.is_empty());
        assert!(trunk.iter().all(|n| full.contains(n)));
        assert!(names(Variant::Mst).iter().all(|n| !n.starts_with("msd.")));
        assert!(names(Variant::NoCount).iter().all(|n| n != COUNT_TOKEN));
    }

    #[test]
    fn output_shapes_agree_across_variants() {
        let cfg = RunConfig::tiny();
        let img = Tensor::full([64, 64, 3], 0.5);
        for v in Variant::ALL {
            let (m, store) = CrowdCounter::new(&cfg.with_variant(v)).unwrap();
            let p = m.predict(&store, &img, &img).unwrap();
            assert_eq!(p.density.grid.shape(), &[2, 2]);
            let (_, _, count, _) = v.flags();
            assert_eq!(p.count_token.is_some(), count, "{v}");
        }
    }

    #[test]
    fn rejects_wrong_size() {
        let (m, store) = CrowdCounter::new(&RunConfig::tiny()).unwrap();
        let img = Tensor::full([96, 96, 3], 0.5);
        assert!(m.predict(&store, &img, &img).is_err());
    }
}
