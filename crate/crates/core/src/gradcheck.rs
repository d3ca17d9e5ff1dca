//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::CrowdCounter;
use crate::params::ParamStore;
use crate::synth::{generate_scene, Sample, SceneConfig};
use crate::train::{sample_gradients, Grads};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_REL_TOL: f64 = 1e-3;
/// Differences below this are attributed to floating-point noise of the
/// difference quotient.
pub const DEFAULT_ABS_TOL: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            rel: DEFAULT_REL_TOL,
            abs: DEFAULT_ABS_TOL,
        }
    }
}

impl Tolerance {
    /// True when the relative bound, not the absolute floor, decides
    /// agreement for gradients of this size.
    pub fn relative_regime(&self, analytic: f64, numeric: f64) -> bool {
        self.rel * analytic.abs().max(numeric.abs()) > self.abs
    }

    pub fn agrees(&self, analytic: f64, numeric: f64) -> bool {
        let d = (analytic - numeric).abs();
        d <= self.abs || d <= self.rel * analytic.abs().max(numeric.abs())
    }
}

/// One checked scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl EntryCheck {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// `(f(x + h) - f(x - h)) / 2h` for every selected entry, evaluated in
/// parallel on private copies of the store.
pub fn numeric_gradients<F>(store: &ParamStore, entries: &[(String, usize)], step: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&ParamStore) -> Result<f64> + Sync,
{
    entries
        .par_iter()
        .map_init(
            || store.clone(),
            |st, (name, idx)| {
                let orig = st
                    .get(name)
                    .and_then(|t| t.data().get(*idx).copied())
                    .ok_or_else(|| Error::Config(format!("no entry {name}[{idx}]")))?;
                let mut eval = |v: f64| -> Result<f64> {
                    st.get_mut(name).unwrap().data_mut()[*idx] = v;
                    f(st)
                };
                let plus = eval(orig + step)?;
                let minus = eval(orig - step)?;
                st.get_mut(name).unwrap().data_mut()[*idx] = orig;
                Ok((plus - minus) / (2.0 * step))
            },
        )
        .collect()
}

/// Every entry of every named tensor, or at most `per_tensor` evenly spaced
/// entries of each.
pub fn select_entries(store: &ParamStore, per_tensor: Option<usize>) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (name, t) in store.iter() {
        let n = t.len();
        let k = per_tensor.map_or(n, |k| k.min(n));
        for j in 0..k {
            out.push((name.clone(), j * n / k.max(1)));
        }
    }
    out
}

/// Compares analytic gradients with finite differences of `f`.
pub fn compare<F>(store: &ParamStore, analytic: &Grads, entries: &[(String, usize)], step: f64, f: F) -> Result<Vec<EntryCheck>>
where
    F: Fn(&ParamStore) -> Result<f64> + Sync,
{
    let numeric = numeric_gradients(store, entries, step, f)?;
    Ok(entries
        .iter()
        .zip(numeric)
        .map(|((name, idx), numeric)| EntryCheck {
            name: name.clone(),
            index: *idx,
            analytic: analytic.get(name).map_or(0.0, |t| t.data()[*idx]),
            numeric,
        })
        .collect())
}

/// Coarse parameter group used in reports.
pub fn param_group(name: &str) -> &'static str {
    let has = |s: &str| name.contains(s);
    if name.starts_with("rgb_backbone") {
        "backbone.rgb"
    } else if name.starts_with("thermal_backbone") {
        "backbone.thermal"
    } else if name == crate::model::COUNT_TOKEN {
        "count_token"
    } else if name.starts_with("mst.merge") {
        "mst.merge"
    } else if name.starts_with("mst.restore") {
        "mst.restore"
    } else if name.starts_with("mst.combine") || name.starts_with("mst.fuse") {
        "mst.mlp"
    } else if name.starts_with("mst.branch") {
        "mst.attention"
    } else if name.starts_with("msd.level_proj") {
        "msd.level_proj"
    } else if name.starts_with("msd.") && has(".attn.offsets") {
        "msd.offsets"
    } else if name.starts_with("msd.") && has(".attn.weights") {
        "msd.attn_weights"
    } else if name.starts_with("msd.") {
        "msd.layer"
    } else if name.starts_with("head") {
        "head"
    } else if name.starts_with("count_readout") {
        "count_readout"
    } else {
        "other"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    /// Entries large enough that the relative tolerance applies.
    pub significant: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: Tolerance,
    pub groups: Vec<GroupReport>,
    pub worst: Option<EntryCheck>,
}

impl GradcheckReport {
    pub fn from_checks(checks: &[EntryCheck], tolerance: Tolerance) -> Self {
        let mut groups: BTreeMap<&str, GroupReport> = BTreeMap::new();
        let mut worst: Option<&EntryCheck> = None;
        for c in checks {
            let gname = param_group(&c.name);
            let g = groups.entry(gname).or_insert_with(|| GroupReport {
                group: gname.to_string(),
                checked: 0,
                significant: 0,
                failures: 0,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
            });
            g.checked += 1;
            let ok = tolerance.agrees(c.analytic, c.numeric);
            if !ok {
                g.failures += 1;
            }
            g.max_abs_error = g.max_abs_error.max((c.analytic - c.numeric).abs());
            if tolerance.relative_regime(c.analytic, c.numeric) {
                g.significant += 1;
                g.max_rel_error = g.max_rel_error.max(c.rel_error());
            }
            if !ok && worst.is_none_or(|w| c.rel_error() > w.rel_error()) {
                worst = Some(c);
            }
        }
        Self {
            tolerance,
            groups: groups.into_values().collect(),
            worst: worst.cloned(),
        }
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.failures == 0)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn significant(&self) -> usize {
        self.groups.iter().map(|g| g.significant).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<18} {:>8} {:>8} {:>8} {:>12} {:>12}",
            "group", "checked", "rel", "failed", "max_rel", "max_abs"
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<18} {:>8} {:>8} {:>8} {:>12.3e} {:>12.3e}",
                g.group, g.checked, g.significant, g.failures, g.max_rel_error, g.max_abs_error
            )?;
        }
        if let Some(w) = &self.worst {
            writeln!(
                f,
                "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                w.name, w.index, w.analytic, w.numeric
            )?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Parameters for a check: the seeded initialization, jittered so that no
/// sampling location sits exactly on a bilinear kink, and with a positive
/// output bias so the density map is non-zero.
pub fn jittered_params(config: &RunConfig, seed: u64) -> Result<(CrowdCounter, ParamStore)> {
    let (model, mut store) = CrowdCounter::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    if let Some(b) = store.get_mut("head.conv3.bias") {
        b.data_mut().iter_mut().for_each(|v| *v = 0.5);
    }
    Ok((model, store))
}

/// A small scene matching `config.image_size`.
pub fn check_sample(config: &RunConfig, seed: u64) -> Result<Sample> {
    let scene = generate_scene(
        seed,
        &SceneConfig {
            height: config.image_size,
            width: config.image_size,
            min_people: 3,
            max_people: 6,
            ..Default::default()
        },
    )?;
    Sample::from_scene(&scene)
}

/// Full-model check of the total loss against every parameter (or a
/// per-tensor subset).
pub fn gradcheck_model(config: &RunConfig, per_tensor: Option<usize>, tolerance: Tolerance) -> Result<GradcheckReport> {
    let (model, store) = jittered_params(config, config.seed ^ 0x6c_u64)?;
    let sample = check_sample(config, config.seed)?;
    let (_, analytic) = sample_gradients(&model, &store, &sample)?;
    let entries = select_entries(&store, per_tensor);
    let checks = compare(&store, &analytic, &entries, tolerance.step, |st| {
        let mut g = Graph::new();
        let (vars, _) = model.loss(&mut g, st, &sample)?;
        Ok(g.value(vars.total).item())
    })?;
    Ok(GradcheckReport::from_checks(&checks, tolerance))
}
