//! Optimizer, training loop with early stopping, evaluation and ablation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Tensor};
use crate::config::{OptimConfig, RunConfig, Variant};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::{self, MetricReport};
use crate::model::{CrowdCounter, Prediction};
use crate::params::ParamStore;
use crate::synth::Sample;

pub type Grads = BTreeMap<String, Tensor>;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: OptimConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: &OptimConfig) -> Self {
        Self {
            config: config.clone(),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            let shape = param.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            let iter = param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in iter {
                let g = g + c.weight_decay * *p;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.adam_eps);
            }
        }
        Ok(())
    }
}

/// Runs `f` over `items` in parallel (or serially when `threads == 1`),
/// preserving order.
fn ordered_map<T: Sync, R: Send>(threads: usize, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    match threads {
        1 => items.iter().map(f).collect(),
        0 => items.par_iter().map(f).collect(),
        n => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(_) => items.iter().map(f).collect(),
        },
    }
}

/// Loss gradients of one sample.
pub fn sample_gradients(model: &CrowdCounter, store: &ParamStore, sample: &Sample) -> Result<(LossReport, Grads)> {
    let mut g = Graph::new();
    let (vars, _) = model.loss(&mut g, store, sample)?;
    let grads = g.backward(vars.total);
    Ok((vars.report(&g), g.param_grads(&grads)))
}

/// Mean loss report and mean gradient over a batch. Per-sample results are
/// reduced in batch order, so the sum does not depend on thread count.
pub fn batch_gradients(
    model: &CrowdCounter,
    store: &ParamStore,
    batch: &[&Sample],
    threads: usize,
) -> Result<(LossReport, Grads)> {
    let results = ordered_map(threads, batch, |s| sample_gradients(model, store, s));
    let inv = 1.0 / batch.len() as f64;
    let mut report = LossReport::default();
    let mut total: Grads = BTreeMap::new();
    for r in results {
        let (rep, grads) = r?;
        report.total += rep.total * inv;
        report.count_term += rep.count_term * inv;
        report.ot_term += rep.ot_term * inv;
        report.tv_term += rep.tv_term * inv;
        report.count_token_term += rep.count_token_term * inv;
        for (name, gt) in grads {
            let gt = gt.map(|v| v * inv);
            match total.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b),
                None => {
                    total.insert(name, gt);
                }
            }
        }
    }
    Ok((report, total))
}

pub fn predict_all(model: &CrowdCounter, store: &ParamStore, samples: &[Sample], threads: usize) -> Result<Vec<Prediction>> {
    ordered_map(threads, samples, |s| model.predict(store, &s.rgb, &s.thermal))
        .into_iter()
        .collect()
}

pub fn evaluate(model: &CrowdCounter, store: &ParamStore, samples: &[Sample], threads: usize) -> Result<MetricReport> {
    let preds = predict_all(model, store, samples, threads)?;
    let maps: Vec<_> = preds.into_iter().map(|p| p.density).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.points.clone()).collect();
    MetricReport::compute(&maps, &gts)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub history: Vec<LossReport>,
    /// `(step, GAME(0))` per validation pass.
    pub validations: Vec<(usize, f64)>,
    pub best_val_game0: Option<f64>,
    pub stopped_early: bool,
}

/// Trains in place. When `val` is non-empty the parameters with the best
/// validation GAME(0) are restored at the end.
pub fn train(
    model: &CrowdCounter,
    store: &mut ParamStore,
    adam: &mut Adam,
    train_set: &[Sample],
    val: &[Sample],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let cfg = &model.config;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_u64);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut outcome = TrainOutcome {
        steps: 0,
        history: Vec::new(),
        validations: Vec::new(),
        best_val_game0: None,
        stopped_early: false,
    };
    let mut best: Option<ParamStore> = None;
    let mut stale = 0;
    let start = adam.step as usize;
    let batch_size = cfg.batch_size.min(train_set.len());

    for step in start + 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let (report, grads) = batch_gradients(model, store, &batch, cfg.threads)?;
        if !report.total.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Diverged {
                step,
                msg: format!("non-finite loss or gradient (loss = {})", report.total),
            });
        }
        adam.update(store, &grads)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", report.log_line(step))?;
        }
        outcome.history.push(report);
        outcome.steps = step;

        if !val.is_empty() && (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            let game0 = evaluate(model, store, val, cfg.threads)?.game[0];
            outcome.validations.push((step, game0));
            if outcome.best_val_game0.is_none_or(|b| game0 < b) {
                outcome.best_val_game0 = Some(game0);
                best = Some(store.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    outcome.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some(b) = best {
        *store = b;
    }
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    pub report: MetricReport,
}

/// Trains every variant from the same seed and evaluates on `test`.
pub fn ablate(
    base: &RunConfig,
    variants: &[Variant],
    train_set: &[Sample],
    val: &[Sample],
    test: &[Sample],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| {
            let cfg = base.with_variant(v);
            let (model, mut store) = CrowdCounter::new(&cfg)?;
            let mut adam = Adam::new(&cfg.optim);
            train(&model, &mut store, &mut adam, train_set, val, None)?;
            Ok(AblationRow {
                variant: v,
                params: store.num_scalars(),
                report: evaluate(&model, &store, test, cfg.threads)?,
            })
        })
        .collect()
}

/// Comparison table with a parameter-count column.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let labelled: Vec<(String, &MetricReport)> = rows
        .iter()
        .map(|r| (format!("{} ({} params)", r.variant, r.params), &r.report))
        .collect();
    let refs: Vec<(&str, &MetricReport)> = labelled.iter().map(|(l, r)| (l.as_str(), *r)).collect();
    metrics::table(&refs)
}
