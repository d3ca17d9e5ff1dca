//! Training objective: distribution-matching density loss (count, optimal
//! transport and total-variation terms) plus an L1 loss on the count token.
//!
//! The OT term runs a fixed number of weighted log-domain Sinkhorn
//! iterations on the graph, so its gradient is the exact derivative of the
//! reported value.

use std::rc::Rc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::head::DensityMap;
use crate::synth::{bin_points_to_grid, Point};

/// Exponent cap used when re-evaluating kernel entries in backward passes.
const EXP_CAP: f64 = 700.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub ot_weight: f64,
    pub tv_weight: f64,
    pub sinkhorn_reg: f64,
    pub sinkhorn_iters: usize,
    pub count_token_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ot_weight: 0.1,
            tv_weight: 0.01,
            sinkhorn_reg: 0.02,
            sinkhorn_iters: 100,
            count_token_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} must be positive and finite")));
        for (name, v) in [
            ("ot_weight", self.ot_weight),
            ("tv_weight", self.tv_weight),
            ("sinkhorn_reg", self.sinkhorn_reg),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name);
            }
        }
        if !(self.count_token_weight >= 0.0 && self.count_token_weight.is_finite()) {
            return Err(Error::Config("count_token_weight must be non-negative".into()));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Config("sinkhorn_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scalar values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub count_term: f64,
    pub ot_term: f64,
    pub tv_term: f64,
    pub count_token_term: f64,
}

impl LossReport {
    /// One training-log record: `step loss count ot tv ctoken`.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{step} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
            self.total, self.count_term, self.ot_term, self.tv_term, self.count_token_term
        )
    }
}

/// Graph nodes of the loss terms, each of shape `[1]`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub count_term: Var,
    pub ot_term: Var,
    pub tv_term: Var,
    pub count_token_term: Var,
}

impl LossVars {
    pub fn report(&self, g: &Graph) -> LossReport {
        LossReport {
            total: g.value(self.total).item(),
            count_term: g.value(self.count_term).item(),
            ot_term: g.value(self.ot_term).item(),
            tv_term: g.value(self.tv_term).item(),
            count_token_term: g.value(self.count_token_term).item(),
        }
    }
}

/// Squared Euclidean distance between cell centres of an `n x n` grid in
/// `[0, 1]²` coordinates; `[n², n²]`, cells row-major.
pub fn cost_matrix(n: usize) -> Tensor {
    let n2 = n * n;
    let mut m = vec![0.0; n2 * n2];
    let inv = 1.0 / n as f64;
    for a in 0..n2 {
        for b in 0..n2 {
            let dy = (a / n) as f64 - (b / n) as f64;
            let dx = (a % n) as f64 - (b % n) as f64;
            m[a * n2 + b] = (dy * dy + dx * dx) * inv * inv;
        }
    }
    Tensor::new([n2, n2], m).unwrap()
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = m.dims2();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::new([c, r], out).unwrap()
}

/// `out_i = -eps * log sum_j w_j exp((pot_j - cost_ij) / eps)`, skipping
/// zero-weight columns.
fn soft_min_values(w: &[f64], pot: &[f64], cost: &Tensor, eps: f64) -> Vec<f64> {
    let cols = cost.cols();
    cost.data()
        .chunks_exact(cols)
        .map(|row| {
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                if w[j] > 0.0 {
                    max = max.max(w[j].ln() + (pot[j] - row[j]) / eps);
                }
            }
            let s: f64 = (0..cols)
                .filter(|&j| w[j] > 0.0)
                .map(|j| (w[j].ln() + (pot[j] - row[j]) / eps - max).exp())
                .sum();
            -eps * (max + s.ln())
        })
        .collect()
}

fn soft_min(g: &mut Graph, w: Var, pot: Var, cost: &Rc<Tensor>, eps: f64) -> Var {
    let out = soft_min_values(g.value(w).data(), g.value(pot).data(), cost, eps);
    let rows = out.len();
    let cost = Rc::clone(cost);
    g.custom(Tensor::new([rows], out).unwrap(), &[w, pot], move |ctx| {
        let (w, pot, out, go) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.output.data(), ctx.grad.data());
        let cols = w.len();
        let mut dw = vec![0.0; cols];
        let mut dpot = vec![0.0; cols];
        for (i, row) in cost.data().chunks_exact(cols).enumerate() {
            if go[i] == 0.0 {
                continue;
            }
            for j in 0..cols {
                let k = ((pot[j] - row[j] + out[i]) / eps).min(EXP_CAP).exp();
                if ctx.needs[0] {
                    dw[j] -= eps * go[i] * k;
                }
                dpot[j] -= go[i] * w[j] * k;
            }
        }
        vec![
            ctx.needs[0].then(|| Tensor::new([cols], dw).unwrap()),
            ctx.needs[1].then(|| Tensor::new([cols], dpot).unwrap()),
        ]
    })
}

/// `sum_ij a_i b_j exp((f_i + g_j - cost_ij) / eps) cost_ij`; `b` is fixed.
fn plan_cost(g: &mut Graph, a: Var, f: Var, pot_g: Var, b: Rc<[f64]>, cost: &Rc<Tensor>, eps: f64) -> Var {
    let kernel = move |f: f64, gj: f64, c: f64| ((f + gj - c) / eps).min(EXP_CAP).exp();
    let (av, fv, gv) = (g.value(a).data(), g.value(f).data(), g.value(pot_g).data());
    let cols = b.len();
    let mut total = 0.0;
    for (i, row) in cost.data().chunks_exact(cols).enumerate() {
        for j in 0..cols {
            total += av[i] * b[j] * kernel(fv[i], gv[j], row[j]) * row[j];
        }
    }
    let cost = Rc::clone(cost);
    g.custom(Tensor::scalar(total), &[a, f, pot_g], move |ctx| {
        let s = ctx.grad.item();
        let (a, f, gv) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
        let rows = a.len();
        let (mut da, mut df, mut dg) = (vec![0.0; rows], vec![0.0; rows], vec![0.0; cols]);
        for (i, row) in cost.data().chunks_exact(cols).enumerate() {
            for j in 0..cols {
                let t = b[j] * kernel(f[i], gv[j], row[j]) * row[j];
                da[i] += s * t;
                df[i] += s * a[i] * t / eps;
                dg[j] += s * a[i] * t / eps;
            }
        }
        vec![
            ctx.needs[0].then(|| Tensor::new([rows], da).unwrap()),
            ctx.needs[1].then(|| Tensor::new([rows], df).unwrap()),
            ctx.needs[2].then(|| Tensor::new([cols], dg).unwrap()),
        ]
    })
}

/// Regularization per iteration: halves from the cost scale (1.0) down to
/// `eps`, then stays there. Annealing this way converges far faster than a
/// fixed small `eps`.
pub fn eps_schedule(eps: f64, iters: usize) -> Vec<f64> {
    let mut e = 1.0f64.max(eps);
    (0..iters)
        .map(|_| {
            let cur = e;
            e = (e * 0.5).max(eps);
            cur
        })
        .collect()
}

/// Entropic OT cost between histogram node `a` (`[n]`, sums to 1) and the
/// fixed histogram `b`.
pub fn sinkhorn_cost(g: &mut Graph, a: Var, b: &[f64], cost: &Tensor, eps: f64, iters: usize) -> Var {
    let m = Rc::new(cost.clone());
    let mt = Rc::new(transpose(cost));
    let b_var = g.constant(Tensor::new([b.len()], b.to_vec()).unwrap());
    let mut pot_g = g.constant(Tensor::zeros([b.len()]));
    let mut f = pot_g;
    for e in eps_schedule(eps, iters) {
        f = soft_min(g, b_var, pot_g, &m, e);
        pot_g = soft_min(g, a, f, &mt, e);
    }
    plan_cost(g, a, f, pot_g, b.into(), &m, eps)
}

/// Sinkhorn solution on plain values.
#[derive(Clone, Debug)]
pub struct SinkhornSolution {
    /// `[n, m]` transport plan.
    pub plan: Tensor,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub cost: f64,
}

pub fn sinkhorn_plan(a: &[f64], b: &[f64], cost: &Tensor, eps: f64, iters: usize) -> Result<SinkhornSolution> {
    let (rows, cols) = cost.dims2();
    if a.len() != rows || b.len() != cols {
        return Err(Error::Shape(format!(
            "histograms of length {}/{} do not match a {rows}x{cols} cost",
            a.len(),
            b.len()
        )));
    }
    let mt = transpose(cost);
    let mut gpot = vec![0.0; cols];
    let mut f = vec![0.0; rows];
    for e in eps_schedule(eps, iters) {
        f = soft_min_values(b, &gpot, cost, e);
        gpot = soft_min_values(a, &f, &mt, e);
    }
    let mut plan = vec![0.0; rows * cols];
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let c = cost.at(i, j);
            let p = a[i] * b[j] * ((f[i] + gpot[j] - c) / eps).min(EXP_CAP).exp();
            plan[i * cols + j] = p;
            total += p * c;
        }
    }
    Ok(SinkhornSolution {
        plan: Tensor::new([rows, cols], plan)?,
        f,
        g: gpot,
        cost: total,
    })
}

/// Count, OT and TV terms of the density loss against a ground-truth cell
/// mass grid. `d` and `gt` are both `[N, N]`.
pub fn density_terms(g: &mut Graph, d: Var, gt: &Tensor, config: &LossConfig) -> Result<(Var, Var, Var)> {
    let dv = g.value(d);
    if dv.shape() != gt.shape() || dv.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "density {:?} and ground truth {:?} must be the same [N, N] grid",
            dv.shape(),
            gt.shape()
        )));
    }
    if !dv.all_finite() {
        return Err(Error::NonFinite("density map".into()));
    }
    let n = dv.shape()[0];
    let n_gt = gt.sum();
    let pred_mass = dv.sum();

    let mass = g.sum(d);
    let target = g.constant(Tensor::scalar(n_gt));
    let diff = g.sub(mass, target);
    let count_term = g.abs(diff);

    if n_gt <= 0.0 || pred_mass <= 0.0 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok((count_term, zero, zero));
    }
    let flat = g.reshape(d, [n * n]);
    let a = g.div_scalar(flat, mass);
    let b: Vec<f64> = gt.data().iter().map(|v| v / n_gt).collect();

    let ot_term = sinkhorn_cost(g, a, &b, &cost_matrix(n), config.sinkhorn_reg, config.sinkhorn_iters);

    let b_var = g.constant(Tensor::new([n * n], b)?);
    let gap = g.sub(a, b_var);
    let gap = g.abs(gap);
    let l1 = g.sum(gap);
    let tv_term = g.scale(l1, 0.5 * n_gt);
    Ok((count_term, ot_term, tv_term))
}

/// `|pred - c_star|` on the graph; `pred` has one element.
pub fn count_token_term(g: &mut Graph, pred: Var, c_star: f64) -> Result<Var> {
    if g.value(pred).len() != 1 {
        return Err(Error::Shape("count prediction must be a single value".into()));
    }
    if c_star.is_nan() || c_star < 0.0 {
        return Err(Error::Config(format!("target count {c_star} is negative")));
    }
    let flat = g.reshape(pred, [1]);
    let t = g.constant(Tensor::scalar(c_star));
    let diff = g.sub(flat, t);
    Ok(g.abs(diff))
}

/// Full objective on the graph. `source_size` is the `(height, width)` of the
/// image the points live in.
pub fn total_loss_graph(
    g: &mut Graph,
    d: Var,
    gt_points: &[Point],
    source_size: (usize, usize),
    count_pred: Option<Var>,
    config: &LossConfig,
) -> Result<LossVars> {
    config.validate()?;
    let n = g.value(d).shape()[0];
    let gt = bin_points_to_grid(gt_points, source_size.0, source_size.1, n);
    let (count_term, ot_term, tv_term) = density_terms(g, d, &gt, config)?;
    let count_token_term = match count_pred {
        Some(p) => count_token_term(g, p, gt_points.len() as f64)?,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let ot = g.scale(ot_term, config.ot_weight);
    let tv = g.scale(tv_term, config.tv_weight);
    let ct = g.scale(count_token_term, config.count_token_weight);
    let total = g.add(count_term, ot);
    let total = g.add(total, tv);
    let total = g.add(total, ct);
    if !g.value(total).all_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(LossVars {
        total,
        count_term,
        ot_term,
        tv_term,
        count_token_term,
    })
}

/// Density loss terms for a finished map; the report's count-token term is 0.
pub fn dm_count_loss(d: &DensityMap, gt_points: &[Point], config: &LossConfig) -> Result<LossReport> {
    total_loss(d, gt_points, None, config)
}

pub fn count_token_loss(pred: f64, c_star: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::scalar(pred));
    let t = count_token_term(&mut g, p, c_star)?;
    Ok(g.value(t).item())
}

pub fn total_loss(
    d: &DensityMap,
    gt_points: &[Point],
    count_pred: Option<f64>,
    config: &LossConfig,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let dv = g.constant(d.grid.clone());
    let cp = count_pred.map(|c| g.constant(Tensor::scalar(c)));
    let vars = total_loss_graph(&mut g, dv, gt_points, d.source_size, cp, config)?;
    Ok(vars.report(&g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, n: usize) -> DensityMap {
        DensityMap::new(Tensor::new([n, n], values).unwrap(), (224, 224)).unwrap()
    }

    fn centre(r: usize, c: usize) -> Point {
        Point::new(c as f64 * 32.0 + 16.0, r as f64 * 32.0 + 16.0)
    }

    #[test]
    fn count_token_examples() {
        assert_eq!(count_token_loss(5.0, 5.0).unwrap(), 0.0);
        assert_eq!(count_token_loss(3.0, 5.0).unwrap(), 2.0);
        assert_eq!(count_token_loss(7.0, 5.0).unwrap(), 2.0);
        assert!(count_token_loss(1.0, -1.0).is_err());
    }

    #[test]
    fn empty_scene_zero_map() {
        let d = map(vec![0.0; 49], 7);
        let r = total_loss(&d, &[], Some(1.5), &LossConfig::default()).unwrap();
        assert_eq!(r.total, 1.5);
        assert_eq!((r.count_term, r.ot_term, r.tv_term), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_gt_count_is_mass() {
        let d = map(vec![0.1; 49], 7);
        let r = dm_count_loss(&d, &[], &LossConfig::default()).unwrap();
        assert!((r.count_term - 4.9).abs() < 1e-12);
        assert_eq!((r.ot_term, r.tv_term), (0.0, 0.0));
    }

    #[test]
    fn exact_match_hits_entropic_floor() {
        let pts = [centre(1, 2), centre(1, 2), centre(5, 6), centre(3, 0)];
        let grid = bin_points_to_grid(&pts, 224, 224, 7);
        let d = DensityMap::new(grid, (224, 224)).unwrap();
        let cfg = LossConfig {
            sinkhorn_reg: 0.1 / 49.0,
            ..Default::default()
        };
        let r = dm_count_loss(&d, &pts, &cfg).unwrap();
        assert_eq!(r.count_term, 0.0);
        assert_eq!(r.tv_term, 0.0);
        assert!(r.ot_term >= 0.0 && r.ot_term < 1e-3, "{}", r.ot_term);
    }

    #[test]
    fn report_identity_and_zero_weights() {
        let d = map((0..49).map(|i| (i % 5) as f64 * 0.1).collect(), 7);
        let pts = [centre(0, 0), centre(6, 6), centre(2, 3)];
        let cfg = LossConfig::default();
        let r = total_loss(&d, &pts, Some(2.0), &cfg).unwrap();
        let sum = r.count_term + cfg.ot_weight * r.ot_term + cfg.tv_weight * r.tv_term + r.count_token_term;
        assert!((r.total - sum).abs() < 1e-12);
        assert!(r.ot_term > 0.0 && r.tv_term > 0.0);

        // vanishing weights leave only the L1 terms
        let tiny = LossConfig {
            ot_weight: 1e-300,
            tv_weight: 1e-300,
            ..cfg
        };
        let r = total_loss(&d, &pts, Some(2.0), &tiny).unwrap();
        assert!((r.total - (r.count_term + r.count_token_term)).abs() < 1e-12);
    }

    #[test]
    fn marginals_and_plan() {
        let a: Vec<f64> = (0..49).map(|i| ((i * 7) % 11) as f64 + 0.5).collect();
        let sa: f64 = a.iter().sum();
        let a: Vec<f64> = a.iter().map(|v| v / sa).collect();
        let mut b = vec![0.0; 49];
        b[3] = 0.5;
        b[40] = 0.25;
        b[24] = 0.25;
        let cfg = LossConfig::default();
        let sol = sinkhorn_plan(&a, &b, &cost_matrix(7), cfg.sinkhorn_reg, cfg.sinkhorn_iters).unwrap();
        let (rows, cols) = sol.plan.dims2();
        let row_err: f64 = (0..rows).map(|i| (sol.plan.row(i).iter().sum::<f64>() - a[i]).abs()).sum();
        let col_err: f64 = (0..cols)
            .map(|j| ((0..rows).map(|i| sol.plan.at(i, j)).sum::<f64>() - b[j]).abs())
            .sum();
        assert!(row_err < 1e-3 && col_err < 1e-3, "{row_err} {col_err}");
    }

    #[test]
    fn invalid_inputs() {
        let mut d = map(vec![0.0; 49], 7);
        d.grid.data_mut()[3] = f64::NAN;
        assert!(matches!(
            dm_count_loss(&d, &[], &LossConfig::default()),
            Err(Error::NonFinite(_))
        ));
        let bad = LossConfig {
            sinkhorn_iters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(LossConfig { sinkhorn_reg: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn cost_matrix_layout() {
        let m = cost_matrix(7);
        assert_eq!(m.shape(), &[49, 49]);
        assert_eq!(m.at(0, 0), 0.0);
        assert!((m.at(0, 1) - 1.0 / 49.0).abs() < 1e-15);
        assert!((m.at(0, 8) - 2.0 / 49.0).abs() < 1e-15);
        assert_eq!(m.at(5, 17), m.at(17, 5));
    }
}
