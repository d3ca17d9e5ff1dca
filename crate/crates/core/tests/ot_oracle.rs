mod common;

use common::{exact_ot, grid_cost, monotone_ot_1d, normalized};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbt_count::losses::{cost_matrix, dm_count_loss, sinkhorn_cost, sinkhorn_plan, total_loss_graph, LossConfig};
use rgbt_count::synth::bin_points_to_grid;
use rgbt_count::{DensityMap, Graph, Point, Tensor};

/// Small regularization and the iteration budget it needs.
const SMALL_EPS: f64 = 0.002;
const SMALL_EPS_ITERS: usize = 2000;

/// Dense predicted histogram and a sparse target, as produced by a density
/// map against binned points.
fn instance(rng: &mut ChaCha8Rng, cells: usize) -> (Vec<f64>, Vec<f64>) {
    let a = normalized(&(0..cells).map(|_| rng.gen_range(0.01..1.0)).collect::<Vec<_>>());
    let mut b: Vec<f64> = (0..cells)
        .map(|_| if rng.gen_bool(0.6) { 0.0 } else { rng.gen_range(1..4) as f64 })
        .collect();
    if b.iter().all(|&v| v == 0.0) {
        b[rng.gen_range(0..cells)] = 1.0;
    }
    (a, normalized(&b))
}

fn marginal_errors(plan: &Tensor, a: &[f64], b: &[f64]) -> (f64, f64) {
    let (rows, cols) = plan.dims2();
    let row: f64 = (0..rows).map(|i| (plan.row(i).iter().sum::<f64>() - a[i]).abs()).sum();
    let col: f64 = (0..cols)
        .map(|j| ((0..rows).map(|i| plan.at(i, j)).sum::<f64>() - b[j]).abs())
        .sum();
    (row, col)
}

#[test]
fn lp_oracle_matches_1d_monotone_coupling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let n = rng.gen_range(2..12);
        let m = rng.gen_range(2..12);
        let xa: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let xb: Vec<f64> = (0..m).map(|j| j as f64 / m as f64 + 0.03).collect();
        let a = normalized(&(0..n).map(|_| rng.gen_range(0.1..1.0)).collect::<Vec<_>>());
        let b = normalized(&(0..m).map(|_| rng.gen_range(0.1..1.0)).collect::<Vec<_>>());
        let cost: Vec<Vec<f64>> = xa.iter().map(|x| xb.iter().map(|y| (x - y).powi(2)).collect()).collect();
        let (lp, plan) = exact_ot(&a, &b, &cost);
        let mono = monotone_ot_1d(&xa, &a, &xb, &b);
        assert!((lp - mono).abs() < 1e-12, "lp {lp} vs monotone {mono}");
        for (i, row) in plan.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - a[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn lp_oracle_single_shift() {
    let mut a = vec![0.0; 49];
    let mut b = vec![0.0; 49];
    a[24] = 1.0;
    b[25] = 1.0;
    let (lp, _) = exact_ot(&a, &b, &grid_cost(7));
    assert!((lp - 1.0 / 49.0).abs() < 1e-15);
}

#[test]
fn entropic_cost_within_five_percent_of_lp() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let n = 3 + trial % 5;
        let (a, b) = instance(&mut rng, n * n);
        let (lp, _) = exact_ot(&a, &b, &grid_cost(n));
        let sol = sinkhorn_plan(&a, &b, &cost_matrix(n), SMALL_EPS, SMALL_EPS_ITERS).unwrap();
        let gap = (sol.cost - lp).abs() / lp;
        worst = worst.max(gap);
        assert!(gap < 0.05, "n={n}: entropic {} vs lp {lp}", sol.cost);
    }
    eprintln!("worst relative gap to LP: {worst:.3e}");
}

#[test]
fn marginals_at_default_config() {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (a, b) = instance(&mut rng, 49);
        let sol = sinkhorn_plan(&a, &b, &cost_matrix(7), cfg.sinkhorn_reg, cfg.sinkhorn_iters).unwrap();
        let (row, col) = marginal_errors(&sol.plan, &a, &b);
        assert!(row < 1e-3 && col < 1e-3, "row {row:e} col {col:e}");
    }
}

#[test]
fn graph_cost_matches_plan_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (a, b) = instance(&mut rng, 49);
    let sol = sinkhorn_plan(&a, &b, &cost_matrix(7), 0.02, 100).unwrap();
    let mut g = Graph::new();
    let av = g.leaf(Tensor::new([49], a).unwrap());
    let c = sinkhorn_cost(&mut g, av, &b, &cost_matrix(7), 0.02, 100);
    assert!((g.value(c).item() - sol.cost).abs() < 1e-12);
}

#[test]
fn one_cell_shift_costs_one_squared_cell() {
    let gt = [Point::new(3.5 * 32.0, 3.5 * 32.0)];
    let mut grid = Tensor::zeros([7, 7]);
    grid.data_mut()[3 * 7 + 4] = 1.0;
    let d = DensityMap::new(grid, (224, 224)).unwrap();
    let cfg = LossConfig {
        sinkhorn_reg: SMALL_EPS,
        sinkhorn_iters: SMALL_EPS_ITERS,
        ..Default::default()
    };
    let r = dm_count_loss(&d, &gt, &cfg).unwrap();
    let b = bin_points_to_grid(&gt, 224, 224, 7);
    let (lp, _) = exact_ot(d.grid.data(), b.data(), &grid_cost(7));
    assert!((lp - 1.0 / 49.0).abs() < 1e-15);
    assert!((r.ot_term - lp).abs() < 0.1 * lp, "{} vs {lp}", r.ot_term);
    assert_eq!(r.count_term, 0.0);
    assert!((r.tv_term - 1.0).abs() < 1e-12);
}

fn random_scene(rng: &mut ChaCha8Rng) -> (Tensor, Vec<Point>) {
    let grid = Tensor::new([7, 7], (0..49).map(|_| rng.gen_range(0.01..0.8)).collect()).unwrap();
    let k = rng.gen_range(1..25);
    let pts = (0..k)
        .map(|_| Point::new(rng.gen_range(0.0..224.0), rng.gen_range(0.0..224.0)))
        .collect();
    (grid, pts)
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..3 {
        let (grid, pts) = random_scene(&mut rng);
        let count = rng.gen_range(0.0..30.0);
        let eval = |t: &Tensor, c: f64| -> (f64, Tensor, f64) {
            let mut g = Graph::new();
            let d = g.leaf(t.clone());
            let cp = g.leaf(Tensor::scalar(c));
            let vars = total_loss_graph(&mut g, d, &pts, (224, 224), Some(cp), &cfg).unwrap();
            let grads = g.backward(vars.total);
            (g.value(vars.total).item(), grads.get(d).unwrap().clone(), grads.get(cp).unwrap().item())
        };
        let (_, analytic, dcount) = eval(&grid, count);
        let h = 1e-6;
        for i in 0..49 {
            let mut p = grid.clone();
            p.data_mut()[i] += h;
            let mut m = grid.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(&p, count).0 - eval(&m, count).0) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()) + 1e-8, "cell {i}: {a} vs {fd}");
        }
        let fd = (eval(&grid, count + h).0 - eval(&grid, count - h).0) / (2.0 * h);
        assert!((dcount - fd).abs() < 1e-6);
    }
}

#[test]
fn sub_terms_are_non_negative() {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..30 {
        let (mut grid, mut pts) = random_scene(&mut rng);
        if trial % 5 == 0 {
            pts.clear();
        }
        if trial % 7 == 0 {
            grid = Tensor::zeros([7, 7]);
        }
        let r = dm_count_loss(&DensityMap::new(grid, (224, 224)).unwrap(), &pts, &cfg).unwrap();
        assert!(r.count_term >= 0.0 && r.ot_term >= 0.0 && r.tv_term >= 0.0, "{r:?}");
        assert!(r.total.is_finite());
    }
}
