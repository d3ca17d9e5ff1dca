//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

/// Exact discrete optimal transport by successive shortest paths on the
/// residual bipartite graph (Bellman-Ford, so negative residual arcs are
/// fine). `a` and `b` must carry equal total mass. Returns (cost, plan).
pub fn exact_ot(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let (n, m) = (a.len(), b.len());
    let tol = 1e-14;
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![vec![0.0; m]; n];
    loop {
        if supply.iter().all(|&s| s <= tol) || demand.iter().all(|&d| d <= tol) {
            break;
        }
        // node ids: sources 0..n, sinks n..n+m
        let mut dist = vec![f64::INFINITY; n + m];
        let mut pred = vec![usize::MAX; n + m];
        for i in 0..n {
            if supply[i] > tol {
                dist[i] = 0.0;
            }
        }
        for _ in 0..(n + m) {
            let mut changed = false;
            for i in 0..n {
                if dist[i].is_finite() {
                    for j in 0..m {
                        let d = dist[i] + cost[i][j];
                        if d < dist[n + j] - 1e-15 {
                            dist[n + j] = d;
                            pred[n + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..m {
                if dist[n + j].is_finite() {
                    for i in 0..n {
                        if flow[i][j] > tol {
                            let d = dist[n + j] - cost[i][j];
                            if d < dist[i] - 1e-15 {
                                dist[i] = d;
                                pred[i] = n + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let sink = (0..m)
            .filter(|&j| demand[j] > tol && dist[n + j].is_finite())
            .min_by(|&x, &y| dist[n + x].total_cmp(&dist[n + y]))
            .expect("unbalanced transport problem");
        // walk back to the source, collecting the bottleneck
        let mut path = vec![n + sink];
        let mut node = n + sink;
        while pred[node] != usize::MAX {
            node = pred[node];
            path.push(node);
        }
        let src = node;
        let mut delta = supply[src].min(demand[sink]);
        for w in path.windows(2) {
            let (to, from) = (w[0], w[1]);
            if from >= n {
                // backward arc: sink `from` -> source `to` cancels flow
                delta = delta.min(flow[to][from - n]);
            }
        }
        for w in path.windows(2) {
            let (to, from) = (w[0], w[1]);
            if from < n {
                flow[from][to - n] += delta;
            } else {
                flow[to][from - n] -= delta;
            }
        }
        supply[src] -= delta;
        demand[sink] -= delta;
    }
    let total = (0..n).map(|i| (0..m).map(|j| flow[i][j] * cost[i][j]).sum::<f64>()).sum();
    (total, flow)
}

/// Squared distance between cell centres of an `n x n` grid in [0,1]^2.
pub fn grid_cost(n: usize) -> Vec<Vec<f64>> {
    let c = |k: usize| ((k / n) as f64 + 0.5) / n as f64;
    let r = |k: usize| ((k % n) as f64 + 0.5) / n as f64;
    (0..n * n)
        .map(|i| (0..n * n).map(|j| (c(i) - c(j)).powi(2) + (r(i) - r(j)).powi(2)).collect())
        .collect()
}

/// Exact 1-D OT with a convex cost: the monotone (north-west corner on
/// sorted supports) coupling. Supports must already be sorted.
pub fn monotone_ot_1d(xa: &[f64], a: &[f64], xb: &[f64], b: &[f64]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0], b[0]);
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let t = ra.min(rb);
        total += t * (xa[i] - xb[j]).powi(2);
        ra -= t;
        rb -= t;
        if ra <= 1e-15 {
            i += 1;
            ra = a.get(i).copied().unwrap_or(0.0);
        }
        if rb <= 1e-15 {
            j += 1;
            rb = b.get(j).copied().unwrap_or(0.0);
        }
    }
    total
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rand::SeedableRng;
use rgbt_count::deform::{project_levels, reference_points_for, DeformAttention, DeformConfig, NUM_LEVELS};
use rgbt_count::nn::Linear;
use rgbt_count::params::Init;
use rgbt_count::{Graph, ParamStore, Tensor, Var};

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

/// `sum(out * proj)` for a fixed projection, turning any output into a scalar.
pub fn project(g: &mut Graph, out: Var, proj: &Tensor) -> Var {
    let p = g.constant(proj.clone());
    let prod = g.mul(out, p);
    g.sum(prod)
}

/// Central differences of a scalar graph function against backprop, for
/// every parameter entry and every entry of each input. Returns the
/// descriptions of entries outside `|a - n| <= rel * max(|a|, |n|) + abs`.
pub fn fd_check<F>(store: &ParamStore, inputs: &[Tensor], rel: f64, abs: f64, f: F) -> (usize, Vec<String>)
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> rgbt_count::Result<Var> + Sync,
{
    let h = 1e-6;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, store, &vars).unwrap();
    let grads = g.backward(out);
    let pgrads = g.param_grads(&grads);

    // (is_param, name or input index, flat index, analytic)
    let mut entries: Vec<(Option<String>, usize, usize, f64)> = Vec::new();
    for (name, t) in store.iter() {
        for i in 0..t.len() {
            let a = pgrads.get(name).map_or(0.0, |gt| gt.data()[i]);
            entries.push((Some(name.clone()), 0, i, a));
        }
    }
    for (k, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        for i in 0..t.len() {
            let a = grads.get(*v).map_or(0.0, |gt| gt.data()[i]);
            entries.push((None, k, i, a));
        }
    }

    let eval = |st: &ParamStore, ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, st, &vars).unwrap();
        g.value(out).item()
    };
    let failures: Vec<String> = entries
        .par_iter()
        .filter_map(|(name, k, i, a)| {
            let mut st = store.clone();
            let mut ins = inputs.to_vec();
            let mut at = |delta: f64| -> f64 {
                match name {
                    Some(nm) => st.get_mut(nm).unwrap().data_mut()[*i] += delta,
                    None => ins[*k].data_mut()[*i] += delta,
                }
                eval(&st, &ins)
            };
            let plus = at(h);
            let minus = at(-2.0 * h);
            let n = (plus - minus) / (2.0 * h);
            let ok = (a - n).abs() <= rel * a.abs().max(n.abs()) + abs;
            (!ok).then(|| {
                let who = name.clone().unwrap_or_else(|| format!("input{k}"));
                format!("{who}[{i}] analytic {a:.9e} numeric {n:.9e}")
            })
        })
        .collect();
    (entries.len(), failures)
}

/// Regional counts by rasterizing each density cell uniformly over its
/// pixels and summing pixels per region. Exact when the image side is a
/// multiple of both the grid side and `2^level`.
pub fn raster_regional(grid: &[f64], n: usize, side: usize, level: u32) -> Vec<f64> {
    let r = 1usize << level;
    assert!(side.is_multiple_of(n) && side.is_multiple_of(r));
    let (cell, region) = (side / n, side / r);
    let per_px = 1.0 / (cell * cell) as f64;
    let mut out = vec![0.0; r * r];
    for y in 0..side {
        for x in 0..side {
            let v = grid[(y / cell) * n + x / cell];
            out[(y / region) * r + x / region] += v * per_px;
        }
    }
    out
}

/// Ground-truth regional counts by scanning region bounds.
pub fn scan_point_regions(points: &[rgbt_count::Point], side: usize, level: u32) -> Vec<f64> {
    let r = 1usize << level;
    let w = side as f64 / r as f64;
    let mut out = vec![0.0; r * r];
    for p in points {
        let find = |v: f64| (0..r).find(|&k| v >= k as f64 * w && v < (k + 1) as f64 * w).unwrap();
        out[find(p.y) * r + find(p.x)] += 1.0;
    }
    out
}

/// GAME straight from its definition using the two oracles above.
pub fn oracle_game(maps: &[(Vec<f64>, usize)], gts: &[Vec<rgbt_count::Point>], side: usize, level: u32) -> f64 {
    let total: f64 = maps
        .iter()
        .zip(gts)
        .map(|((grid, n), pts)| {
            let p = raster_regional(grid, *n, side, level);
            let t = scan_point_regions(pts, side, level);
            p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>()
        })
        .sum();
    total / maps.len() as f64
}

pub fn oracle_rmse(pred: &[f64], gt: &[f64]) -> f64 {
    let se: f64 = pred.iter().zip(gt).map(|(p, t)| (p - t) * (p - t)).sum();
    (se / pred.len() as f64).sqrt()
}

/// Zero-padded bilinear read of a row-major `[h*w, c]` grid at normalized
/// `(x, y)` with pixel centres at `(j + 0.5) / w`.
pub fn oracle_bilinear(grid: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> Vec<f64> {
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let mut out = vec![0.0; c];
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                continue;
            }
            let base = (yi as usize * w + xi as usize) * c;
            for ch in 0..c {
                out[ch] += wx * wy * grid[base + ch];
            }
        }
    }
    out
}

pub fn identity(c: usize) -> Tensor {
    let mut t = Tensor::zeros([c, c]);
    for i in 0..c {
        t.data_mut()[i * c + i] = 1.0;
    }
    t
}

pub fn set_linear(store: &mut ParamStore, fc: &Linear, w: Tensor, b: Tensor) {
    assert_eq!(store.get(&fc.weight).unwrap().shape(), w.shape());
    assert_eq!(store.get(&fc.bias).unwrap().shape(), b.shape());
    store.insert(fc.weight.clone(), w);
    store.insert(fc.bias.clone(), b);
}

pub struct Fixture {
    pub n: usize,
    pub c: usize,
    pub levels: Vec<(Tensor, usize, usize)>,
    pub query: Tensor,
}

pub fn fixture(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Fixture {
    let levels = (0..NUM_LEVELS)
        .map(|l| {
            let s = n << l;
            (random_tensor(rng, &[s * s, c], 1.0), s, s)
        })
        .collect();
    Fixture {
        n,
        c,
        levels,
        query: random_tensor(rng, &[n * n + 1, c], 1.0),
    }
}

/// Runs one attention block with identity level projections so the value
/// set holds the raw level grids.
pub fn run_attention(attn: &DeformAttention, store: &ParamStore, fx: &Fixture) -> Tensor {
    let mut g = Graph::new();
    let mut proj_store = store.clone();
    let mut projs = Vec::new();
    for l in 0..NUM_LEVELS {
        let name = format!("proj{l}");
        proj_store.insert(format!("{name}.weight"), identity(fx.c));
        proj_store.insert(format!("{name}.bias"), Tensor::zeros([fx.c]));
        projs.push(Linear {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            in_dim: fx.c,
            out_dim: fx.c,
        });
    }
    let lv: Vec<_> = fx.levels.iter().map(|(t, h, w)| (g.leaf(t.clone()), *h, *w)).collect();
    let values = project_levels(&mut g, &proj_store, [lv[0], lv[1], lv[2], lv[3]], &projs).unwrap();
    assert_eq!(values.starts, [0, fx.n * fx.n, 5 * fx.n * fx.n, 21 * fx.n * fx.n]);
    let q = g.leaf(fx.query.clone());
    let out = attn.forward(&mut g, &proj_store, q, &values, &reference_points_for(fx.n, true)).unwrap();
    g.value(out).clone()
}

pub fn build_attention(heads: usize, points: usize, c: usize, seed: u64) -> (DeformAttention, ParamStore) {
    let cfg = DeformConfig {
        heads,
        sample_points_per_level: points,
        layers: 1,
        channels: c,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn = DeformAttention::new(&mut Init { store: &mut store, rng: &mut rng }, "attn", &cfg);
    (attn, store)
}

/// Offsets fixed by the bias, logits fixed by the bias, identity value and
/// output maps: the layer reduces to a softmax-weighted sum of bilinear
/// reads at shifted reference points.
pub fn deform_reduction_deviation(heads: usize, points: usize, n: usize, c: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = fixture(&mut rng, n, c);
    let (attn, mut store) = build_attention(heads, points, c, 1);
    let hlk = heads * NUM_LEVELS * points;
    let off_bias = random_tensor(&mut rng, &[2 * hlk], 3.0);
    let logit_bias = random_tensor(&mut rng, &[hlk], 2.0);
    set_linear(&mut store, &attn.offsets, Tensor::zeros([c, 2 * hlk]), off_bias.clone());
    set_linear(&mut store, &attn.weights, Tensor::zeros([c, hlk]), logit_bias.clone());
    set_linear(&mut store, &attn.value, identity(c), Tensor::zeros([c]));
    set_linear(&mut store, &attn.output, identity(c), Tensor::zeros([c]));
    let out = run_attention(&attn, &store, &fx);

    let hd = c / heads;
    let lk = NUM_LEVELS * points;
    let refs = reference_points_for(n, true);
    let mut worst: f64 = 0.0;
    for q in 0..n * n + 1 {
        for h in 0..heads {
            let logits = &logit_bias.data()[h * lk..(h + 1) * lk];
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
            let mut expect = vec![0.0; hd];
            for l in 0..NUM_LEVELS {
                let (grid, lh, lw) = &fx.levels[l];
                for k in 0..points {
                    let a = (logits[l * points + k] - mx).exp() / z;
                    let o = ((h * NUM_LEVELS + l) * points + k) * 2;
                    let x = refs.at(q, 0) + off_bias.data()[o] / *lw as f64;
                    let y = refs.at(q, 1) + off_bias.data()[o + 1] / *lh as f64;
                    let s = oracle_bilinear(grid.data(), *lh, *lw, c, x, y);
                    for (e, v) in expect.iter_mut().zip(&s[h * hd..(h + 1) * hd]) {
                        *e += a * v;
                    }
                }
            }
            for (j, e) in expect.iter().enumerate() {
                worst = worst.max((out.at(q, h * hd + j) - e).abs());
            }
        }
    }
    worst
}

