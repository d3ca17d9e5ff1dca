mod common;

use common::{
    build_attention, deform_reduction_deviation, fd_check, fixture, identity, jitter, oracle_bilinear, project,
    random_tensor, run_attention, set_linear,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgbt_count::deform::{reference_points_for, DeformConfig, MsdTrans, NUM_LEVELS};
use rgbt_count::params::Init;
use rgbt_count::{Graph, ParamStore, Tensor};

#[test]
fn reduces_to_weighted_bilinear_samples() {
    let worst = deform_reduction_deviation(2, 3, 3, 4, 5);
    assert!(worst < 1e-12, "max deviation {worst:e}");
}

#[test]
fn zero_offsets_uniform_weights_give_mean_of_reference_samples() {
    let (heads, points, n, c) = (1, 4, 2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fx = fixture(&mut rng, n, c);
    let (attn, mut store) = build_attention(heads, points, c, 2);
    let hlk = heads * NUM_LEVELS * points;
    set_linear(&mut store, &attn.offsets, Tensor::zeros([c, 2 * hlk]), Tensor::zeros([2 * hlk]));
    set_linear(&mut store, &attn.weights, Tensor::zeros([c, hlk]), Tensor::zeros([hlk]));
    set_linear(&mut store, &attn.value, identity(c), Tensor::zeros([c]));
    set_linear(&mut store, &attn.output, identity(c), Tensor::zeros([c]));
    let out = run_attention(&attn, &store, &fx);
    let refs = reference_points_for(n, true);
    for q in 0..n * n + 1 {
        let mut expect = vec![0.0; c];
        for (grid, lh, lw) in &fx.levels {
            let s = oracle_bilinear(grid.data(), *lh, *lw, c, refs.at(q, 0), refs.at(q, 1));
            for (e, v) in expect.iter_mut().zip(s) {
                // K identical samples per level, 4K in total
                *e += points as f64 * v / (NUM_LEVELS * points) as f64;
            }
        }
        for (j, e) in expect.iter().enumerate() {
            assert!((out.at(q, j) - e).abs() < 1e-12);
        }
    }
}

#[test]
fn single_level_single_point_is_one_bilinear_read() {
    let (heads, points, n, c) = (1, 1, 3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fx = fixture(&mut rng, n, c);
    let (attn, mut store) = build_attention(heads, points, c, 3);
    set_linear(&mut store, &attn.offsets, Tensor::zeros([c, 8]), Tensor::zeros([8]));
    // all mass on level 2; exp(-1000) underflows to exactly zero
    let logits = Tensor::new([4], vec![-1000.0, -1000.0, 0.0, -1000.0]).unwrap();
    set_linear(&mut store, &attn.weights, Tensor::zeros([c, 4]), logits);
    set_linear(&mut store, &attn.value, identity(c), Tensor::zeros([c]));
    set_linear(&mut store, &attn.output, identity(c), Tensor::zeros([c]));
    let out = run_attention(&attn, &store, &fx);
    let refs = reference_points_for(n, true);
    let (grid, lh, lw) = &fx.levels[2];
    for q in 0..n * n + 1 {
        let s = oracle_bilinear(grid.data(), *lh, *lw, c, refs.at(q, 0), refs.at(q, 1));
        for (j, v) in s.iter().enumerate() {
            assert!((out.at(q, j) - v).abs() < 1e-12);
        }
    }
}

fn build_msd(seed: u64, level_channels: [usize; 4]) -> (MsdTrans, ParamStore) {
    let cfg = DeformConfig {
        heads: 2,
        sample_points_per_level: 2,
        layers: 1,
        channels: 8,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = MsdTrans::new(&mut Init { store: &mut store, rng: &mut rng }, "msd", &cfg, level_channels).unwrap();
    (m, store)
}

/// Inputs: g_t, g_count, g_r, f3, f2, f1 at N = 2.
fn msd_inputs(rng: &mut ChaCha8Rng, level_channels: [usize; 4]) -> Vec<Tensor> {
    let mut v = vec![random_tensor(rng, &[4, 8], 1.0), random_tensor(rng, &[1, 8], 1.0)];
    for (l, &ch) in level_channels.iter().enumerate() {
        let s = 2 << l;
        v.push(random_tensor(rng, &[s * s, ch], 1.0));
    }
    v
}

fn msd_forward(
    m: &MsdTrans,
    g: &mut Graph,
    st: &ParamStore,
    v: &[rgbt_count::Var],
) -> rgbt_count::Result<(rgbt_count::Var, rgbt_count::Var)> {
    let levels = [(v[2], 2, 2), (v[3], 4, 4), (v[4], 8, 8), (v[5], 16, 16)];
    let e = m.forward(g, st, v[0], Some(v[1]), levels)?;
    Ok((e.o_t, e.o_count.unwrap()))
}

#[test]
fn finite_difference_gradients() {
    let lc = [8, 3, 2, 2];
    let (m, mut store) = build_msd(8, lc);
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    // moves sampling points off the integer lattice where bilinear weights kink
    jitter(&mut store, &mut rng, 0.05);
    let inputs = msd_inputs(&mut rng, lc);
    let proj = random_tensor(&mut rng, &[5, 8], 1.0);
    let (checked, failures) = fd_check(&store, &inputs, 1e-4, 1e-9, |g, st, v| {
        let (o_t, o_c) = msd_forward(&m, g, st, v)?;
        let all = g.concat_rows(&[o_t, o_c]);
        Ok(project(g, all, &proj))
    });
    assert!(checked > store.num_scalars());
    assert!(failures.is_empty(), "{} of {checked} failed:\n{}", failures.len(), failures.join("\n"));
}

#[test]
fn every_level_projection_receives_gradient() {
    let lc = [8, 3, 2, 2];
    let (m, store) = build_msd(9, lc);
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let inputs = msd_inputs(&mut rng, lc);
    let proj = random_tensor(&mut rng, &[4, 8], 1.0);
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let (o_t, _) = msd_forward(&m, &mut g, &store, &vars).unwrap();
    let loss = project(&mut g, o_t, &proj);
    let grads = g.param_grads(&g.backward(loss));
    for l in 0..NUM_LEVELS {
        let name = format!("msd.level_proj{l}.weight");
        let norm: f64 = grads[&name].data().iter().map(|v| v * v).sum();
        assert!(norm > 1e-12, "{name} gets no gradient");
    }
}

#[test]
fn query_and_value_roles_are_not_symmetric() {
    let lc = [8, 8, 8, 8];
    let (m, store) = build_msd(10, lc);
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let inputs = msd_inputs(&mut rng, lc);
    let run = |query: &Tensor, coarse: &Tensor| {
        let mut ins = inputs.clone();
        ins[0] = query.clone();
        ins[2] = coarse.clone();
        let mut g = Graph::new();
        let vars: Vec<_> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let (o_t, _) = msd_forward(&m, &mut g, &store, &vars).unwrap();
        g.value(o_t).clone()
    };
    let (thermal, colour) = (&inputs[0], &inputs[2]);
    let a = run(thermal, colour);
    let b = run(colour, thermal);
    assert!(a.max_abs_diff(&b) > 1e-3);
}
