//! Density regression head and the count-token readout.

use std::rc::Rc;

use crate::autodiff::{Graph, Tensor, Var, PAD};
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamStore};

/// Knee of the output clamp: quadratic below, identity-slope above.
pub const DENSITY_KNEE: f64 = 0.05;

/// Per-cell person counts on the `N x N` token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    /// `[N, N]`, non-negative.
    pub grid: Tensor,
    /// `(height, width)` of the image the map was predicted from.
    pub source_size: (usize, usize),
}

impl DensityMap {
    pub fn new(grid: Tensor, source_size: (usize, usize)) -> Result<Self> {
        let s = grid.shape();
        if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
            return shape_err(format!("density grid must be square [N, N], got {s:?}"));
        }
        if !grid.all_finite() {
            return Err(Error::NonFinite("density map".into()));
        }
        Ok(Self { grid, source_size })
    }

    pub fn side(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn predicted_count(&self) -> f64 {
        predicted_count(self)
    }
}

/// Total mass of the map.
pub fn predicted_count(d: &DensityMap) -> f64 {
    d.grid.sum()
}

/// `3x3` same-padding neighbourhood gather on an `n x n` grid:
/// `[n², C] -> [n², 9C]`, taps in `(dy, dx, c)` order.
pub fn im2col_3x3(n: usize, c: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(n * n * 9 * c);
    for i in 0..n as isize {
        for j in 0..n as isize {
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (y, x) = (i + di, j + dj);
                    let inside = y >= 0 && x >= 0 && y < n as isize && x < n as isize;
                    for ch in 0..c {
                        idx.push(if inside { (y as usize * n + x as usize) * c + ch } else { PAD });
                    }
                }
            }
        }
    }
    idx.into()
}

/// Two `3x3` convolutions (halving then quartering the width) with GELU, a
/// `1x1` convolution to one channel, then a non-negative clamp.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub conv1: Linear,
    pub conv2: Linear,
    pub conv3: Linear,
    pub in_channels: usize,
}

impl RegressionHead {
    pub fn new(init: &mut Init, name: &str, in_channels: usize) -> Result<Self> {
        if in_channels < 4 {
            return Err(Error::Config(format!("regression head needs >= 4 channels, got {in_channels}")));
        }
        let (c2, c4) = (in_channels / 2, in_channels / 4);
        Ok(Self {
            conv1: Linear::new(init, &format!("{name}.conv1"), 9 * in_channels, c2),
            conv2: Linear::new(init, &format!("{name}.conv2"), 9 * c2, c4),
            conv3: Linear::new(init, &format!("{name}.conv3"), c4, 1),
            in_channels,
        })
    }

    pub fn num_params(in_channels: usize) -> usize {
        let (c2, c4) = (in_channels / 2, in_channels / 4);
        Linear::num_params(9 * in_channels, c2) + Linear::num_params(9 * c2, c4) + Linear::num_params(c4, 1)
    }

    /// `o_t: [N², C]` to an `[N, N]` density node.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, o_t: Var) -> Result<Var> {
        let (n2, c) = g.value(o_t).dims2();
        let n = (n2 as f64).sqrt().round() as usize;
        if n * n != n2 || c != self.in_channels {
            return shape_err(format!(
                "head expects [N², {}] tokens, got [{n2}, {c}]",
                self.in_channels
            ));
        }
        let x = g.gather(o_t, im2col_3x3(n, c), vec![n2, 9 * c]);
        let x = self.conv1.forward(g, store, x)?;
        let x = g.gelu(x);
        let c2 = self.conv1.out_dim;
        let x = g.gather(x, im2col_3x3(n, c2), vec![n2, 9 * c2]);
        let x = self.conv2.forward(g, store, x)?;
        let x = g.gelu(x);
        let x = self.conv3.forward(g, store, x)?;
        let x = g.smooth_relu(x, DENSITY_KNEE);
        Ok(g.reshape(x, [n, n]))
    }

    /// Convenience wrapper returning a [`DensityMap`].
    pub fn regression_head(
        &self,
        store: &ParamStore,
        o_t: &Tensor,
        source_size: (usize, usize),
    ) -> Result<DensityMap> {
        let mut g = Graph::new();
        let x = g.constant(o_t.clone());
        let d = self.forward(&mut g, store, x)?;
        DensityMap::new(g.value(d).clone(), source_size)
    }
}

/// Affine `C -> 1` projection of the enhanced count token.
#[derive(Clone, Debug)]
pub struct CountReadout {
    pub fc: Linear,
}

impl CountReadout {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        Self {
            fc: Linear::new(init, &format!("{name}.fc"), channels, 1),
        }
    }

    /// `o_count: [1, C]` to a `[1, 1]` node.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, o_count: Var) -> Result<Var> {
        if g.value(o_count).shape() != [1, self.fc.in_dim] {
            return shape_err(format!("count token must be [1, {}]", self.fc.in_dim));
        }
        self.fc.forward(g, store, o_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head(c: usize, seed: u64) -> (RegressionHead, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = RegressionHead::new(&mut Init { store: &mut store, rng: &mut rng }, "head", c).unwrap();
        (h, store)
    }

    #[test]
    fn shapes_and_zero_input() {
        let (h, store) = head(128, 1);
        let d = h.regression_head(&store, &Tensor::zeros([49, 128]), (224, 224)).unwrap();
        assert_eq!(d.grid.shape(), &[7, 7]);
        assert_eq!(d.predicted_count(), 0.0);
        assert_eq!(store.num_scalars(), RegressionHead::num_params(128));
    }

    #[test]
    fn non_negative_for_random_params_and_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..5 {
            let (h, mut store) = head(16, seed);
            for (_, t) in store.iter_mut() {
                for v in t.data_mut() {
                    *v = rng.gen_range(-3.0..3.0);
                }
            }
            let x = Tensor::new([25, 16], (0..400).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
            let d = h.regression_head(&store, &x, (160, 160)).unwrap();
            assert!(d.grid.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn too_few_channels() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(RegressionHead::new(&mut Init { store: &mut store, rng: &mut rng }, "h", 3).is_err());
    }

    #[test]
    fn im2col_pads_edges() {
        let idx = im2col_3x3(2, 1);
        // top-left output: taps (-1,-1),(-1,0),(-1,1),(0,-1),(0,0),(0,1),(1,-1),(1,0),(1,1)
        assert_eq!(&idx[..9], &[PAD, PAD, PAD, PAD, 0, 1, PAD, 2, 3]);
    }

    #[test]
    fn readout_is_affine() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = CountReadout::new(&mut Init { store: &mut store, rng: &mut rng }, "readout", 8);
        store.insert("readout.fc.weight", Tensor::zeros([8, 1]));
        store.insert("readout.fc.bias", Tensor::scalar(2.5));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 8]));
        let y = r.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).item(), 2.5);

        let w: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        store.insert("readout.fc.weight", Tensor::new([8, 1], w.clone()).unwrap());
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full([1, 8], 0.3));
        let y = r.forward(&mut g, &store, x).unwrap();
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), w.as_slice());
    }

    #[test]
    fn count_is_mass() {
        let d = DensityMap::new(Tensor::full([7, 7], 0.5), (224, 224)).unwrap();
        assert_eq!(predicted_count(&d), 24.5);
        assert_eq!(DensityMap::new(Tensor::zeros([7, 7]), (224, 224)).unwrap().predicted_count(), 0.0);
    }
}
