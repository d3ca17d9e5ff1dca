use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Everything a backward rule can look at.
pub struct BackwardCtx<'a> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    /// Which inputs need a gradient; rules may return `None` for the rest.
    pub needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Index sentinel for [`Graph::gather`]: the output element is zero.
pub const PAD: usize = usize::MAX;

/// Reverse-mode tape. One graph per forward pass; it is not `Send`, so
/// concurrent forwards each build their own.
///
/// Elementwise and matrix ops panic on shape mismatch: they are internal
/// plumbing, and the public model entry points validate shapes up front.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient (images, targets, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Binds a named parameter. Repeated calls with the same name return the
    /// same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.param_order
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op with a hand-written backward rule.
    pub fn custom<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of `root` (seeded with ones) with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(&BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (true, Some(pg)) = (*need, pg) else {
                    continue;
                };
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(grad);
        }
        Gradients { grads }
    }

    /// Gradient per bound parameter; parameters the root does not depend on
    /// get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.param_order
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    // ------------------------------------------------------------------
    // matrix products

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let value = Tensor::new([m, n], out).unwrap();
        self.custom(value, &[a, b], move |ctx| {
            let g = ctx.grad.data();
            let da = ctx.needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g, false, ctx.inputs[1].data(), true, &mut d, 0.0);
                Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap()
            });
            let db = ctx.needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, ctx.inputs[0].data(), true, g, false, &mut d, 0.0);
                Tensor::new(ctx.inputs[1].shape().to_vec(), d).unwrap()
            });
            vec![da, db]
        })
    }

    /// `[m, k] x [n, k]^T -> [m, n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let value = Tensor::new([m, n], out).unwrap();
        self.custom(value, &[a, b], move |ctx| {
            let g = ctx.grad.data();
            let da = ctx.needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g, false, ctx.inputs[1].data(), false, &mut d, 0.0);
                Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap()
            });
            let db = ctx.needs[1].then(|| {
                let mut d = vec![0.0; n * k];
                gemm(n, m, k, g, true, ctx.inputs[0].data(), false, &mut d, 0.0);
                Tensor::new(ctx.inputs[1].shape().to_vec(), d).unwrap()
            });
            vec![da, db]
        })
    }

    /// Affine map `x W + b` with `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (m, k) = self.value(x).dims2();
        let (k2, n) = self.value(w).dims2();
        assert_eq!(k, k2, "linear: input width {k} vs weight rows {k2}");
        assert_eq!(self.value(b).len(), n, "linear: bias width");
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, 1.0);
        let value = Tensor::new([m, n], out).unwrap();
        self.custom(value, &[x, w, b], move |ctx| {
            let g = ctx.grad.data();
            let dx = ctx.needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g, false, ctx.inputs[1].data(), true, &mut d, 0.0);
                Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap()
            });
            let dw = ctx.needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, ctx.inputs[0].data(), true, g, false, &mut d, 0.0);
                Tensor::new(ctx.inputs[1].shape().to_vec(), d).unwrap()
            });
            let db = ctx.needs[2].then(|| {
                let mut d = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    for (a, b) in d.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                Tensor::new(ctx.inputs[2].shape().to_vec(), d).unwrap()
            });
            vec![dx, dw, db]
        })
    }

    // ------------------------------------------------------------------
    // elementwise

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "elementwise shapes {:?} vs {:?}", ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.custom(value, &[a, b], move |ctx| {
            let (x, y, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let grad_of = |rule: fn(f64, f64, f64) -> f64, shape: &[usize]| {
                let d = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| rule(x, y, g))
                    .collect();
                Tensor::new(shape.to_vec(), d).unwrap()
            };
            vec![
                ctx.needs[0].then(|| grad_of(da, x.shape())),
                ctx.needs[1].then(|| grad_of(db, y.shape())),
            ]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x + y, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x - y, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value = self.value(x).map(f);
        self.custom(value, &[x], move |ctx| {
            let d = ctx
                .inputs[0]
                .data()
                .iter()
                .zip(ctx.output.data())
                .zip(ctx.grad.data())
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap())]
        })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    /// tanh-approximated GELU. It satisfies `gelu(x) - gelu(-x) = x` exactly.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, |x, _| gelu_grad(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > 30.0 { v } else { v.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    /// `0` below zero, quadratic up to `knee`, then linear with slope 1.
    pub fn smooth_relu(&mut self, x: Var, knee: f64) -> Var {
        self.unary(
            x,
            move |v| {
                if v <= 0.0 {
                    0.0
                } else if v < knee {
                    v * v / (2.0 * knee)
                } else {
                    v - knee / 2.0
                }
            },
            move |x, _| {
                if x <= 0.0 {
                    0.0
                } else if x < knee {
                    x / knee
                } else {
                    1.0
                }
            },
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    // ------------------------------------------------------------------
    // broadcasting and reductions

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let (rows, cols) = self.value(x).dims2();
        assert_eq!(self.value(r).len(), cols, "add_row width");
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (a, b) in row.iter_mut().zip(self.nodes[r.0].value.data()) {
                *a += b;
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.custom(value, &[x, r], move |ctx| {
            let dr = ctx.needs[1].then(|| {
                let mut d = vec![0.0; cols];
                for row in ctx.grad.data().chunks_exact(cols) {
                    for (a, b) in d.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                Tensor::new(ctx.inputs[1].shape().to_vec(), d).unwrap()
            });
            let _ = rows;
            vec![Some(ctx.grad.clone()), dr]
        })
    }

    /// Multiplies every row elementwise by a `[cols]` vector.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let cols = self.value(x).cols();
        assert_eq!(self.value(r).len(), cols, "mul_row width");
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (a, b) in row.iter_mut().zip(self.nodes[r.0].value.data()) {
                *a *= b;
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.custom(value, &[x, r], move |ctx| {
            let (xv, rv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let dx = ctx.needs[0].then(|| {
                let mut d = g.to_vec();
                for row in d.chunks_exact_mut(cols) {
                    for (a, b) in row.iter_mut().zip(rv) {
                        *a *= b;
                    }
                }
                Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap()
            });
            let dr = ctx.needs[1].then(|| {
                let mut d = vec![0.0; cols];
                for (xr, gr) in xv.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                    for ((a, x), g) in d.iter_mut().zip(xr).zip(gr) {
                        *a += x * g;
                    }
                }
                Tensor::new(ctx.inputs[1].shape().to_vec(), d).unwrap()
            });
            vec![dx, dr]
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.custom(value, &[x], |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), g))]
        })
    }

    /// `x / s` with `s` of shape `[1]`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v / sv);
        self.custom(value, &[x, s], |ctx| {
            let s = ctx.inputs[1].item();
            let dx = ctx.needs[0].then(|| ctx.grad.map(|g| g / s));
            let ds = ctx.needs[1].then(|| {
                let dot: f64 = ctx.grad.data().iter().zip(ctx.output.data()).map(|(g, y)| g * y).sum();
                Tensor::scalar(-dot / s)
            });
            vec![dx, ds]
        })
    }

    /// `x * s` with `s` of shape `[1]`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        self.custom(value, &[x, s], |ctx| {
            let s = ctx.inputs[1].item();
            let dx = ctx.needs[0].then(|| ctx.grad.map(|g| g * s));
            let ds = ctx.needs[1].then(|| {
                let dot: f64 = ctx.grad.data().iter().zip(ctx.inputs[0].data()).map(|(g, x)| g * x).sum();
                Tensor::scalar(dot)
            });
            vec![dx, ds]
        })
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let cols = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.custom(value, &[x], move |ctx| {
            let mut d = vec![0.0; ctx.grad.len()];
            for ((dr, yr), gr) in d
                .chunks_exact_mut(cols)
                .zip(ctx.output.data().chunks_exact(cols))
                .zip(ctx.grad.data().chunks_exact(cols))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap())]
        })
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` with biased variance.
    pub fn standardize_rows(&mut self, x: Var, eps: f64) -> Var {
        let cols = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / cols.max(1));
        for row in data.chunks_exact_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.custom(value, &[x], move |ctx| {
            let n = cols as f64;
            let mut d = vec![0.0; ctx.grad.len()];
            for (((dr, yr), gr), is) in d
                .chunks_exact_mut(cols)
                .zip(ctx.output.data().chunks_exact(cols))
                .zip(ctx.grad.data().chunks_exact(cols))
                .zip(&inv_std)
            {
                let gmean = gr.iter().sum::<f64>() / n;
                let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = is * (g - gmean - y * gy);
                }
            }
            vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap())]
        })
    }

    // ------------------------------------------------------------------
    // data movement

    /// `out[i] = x[index[i]]`, or zero where `index[i] == PAD`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), index.len(), "gather output shape");
        let src = self.value(x).data();
        let data = index
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { src[i] })
            .collect();
        let value = Tensor::new(shape, data).unwrap();
        self.custom(value, &[x], move |ctx| {
            let mut d = vec![0.0; ctx.inputs[0].len()];
            for (&i, &g) in index.iter().zip(ctx.grad.data()) {
                if i != PAD {
                    d[i] += g;
                }
            }
            vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap())]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape");
        self.custom(value, &[x], |ctx| {
            vec![Some(
                ctx.grad.clone().reshape(ctx.inputs[0].shape().to_vec()).unwrap(),
            )]
        })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let index: Rc<[usize]> = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(x, index, vec![c, r])
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.value(x).dims2();
        assert!(start + len <= r, "slice_rows {start}+{len} > {r}");
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new([len, c], data).unwrap();
        self.custom(value, &[x], move |ctx| {
            let mut d = vec![0.0; ctx.inputs[0].len()];
            d[start * c..(start + len) * c].copy_from_slice(ctx.grad.data());
            vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap())]
        })
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.value(x).dims2();
        assert!(start + len <= c, "slice_cols {start}+{len} > {c}");
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for row in src.chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new([r, len], data).unwrap();
        self.custom(value, &[x], move |ctx| {
            let mut d = vec![0.0; ctx.inputs[0].len()];
            for (dr, gr) in d.chunks_exact_mut(c).zip(ctx.grad.data().chunks_exact(len)) {
                dr[start..start + len].copy_from_slice(gr);
            }
            vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap())]
        })
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let cols = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            sizes.push(t.len());
        }
        let rows = data.len() / cols.max(1);
        let value = Tensor::new([rows, cols], data).unwrap();
        self.custom(value, xs, move |ctx| {
            let mut off = 0;
            sizes
                .iter()
                .zip(ctx.inputs)
                .map(|(&n, input)| {
                    let t = Tensor::new(input.shape().to_vec(), ctx.grad.data()[off..off + n].to_vec()).unwrap();
                    off += n;
                    Some(t)
                })
                .collect()
        })
    }

    /// Joins matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&x| {
                assert_eq!(self.value(x).rows(), rows, "concat_cols row mismatch");
                self.value(x).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new([rows, total], data).unwrap();
        self.custom(value, xs, move |ctx| {
            let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
            for grow in ctx.grad.data().chunks_exact(total) {
                let mut off = 0;
                for (o, &w) in outs.iter_mut().zip(&widths) {
                    o.extend_from_slice(&grow[off..off + w]);
                    off += w;
                }
            }
            outs.into_iter()
                .zip(ctx.inputs)
                .map(|(d, input)| Some(Tensor::new(input.shape().to_vec(), d).unwrap()))
                .collect()
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
