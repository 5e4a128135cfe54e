//! Reverse-mode automatic differentiation over `ndarray` values.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends its result
//! and a backward closure. Training code rebuilds a graph per step,
//! registers model parameters as leaves, calls [`Graph::backward`] on a
//! scalar loss and reads gradients back out. All arithmetic is `f64` and
//! single-threaded, so a fixed seed reproduces runs bit for bit.

mod conv;
mod signal;

pub use signal::SpecGeometry;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn FnOnce(&[ArrayD<f64>], &mut [Option<ArrayD<f64>>])>;

#[derive(Default)]
pub struct Graph {
    vals: Vec<ArrayD<f64>>,
    grads: Vec<Option<ArrayD<f64>>>,
    backs: Vec<Option<BackFn>>,
}

/// Adds `g` into the gradient slot for `id`.
pub(crate) fn acc(grads: &mut [Option<ArrayD<f64>>], id: usize, g: ArrayD<f64>) {
    match &mut grads[id] {
        Some(a) => *a += &g,
        slot => *slot = Some(g),
    }
}

/// Reshapes after forcing standard layout.
pub(crate) fn reshape_std(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let std = a.as_standard_layout().into_owned();
    std.into_shape_with_order(IxDyn(shape))
        .expect("element count preserved")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, val: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.vals.push(val);
        self.grads.push(None);
        self.backs.push(back);
        Var(self.vals.len() - 1)
    }

    /// Id the next pushed node will get; backward closures capture this to
    /// find their own upstream gradient.
    pub(crate) fn next_id(&self) -> usize {
        self.vals.len()
    }

    /// Registers an input (leaf) node.
    pub fn leaf(&mut self, val: ArrayD<f64>) -> Var {
        self.push(val, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.vals[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.vals[v.0];
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().expect("scalar node")
    }

    /// Gradient of the last `backward` call with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads[v.0].take()
    }

    /// Runs reverse-mode accumulation from scalar node `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.vals[loss.0].len(), 1, "loss must be scalar");
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(ArrayD::ones(self.vals[loss.0].raw_dim()));
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            if let Some(back) = self.backs[id].take() {
                back(&self.vals, &mut self.grads);
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let val = &self.vals[a.0] + &self.vals[b.0];
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                acc(grads, a.0, g.clone());
                acc(grads, b.0, g);
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = &self.vals[a.0] - &self.vals[b.0];
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                acc(grads, a.0, g.clone());
                acc(grads, b.0, -g);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let val = &self.vals[a.0] * &self.vals[b.0];
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out].take().expect("upstream grad");
                acc(grads, a.0, &g * &vals[b.0]);
                acc(grads, b.0, &g * &vals[a.0]);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let val = &self.vals[a.0] * c;
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                acc(grads, a.0, g * c);
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let val = &self.vals[a.0] + c;
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                acc(grads, a.0, g);
            })),
        )
    }

    /// `a - c` for a constant (non-differentiated) array.
    pub fn sub_const(&mut self, a: Var, c: &ArrayD<f64>) -> Var {
        let val = &self.vals[a.0] - c;
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                acc(grads, a.0, g);
            })),
        )
    }

    /// `a * c` elementwise for a constant array.
    pub fn mul_const(&mut self, a: Var, c: &ArrayD<f64>) -> Var {
        let val = &self.vals[a.0] * c;
        let out = self.vals.len();
        let c = c.clone();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                acc(grads, a.0, g * &c);
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|x| x.max(0.0));
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out].take().expect("upstream grad");
                let mask = vals[a.0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, a.0, g * mask);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out].take().expect("upstream grad");
                let y = &vals[out];
                acc(grads, a.0, g * y * y.mapv(|v| 1.0 - v));
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(f64::tanh);
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out].take().expect("upstream grad");
                let y = &vals[out];
                acc(grads, a.0, g * y.mapv(|v| 1.0 - v * v));
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(f64::abs);
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out].take().expect("upstream grad");
                let sign = vals[a.0].mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(grads, a.0, g * sign);
            })),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].mapv(|x| x * x);
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out].take().expect("upstream grad");
                acc(grads, a.0, g * &vals[a.0] * 2.0);
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.vals[a.0].len() as f64;
        let mean = self.vals[a.0].sum() / n;
        let val = ArrayD::from_elem(IxDyn(&[1]), mean);
        let out = self.vals.len();
        let shape = self.vals[a.0].raw_dim();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                let gv = g[[0]] / n;
                acc(grads, a.0, ArrayD::from_elem(shape, gv));
            })),
        )
    }

    // ---- linear algebra ----

    /// `a (n,k) . b (k,m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.vals[b.0].view().into_dimensionality::<Ix2>().unwrap();
        let val = av.dot(&bv).into_dyn();
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out].take().expect("upstream grad");
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = vals[b.0].view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, a.0, g2.dot(&bv.t()).into_dyn());
                acc(grads, b.0, av.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// `x (n,i) . w (i,o) + b (o)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.vals[x.0].view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
        let mut val = xv.dot(&wv);
        let bias = &self.vals[b.0];
        for mut row in val.rows_mut() {
            for (r, &bv) in row.iter_mut().zip(bias.iter()) {
                *r += bv;
            }
        }
        let out = self.vals.len();
        self.push(
            val.into_dyn(),
            Some(Box::new(move |vals, grads| {
                let g = grads[out].take().expect("upstream grad");
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let xv = vals[x.0].view().into_dimensionality::<Ix2>().unwrap();
                let wv = vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
                acc(grads, x.0, g2.dot(&wv.t()).into_dyn());
                acc(grads, w.0, xv.t().dot(&g2).into_dyn());
                acc(grads, b.0, g2.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let val = reshape_std(&self.vals[a.0], shape);
        let out = self.vals.len();
        let orig: Vec<usize> = self.vals[a.0].shape().to_vec();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                acc(grads, a.0, reshape_std(&g, &orig));
            })),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let val = self.vals[a.0]
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                let gt = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned();
                acc(grads, a.0, gt);
            })),
        )
    }

    /// Extracts step `t` from a (B, T, D) tensor as (B, D).
    pub fn slice_t(&mut self, a: Var, t: usize) -> Var {
        let val = self.vals[a.0]
            .slice_axis(Axis(1), Slice::from(t..t + 1))
            .to_owned();
        let (b, d) = (val.shape()[0], val.shape()[2]);
        let val = reshape_std(&val, &[b, d]);
        let out = self.vals.len();
        let src_shape: Vec<usize> = self.vals[a.0].shape().to_vec();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                let slot = grads[a.0].get_or_insert_with(|| ArrayD::zeros(IxDyn(&src_shape)));
                let mut dst = slot.slice_axis_mut(Axis(1), Slice::from(t..t + 1));
                let g3 = reshape_std(&g, &[g.shape()[0], 1, g.shape()[1]]);
                dst += &g3;
            })),
        )
    }

    /// Stacks T tensors of (B, D) into (B, T, D).
    pub fn stack_t(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty());
        let (b, d) = {
            let s = self.vals[items[0].0].shape();
            (s[0], s[1])
        };
        let t_len = items.len();
        let mut val = ArrayD::zeros(IxDyn(&[b, t_len, d]));
        for (t, it) in items.iter().enumerate() {
            let mut dst = val.slice_axis_mut(Axis(1), Slice::from(t..t + 1));
            let src = reshape_std(&self.vals[it.0], &[b, 1, d]);
            dst.assign(&src);
        }
        let out = self.vals.len();
        let ids: Vec<usize> = items.iter().map(|v| v.0).collect();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                for (t, &id) in ids.iter().enumerate() {
                    let slab = g
                        .slice_axis(Axis(1), Slice::from(t..t + 1))
                        .to_owned();
                    let gb = reshape_std(&slab, &[slab.shape()[0], slab.shape()[2]]);
                    acc(grads, id, gb);
                }
            })),
        )
    }

    /// Flips a (B, T, D) tensor along T.
    pub fn reverse_t(&mut self, a: Var) -> Var {
        let val = self.vals[a.0]
            .slice_axis(Axis(1), Slice::new(0, None, -1))
            .as_standard_layout()
            .into_owned();
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                let flipped = g
                    .slice_axis(Axis(1), Slice::new(0, None, -1))
                    .as_standard_layout()
                    .into_owned();
                acc(grads, a.0, flipped);
            })),
        )
    }

    /// Columns [lo, hi) of a (B, M) matrix.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let val = self.vals[a.0]
            .slice_axis(Axis(1), Slice::from(lo..hi))
            .to_owned()
            .as_standard_layout()
            .into_owned();
        let out = self.vals.len();
        let src_shape: Vec<usize> = self.vals[a.0].shape().to_vec();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                let slot = grads[a.0].get_or_insert_with(|| ArrayD::zeros(IxDyn(&src_shape)));
                let mut dst = slot.slice_axis_mut(Axis(1), Slice::from(lo..hi));
                dst += &g;
            })),
        )
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let last = self.vals[a.0].ndim() - 1;
        let val = ndarray::concatenate(
            Axis(last),
            &[self.vals[a.0].view(), self.vals[b.0].view()],
        )
        .expect("compatible shapes")
        .as_standard_layout()
        .into_owned();
        let split = self.vals[a.0].shape()[last];
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                let last = g.ndim() - 1;
                let ga = g
                    .slice_axis(Axis(last), Slice::from(..split))
                    .as_standard_layout()
                    .into_owned();
                let gb = g
                    .slice_axis(Axis(last), Slice::from(split..))
                    .as_standard_layout()
                    .into_owned();
                acc(grads, a.0, ga);
                acc(grads, b.0, gb);
            })),
        )
    }

    /// Looks up rows of `table (V, D)` at `indices`, producing (B, D).
    pub fn rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let tv = self.vals[table.0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let d = tv.ncols();
        let mut val = ArrayD::zeros(IxDyn(&[indices.len(), d]));
        for (i, &idx) in indices.iter().enumerate() {
            for j in 0..d {
                val[[i, j]] = tv[[idx, j]];
            }
        }
        let out = self.vals.len();
        let indices = indices.to_vec();
        let table_shape: Vec<usize> = self.vals[table.0].shape().to_vec();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out].take().expect("upstream grad");
                let slot =
                    grads[table.0].get_or_insert_with(|| ArrayD::zeros(IxDyn(&table_shape)));
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..g.shape()[1] {
                        slot[[idx, j]] += g[[i, j]];
                    }
                }
            })),
        )
    }

    /// Per-channel affine conditioning: out[b,c,..] = gamma[b,c] * x + beta[b,c]
    /// for x of shape (B, C, H, W).
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.vals[x.0];
        let (bs, c, h, w) = dims4(xv);
        let plane = h * w;
        let mut val = xv.clone();
        {
            let gv = flat_std(&self.vals[gamma.0]);
            let bv = flat_std(&self.vals[beta.0]);
            let vf = val.as_slice_mut().expect("standard layout");
            for bi in 0..bs {
                for ci in 0..c {
                    let g = gv[bi * c + ci];
                    let be = bv[bi * c + ci];
                    let base = (bi * c + ci) * plane;
                    for v in &mut vf[base..base + plane] {
                        *v = g * *v + be;
                    }
                }
            }
        }
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out].take().expect("upstream grad");
                let xv = &vals[x.0];
                let (bs, c, h, w) = dims4(xv);
                let plane = h * w;
                let gammav = flat_std(&vals[gamma.0]);
                let xf = flat_std(xv);
                let gf = flat_std(&g);
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let mut ggamma = vec![0.0; bs * c];
                let mut gbeta = vec![0.0; bs * c];
                {
                    let gxf = gx.as_slice_mut().expect("standard layout");
                    for bi in 0..bs {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let mut sg = 0.0;
                            let mut sgx = 0.0;
                            for i in base..base + plane {
                                sg += gf[i];
                                sgx += gf[i] * xf[i];
                                gxf[i] = gf[i] * gammav[bi * c + ci];
                            }
                            ggamma[bi * c + ci] = sgx;
                            gbeta[bi * c + ci] = sg;
                        }
                    }
                }
                acc(grads, x.0, gx);
                acc(
                    grads,
                    gamma.0,
                    ArrayD::from_shape_vec(IxDyn(&[bs, c]), ggamma).unwrap(),
                );
                acc(
                    grads,
                    beta.0,
                    ArrayD::from_shape_vec(IxDyn(&[bs, c]), gbeta).unwrap(),
                );
            })),
        )
    }

    /// Layer norm over the channel axis of (B, C, H, W), per (b, h, w)
    /// position, with learnable per-channel gain/shift.
    pub fn layernorm_c(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.vals[x.0];
        let (bs, c, h, w) = dims4(xv);
        let plane = h * w;
        let mut xhat = ArrayD::zeros(xv.raw_dim());
        let mut inv_std = vec![0.0_f64; bs * plane];
        {
            let xf = flat_std(xv);
            let xhf = xhat.as_slice_mut().expect("standard layout");
            for bi in 0..bs {
                for pi in 0..plane {
                    let mut mean = 0.0;
                    for ci in 0..c {
                        mean += xf[(bi * c + ci) * plane + pi];
                    }
                    mean /= c as f64;
                    let mut var = 0.0;
                    for ci in 0..c {
                        let d = xf[(bi * c + ci) * plane + pi] - mean;
                        var += d * d;
                    }
                    var /= c as f64;
                    let istd = 1.0 / (var + eps).sqrt();
                    inv_std[bi * plane + pi] = istd;
                    for ci in 0..c {
                        let idx = (bi * c + ci) * plane + pi;
                        xhf[idx] = (xf[idx] - mean) * istd;
                    }
                }
            }
        }
        let mut val = xhat.clone();
        {
            let gv = flat_std(&self.vals[gamma.0]);
            let bv = flat_std(&self.vals[beta.0]);
            let vf = val.as_slice_mut().expect("standard layout");
            for bi in 0..bs {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for v in &mut vf[base..base + plane] {
                        *v = gv[ci] * *v + bv[ci];
                    }
                }
            }
        }
        let out = self.vals.len();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out].take().expect("upstream grad");
                let gammav = flat_std(&vals[gamma.0]).to_vec();
                let (bs, c, h, w) = dims4(&g);
                let plane = h * w;
                let gf = flat_std(&g);
                let xhf = flat_std(&xhat);
                let mut gx = ArrayD::zeros(g.raw_dim());
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                {
                    let gxf = gx.as_slice_mut().expect("standard layout");
                    for bi in 0..bs {
                        for pi in 0..plane {
                            let istd = inv_std[bi * plane + pi];
                            let mut mean_gy = 0.0;
                            let mut mean_gy_xhat = 0.0;
                            for ci in 0..c {
                                let idx = (bi * c + ci) * plane + pi;
                                let gy = gf[idx] * gammav[ci];
                                mean_gy += gy;
                                mean_gy_xhat += gy * xhf[idx];
                                ggamma[ci] += gf[idx] * xhf[idx];
                                gbeta[ci] += gf[idx];
                            }
                            mean_gy /= c as f64;
                            mean_gy_xhat /= c as f64;
                            for ci in 0..c {
                                let idx = (bi * c + ci) * plane + pi;
                                let gy = gf[idx] * gammav[ci];
                                gxf[idx] =
                                    istd * (gy - mean_gy - xhf[idx] * mean_gy_xhat);
                            }
                        }
                    }
                }
                acc(grads, x.0, gx);
                acc(
                    grads,
                    gamma.0,
                    ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).unwrap(),
                );
                acc(
                    grads,
                    beta.0,
                    ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).unwrap(),
                );
            })),
        )
    }

    /// Applies a precomputed dropout mask (entries 0 or 1/(1-p)).
    pub fn dropout_mask(&mut self, x: Var, mask: &ArrayD<f64>) -> Var {
        self.mul_const(x, mask)
    }
}

pub(crate) fn dims4(a: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    debug_assert_eq!(s.len(), 4);
    (s[0], s[1], s[2], s[3])
}

/// Flat view of a standard-layout tensor.
pub(crate) fn flat_std(a: &ArrayD<f64>) -> &[f64] {
    a.as_slice().expect("graph tensors are standard layout")
}
