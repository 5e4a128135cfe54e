//! Parameter management and layer builders on top of [`crate::tensor`].
//!
//! Models keep their weights in a [`Params`] store (sorted by name, so
//! iteration and checksums are deterministic). Each training step registers
//! every parameter as a graph leaf through [`Binding`], builds the forward
//! pass with the free functions here, and reads gradients back by name.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::{Graph, Var};

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// FNV-1a over names and little-endian bytes; used to audit that frozen
    /// models stay frozen.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325_u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, value) in &self.map {
            eat(name.as_bytes());
            for v in value.iter() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Non-trainable state (batch-norm running statistics).
pub type Buffers = BTreeMap<String, Vec<f64>>;

/// Graph leaves for every parameter, captured at the start of a step.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn bind(g: &mut Graph, params: &Params) -> Self {
        let vars = params
            .iter()
            .map(|(name, value)| (name.clone(), g.leaf(value.clone())))
            .collect();
        Self { vars }
    }

    /// A binding over externally created vars; used by tests to alias
    /// specific leaves.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    /// Binds only the parameters under `prefix`, exposing them by their
    /// short names. Lets several submodels share one flat store.
    pub fn bind_prefixed(g: &mut Graph, params: &Params, prefix: &str) -> Self {
        let vars = params
            .iter()
            .filter_map(|(name, value)| {
                name.strip_prefix(prefix)
                    .map(|short| (short.to_string(), g.leaf(value.clone())))
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

// ---- initializers ----

fn uniform(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

pub fn init_linear(params: &mut Params, rng: &mut ChaCha12Rng, prefix: &str, i: usize, o: usize) {
    let k = 1.0 / (i as f64).sqrt();
    params.insert(&format!("{prefix}.w"), uniform(rng, &[i, o], k));
    params.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[o])));
}

pub fn init_conv2d(
    params: &mut Params,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
) {
    let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
    params.insert(
        &format!("{prefix}.w"),
        uniform(rng, &[out_c, in_c, k, k], bound),
    );
    params.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[out_c])));
}

pub fn init_batchnorm(params: &mut Params, buffers: &mut Buffers, prefix: &str, c: usize) {
    params.insert(&format!("{prefix}.gamma"), ArrayD::ones(IxDyn(&[c])));
    params.insert(&format!("{prefix}.beta"), ArrayD::zeros(IxDyn(&[c])));
    buffers.insert(format!("{prefix}.running_mean"), vec![0.0; c]);
    buffers.insert(format!("{prefix}.running_var"), vec![1.0; c]);
}

pub fn init_layernorm(params: &mut Params, prefix: &str, c: usize) {
    params.insert(&format!("{prefix}.gamma"), ArrayD::ones(IxDyn(&[c])));
    params.insert(&format!("{prefix}.beta"), ArrayD::zeros(IxDyn(&[c])));
}

/// LSTM with a single bias vector; gate order i, f, g, o. The forget-gate
/// bias starts at 1.
pub fn init_lstm(params: &mut Params, rng: &mut ChaCha12Rng, prefix: &str, i: usize, h: usize) {
    let k = 1.0 / (h as f64).sqrt();
    params.insert(&format!("{prefix}.w_ih"), uniform(rng, &[i, 4 * h], k));
    params.insert(&format!("{prefix}.w_hh"), uniform(rng, &[h, 4 * h], k));
    let mut b = ArrayD::zeros(IxDyn(&[4 * h]));
    for j in h..2 * h {
        b[[j]] = 1.0;
    }
    params.insert(&format!("{prefix}.b"), b);
}

/// GRU with separate input/hidden biases (the reset gate multiplies the
/// hidden-side bias inside the candidate, so the two are not mergeable);
/// gate order r, z, n.
pub fn init_gru(params: &mut Params, rng: &mut ChaCha12Rng, prefix: &str, i: usize, h: usize) {
    let k = 1.0 / (h as f64).sqrt();
    params.insert(&format!("{prefix}.w_ih"), uniform(rng, &[i, 3 * h], k));
    params.insert(&format!("{prefix}.b_ih"), ArrayD::zeros(IxDyn(&[3 * h])));
    params.insert(&format!("{prefix}.w_hh"), uniform(rng, &[h, 3 * h], k));
    params.insert(&format!("{prefix}.b_hh"), ArrayD::zeros(IxDyn(&[3 * h])));
}

pub fn init_bilstm(params: &mut Params, rng: &mut ChaCha12Rng, prefix: &str, i: usize, h: usize) {
    init_lstm(params, rng, &format!("{prefix}.fwd"), i, h);
    init_lstm(params, rng, &format!("{prefix}.bwd"), i, h);
}

pub fn init_bigru(params: &mut Params, rng: &mut ChaCha12Rng, prefix: &str, i: usize, h: usize) {
    init_gru(params, rng, &format!("{prefix}.fwd"), i, h);
    init_gru(params, rng, &format!("{prefix}.bwd"), i, h);
}

pub fn init_embedding(
    params: &mut Params,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    rows: usize,
    dim: usize,
) {
    params.insert(&format!("{prefix}.table"), uniform(rng, &[rows, dim], 1.0));
}

// ---- layer forward builders ----

pub fn linear(g: &mut Graph, bind: &Binding, prefix: &str, x: Var) -> Var {
    g.linear(
        x,
        bind.var(&format!("{prefix}.w")),
        bind.var(&format!("{prefix}.b")),
    )
}

pub fn conv2d(
    g: &mut Graph,
    bind: &Binding,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    g.conv2d(
        x,
        bind.var(&format!("{prefix}.w")),
        bind.var(&format!("{prefix}.b")),
        stride,
        pad,
    )
}

pub fn layernorm_c(g: &mut Graph, bind: &Binding, prefix: &str, x: Var) -> Var {
    g.layernorm_c(
        x,
        bind.var(&format!("{prefix}.gamma")),
        bind.var(&format!("{prefix}.beta")),
        1e-5,
    )
}

/// Batch norm that also maintains running statistics when training.
pub fn batchnorm(
    g: &mut Graph,
    bind: &Binding,
    buffers: &mut Buffers,
    prefix: &str,
    x: Var,
    train: bool,
) -> Var {
    let gamma = bind.var(&format!("{prefix}.gamma"));
    let beta = bind.var(&format!("{prefix}.beta"));
    if train {
        let (out, mean, var) = g.batchnorm_train(x, gamma, beta, 1e-5);
        let momentum = 0.1;
        let rm = buffers
            .get_mut(&format!("{prefix}.running_mean"))
            .expect("running_mean buffer");
        for (r, m) in rm.iter_mut().zip(&mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let rv = buffers
            .get_mut(&format!("{prefix}.running_var"))
            .expect("running_var buffer");
        for (r, v) in rv.iter_mut().zip(&var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
        out
    } else {
        let mean = buffers[&format!("{prefix}.running_mean")].clone();
        let var = buffers[&format!("{prefix}.running_var")].clone();
        g.batchnorm_eval(x, gamma, beta, &mean, &var, 1e-5)
    }
}

/// Unidirectional LSTM over x (B, T, In) -> (B, T, H).
pub fn lstm(g: &mut Graph, bind: &Binding, prefix: &str, x: Var, hidden: usize) -> Var {
    let shape = g.value(x).shape().to_vec();
    let (b, t, input) = (shape[0], shape[1], shape[2]);
    let x2 = g.reshape(x, &[b * t, input]);
    let xp2 = g.linear(
        x2,
        bind.var(&format!("{prefix}.w_ih")),
        bind.var(&format!("{prefix}.b")),
    );
    let xp = g.reshape(xp2, &[b, t, 4 * hidden]);
    let w_hh = bind.var(&format!("{prefix}.w_hh"));

    let mut h_prev = g.leaf(ArrayD::zeros(IxDyn(&[b, hidden])));
    let mut c_prev = g.leaf(ArrayD::zeros(IxDyn(&[b, hidden])));
    let mut outs = Vec::with_capacity(t);
    for step in 0..t {
        let px = g.slice_t(xp, step);
        let ph = g.matmul(h_prev, w_hh);
        let pre = g.add(px, ph);
        let i_pre = g.slice_cols(pre, 0, hidden);
        let f_pre = g.slice_cols(pre, hidden, 2 * hidden);
        let g_pre = g.slice_cols(pre, 2 * hidden, 3 * hidden);
        let o_pre = g.slice_cols(pre, 3 * hidden, 4 * hidden);
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let cand = g.tanh(g_pre);
        let o = g.sigmoid(o_pre);
        let fc = g.mul(f, c_prev);
        let ig = g.mul(i, cand);
        let c = g.add(fc, ig);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        outs.push(h);
        h_prev = h;
        c_prev = c;
    }
    g.stack_t(&outs)
}

/// Bidirectional LSTM -> (B, T, 2H).
pub fn bilstm(g: &mut Graph, bind: &Binding, prefix: &str, x: Var, hidden: usize) -> Var {
    let fwd = lstm(g, bind, &format!("{prefix}.fwd"), x, hidden);
    let xr = g.reverse_t(x);
    let bwd_rev = lstm(g, bind, &format!("{prefix}.bwd"), xr, hidden);
    let bwd = g.reverse_t(bwd_rev);
    g.concat_last(fwd, bwd)
}

/// Unidirectional GRU over x (B, T, In) -> (B, T, H).
pub fn gru(g: &mut Graph, bind: &Binding, prefix: &str, x: Var, hidden: usize) -> Var {
    let shape = g.value(x).shape().to_vec();
    let (b, t, input) = (shape[0], shape[1], shape[2]);
    let x2 = g.reshape(x, &[b * t, input]);
    let xp2 = g.linear(
        x2,
        bind.var(&format!("{prefix}.w_ih")),
        bind.var(&format!("{prefix}.b_ih")),
    );
    let xp = g.reshape(xp2, &[b, t, 3 * hidden]);
    let w_hh = bind.var(&format!("{prefix}.w_hh"));
    let b_hh = bind.var(&format!("{prefix}.b_hh"));

    let mut h_prev = g.leaf(ArrayD::zeros(IxDyn(&[b, hidden])));
    let mut outs = Vec::with_capacity(t);
    for step in 0..t {
        let px = g.slice_t(xp, step);
        let ph = g.linear(h_prev, w_hh, b_hh);
        let xr = g.slice_cols(px, 0, hidden);
        let xz = g.slice_cols(px, hidden, 2 * hidden);
        let xn = g.slice_cols(px, 2 * hidden, 3 * hidden);
        let hr = g.slice_cols(ph, 0, hidden);
        let hz = g.slice_cols(ph, hidden, 2 * hidden);
        let hn = g.slice_cols(ph, 2 * hidden, 3 * hidden);
        let r_pre = g.add(xr, hr);
        let r = g.sigmoid(r_pre);
        let z_pre = g.add(xz, hz);
        let z = g.sigmoid(z_pre);
        let rhn = g.mul(r, hn);
        let n_pre = g.add(xn, rhn);
        let n = g.tanh(n_pre);
        let neg_z = g.scale(z, -1.0);
        let one_minus_z = g.add_scalar(neg_z, 1.0);
        let zn = g.mul(one_minus_z, n);
        let zh = g.mul(z, h_prev);
        let h = g.add(zn, zh);
        outs.push(h);
        h_prev = h;
    }
    g.stack_t(&outs)
}

/// Bidirectional GRU -> (B, T, 2H).
pub fn bigru(g: &mut Graph, bind: &Binding, prefix: &str, x: Var, hidden: usize) -> Var {
    let fwd = gru(g, bind, &format!("{prefix}.fwd"), x, hidden);
    let xr = g.reverse_t(x);
    let bwd_rev = gru(g, bind, &format!("{prefix}.bwd"), xr, hidden);
    let bwd = g.reverse_t(bwd_rev);
    g.concat_last(fwd, bwd)
}

/// Inverted dropout mask: entries are 0 with probability p, else 1/(1-p).
pub fn dropout_mask(rng: &mut ChaCha12Rng, shape: &[usize], p: f64) -> ArrayD<f64> {
    let keep = 1.0 - p;
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        if rng.random_range(0.0..1.0) < p {
            0.0
        } else {
            1.0 / keep
        }
    })
}
