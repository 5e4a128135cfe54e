//! Convolution, pooling, resampling and normalization ops on
//! (batch, channel, height, width) tensors.
//!
//! Hot loops run over flat slices with precomputed strides; every tensor in
//! the graph is standard-layout by construction.

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn, Slice};

use super::{acc, dims4, Graph, Var};

fn flat(a: &ArrayD<f64>) -> &[f64] {
    a.as_slice().expect("graph tensors are standard layout")
}

fn flat_mut(a: &mut ArrayD<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("graph tensors are standard layout")
}

/// Lowers one sample (C, H, W) into a (C*kh*kw, OH*OW) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let mut cols = Array2::zeros((c * kh * kw, oh * ow));
    let cols_flat = cols.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let out_base = row * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let in_base = ii as usize * w;
                    let dst = &mut cols_flat[out_base + oi * ow..out_base + (oi + 1) * ow];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            *d = xc[in_base + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back to (C, H, W).
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    gx: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let cols_flat = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        let xc = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src_base = row * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let in_base = ii as usize * w;
                    let src = &cols_flat[src_base + oi * ow..src_base + (oi + 1) * ow];
                    for (oj, &s) in src.iter().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            xc[in_base + jj as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// dst[hi, wi] += k * src[hi + di, wi + dj] over the in-bounds region.
fn shift_madd(dst: &mut [f64], src: &[f64], h: usize, w: usize, di: isize, dj: isize, k: f64) {
    let hi_lo = if di < 0 { (-di) as usize } else { 0 };
    let hi_hi = if di > 0 { h - di as usize } else { h };
    let (wj_lo, wj_hi) = if dj < 0 {
        ((-dj) as usize, w)
    } else {
        (0, w - dj as usize)
    };
    if wj_hi <= wj_lo {
        return;
    }
    for hi in hi_lo..hi_hi {
        let si = (hi as isize + di) as usize;
        let d = &mut dst[hi * w + wj_lo..hi * w + wj_hi];
        let s = &src[(si * w) + (wj_lo as isize + dj) as usize
            ..(si * w) + (wj_hi as isize + dj) as usize];
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += k * *sv;
        }
    }
}

/// sum over the in-bounds region of a[hi, wi] * b[hi + di, wi + dj].
fn shift_dot(a: &[f64], b: &[f64], h: usize, w: usize, di: isize, dj: isize) -> f64 {
    let hi_lo = if di < 0 { (-di) as usize } else { 0 };
    let hi_hi = if di > 0 { h - di as usize } else { h };
    let (wj_lo, wj_hi) = if dj < 0 {
        ((-dj) as usize, w)
    } else {
        (0, w - dj as usize)
    };
    if wj_hi <= wj_lo {
        return 0.0;
    }
    let mut acc = 0.0;
    for hi in hi_lo..hi_hi {
        let si = (hi as isize + di) as usize;
        let av = &a[hi * w + wj_lo..hi * w + wj_hi];
        let bv = &b[si * w + (wj_lo as isize + dj) as usize
            ..si * w + (wj_hi as isize + dj) as usize];
        for (x, y) in av.iter().zip(bv) {
            acc += x * y;
        }
    }
    acc
}

impl Graph {
    /// 2-D convolution: x (B,C,H,W), w (O,C,kh,kw), bias (O), square stride,
    /// symmetric zero padding. The 3x3/stride-1/pad-1 case runs a shifted
    /// multiply-add kernel that avoids the patch-matrix blowup at full
    /// spectrogram resolution.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Var {
        if stride == 1 && pad == 1 {
            let ws = self.value(w).shape();
            if ws[2] == 3 && ws[3] == 3 {
                return self.conv2d_3x3_s1p1(x, w, bias);
            }
        }
        self.conv2d_im2col(x, w, bias, stride, pad)
    }

    fn conv2d_3x3_s1p1(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let (bs, c, h, wd) = dims4(self.value(x));
        let ws = self.value(w).shape().to_vec();
        let (oc, kc) = (ws[0], ws[1]);
        assert_eq!(c, kc, "conv2d channel mismatch");
        let plane = h * wd;
        let mut val = ArrayD::zeros(IxDyn(&[bs, oc, h, wd]));
        {
            let xflat = flat(self.value(x));
            let wflat = flat(self.value(w));
            let bias_v: Vec<f64> = self.value(bias).iter().copied().collect();
            let vflat = flat_mut(&mut val);
            for b in 0..bs {
                let xs = &xflat[b * c * plane..(b + 1) * c * plane];
                let os = &mut vflat[b * oc * plane..(b + 1) * oc * plane];
                for o in 0..oc {
                    let dst = &mut os[o * plane..(o + 1) * plane];
                    dst.fill(bias_v[o]);
                    for ci in 0..c {
                        let src = &xs[ci * plane..(ci + 1) * plane];
                        let wbase = (o * c + ci) * 9;
                        for ki in 0..3usize {
                            for kj in 0..3usize {
                                let k = wflat[wbase + ki * 3 + kj];
                                if k != 0.0 {
                                    shift_madd(
                                        dst,
                                        src,
                                        h,
                                        wd,
                                        ki as isize - 1,
                                        kj as isize - 1,
                                        k,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
        let out_id = self.next_id();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out_id].take().expect("upstream grad");
                let xv = &vals[x.0];
                let (bs, c, h, wd) = dims4(xv);
                let plane = h * wd;
                let xflat = flat(xv);
                let wflat = flat(&vals[w.0]);
                let gflat = flat(&g);
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let mut gw = vec![0.0_f64; oc * c * 9];
                let mut gb = vec![0.0_f64; oc];
                {
                    let gxf = flat_mut(&mut gx);
                    for b in 0..bs {
                        let xs = &xflat[b * c * plane..(b + 1) * c * plane];
                        let gs = &gflat[b * oc * plane..(b + 1) * oc * plane];
                        let gxs = &mut gxf[b * c * plane..(b + 1) * c * plane];
                        for o in 0..oc {
                            let gout = &gs[o * plane..(o + 1) * plane];
                            gb[o] += gout.iter().sum::<f64>();
                            for ci in 0..c {
                                let src = &xs[ci * plane..(ci + 1) * plane];
                                let gxc = &mut gxs[ci * plane..(ci + 1) * plane];
                                let wbase = (o * c + ci) * 9;
                                for ki in 0..3usize {
                                    for kj in 0..3usize {
                                        let di = ki as isize - 1;
                                        let dj = kj as isize - 1;
                                        let k = wflat[wbase + ki * 3 + kj];
                                        // d out[p] / d x[p + (di,dj)] = k
                                        if k != 0.0 {
                                            shift_madd(gxc, gout, h, wd, -di, -dj, k);
                                        }
                                        gw[wbase + ki * 3 + kj] +=
                                            shift_dot(gout, src, h, wd, di, dj);
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, x.0, gx);
                acc(
                    grads,
                    w.0,
                    ArrayD::from_shape_vec(IxDyn(&[oc, c, 3, 3]), gw).unwrap(),
                );
                acc(
                    grads,
                    bias.0,
                    ArrayD::from_shape_vec(IxDyn(&[oc]), gb).unwrap(),
                );
            })),
        )
    }

    fn conv2d_im2col(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (bs, c, h, wd) = dims4(self.value(x));
        let ws = self.value(w).shape().to_vec();
        let (oc, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c, kc, "conv2d channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let wmat = super::reshape_std(self.value(w), &[oc, kc * kh * kw]);
        let wmat2 = wmat.view().into_dimensionality::<Ix2>().unwrap();
        let mut val = ArrayD::zeros(IxDyn(&[bs, oc, oh, ow]));
        {
            let xflat = flat(self.value(x));
            let bias_v: Vec<f64> = self.value(bias).iter().copied().collect();
            let vflat = flat_mut(&mut val);
            let sample = c * h * wd;
            let out_sample = oc * oh * ow;
            for b in 0..bs {
                let cols = im2col(
                    &xflat[b * sample..(b + 1) * sample],
                    c,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                );
                let out = wmat2.dot(&cols); // (O, OH*OW)
                let oflat = out.as_slice().expect("standard layout");
                let dst = &mut vflat[b * out_sample..(b + 1) * out_sample];
                for o in 0..oc {
                    let bo = bias_v[o];
                    let src = &oflat[o * oh * ow..(o + 1) * oh * ow];
                    let d = &mut dst[o * oh * ow..(o + 1) * oh * ow];
                    for (dv, &sv) in d.iter_mut().zip(src) {
                        *dv = sv + bo;
                    }
                }
            }
        }

        let out_id = self.next_id();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out_id].take().expect("upstream grad");
                let xv = &vals[x.0];
                let (bs, _, h, wd) = dims4(xv);
                let wmat = super::reshape_std(&vals[w.0], &[oc, kc * kh * kw]);
                let wmat2 = wmat.view().into_dimensionality::<Ix2>().unwrap();
                let xflat = flat(xv);
                let gflat = flat(&g);

                let mut gw = Array2::<f64>::zeros((oc, kc * kh * kw));
                let mut gb = vec![0.0_f64; oc];
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let gxflat = flat_mut(&mut gx);
                let sample = kc * h * wd;
                let out_sample = oc * oh * ow;
                for b in 0..bs {
                    let gout_slice = &gflat[b * out_sample..(b + 1) * out_sample];
                    let gout =
                        ndarray::ArrayView2::from_shape((oc, oh * ow), gout_slice).unwrap();
                    for o in 0..oc {
                        gb[o] += gout_slice[o * oh * ow..(o + 1) * oh * ow]
                            .iter()
                            .sum::<f64>();
                    }
                    let cols = im2col(
                        &xflat[b * sample..(b + 1) * sample],
                        kc,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        pad,
                        oh,
                        ow,
                    );
                    gw += &gout.dot(&cols.t());
                    let gcols = wmat2.t().dot(&gout);
                    col2im(
                        &gcols,
                        &mut gxflat[b * sample..(b + 1) * sample],
                        kc,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        pad,
                        oh,
                        ow,
                    );
                }
                acc(grads, x.0, gx);
                acc(
                    grads,
                    w.0,
                    super::reshape_std(&gw.into_dyn(), &[oc, kc, kh, kw]),
                );
                acc(
                    grads,
                    bias.0,
                    ArrayD::from_shape_vec(IxDyn(&[oc]), gb).unwrap(),
                );
            })),
        )
    }

    /// Max pooling over the width (last) axis only, window = stride = `pw`.
    pub fn maxpool_w(&mut self, x: Var, pw: usize) -> Var {
        let (bs, c, h, w) = dims4(self.value(x));
        let ow = w / pw;
        let mut val = ArrayD::zeros(IxDyn(&[bs, c, h, ow]));
        let rows = bs * c * h;
        let mut argmax = vec![0usize; rows * ow];
        {
            let xflat = flat(self.value(x));
            let vflat = flat_mut(&mut val);
            for r in 0..rows {
                let src = &xflat[r * w..(r + 1) * w];
                let dst = &mut vflat[r * ow..(r + 1) * ow];
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_j = oj * pw;
                    for (dj, &v) in src[oj * pw..(oj + 1) * pw].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_j = oj * pw + dj;
                        }
                    }
                    dst[oj] = best;
                    argmax[r * ow + oj] = best_j;
                }
            }
        }
        let out_id = self.next_id();
        let src_shape: Vec<usize> = self.value(x).shape().to_vec();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out_id].take().expect("upstream grad");
                let gflat = flat(&g);
                let slot = grads[x.0].get_or_insert_with(|| ArrayD::zeros(IxDyn(&src_shape)));
                let sflat = flat_mut(slot);
                for r in 0..rows {
                    for oj in 0..ow {
                        sflat[r * w + argmax[r * ow + oj]] += gflat[r * ow + oj];
                    }
                }
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling of H and W.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = dims4(self.value(x));
        let mut val = ArrayD::zeros(IxDyn(&[bs, c, 2 * h, 2 * w]));
        {
            let xflat = flat(self.value(x));
            let vflat = flat_mut(&mut val);
            let planes = bs * c;
            for p in 0..planes {
                let src = &xflat[p * h * w..(p + 1) * h * w];
                let dst = &mut vflat[p * 4 * h * w..(p + 1) * 4 * h * w];
                for hi in 0..h {
                    let srow = &src[hi * w..(hi + 1) * w];
                    for dh in 0..2 {
                        let drow = &mut dst[(2 * hi + dh) * 2 * w..(2 * hi + dh + 1) * 2 * w];
                        for (wi, &v) in srow.iter().enumerate() {
                            drow[2 * wi] = v;
                            drow[2 * wi + 1] = v;
                        }
                    }
                }
            }
        }
        let out_id = self.next_id();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out_id].take().expect("upstream grad");
                let gflat = flat(&g);
                let mut gx = ArrayD::zeros(IxDyn(&[bs, c, h, w]));
                {
                    let dflat = flat_mut(&mut gx);
                    let planes = bs * c;
                    for p in 0..planes {
                        let src = &gflat[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut dflat[p * h * w..(p + 1) * h * w];
                        for hi in 0..h {
                            let drow = &mut dst[hi * w..(hi + 1) * w];
                            for dh in 0..2 {
                                let srow =
                                    &src[(2 * hi + dh) * 2 * w..(2 * hi + dh + 1) * 2 * w];
                                for (wi, d) in drow.iter_mut().enumerate() {
                                    *d += srow[2 * wi] + srow[2 * wi + 1];
                                }
                            }
                        }
                    }
                }
                acc(grads, x.0, gx);
            })),
        )
    }

    /// Zero-pads H and W up to (th, tw) on the bottom/right.
    pub fn pad_hw(&mut self, x: Var, th: usize, tw: usize) -> Var {
        let (bs, c, h, w) = dims4(self.value(x));
        assert!(th >= h && tw >= w);
        let mut val = ArrayD::zeros(IxDyn(&[bs, c, th, tw]));
        val.slice_axis_mut(Axis(2), Slice::from(..h))
            .slice_axis_mut(Axis(3), Slice::from(..w))
            .assign(self.value(x));
        let out_id = self.next_id();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out_id].take().expect("upstream grad");
                let gx = g
                    .slice_axis(Axis(2), Slice::from(..h))
                    .slice_axis(Axis(3), Slice::from(..w))
                    .as_standard_layout()
                    .into_owned();
                acc(grads, x.0, gx);
            })),
        )
    }

    /// Crops H and W down to (th, tw), keeping the top/left corner.
    pub fn crop_hw(&mut self, x: Var, th: usize, tw: usize) -> Var {
        let (_bs, _c, h, w) = dims4(self.value(x));
        assert!(th <= h && tw <= w);
        let val = self
            .value(x)
            .slice_axis(Axis(2), Slice::from(..th))
            .slice_axis(Axis(3), Slice::from(..tw))
            .as_standard_layout()
            .into_owned();
        let out_id = self.next_id();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out_id].take().expect("upstream grad");
                let mut gx = ArrayD::zeros(IxDyn(&[g.shape()[0], g.shape()[1], h, w]));
                gx.slice_axis_mut(Axis(2), Slice::from(..th))
                    .slice_axis_mut(Axis(3), Slice::from(..tw))
                    .assign(&g);
                acc(grads, x.0, gx);
            })),
        )
    }

    /// Concatenates two (B, C, H, W) tensors along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let val = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("compatible shapes")
            .as_standard_layout()
            .into_owned();
        let split = self.value(a).shape()[1];
        let out_id = self.next_id();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out_id].take().expect("upstream grad");
                let ga = g
                    .slice_axis(Axis(1), Slice::from(..split))
                    .as_standard_layout()
                    .into_owned();
                let gb = g
                    .slice_axis(Axis(1), Slice::from(split..))
                    .as_standard_layout()
                    .into_owned();
                acc(grads, a.0, ga);
                acc(grads, b.0, gb);
            })),
        )
    }

    /// Batch normalization in training mode: statistics over (B, H, W) per
    /// channel. Returns the normalized output plus the biased batch
    /// statistics so callers can maintain running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let (bs, c, h, w) = dims4(self.value(x));
        let n = (bs * h * w) as f64;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        {
            let xflat = flat(self.value(x));
            for ci in 0..c {
                let mut s = 0.0;
                for b in 0..bs {
                    let base = (b * c + ci) * plane;
                    s += xflat[base..base + plane].iter().sum::<f64>();
                }
                mean[ci] = s / n;
                let mut v = 0.0;
                for b in 0..bs {
                    let base = (b * c + ci) * plane;
                    for &x in &xflat[base..base + plane] {
                        let d = x - mean[ci];
                        v += d * d;
                    }
                }
                var[ci] = v / n;
            }
        }
        let mut xhat = self.value(x).clone();
        {
            let xh = flat_mut(&mut xhat);
            for b in 0..bs {
                for ci in 0..c {
                    let m = mean[ci];
                    let istd = 1.0 / (var[ci] + eps).sqrt();
                    let base = (b * c + ci) * plane;
                    for v in &mut xh[base..base + plane] {
                        *v = (*v - m) * istd;
                    }
                }
            }
        }
        let mut val = xhat.clone();
        {
            let gv: Vec<f64> = self.value(gamma).iter().copied().collect();
            let bv: Vec<f64> = self.value(beta).iter().copied().collect();
            let vf = flat_mut(&mut val);
            for b in 0..bs {
                for ci in 0..c {
                    let base = (b * c + ci) * plane;
                    for v in &mut vf[base..base + plane] {
                        *v = gv[ci] * *v + bv[ci];
                    }
                }
            }
        }
        let out_id = self.next_id();
        let var_b = var.clone();
        let out = self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out_id].take().expect("upstream grad");
                let gammav: Vec<f64> = vals[gamma.0].iter().copied().collect();
                let (bs, c, h, w) = dims4(&g);
                let plane = h * w;
                let n = (bs * plane) as f64;
                let gflat = flat(&g);
                let xhflat = flat(&xhat);
                let mut gx = ArrayD::zeros(g.raw_dim());
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                {
                    let gxf = flat_mut(&mut gx);
                    for ci in 0..c {
                        let istd = 1.0 / (var_b[ci] + eps).sqrt();
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xhat = 0.0;
                        for b in 0..bs {
                            let base = (b * c + ci) * plane;
                            for i in base..base + plane {
                                sum_gy += gflat[i];
                                sum_gy_xhat += gflat[i] * xhflat[i];
                            }
                        }
                        ggamma[ci] = sum_gy_xhat;
                        gbeta[ci] = sum_gy;
                        let gamma_istd = gammav[ci] * istd;
                        let m_gy = sum_gy / n;
                        let m_gyx = sum_gy_xhat / n;
                        for b in 0..bs {
                            let base = (b * c + ci) * plane;
                            for i in base..base + plane {
                                gxf[i] =
                                    gamma_istd * (gflat[i] - m_gy - xhflat[i] * m_gyx);
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
        );
        (out, mean, var)
    }

    /// Batch normalization in inference mode with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let (bs, c, h, w) = dims4(self.value(x));
        let plane = h * w;
        let mut val = self.value(x).clone();
        {
            let gv: Vec<f64> = self.value(gamma).iter().copied().collect();
            let bv: Vec<f64> = self.value(beta).iter().copied().collect();
            let vf = flat_mut(&mut val);
            for b in 0..bs {
                for ci in 0..c {
                    let m = mean[ci];
                    let istd = 1.0 / (var[ci] + eps).sqrt();
                    let base = (b * c + ci) * plane;
                    for v in &mut vf[base..base + plane] {
                        *v = (*v - m) * istd * gv[ci] + bv[ci];
                    }
                }
            }
        }
        let out_id = self.next_id();
        let mean = mean.to_vec();
        let var = var.to_vec();
        self.push(
            val,
            Some(Box::new(move |vals, grads| {
                let g = grads[out_id].take().expect("upstream grad");
                let gammav: Vec<f64> = vals[gamma.0].iter().copied().collect();
                let xflat = flat(&vals[x.0]);
                let (bs, c, h, w) = dims4(&g);
                let plane = h * w;
                let gflat = flat(&g);
                let mut gx = ArrayD::zeros(g.raw_dim());
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                {
                    let gxf = flat_mut(&mut gx);
                    for ci in 0..c {
                        let istd = 1.0 / (var[ci] + eps).sqrt();
                        for b in 0..bs {
                            let base = (b * c + ci) * plane;
                            for i in base..base + plane {
                                let xh = (xflat[i] - mean[ci]) * istd;
                                ggamma[ci] += gflat[i] * xh;
                                gbeta[ci] += gflat[i];
                                gxf[i] = gflat[i] * gammav[ci] * istd;
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
}
