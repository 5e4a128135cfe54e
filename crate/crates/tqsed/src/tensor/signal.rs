//! Differentiable inverse STFT.
//!
//! The inverse transform is linear in the spectrogram's real and imaginary
//! parts, so its backward pass is the adjoint map: scatter the waveform
//! gradient through the overlap-add normalization, window each frame, and
//! take a forward real FFT with double weight on the interior bins.

use ndarray::{ArrayD, IxDyn};
use realfft::num_complex::Complex64;
use realfft::RealFftPlanner;

use super::{acc, Graph, Var};
use crate::audio::{ola_weights, ResolvedStft};

/// Framing geometry shared by the forward and backward passes.
#[derive(Debug, Clone)]
pub struct SpecGeometry {
    pub stft: ResolvedStft,
    pub source_length: usize,
}

impl SpecGeometry {
    pub fn frames(&self) -> usize {
        self.stft.frames_for(self.source_length)
    }

    pub fn bins(&self) -> usize {
        self.stft.bins()
    }
}

impl Graph {
    /// Inverse STFT of a batch: `re`/`im` are (B, T, F) nodes, output is
    /// (B, N) waveforms of `geom.source_length` samples each. DC and
    /// Nyquist imaginary parts are ignored (treated as zero), matching the
    /// audio-module inverse.
    pub fn istft_batch(&mut self, re: Var, im: Var, geom: &SpecGeometry) -> Var {
        let shape = self.value(re).shape().to_vec();
        assert_eq!(shape, self.value(im).shape(), "re/im shape mismatch");
        let (bs, frames, bins) = (shape[0], shape[1], shape[2]);
        assert_eq!(frames, geom.frames(), "frame count mismatch");
        assert_eq!(bins, geom.bins(), "bin count mismatch");
        let r = geom.stft;
        let n = geom.source_length;
        let pad = r.window / 2;
        let window: Vec<f64> = hann(r.window);
        let den = ola_weights(&r, n);

        let mut planner = RealFftPlanner::<f64>::new();
        let ifft = planner.plan_fft_inverse(r.fft);
        let mut spectrum = ifft.make_input_vec();
        let mut frame = ifft.make_output_vec();
        let scale = 1.0 / r.fft as f64;

        let mut val = ArrayD::zeros(IxDyn(&[bs, n]));
        {
            let rev = self.value(re);
            let imv = self.value(im);
            for b in 0..bs {
                let mut num = vec![0.0_f64; n + 2 * pad + r.window];
                for t in 0..frames {
                    for k in 0..bins {
                        spectrum[k] = Complex64::new(rev[[b, t, k]], imv[[b, t, k]]);
                    }
                    spectrum[0].im = 0.0;
                    if r.fft.is_multiple_of(2) {
                        spectrum[bins - 1].im = 0.0;
                    }
                    ifft.process(&mut spectrum, &mut frame)
                        .expect("planned sizes");
                    let start = t * r.hop;
                    for (j, &w) in window.iter().enumerate() {
                        num[start + j] += w * frame[j] * scale;
                    }
                }
                for m in 0..n {
                    let d = den[m];
                    val[[b, m]] = if d > 1e-12 { num[pad + m] / d } else { 0.0 };
                }
            }
        }

        let out_id = self.next_id();
        let geom = geom.clone();
        self.push(
            val,
            Some(Box::new(move |_, grads| {
                let g = grads[out_id].take().expect("upstream grad");
                let r = geom.stft;
                let n = geom.source_length;
                let pad = r.window / 2;
                let frames = geom.frames();
                let bins = geom.bins();
                let window = hann(r.window);
                let den = ola_weights(&r, n);
                let bs = g.shape()[0];

                let mut planner = RealFftPlanner::<f64>::new();
                let rfft = planner.plan_fft_forward(r.fft);
                let mut buf = rfft.make_input_vec();
                let mut spec = rfft.make_output_vec();
                let inv_fft = 1.0 / r.fft as f64;

                let mut gre = ArrayD::zeros(IxDyn(&[bs, frames, bins]));
                let mut gim = ArrayD::zeros(IxDyn(&[bs, frames, bins]));
                for b in 0..bs {
                    // Gradient w.r.t. the overlap-add numerator.
                    let mut gnum = vec![0.0_f64; n + 2 * pad + r.window];
                    for m in 0..n {
                        if den[m] > 1e-12 {
                            gnum[pad + m] = g[[b, m]] / den[m];
                        }
                    }
                    for t in 0..frames {
                        let start = t * r.hop;
                        for (j, &w) in window.iter().enumerate() {
                            buf[j] = w * gnum[start + j] * inv_fft;
                        }
                        buf[r.window..].fill(0.0);
                        rfft.process(&mut buf, &mut spec).expect("planned sizes");
                        for k in 0..bins {
                            let c =
                                if k == 0 || (r.fft.is_multiple_of(2) && k == bins - 1) {
                                    1.0
                                } else {
                                    2.0
                                };
                            gre[[b, t, k]] = c * spec[k].re;
                            // DC/Nyquist imaginary inputs never reach the
                            // output, so their gradient stays zero.
                            gim[[b, t, k]] =
                                if k == 0 || (r.fft.is_multiple_of(2) && k == bins - 1) {
                                    0.0
                                } else {
                                    c * spec[k].im
                                };
                        }
                    }
                }
                acc(grads, re.0, gre);
                acc(grads, im.0, gim);
            })),
        )
    }
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| {
            let x = std::f64::consts::TAU * n as f64 / len as f64;
            0.5 * (1.0 - x.cos())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::testutil::rand_array;
    use super::*;
    use crate::audio::StftParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_geom() -> SpecGeometry {
        // 8-sample window, 4-sample hop, fft 8 at a nominal 16 kHz rate.
        let p = StftParams {
            window_seconds: 8.0 / 16_000.0,
            hop_seconds: 4.0 / 16_000.0,
            window_kind: crate::audio::WindowKind::Hann,
            fft_size: Some(8),
        };
        SpecGeometry {
            stft: p.resolve(16_000).unwrap(),
            source_length: 20,
        }
    }

    #[test]
    fn istft_op_matches_audio_module_inverse() {
        use crate::audio::{istft, stft, Waveform};
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let samples: Vec<f64> = (0..2000)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        let w = Waveform::new(samples, 16_000).unwrap();
        let p = StftParams::new(0.016, 0.008);
        let spec = stft(&w, &p).unwrap();
        let reference = istft(&spec).unwrap();

        let geom = SpecGeometry {
            stft: p.resolve(16_000).unwrap(),
            source_length: w.len(),
        };
        let (frames, bins) = (spec.frames(), spec.bins());
        let mut re = ArrayD::zeros(IxDyn(&[1, frames, bins]));
        let mut im = ArrayD::zeros(IxDyn(&[1, frames, bins]));
        for t in 0..frames {
            for k in 0..bins {
                re[[0, t, k]] = spec.values[[t, k]].re;
                im[[0, t, k]] = spec.values[[t, k]].im;
            }
        }
        let mut g = Graph::new();
        let rv = g.leaf(re);
        let iv = g.leaf(im);
        let y = g.istft_batch(rv, iv, &geom);
        for (a, b) in g.value(y).iter().zip(reference.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn istft_adjoint_satisfies_dot_product_identity() {
        // <A x, y> == <x, A^T y> for the linear map A = istft.
        let geom = small_geom();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let re = rand_array(&mut rng, &[2, geom.frames(), geom.bins()]);
        let im = rand_array(&mut rng, &[2, geom.frames(), geom.bins()]);
        let y = rand_array(&mut rng, &[2, geom.source_length]);

        let mut g = Graph::new();
        let rv = g.leaf(re.clone());
        let iv = g.leaf(im.clone());
        let out = g.istft_batch(rv, iv, &geom);
        let ax_dot_y: f64 = g
            .value(out)
            .iter()
            .zip(y.iter())
            .map(|(a, b)| a * b)
            .sum();

        // Drive the adjoint by seeding the output gradient with y.
        let weighted = g.mul_const(out, &y);
        let loss = g.mean_all(weighted);
        g.backward(loss);
        let scale = (2 * geom.source_length) as f64; // undo the mean
        let gre = g.grad(rv).unwrap() * scale;
        let gim = g.grad(iv).unwrap() * scale;
        let mut x_dot_aty = 0.0;
        for (a, b) in gre.iter().zip(re.iter()) {
            x_dot_aty += a * b;
        }
        for (a, b) in gim.iter().zip(im.iter()) {
            // DC/Nyquist imaginary parts are outside the map's domain.
            x_dot_aty += a * b;
        }
        assert!(
            (ax_dot_y - x_dot_aty).abs() < 1e-9 * (1.0 + ax_dot_y.abs()),
            "<Ax,y>={ax_dot_y} vs <x,A'y>={x_dot_aty}"
        );
    }

    #[test]
    fn istft_gradient_matches_finite_differences() {
        let geom = small_geom();
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let re = rand_array(&mut rng, &[1, geom.frames(), geom.bins()]);
        let im = rand_array(&mut rng, &[1, geom.frames(), geom.bins()]);
        let target = rand_array(&mut rng, &[1, geom.source_length]);
        super::super::testutil::check_grads(
            &move |g, vars| {
                let y = g.istft_batch(vars[0], vars[1], &geom);
                let d = g.sub_const(y, &target);
                let sq = g.square(d);
                g.mean_all(sq)
            },
            &[re, im],
            1e-5,
        );
    }
}
