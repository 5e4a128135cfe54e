//! The separation network: convolutional encoder, dual-path recurrent
//! bottleneck, convolutional decoder with skip connections, FiLM
//! conditioning after every convolutional block, sigmoid magnitude mask
//! reapplied with the mixture phase.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{build_dprnn, init_dprnn, DprnnConfig, QueryEmbedding, TextEncoder, TextQuery};
use crate::audio::{istft, stft, ComplexSpectrogram, StftParams, Waveform};
use crate::nn::{self, Binding, Params};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Sigmoid magnitude mask in [0,1], combined with the mixture phase.
    #[default]
    MagnitudeMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationConfig {
    pub sample_rate: u32,
    pub stft: StftParams,
    /// Encoder block channel widths; the decoder mirrors them, which keeps
    /// skip connections compatible by construction.
    pub widths: Vec<usize>,
    /// Dual-path bottleneck; `None` ablates the block to an identity.
    pub dprnn: Option<DprnnConfig>,
    pub embedding_dim: usize,
    #[serde(default)]
    pub mask_kind: MaskKind,
}

impl SeparationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate == 16_000 || self.sample_rate == 32_000) {
            return Err(Error::Config(format!(
                "sample rate {} not supported (expected 16000 or 32000)",
                self.sample_rate
            )));
        }
        if self.widths.is_empty() {
            return Err(Error::Config("need at least one encoder block".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        if let Some(d) = &self.dprnn {
            d.validate()?;
        }
        let r = self.stft.resolve(self.sample_rate)?;
        if !r.supports_reconstruction() {
            return Err(Error::Config(
                "stft hop must be at most half the window for reconstruction".into(),
            ));
        }
        Ok(())
    }

    fn depth(&self) -> usize {
        self.widths.len()
    }
}

/// Text-conditioned separator with immutable-after-load parameters;
/// concurrent inference is safe, training is single-writer.
#[derive(Debug, Clone)]
pub struct SeparationModel {
    pub config: SeparationConfig,
    pub params: Params,
}

impl SeparationModel {
    pub fn new(config: SeparationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let d = config.embedding_dim;
        let mut in_c = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            nn::init_conv2d(&mut params, &mut rng, &format!("enc{i}.conv"), w, in_c, 3);
            nn::init_linear(&mut params, &mut rng, &format!("enc{i}.film"), d, 2 * w);
            nn::init_conv2d(&mut params, &mut rng, &format!("enc{i}.down"), w, w, 3);
            in_c = w;
        }
        if let Some(cfg) = &config.dprnn {
            init_dprnn(&mut params, &mut rng, "dprnn", in_c, cfg);
        }
        for i in (0..config.widths.len()).rev() {
            let out_c = if i > 0 {
                config.widths[i - 1]
            } else {
                config.widths[0]
            };
            nn::init_conv2d(
                &mut params,
                &mut rng,
                &format!("dec{i}.conv"),
                out_c,
                2 * config.widths[i],
                3,
            );
            nn::init_linear(&mut params, &mut rng, &format!("dec{i}.film"), d, 2 * out_c);
        }
        nn::init_conv2d(&mut params, &mut rng, "out.conv", 1, config.widths[0], 3);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: SeparationConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let fresh = Self::new(config.clone(), 0)?;
        for name in fresh.params.names() {
            if !params.contains(name) {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            }
            if params.get(name).shape() != fresh.params.get(name).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config wants {:?}",
                    params.get(name).shape(),
                    fresh.params.get(name).shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.scalar_count()
    }

    /// Test hook: zeroes the output convolution and pins its bias, forcing
    /// the mask to sigmoid(bias) everywhere (use +-1e6 for exact 1/0).
    pub fn force_mask_bias(&mut self, bias: f64) {
        self.params.get_mut("out.conv.w").fill(0.0);
        self.params.get_mut("out.conv.b").fill(bias);
    }

    /// Builds the mask head over a batch of magnitude spectrograms
    /// (B, T, F) with per-item query embeddings (B, D). Returns the mask
    /// node (B, T, F) with values in [0, 1].
    pub fn build_mask(&self, g: &mut Graph, bind: &Binding, mags: &ArrayD<f64>, emb: Var) -> Var {
        let shape = mags.shape();
        let (b, t, f) = (shape[0], shape[1], shape[2]);
        let depth = self.config.depth();
        let unit = 1usize << depth;
        let tp = t.div_ceil(unit) * unit;
        let fp = f.div_ceil(unit) * unit;

        let mut x4 = ArrayD::zeros(IxDyn(&[b, 1, t, f]));
        for bi in 0..b {
            for ti in 0..t {
                for fi in 0..f {
                    x4[[bi, 0, ti, fi]] = mags[[bi, ti, fi]];
                }
            }
        }
        let mut x = g.leaf(x4);
        x = g.pad_hw(x, tp, fp);

        let film_site = |g: &mut Graph, prefix: &str, x: Var, emb: Var, c: usize| -> Var {
            let gb = nn::linear(g, bind, &format!("{prefix}.film"), emb);
            let gamma_raw = g.slice_cols(gb, 0, c);
            let gamma = g.add_scalar(gamma_raw, 1.0);
            let beta = g.slice_cols(gb, c, 2 * c);
            g.film(x, gamma, beta)
        };

        let mut skips = Vec::with_capacity(depth);
        for (i, &w) in self.config.widths.iter().enumerate() {
            let conv = nn::conv2d(g, bind, &format!("enc{i}.conv"), x, 1, 1);
            let act = g.relu(conv);
            let conditioned = film_site(g, &format!("enc{i}"), act, emb, w);
            skips.push(conditioned);
            let down = nn::conv2d(g, bind, &format!("enc{i}.down"), conditioned, 2, 1);
            x = g.relu(down);
        }

        if let Some(cfg) = &self.config.dprnn {
            x = build_dprnn(g, bind, "dprnn", x, cfg);
        }

        let mut y = x;
        for i in (0..depth).rev() {
            let up = g.upsample2(y);
            let z = g.concat_c(up, skips[i]);
            let conv = nn::conv2d(g, bind, &format!("dec{i}.conv"), z, 1, 1);
            let act = g.relu(conv);
            let out_c = if i > 0 {
                self.config.widths[i - 1]
            } else {
                self.config.widths[0]
            };
            y = film_site(g, &format!("dec{i}"), act, emb, out_c);
        }

        let logits = nn::conv2d(g, bind, "out.conv", y, 1, 1);
        let mask4 = g.sigmoid(logits);
        let cropped = g.crop_hw(mask4, t, f);
        g.reshape(cropped, &[b, t, f])
    }

    /// Masks one mixture spectrogram for one query embedding. The output
    /// magnitude never exceeds the input magnitude; the phase is reused.
    pub fn separation_forward(
        &self,
        mixture: &ComplexSpectrogram,
        emb: &QueryEmbedding,
    ) -> Result<ComplexSpectrogram> {
        if mixture.sample_rate != self.config.sample_rate {
            return Err(Error::Config(format!(
                "spectrogram at {} Hz, model configured for {} Hz",
                mixture.sample_rate, self.config.sample_rate
            )));
        }
        if mixture.params != self.config.stft {
            return Err(Error::Config(
                "spectrogram params do not match the model stft config".into(),
            ));
        }
        if emb.vector.len() != self.config.embedding_dim {
            return Err(Error::Config(format!(
                "embedding dim {} vs configured {}",
                emb.vector.len(),
                self.config.embedding_dim
            )));
        }
        let (t, f) = (mixture.frames(), mixture.bins());
        let mut mags = ArrayD::zeros(IxDyn(&[1, t, f]));
        for ti in 0..t {
            for fi in 0..f {
                mags[[0, ti, fi]] = mixture.values[[ti, fi]].norm();
            }
        }
        let mut g = Graph::new();
        let bind = Binding::bind(&mut g, &self.params);
        let emb_var = g.leaf(ArrayD::from_shape_vec(
            IxDyn(&[1, emb.vector.len()]),
            emb.vector.clone(),
        )?);
        let mask = self.build_mask(&mut g, &bind, &mags, emb_var);
        let mask_val = g.value(mask);

        let mut out = mixture.clone();
        for ti in 0..t {
            for fi in 0..f {
                out.values[[ti, fi]] *= mask_val[[0, ti, fi]];
            }
        }
        Ok(out)
    }

    /// Full waveform-to-waveform separation for one query.
    pub fn separate(
        &self,
        x: &Waveform,
        q: &TextQuery,
        enc: &dyn TextEncoder,
    ) -> Result<Waveform> {
        if x.sample_rate() != self.config.sample_rate {
            return Err(Error::InvalidInput(format!(
                "waveform at {} Hz, model configured for {} Hz",
                x.sample_rate(),
                self.config.sample_rate
            )));
        }
        let emb = enc.encode(q)?;
        let spec = stft(x, &self.config.stft)?;
        let masked = self.separation_forward(&spec, &emb)?;
        istft(&masked)
    }
}

impl From<ndarray::ShapeError> for Error {
    fn from(e: ndarray::ShapeError) -> Self {
        Error::Shape(e.to_string())
    }
}
