//! Text-conditioned source separation: a frequency-domain encoder/decoder
//! with a dual-path recurrent bottleneck, conditioned on query embeddings
//! through feature-wise linear modulation, predicting a magnitude mask that
//! is reapplied with the mixture phase.

mod model;

pub use model::{MaskKind, SeparationConfig, SeparationModel};

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::nn::{self, Binding, Params};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

/// A text query: an event label or caption.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextQuery(String);

impl TextQuery {
    pub fn new(text: &str) -> Result<Self> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(Error::InvalidInput("empty text query".into()));
        }
        Ok(Self(trimmed.to_string()))
    }

    pub fn text(&self) -> &str {
        &self.0
    }

    /// Case-folded form used for lookup.
    pub fn normalized(&self) -> String {
        self.0.to_lowercase()
    }
}

/// Dense query representation produced by a text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub vector: Vec<f64>,
    pub encoder_id: String,
}

/// Deterministic text-to-embedding interface. Same text, same vector.
pub trait TextEncoder {
    fn encoder_id(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    fn encode(&self, q: &TextQuery) -> Result<QueryEmbedding>;
}

/// Trainable lookup-table encoder over a closed query vocabulary: one
/// embedding row per known query string, learned jointly with the separator.
/// A pretrained joint-embedding encoder can replace it behind the same
/// trait without touching the conditioning pathway.
#[derive(Debug, Clone)]
pub struct LookupTextEncoder {
    id: String,
    dim: usize,
    labels: Vec<String>,
    index: BTreeMap<String, usize>,
    /// Single entry `encoder.table` of shape (V, D).
    pub params: Params,
}

impl LookupTextEncoder {
    pub fn new(queries: &[String], dim: usize, seed: u64) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::Config("encoder needs at least one query".into()));
        }
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        let mut labels = Vec::new();
        let mut index = BTreeMap::new();
        for q in queries {
            let norm = TextQuery::new(q)?.normalized();
            if index.contains_key(&norm) {
                return Err(Error::Config(format!("duplicate query '{norm}'")));
            }
            index.insert(norm.clone(), labels.len());
            labels.push(norm);
        }
        let mut params = Params::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        nn::init_embedding(&mut params, &mut rng, "encoder", labels.len(), dim);
        Ok(Self {
            id: format!("lookup-v1-d{dim}"),
            dim,
            labels,
            index,
            params,
        })
    }

    /// Rebuilds from checkpoint pieces.
    pub fn from_parts(labels: Vec<String>, dim: usize, params: Params) -> Result<Self> {
        let table = params.get("encoder.table");
        if table.shape() != [labels.len(), dim] {
            return Err(Error::Checkpoint(format!(
                "encoder table is {:?}, vocabulary wants ({}, {dim})",
                table.shape(),
                labels.len()
            )));
        }
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Ok(Self {
            id: format!("lookup-v1-d{dim}"),
            dim,
            labels,
            index,
            params,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn query_index(&self, q: &TextQuery) -> Result<usize> {
        self.index.get(&q.normalized()).copied().ok_or_else(|| {
            Error::InvalidInput(format!(
                "unknown query '{}'; known queries: {}",
                q.text(),
                self.labels.join(", ")
            ))
        })
    }

    /// Embedding rows for a batch of queries, as a graph node.
    pub fn embed_batch(&self, g: &mut Graph, bind: &Binding, queries: &[TextQuery]) -> Result<Var> {
        let idx: Vec<usize> = queries
            .iter()
            .map(|q| self.query_index(q))
            .collect::<Result<_>>()?;
        Ok(g.rows(bind.var("encoder.table"), &idx))
    }
}

impl TextEncoder for LookupTextEncoder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, q: &TextQuery) -> Result<QueryEmbedding> {
        let row = self.query_index(q)?;
        let table = self.params.get("encoder.table");
        let vector = (0..self.dim).map(|j| table[[row, j]]).collect();
        Ok(QueryEmbedding {
            vector,
            encoder_id: self.id.clone(),
        })
    }
}

/// Convenience wrapper for the trait call.
pub fn encode_text(enc: &dyn TextEncoder, q: &TextQuery) -> Result<QueryEmbedding> {
    enc.encode(q)
}

/// C x T x F real tensor (channels, frames, frequency bins).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor(pub Array3<f64>);

impl FeatureTensor {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, t, f) = values.dim();
        if c == 0 || t == 0 || f == 0 {
            return Err(Error::Shape("feature tensor dims must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self(values))
    }
}

/// One FiLM site: a linear map from the query embedding to per-channel
/// (gamma, beta). Gamma is centered at 1 so a zero-weight layer is the
/// identity.
#[derive(Debug, Clone)]
pub struct FilmLayer {
    pub embedding_dim: usize,
    pub channels: usize,
    /// Entries `film.w` (D, 2C) and `film.b` (2C).
    pub params: Params,
}

impl FilmLayer {
    pub fn new(embedding_dim: usize, channels: usize, seed: u64) -> Self {
        let mut params = Params::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        nn::init_linear(&mut params, &mut rng, "film", embedding_dim, 2 * channels);
        Self {
            embedding_dim,
            channels,
            params,
        }
    }

    /// The (gamma, beta) this layer derives from `emb`.
    pub fn coefficients(&self, emb: &QueryEmbedding) -> Result<(Vec<f64>, Vec<f64>)> {
        if emb.vector.len() != self.embedding_dim {
            return Err(Error::Shape(format!(
                "embedding dim {} vs layer dim {}",
                emb.vector.len(),
                self.embedding_dim
            )));
        }
        let w = self.params.get("film.w");
        let b = self.params.get("film.b");
        let mut gamma = vec![0.0; self.channels];
        let mut beta = vec![0.0; self.channels];
        for c in 0..self.channels {
            let mut gv = b[[c]];
            let mut bv = b[[self.channels + c]];
            for (d, &e) in emb.vector.iter().enumerate() {
                gv += e * w[[d, c]];
                bv += e * w[[d, self.channels + c]];
            }
            gamma[c] = 1.0 + gv;
            beta[c] = bv;
        }
        Ok((gamma, beta))
    }
}

/// Feature-wise linear modulation: out[c,t,f] = gamma[c] * h[c,t,f] + beta[c],
/// with (gamma, beta) derived from the query embedding by `layer`.
pub fn film_modulate(
    h: &FeatureTensor,
    emb: &QueryEmbedding,
    layer: &FilmLayer,
) -> Result<FeatureTensor> {
    let (c, _, _) = h.0.dim();
    if c != layer.channels {
        return Err(Error::Shape(format!(
            "feature has {c} channels, layer expects {}",
            layer.channels
        )));
    }
    let (gamma, beta) = layer.coefficients(emb)?;
    let mut out = h.0.clone();
    for (ci, mut plane) in out.outer_iter_mut().enumerate() {
        plane.mapv_inplace(|v| gamma[ci] * v + beta[ci]);
    }
    FeatureTensor::new(out)
}

/// Dual-path recurrent block settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DprnnConfig {
    pub hidden_size: usize,
    #[serde(default = "default_true")]
    pub uses_residual: bool,
    #[serde(default = "default_true")]
    pub uses_layer_norm: bool,
}

fn default_true() -> bool {
    true
}

impl DprnnConfig {
    pub fn new(hidden_size: usize) -> Self {
        Self {
            hidden_size,
            uses_residual: true,
            uses_layer_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 {
            return Err(Error::Config("dprnn hidden size must be positive".into()));
        }
        Ok(())
    }
}

/// Registers the parameters of one dual-path block under `prefix`.
pub(crate) fn init_dprnn(
    params: &mut Params,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    channels: usize,
    cfg: &DprnnConfig,
) {
    let h = cfg.hidden_size;
    nn::init_bilstm(params, rng, &format!("{prefix}.time"), channels, h);
    nn::init_linear(params, rng, &format!("{prefix}.time_proj"), 2 * h, channels);
    nn::init_bilstm(params, rng, &format!("{prefix}.freq"), channels, h);
    nn::init_linear(params, rng, &format!("{prefix}.freq_proj"), 2 * h, channels);
    if cfg.uses_layer_norm {
        nn::init_layernorm(params, &format!("{prefix}.time_ln"), channels);
        nn::init_layernorm(params, &format!("{prefix}.freq_ln"), channels);
    }
}

/// Builds the dual-path forward pass: a shared bidirectional recurrence over
/// the frame axis (one sequence per frequency position, channels as
/// features), projected back to the channel width, then the same over the
/// frequency axis. Each pass normalizes its projected update and adds it to
/// its input when the residual is enabled, so zeroed weights reduce the
/// block to the identity.
pub(crate) fn build_dprnn(
    g: &mut Graph,
    bind: &Binding,
    prefix: &str,
    x: Var,
    cfg: &DprnnConfig,
) -> Var {
    let shape = g.value(x).shape().to_vec();
    let (b, c, t, f) = (shape[0], shape[1], shape[2], shape[3]);
    let h = cfg.hidden_size;

    let pass = |g: &mut Graph, x: Var, axis_time: bool| -> Var {
        let (name, ln_name, proj_name) = if axis_time {
            ("time", "time_ln", "time_proj")
        } else {
            ("freq", "freq_ln", "freq_proj")
        };
        // (B,C,T,F) -> sequences over the chosen axis with C features.
        let (perm, inv, batch, steps) = if axis_time {
            (vec![0, 3, 2, 1], vec![0, 3, 2, 1], b * f, t)
        } else {
            (vec![0, 2, 3, 1], vec![0, 3, 1, 2], b * t, f)
        };
        let p = g.permute(x, &perm);
        let seq = g.reshape(p, &[batch, steps, c]);
        let rnn = nn::bilstm(g, bind, &format!("{prefix}.{name}"), seq, h);
        let flat = g.reshape(rnn, &[batch * steps, 2 * h]);
        let proj = nn::linear(g, bind, &format!("{prefix}.{proj_name}"), flat);
        let back = g.reshape(proj, &[batch, steps, c]);
        let unperm_in = if axis_time {
            g.reshape(back, &[b, f, t, c])
        } else {
            g.reshape(back, &[b, t, f, c])
        };
        let mut delta = g.permute(unperm_in, &inv);
        if cfg.uses_layer_norm {
            delta = nn::layernorm_c(g, bind, &format!("{prefix}.{ln_name}"), delta);
        }
        if cfg.uses_residual {
            g.add(x, delta)
        } else {
            delta
        }
    };

    let after_time = pass(g, x, true);
    pass(g, after_time, false)
}

/// Standalone dual-path block operating on unbatched feature tensors.
#[derive(Debug, Clone)]
pub struct DprnnBlock {
    pub config: DprnnConfig,
    pub channels: usize,
    pub params: Params,
}

impl DprnnBlock {
    pub fn new(channels: usize, config: DprnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        init_dprnn(&mut params, &mut rng, "dprnn", channels, &config);
        Ok(Self {
            config,
            channels,
            params,
        })
    }

    pub fn forward(&self, h: &FeatureTensor) -> Result<FeatureTensor> {
        let batched = self.forward_batch(std::slice::from_ref(h))?;
        Ok(batched.into_iter().next().expect("one input, one output"))
    }

    /// Batched forward over independent inputs (all same shape).
    pub fn forward_batch(&self, items: &[FeatureTensor]) -> Result<Vec<FeatureTensor>> {
        let (c, t, f) = items
            .first()
            .ok_or_else(|| Error::InvalidInput("empty batch".into()))?
            .0
            .dim();
        if c != self.channels {
            return Err(Error::Shape(format!(
                "feature has {c} channels, block expects {}",
                self.channels
            )));
        }
        let mut x = ArrayD::zeros(IxDyn(&[items.len(), c, t, f]));
        for (bi, item) in items.iter().enumerate() {
            if item.0.dim() != (c, t, f) {
                return Err(Error::Shape("batch items must share a shape".into()));
            }
            for ((ci, ti, fi), &v) in item.0.indexed_iter() {
                x[[bi, ci, ti, fi]] = v;
            }
        }
        let mut g = Graph::new();
        let bind = Binding::bind(&mut g, &self.params);
        let xv = g.leaf(x);
        let y = build_dprnn(&mut g, &bind, "dprnn", xv, &self.config);
        let out = g.value(y);
        Ok((0..items.len())
            .map(|bi| {
                let mut one = Array3::zeros((c, t, f));
                for ci in 0..c {
                    for ti in 0..t {
                        for fi in 0..f {
                            one[[ci, ti, fi]] = out[[bi, ci, ti, fi]];
                        }
                    }
                }
                FeatureTensor(one)
            })
            .collect())
    }
}

/// Dual-path forward on a single feature tensor.
pub fn dprnn_forward(h: &FeatureTensor, block: &DprnnBlock) -> Result<FeatureTensor> {
    block.forward(h)
}

/// Mean absolute sample difference between two equal-length waveforms.
pub fn l1_loss(estimate: &Waveform, target: &Waveform) -> Result<f64> {
    if estimate.len() != target.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, target {}",
            estimate.len(),
            target.len()
        )));
    }
    if estimate.is_empty() {
        return Err(Error::InvalidInput("empty waveforms".into()));
    }
    let n = estimate.len() as f64;
    Ok(estimate
        .samples()
        .iter()
        .zip(target.samples())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Shared handle to a frozen separator plus its text encoder.
#[derive(Clone)]
pub struct FrozenSeparator {
    pub model: Arc<SeparationModel>,
    pub encoder: Arc<LookupTextEncoder>,
}

impl FrozenSeparator {
    pub fn checksum(&self) -> u64 {
        self.model.params.checksum() ^ self.encoder.params.checksum().rotate_left(1)
    }
}
