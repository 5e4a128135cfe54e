//! CRNN detector models.
//!
//! The shared trunk is three 3x3 convolution blocks (batch norm, ReLU, 4x
//! frequency-only max pooling, dropout) followed by a bidirectional GRU and
//! a sigmoid head; frame resolution is never pooled so scores align with
//! labels. A branch has one output unit, the conventional baseline has K.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{EventVocabulary, SoftLabelMatrix, TsedBranchConfig};
use crate::audio::{logmel, LogMelFeature, LogMelParams, Waveform};
use crate::nn::{self, Binding, Buffers, Params};
use crate::separation::{FrozenSeparator, TextQuery};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

/// Parameters plus batch-norm buffers for one CRNN.
#[derive(Debug, Clone, PartialEq)]
pub struct CrnnParams {
    pub params: Params,
    pub buffers: Buffers,
}

impl CrnnParams {
    pub(crate) fn init(cfg: &TsedBranchConfig, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut buffers = Buffers::new();
        let cf = cfg.conv_filters;
        let mut in_c = 1;
        for blk in 0..3 {
            nn::init_conv2d(&mut params, &mut rng, &format!("conv{blk}"), cf, in_c, 3);
            nn::init_batchnorm(&mut params, &mut buffers, &format!("bn{blk}"), cf);
            in_c = cf;
        }
        let freq_left = cfg.n_mels / 64;
        let gh = cfg.gru_hidden_size();
        nn::init_bigru(&mut params, &mut rng, "gru", cf * freq_left, gh);
        nn::init_linear(&mut params, &mut rng, "head", 2 * gh, out_dim);
        Self { params, buffers }
    }
}

/// Builds the trunk on (B, 1, T, M) inputs; returns sigmoid scores
/// (B, T, out_dim). Dropout masks are drawn from `rng` only when training.
#[allow(clippy::too_many_arguments)]
pub fn crnn_forward(
    g: &mut Graph,
    bind: &Binding,
    buffers: &mut Buffers,
    cfg: &TsedBranchConfig,
    feats: Var,
    out_dim: usize,
    train: bool,
    rng: Option<&mut ChaCha12Rng>,
) -> Var {
    let shape = g.value(feats).shape().to_vec();
    let (b, t) = (shape[0], shape[2]);
    let cf = cfg.conv_filters;
    let mut local_rng = rng;
    let mut x = feats;
    for blk in 0..3 {
        let conv = nn::conv2d(g, bind, &format!("conv{blk}"), x, 1, 1);
        let normed = nn::batchnorm(g, bind, buffers, &format!("bn{blk}"), conv, train);
        let act = g.relu(normed);
        let pooled = g.maxpool_w(act, 4);
        x = pooled;
        if train && cfg.dropout_rate > 0.0 {
            let rng = local_rng.as_deref_mut().expect("training needs an rng");
            let mask = nn::dropout_mask(rng, g.value(x).shape(), cfg.dropout_rate);
            x = g.dropout_mask(x, &mask);
        }
    }
    // (B, cf, T, n_mels/64) -> (B, T, cf * freq_left)
    let freq_left = cfg.n_mels / 64;
    let seq_in = g.permute(x, &[0, 2, 1, 3]);
    let seq = g.reshape(seq_in, &[b, t, cf * freq_left]);
    let rnn = nn::bigru(g, bind, "gru", seq, cfg.gru_hidden_size());
    let gh = cfg.gru_hidden_size();
    let flat = g.reshape(rnn, &[b * t, 2 * gh]);
    let logits = nn::linear(g, bind, "head", flat);
    let scores = g.sigmoid(logits);
    g.reshape(scores, &[b, t, out_dim])
}

pub(crate) fn features_to_batch(feats: &[&LogMelFeature]) -> Result<ArrayD<f64>> {
    let (t, m) = feats
        .first()
        .ok_or_else(|| Error::InvalidInput("empty feature batch".into()))?
        .values
        .dim();
    let mut out = ArrayD::zeros(IxDyn(&[feats.len(), 1, t, m]));
    for (bi, f) in feats.iter().enumerate() {
        if f.values.dim() != (t, m) {
            return Err(Error::Shape("feature batch shapes differ".into()));
        }
        for ((ti, mi), &v) in f.values.indexed_iter() {
            out[[bi, 0, ti, mi]] = v;
        }
    }
    Ok(out)
}

/// One binary detection branch.
#[derive(Debug, Clone)]
pub struct TsedBranch {
    pub config: TsedBranchConfig,
    pub net: CrnnParams,
}

impl TsedBranch {
    pub fn new(config: TsedBranchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            net: CrnnParams::init(&config, 1, seed),
            config,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.net.params.scalar_count()
    }

    /// Test hook: zeroes the head weights and pins the head bias.
    pub fn force_head_bias(&mut self, bias: f64) {
        self.net.params.get_mut("head.w").fill(0.0);
        self.net.params.get_mut("head.b").fill(bias);
    }

    /// Inference scores for one feature, T values in [0, 1].
    pub fn branch_forward(&self, feat: &LogMelFeature) -> Result<Vec<f64>> {
        if feat.values.ncols() != self.config.n_mels {
            return Err(Error::Shape(format!(
                "feature has {} mel bins, branch expects {}",
                feat.values.ncols(),
                self.config.n_mels
            )));
        }
        let x = features_to_batch(&[feat])?;
        let mut g = Graph::new();
        let bind = Binding::bind(&mut g, &self.net.params);
        let xv = g.leaf(x);
        let mut buffers = self.net.buffers.clone();
        let scores = crnn_forward(
            &mut g,
            &bind,
            &mut buffers,
            &self.config,
            xv,
            1,
            false,
            None,
        );
        let v = g.value(scores);
        Ok((0..feat.frames()).map(|t| v[[0, t, 0]]).collect())
    }

}

/// Per-frame branch scores for one feature.
pub fn branch_forward(feat: &LogMelFeature, branch: &TsedBranch) -> Result<Vec<f64>> {
    branch.branch_forward(feat)
}

/// Separator stage of the query-driven detector: either a frozen separation
/// model or an identity passthrough (the no-separation ablation).
#[derive(Clone)]
pub enum SeparatorRef {
    Frozen(FrozenSeparator),
    Identity,
}

impl SeparatorRef {
    pub fn checksum(&self) -> Option<u64> {
        match self {
            SeparatorRef::Frozen(f) => Some(f.checksum()),
            SeparatorRef::Identity => None,
        }
    }

    /// The audio track a branch for `label` should hear.
    pub fn track(&self, x: &Waveform, label: &str) -> Result<Waveform> {
        match self {
            SeparatorRef::Frozen(f) => {
                let q = TextQuery::new(label)?;
                f.model.separate(x, &q, f.encoder.as_ref())
            }
            SeparatorRef::Identity => Ok(x.clone()),
        }
    }
}

/// Query-driven detector: one frozen separated track per event label, one
/// binary branch per track, columns concatenated in vocabulary order.
pub struct TqSedModel {
    pub vocabulary: EventVocabulary,
    pub branches: Vec<TsedBranch>,
    pub separator: SeparatorRef,
    pub mel: LogMelParams,
}

impl TqSedModel {
    pub fn new(
        vocabulary: EventVocabulary,
        config: TsedBranchConfig,
        separator: SeparatorRef,
        mel: LogMelParams,
        seed: u64,
    ) -> Result<Self> {
        if mel.n_mels != config.n_mels {
            return Err(Error::Config(format!(
                "mel features have {} bins, branch config wants {}",
                mel.n_mels, config.n_mels
            )));
        }
        let branches = (0..vocabulary.len())
            .map(|i| TsedBranch::new(config, seed.wrapping_add(i as u64 + 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vocabulary,
            branches,
            separator,
            mel,
        })
    }

    /// Learnable parameter count; the frozen separator is excluded.
    pub fn count_parameters(&self) -> usize {
        self.branches.iter().map(|b| b.count_parameters()).sum()
    }

    pub fn tqsed_forward(&self, x: &Waveform) -> Result<SoftLabelMatrix> {
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(self.vocabulary.len());
        for (label, branch) in self.vocabulary.labels().iter().zip(&self.branches) {
            let track = self.separator.track(x, label)?;
            let feat = logmel(&track, &self.mel)?;
            columns.push(branch.branch_forward(&feat)?);
        }
        let t = columns[0].len();
        if columns.iter().any(|c| c.len() != t) {
            return Err(Error::Shape("branch frame counts differ".into()));
        }
        let mut values = Array2::zeros((t, self.vocabulary.len()));
        for (k, col) in columns.iter().enumerate() {
            for (ti, &v) in col.iter().enumerate() {
                values[[ti, k]] = v;
            }
        }
        SoftLabelMatrix::new(
            values,
            self.mel.hop_seconds,
            self.vocabulary.labels().to_vec(),
        )
    }
}

/// Conventional baseline: one CRNN on the mixture with a K-way sigmoid head.
pub struct Base1Model {
    pub vocabulary: EventVocabulary,
    pub config: TsedBranchConfig,
    pub net: CrnnParams,
    pub mel: LogMelParams,
}

impl Base1Model {
    pub fn new(
        vocabulary: EventVocabulary,
        config: TsedBranchConfig,
        mel: LogMelParams,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if mel.n_mels != config.n_mels {
            return Err(Error::Config(format!(
                "mel features have {} bins, branch config wants {}",
                mel.n_mels, config.n_mels
            )));
        }
        let net = CrnnParams::init(&config, vocabulary.len(), seed);
        Ok(Self {
            vocabulary,
            config,
            net,
            mel,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.net.params.scalar_count()
    }

    pub fn base1_forward(&self, x: &Waveform) -> Result<SoftLabelMatrix> {
        let feat = logmel(x, &self.mel)?;
        self.score_features(&feat)
    }

    /// Scores precomputed features (the trunk of [`Self::base1_forward`]).
    pub fn score_features(&self, feat: &LogMelFeature) -> Result<SoftLabelMatrix> {
        let xb = features_to_batch(&[feat])?;
        let mut g = Graph::new();
        let bind = Binding::bind(&mut g, &self.net.params);
        let xv = g.leaf(xb);
        let mut buffers = self.net.buffers.clone();
        let scores = crnn_forward(
            &mut g,
            &bind,
            &mut buffers,
            &self.config,
            xv,
            self.vocabulary.len(),
            false,
            None,
        );
        let v = g.value(scores);
        let mut values = Array2::zeros((feat.frames(), self.vocabulary.len()));
        for ti in 0..feat.frames() {
            for k in 0..self.vocabulary.len() {
                values[[ti, k]] = v[[0, ti, k]];
            }
        }
        SoftLabelMatrix::new(
            values,
            self.mel.hop_seconds,
            self.vocabulary.labels().to_vec(),
        )
    }

}

/// Assembles the no-separation ablation: the same per-class branches fed the
/// raw mixture.
pub fn base2_model(
    vocabulary: EventVocabulary,
    config: TsedBranchConfig,
    mel: LogMelParams,
    seed: u64,
) -> Result<TqSedModel> {
    TqSedModel::new(vocabulary, config, SeparatorRef::Identity, mel, seed)
}
