//! Checkpoint archives: a format-tagged container holding a JSON header
//! (kind, config, vocabulary, references) plus named f64 tensor blobs and
//! batch-norm buffers. Loading anything with an unknown tag fails loudly.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::audio::LogMelParams;
use crate::nn::{Buffers, Params};
use crate::sed::{Base1Model, CrnnParams, EventVocabulary, TsedBranch, TsedBranchConfig};
use crate::separation::{LookupTextEncoder, SeparationConfig, SeparationModel, TextEncoder};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TQCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    vocabulary: Vec<String>,
    /// Free-form references (separator checkpoint path, checksums, ...).
    #[serde(default)]
    refs: std::collections::BTreeMap<String, String>,
}

/// Raw archive contents.
pub struct CheckpointData {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocabulary: Vec<String>,
    pub refs: std::collections::BTreeMap<String, String>,
    pub params: Params,
    pub buffers: Buffers,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid utf-8: {e}")))
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let header = Header {
        kind: data.kind.clone(),
        config: data.config.clone(),
        vocabulary: data.vocabulary.clone(),
        refs: data.refs.clone(),
    };
    write_str(&mut w, &serde_json::to_string(&header)?)?;

    write_u32(&mut w, data.params.names().count() as u32)?;
    for (name, tensor) in data.params.iter() {
        write_str(&mut w, name)?;
        write_u32(&mut w, tensor.ndim() as u32)?;
        for &d in tensor.shape() {
            write_u32(&mut w, d as u32)?;
        }
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    write_u32(&mut w, data.buffers.len() as u32)?;
    for (name, values) in &data.buffers {
        write_str(&mut w, name)?;
        write_u32(&mut w, values.len() as u32)?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint archive (bad magic {:?})",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unknown format tag {version} (this build reads {VERSION})",
            path.display()
        )));
    }
    let header: Header = serde_json::from_str(&read_str(&mut r)?)?;

    let n_params = read_u32(&mut r)? as usize;
    let mut params = Params::new();
    for _ in 0..n_params {
        let name = read_str(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        params.insert(
            &name,
            ArrayD::from_shape_vec(IxDyn(&shape), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    let n_buffers = read_u32(&mut r)? as usize;
    let mut buffers = Buffers::new();
    for _ in 0..n_buffers {
        let name = read_str(&mut r)?;
        let len = read_u32(&mut r)? as usize;
        let mut values = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        buffers.insert(name, values);
    }
    Ok(CheckpointData {
        kind: header.kind,
        config: header.config,
        vocabulary: header.vocabulary,
        refs: header.refs,
        params,
        buffers,
    })
}

// ---- separation checkpoints ----

pub fn save_separation(
    path: &Path,
    model: &SeparationModel,
    encoder: &LookupTextEncoder,
) -> Result<()> {
    let mut params = model.params.clone();
    for (name, value) in encoder.params.iter() {
        params.insert(name, value.clone());
    }
    let mut refs = std::collections::BTreeMap::new();
    refs.insert(
        "separator_checksum".to_string(),
        format!("{:016x}", model.params.checksum()),
    );
    refs.insert(
        "embedding_dim".to_string(),
        encoder.embedding_dim().to_string(),
    );
    save(
        path,
        &CheckpointData {
            kind: "separation".into(),
            config: serde_json::to_value(&model.config)?,
            vocabulary: encoder.labels().to_vec(),
            refs,
            params,
            buffers: Buffers::new(),
        },
    )
}

pub fn load_separation(path: &Path) -> Result<(SeparationModel, LookupTextEncoder)> {
    let data = load(path)?;
    if data.kind != "separation" {
        return Err(Error::Checkpoint(format!(
            "{}: kind '{}' is not a separation checkpoint",
            path.display(),
            data.kind
        )));
    }
    let config: SeparationConfig = serde_json::from_value(data.config)?;
    let mut model_params = Params::new();
    let mut encoder_params = Params::new();
    for (name, value) in data.params.iter() {
        if name.starts_with("encoder.") {
            encoder_params.insert(name, value.clone());
        } else {
            model_params.insert(name, value.clone());
        }
    }
    let encoder =
        LookupTextEncoder::from_parts(data.vocabulary, config.embedding_dim, encoder_params)?;
    let model = SeparationModel::from_parts(config, model_params)?;
    Ok((model, encoder))
}

// ---- detection checkpoints ----

#[derive(Debug, Serialize, Deserialize)]
struct SedHeaderConfig {
    framework: String,
    branch: TsedBranchConfig,
    mel: LogMelParams,
}

/// Detector weights divorced from the (frozen, separately stored) separator.
pub struct SedCheckpoint {
    pub framework: String,
    pub vocabulary: EventVocabulary,
    pub branch_config: TsedBranchConfig,
    pub mel: LogMelParams,
    /// One entry for base1, K entries otherwise.
    pub nets: Vec<CrnnParams>,
    pub refs: std::collections::BTreeMap<String, String>,
}

pub fn save_sed(path: &Path, ckpt: &SedCheckpoint) -> Result<()> {
    let mut params = Params::new();
    let mut buffers = Buffers::new();
    for (i, net) in ckpt.nets.iter().enumerate() {
        for (name, value) in net.params.iter() {
            params.insert(&format!("net{i}.{name}"), value.clone());
        }
        for (name, value) in &net.buffers {
            buffers.insert(format!("net{i}.{name}"), value.clone());
        }
    }
    save(
        path,
        &CheckpointData {
            kind: format!("sed.{}", ckpt.framework),
            config: serde_json::to_value(SedHeaderConfig {
                framework: ckpt.framework.clone(),
                branch: ckpt.branch_config,
                mel: ckpt.mel,
            })?,
            vocabulary: ckpt.vocabulary.labels().to_vec(),
            refs: ckpt.refs.clone(),
            params,
            buffers,
        },
    )
}

pub fn load_sed(path: &Path) -> Result<SedCheckpoint> {
    let data = load(path)?;
    let Some(framework) = data.kind.strip_prefix("sed.") else {
        return Err(Error::Checkpoint(format!(
            "{}: kind '{}' is not a detection checkpoint",
            path.display(),
            data.kind
        )));
    };
    let cfg: SedHeaderConfig = serde_json::from_value(data.config)?;
    let vocabulary = EventVocabulary::new(data.vocabulary)?;
    let expected = if framework == "base1" {
        1
    } else {
        vocabulary.len()
    };
    let mut nets = Vec::with_capacity(expected);
    for i in 0..expected {
        let prefix = format!("net{i}.");
        let mut params = Params::new();
        let mut buffers = Buffers::new();
        for (name, value) in data.params.iter() {
            if let Some(rest) = name.strip_prefix(&prefix) {
                params.insert(rest, value.clone());
            }
        }
        for (name, value) in &data.buffers {
            if let Some(rest) = name.strip_prefix(&prefix) {
                buffers.insert(rest.to_string(), value.clone());
            }
        }
        if params.scalar_count() == 0 {
            return Err(Error::Checkpoint(format!(
                "{}: missing tensors for net {i}",
                path.display()
            )));
        }
        nets.push(CrnnParams { params, buffers });
    }
    Ok(SedCheckpoint {
        framework: framework.to_string(),
        vocabulary,
        branch_config: cfg.branch,
        mel: cfg.mel,
        nets,
        refs: data.refs,
    })
}

/// Rebuilds branch structs from a loaded detection checkpoint.
pub fn branches_from_checkpoint(ckpt: &SedCheckpoint) -> Result<Vec<TsedBranch>> {
    ckpt.nets
        .iter()
        .map(|net| {
            let mut b = TsedBranch::new(ckpt.branch_config, 0)?;
            check_same_names(&b.net.params, &net.params)?;
            b.net = net.clone();
            Ok(b)
        })
        .collect()
}

/// Rebuilds the conventional baseline from a loaded checkpoint.
pub fn base1_from_checkpoint(ckpt: &SedCheckpoint) -> Result<Base1Model> {
    let mut model = Base1Model::new(
        ckpt.vocabulary.clone(),
        ckpt.branch_config,
        ckpt.mel,
        0,
    )?;
    check_same_names(&model.net.params, &ckpt.nets[0].params)?;
    model.net = ckpt.nets[0].clone();
    Ok(model)
}

fn check_same_names(expected: &Params, got: &Params) -> Result<()> {
    for name in expected.names() {
        if !got.contains(name) {
            return Err(Error::Checkpoint(format!("missing parameter {name}")));
        }
        if got.get(name).shape() != expected.get(name).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} vs expected {:?}",
                got.get(name).shape(),
                expected.get(name).shape()
            )));
        }
    }
    Ok(())
}
