//! `CSSDACKP` checkpoints: header, then every tensor as little-endian `f32`
//! in the fixed order of [`Cssda::tensors`].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Cssda, Discriminator, Generator, LabelEmbeddingTable, ModelShape};
use crate::numerics::{Affine, ParamTensor};
use crate::training::TrainedModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSSDACKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;

/// Hyperparameters that shape the forward pass but are not stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    pub leaky_slope: f64,
    pub dropout: f64,
}

impl Default for Activation {
    fn default() -> Self {
        Self {
            leaky_slope: 0.2,
            dropout: 0.1,
        }
    }
}

pub fn encode_checkpoint(model: &Cssda) -> Result<Vec<u8>> {
    let shape = model.shape();
    if shape.generator_input != shape.dim {
        return Err(Error::config(
            "only conditionally trained models fit the checkpoint layout",
        ));
    }
    let word = |n: usize| -> Result<[u8; 4]> {
        u32::try_from(n)
            .map(u32::to_le_bytes)
            .map_err(|_| Error::config("model dimension exceeds u32"))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * model.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&word(shape.dim)?);
    out.extend_from_slice(&word(shape.hidden)?);
    out.extend_from_slice(&word(shape.k)?);
    for tensor in model.tensors() {
        for &v in &tensor.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], activation: Activation) -> Result<Cssda> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("checkpoint is shorter than its header"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format("bad magic, not a CSSDACKP file"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let version = word(8);
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let (dim, hidden, k) = (word(12), word(16), word(20));
    if dim == 0 || hidden == 0 || k < 2 {
        return Err(Error::format(format!(
            "implausible checkpoint shape dim={dim} hidden={hidden} k={k}"
        )));
    }
    let shape = ModelShape::conditional(dim, hidden, k);
    let shapes: [Vec<usize>; 9] = [
        vec![hidden, dim],
        vec![hidden],
        vec![dim, hidden],
        vec![dim],
        vec![hidden, dim],
        vec![hidden],
        vec![k, hidden],
        vec![k],
        vec![k, dim],
    ];
    let floats: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != HEADER_LEN + 4 * floats {
        return Err(Error::format(format!(
            "checkpoint holds {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            HEADER_LEN + 4 * floats
        )));
    }
    let mut cursor = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let mut tensors = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            let values: Vec<f64> = cursor.by_ref().take(n).collect();
            ParamTensor::from_values(s, values).map_err(|e| Error::format(format!("checkpoint tensor: {e}")))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut next = || tensors.next().expect("nine tensors");
    let mut affine = || Affine::new(next(), next());
    let gen_hidden = affine()?;
    let gen_output = affine()?;
    let disc_hidden = affine()?;
    let disc_output = affine()?;
    Ok(Cssda {
        generator: Generator {
            hidden: gen_hidden,
            output: gen_output,
            leaky_slope: activation.leaky_slope,
            dropout: activation.dropout,
        },
        discriminator: Discriminator {
            hidden: disc_hidden,
            output: disc_output,
            leaky_slope: activation.leaky_slope,
        },
        table: LabelEmbeddingTable {
            rows: tensors.next().expect("table tensor"),
        },
    })
}

/// Writes a conditionally trained model. Other modes have no stored layout.
pub fn save_checkpoint(trained: &TrainedModel, path: &Path) -> Result<()> {
    if !trained.mode.is_conditional() {
        return Err(Error::config(format!(
            "{} models cannot be checkpointed; use full or naive-loss",
            trained.mode
        )));
    }
    fs::write(path, encode_checkpoint(&trained.model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, activation: Activation) -> Result<Cssda> {
    decode_checkpoint(&fs::read(path)?, activation)
}

/// Loads and checks the class count against the caller's expectation.
pub fn load_checkpoint_expecting(path: &Path, activation: Activation, k: usize) -> Result<Cssda> {
    let model = load_checkpoint(path, activation)?;
    if model.k() != k {
        return Err(Error::config(format!(
            "checkpoint has {} classes, expected {k}",
            model.k()
        )));
    }
    Ok(model)
}
