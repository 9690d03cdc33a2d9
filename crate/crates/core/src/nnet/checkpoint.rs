//! `GFNN` checkpoints: magic, `u32` format version, a length-prefixed JSON
//! header (input shape, mode, layer table, free-form metadata), then for each
//! parameterized layer a `u64`-counted `f32` weight blob and bias blob. An
//! optional optimizer section follows: a `u8` flag, a length-prefixed JSON
//! block with the hyper-parameters and the velocity blobs in layer order.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::SgdHyper;
use super::{LayerDef, Mode, Network, NnError, OptimizerState, Params, Shape};

const MAGIC: &[u8; 4] = b"GFNN";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    input: Shape,
    mode: Mode,
    layers: Vec<LayerDef>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: Network<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub metadata: serde_json::Value,
}

fn write_blob(out: &mut impl Write, v: &[f32]) -> std::io::Result<()> {
    out.write_all(&(v.len() as u64).to_le_bytes())?;
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&bytes)
}

fn read_exact_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>, NnError> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|e| NnError::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32, NnError> {
    Ok(u32::from_le_bytes(read_exact_vec(r, 4)?.try_into().unwrap()))
}

fn read_blob(r: &mut impl Read, expected: usize) -> Result<Vec<f32>, NnError> {
    let n = u64::from_le_bytes(read_exact_vec(r, 8)?.try_into().unwrap()) as usize;
    if n != expected {
        return Err(NnError::Checkpoint(format!("blob holds {n} values, layer needs {expected}")));
    }
    Ok(read_exact_vec(r, 4 * n)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_json(out: &mut impl Write, v: &impl Serialize) -> Result<(), NnError> {
    let text = serde_json::to_vec(v).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    out.write_all(&(text.len() as u32).to_le_bytes())?;
    out.write_all(&text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(r: &mut impl Read) -> Result<T, NnError> {
    let len = read_u32(r)? as usize;
    let bytes = read_exact_vec(r, len)?;
    serde_json::from_slice(&bytes).map_err(|e| NnError::Checkpoint(e.to_string()))
}

pub fn write_checkpoint(
    out: &mut impl Write,
    net: &Network<f32>,
    optimizer: Option<&OptimizerState<f32>>,
    metadata: &serde_json::Value,
) -> Result<(), NnError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    write_json(
        out,
        &Header {
            input: net.input_shape(),
            mode: net.mode,
            layers: net.defs(),
            metadata: metadata.clone(),
        },
    )?;
    for p in net.layers().iter().filter_map(|l| l.params.as_ref()) {
        write_blob(out, &p.weight)?;
        write_blob(out, &p.bias)?;
    }
    match optimizer {
        None => out.write_all(&[0u8])?,
        Some(opt) => {
            out.write_all(&[1u8])?;
            write_json(out, &opt.hyper)?;
            for v in opt.velocity.iter().flatten() {
                write_blob(out, &v.weight)?;
                write_blob(out, &v.bias)?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, NnError> {
    if read_exact_vec(r, 4)? != MAGIC {
        return Err(NnError::Checkpoint("bad GFNN magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported format version {version}")));
    }
    let header: Header = read_json(r)?;
    let mut net = Network::<f32>::with_zero_params(header.input, header.layers)?;
    net.mode = header.mode;
    for layer in net.layers_mut() {
        if let Some(p) = layer.params.as_mut() {
            p.weight = read_blob(r, p.weight.len())?;
            p.bias = read_blob(r, p.bias.len())?;
        }
    }
    let flag = read_exact_vec(r, 1)?[0];
    let optimizer = if flag == 1 {
        let hyper: SgdHyper = read_json(r)?;
        let mut velocity = Vec::with_capacity(net.layers().len());
        for layer in net.layers() {
            velocity.push(match &layer.params {
                Some(p) => Some(Params {
                    weight: read_blob(r, p.weight.len())?,
                    bias: read_blob(r, p.bias.len())?,
                }),
                None => None,
            });
        }
        Some(OptimizerState { velocity, hyper })
    } else {
        None
    };
    Ok(Checkpoint {
        net,
        optimizer,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(
    path: &Path,
    net: &Network<f32>,
    optimizer: Option<&OptimizerState<f32>>,
    metadata: &serde_json::Value,
) -> Result<(), NnError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut out, net, optimizer, metadata)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    if !path.exists() {
        return Err(NnError::Checkpoint(format!("missing checkpoint {}", path.display())));
    }
    read_checkpoint(&mut BufReader::new(fs::File::open(path)?))
}
