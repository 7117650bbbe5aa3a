//! Binary parameter checkpoints.
//!
//! Layout: magic `DNCK`, a u32 format version, a length-prefixed JSON
//! manifest (layer specs plus an arbitrary extra blob for callers), then
//! all stack state as little-endian f32 in canonical layer order (fc: w, b;
//! batchnorm: gamma, beta, running_mean, running_var). Loading validates
//! the manifest against the requested architecture.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use super::stack::{LayerSpec, LayerState, Stack};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DNCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct StackManifest {
    pub width_in: usize,
    pub layers: Vec<LayerSpec>,
}

impl StackManifest {
    pub fn of(stack: &Stack<f32>) -> Self {
        StackManifest { width_in: stack.width_in, layers: stack.specs() }
    }
}

/// All state arrays of a stack in serialization order (includes batchnorm
/// running statistics, unlike the trainable-parameter view).
fn state_arrays(stack: &Stack<f32>) -> Vec<&[f32]> {
    let mut out: Vec<&[f32]> = Vec::new();
    for layer in &stack.layers {
        match &layer.state {
            LayerState::Fc { w, b } => {
                out.push(&w.data);
                out.push(b);
            }
            LayerState::Batchnorm { gamma, beta, running_mean, running_var } => {
                out.push(gamma);
                out.push(beta);
                out.push(running_mean);
                out.push(running_var);
            }
            LayerState::Stateless => {}
        }
    }
    out
}

fn state_arrays_mut(stack: &mut Stack<f32>) -> Vec<&mut [f32]> {
    let mut out: Vec<&mut [f32]> = Vec::new();
    for layer in &mut stack.layers {
        match &mut layer.state {
            LayerState::Fc { w, b } => {
                out.push(w.data.as_mut_slice());
                out.push(b.as_mut_slice());
            }
            LayerState::Batchnorm { gamma, beta, running_mean, running_var } => {
                out.push(gamma.as_mut_slice());
                out.push(beta.as_mut_slice());
                out.push(running_mean.as_mut_slice());
                out.push(running_var.as_mut_slice());
            }
            LayerState::Stateless => {}
        }
    }
    out
}

pub fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_f32s(r: &mut impl Read, out: &mut [f32]) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 4];
    r.read_exact(&mut buf)?;
    for (i, v) in out.iter_mut().enumerate() {
        *v = f32::from_le_bytes(buf[i * 4..i * 4 + 4].try_into().unwrap());
    }
    Ok(())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Write a stack checkpoint with an optional caller manifest blob.
pub fn save_stack(w: &mut impl Write, stack: &Stack<f32>, extra: &serde_json::Value) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    let manifest = serde_json::json!({
        "stack": StackManifest::of(stack),
        "extra": extra,
    });
    let bytes = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_u32(w, bytes.len() as u32)?;
    w.write_all(&bytes)?;
    for arr in state_arrays(stack) {
        write_f32s(w, arr)?;
    }
    Ok(())
}

/// Load a stack checkpoint; the stored manifest must match `expected`
/// exactly. Returns the caller's extra blob.
pub fn load_stack(r: &mut impl Read, stack: &mut Stack<f32>) -> Result<serde_json::Value> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    let manifest: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    let stored: StackManifest = serde_json::from_value(manifest["stack"].clone())
        .map_err(|e| Error::Format(e.to_string()))?;
    let expected = StackManifest::of(stack);
    if stored.width_in != expected.width_in || stored.layers != expected.layers {
        return Err(Error::invalid_argument(
            "checkpoint manifest does not match the requested architecture",
        ));
    }
    for arr in state_arrays_mut(stack) {
        read_f32s(r, arr)?;
    }
    Ok(manifest["extra"].clone())
}
