//! On-disk formats: `XMF1` feature matrices, `XCK1` named-tensor checkpoints,
//! and mono WAV ingestion.
//!
//! Both binary formats are little-endian with 32-bit IEEE-754 payloads.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::signal::{FbankMatrix, Waveform};

pub const FEATURE_MAGIC: &[u8; 4] = b"XMF1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XCK1";

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::data(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Read `n` little-endian `f32`s, checking the length against what is left
/// before allocating.
fn read_f32s(bytes: &mut &[u8], n: usize) -> Result<Vec<f32>> {
    let len = n
        .checked_mul(4)
        .filter(|&len| len <= bytes.len())
        .ok_or_else(|| Error::data(format!("truncated payload: {n} values declared, {} bytes left", bytes.len())))?;
    let (payload, rest) = bytes.split_at(len);
    *bytes = rest;
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))
}

/// Serialize a feature matrix into `XMF1` bytes.
pub fn encode_features<T: Real>(m: &FbankMatrix<T>) -> Result<Vec<u8>> {
    let v = m.values();
    let mut out = Vec::with_capacity(12 + v.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&dim_u32(v.nrows())?.to_le_bytes());
    out.extend_from_slice(&dim_u32(v.ncols())?.to_le_bytes());
    for x in v.iter() {
        out.extend_from_slice(&x.as_f32().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features<T: Real>(mut bytes: &[u8]) -> Result<FbankMatrix<T>> {
    let mut magic = [0u8; 4];
    bytes
        .read_exact(&mut magic)
        .map_err(|_| Error::data("feature file shorter than its header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::data("bad feature magic, expected XMF1"));
    }
    let rows = read_u32(&mut bytes)? as usize;
    let cols = read_u32(&mut bytes)? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::data("feature dimensions overflow"))?;
    let vals = read_f32s(&mut bytes, n)?;
    if !bytes.is_empty() {
        return Err(Error::data("trailing bytes after feature payload"));
    }
    let arr = Array2::from_shape_vec((rows, cols), vals.into_iter().map(|x| T::of(f64::from(x))).collect())
        .map_err(|e| Error::data(e.to_string()))?;
    FbankMatrix::new(arr).map_err(|e| Error::data(e.to_string()))
}

pub fn write_features<T: Real>(path: &Path, m: &FbankMatrix<T>) -> Result<()> {
    fs::write(path, encode_features(m)?)?;
    Ok(())
}

pub fn read_features<T: Real>(path: &Path) -> Result<FbankMatrix<T>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    decode_features(&bytes)
}

/// A named tensor stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl NamedTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::invalid(format!(
                "tensor dims {dims:?} imply {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn scalar(x: f32) -> Self {
        Self {
            dims: vec![1],
            values: vec![x],
        }
    }
}

/// Ordered name -> tensor container written as `XCK1`.
pub type TensorMap = BTreeMap<String, NamedTensor>;

pub fn encode_checkpoint(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&dim_u32(tensors.len())?.to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        out.write_all(&dim_u32(nb.len())?.to_le_bytes())?;
        out.write_all(nb)?;
        out.write_all(&dim_u32(t.dims.len())?.to_le_bytes())?;
        for &d in &t.dims {
            out.write_all(&dim_u32(d)?.to_le_bytes())?;
        }
        for v in &t.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> Result<TensorMap> {
    let mut magic = [0u8; 4];
    bytes
        .read_exact(&mut magic)
        .map_err(|_| Error::data("checkpoint shorter than its header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::data("bad checkpoint magic, expected XCK1"));
    }
    let count = read_u32(&mut bytes)? as usize;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let len = read_u32(&mut bytes)? as usize;
        if len > bytes.len() {
            return Err(Error::data("tensor name runs past end of checkpoint"));
        }
        let (name, rest) = bytes.split_at(len);
        let name = std::str::from_utf8(name)
            .map_err(|e| Error::data(format!("tensor name is not utf-8: {e}")))?
            .to_owned();
        bytes = rest;
        let rank = read_u32(&mut bytes)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(&mut bytes).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::data(format!("tensor {name} dimensions overflow")))?;
        let values = read_f32s(&mut bytes, n)?;
        if map.insert(name.clone(), NamedTensor { dims, values }).is_some() {
            return Err(Error::data(format!("duplicate tensor {name}")));
        }
    }
    if !bytes.is_empty() {
        return Err(Error::data("trailing bytes after checkpoint"));
    }
    Ok(map)
}

pub fn write_checkpoint(path: &Path, tensors: &TensorMap) -> Result<()> {
    fs::write(path, encode_checkpoint(tensors)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<TensorMap> {
    let bytes = fs::read(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

/// Read a PCM WAV file, keeping only the first channel.
pub fn read_wav<T: Real>(path: &Path) -> Result<Waveform<T>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .step_by(channels)
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = f64::from(1u32 << (spec.bits_per_sample.saturating_sub(1)).min(31));
            reader
                .samples::<i32>()
                .step_by(channels)
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    Waveform::new(samples.into_iter().map(T::of).collect(), spec.sample_rate)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Write a mono 16-bit PCM WAV.
pub fn write_wav<T: Real>(path: &Path, w: &Waveform<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        let v = (s.as_f64().clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
