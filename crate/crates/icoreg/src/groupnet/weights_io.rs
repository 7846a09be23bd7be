//! Versioned little-endian binary format for network weights.
//!
//! Layout: 8-byte magic `ICOREGW1`, embedder layer count, then per layer
//! the (n_in, n_out) shape header followed by row-major float32 payloads
//! for weights and bias; an optional regressor section follows the same
//! pattern. Parameters live on the f32 grid in memory, so
//! `load(save(w)) == w` bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::icosa::NEIGHBORHOOD_SIZE;

use super::{ConvLayer, LinearLayer, NetworkWeights, RegressorWeights};

const MAGIC: &[u8; 8] = b"ICOREGW1";
const MAX_DIM: u32 = 16384;

pub fn save_weights(path: &Path, weights: &NetworkWeights) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, weights)
}

pub fn load_weights(path: &Path) -> Result<NetworkWeights> {
    let mut r = BufReader::new(File::open(path)?);
    read_weights(&mut r)
}

pub fn write_weights<W: Write>(w: &mut W, weights: &NetworkWeights) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, weights.embedder.len() as u32)?;
    for layer in &weights.embedder {
        write_conv(w, layer)?;
    }
    match &weights.regressor {
        None => w.write_all(&[0u8])?,
        Some(reg) => {
            w.write_all(&[1u8])?;
            write_u32(w, reg.convs.len() as u32)?;
            for layer in &reg.convs {
                write_conv(w, layer)?;
            }
            write_u32(w, reg.mlp.len() as u32)?;
            for layer in &reg.mlp {
                write_linear(w, layer)?;
            }
        }
    }
    Ok(())
}

pub fn read_weights<R: Read>(r: &mut R) -> Result<NetworkWeights> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::WeightsFormat("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::WeightsFormat(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let n_layers = read_u32(r)?;
    if n_layers > 64 {
        return Err(Error::WeightsFormat(format!(
            "implausible embedder layer count {n_layers}"
        )));
    }
    let mut embedder = Vec::with_capacity(n_layers as usize);
    for _ in 0..n_layers {
        embedder.push(read_conv(r)?);
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)
        .map_err(|_| Error::WeightsFormat("truncated before regressor flag".into()))?;
    let regressor = match flag[0] {
        0 => None,
        1 => {
            let n_convs = read_u32(r)?;
            if n_convs > 64 {
                return Err(Error::WeightsFormat("implausible regressor size".into()));
            }
            let mut convs = Vec::with_capacity(n_convs as usize);
            for _ in 0..n_convs {
                convs.push(read_conv(r)?);
            }
            let n_mlp = read_u32(r)?;
            if n_mlp > 64 {
                return Err(Error::WeightsFormat("implausible mlp size".into()));
            }
            let mut mlp = Vec::with_capacity(n_mlp as usize);
            for _ in 0..n_mlp {
                mlp.push(read_linear(r)?);
            }
            Some(RegressorWeights { convs, mlp })
        }
        other => {
            return Err(Error::WeightsFormat(format!(
                "bad regressor flag {other}"
            )))
        }
    };
    // The payload must end exactly here.
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(NetworkWeights {
            embedder,
            regressor,
        }),
        _ => Err(Error::WeightsFormat("trailing bytes after payload".into())),
    }
}

fn write_conv<W: Write>(w: &mut W, layer: &ConvLayer) -> Result<()> {
    write_u32(w, layer.n_in as u32)?;
    write_u32(w, layer.n_out as u32)?;
    write_f32_slice(w, &layer.weights)?;
    write_f32_slice(w, &layer.bias)
}

fn read_conv<R: Read>(r: &mut R) -> Result<ConvLayer> {
    let n_in = read_dim(r)?;
    let n_out = read_dim(r)?;
    let weights = read_f32_vec(r, n_out * NEIGHBORHOOD_SIZE * n_in)?;
    let bias = read_f32_vec(r, n_out)?;
    Ok(ConvLayer {
        n_in,
        n_out,
        weights,
        bias,
    })
}

fn write_linear<W: Write>(w: &mut W, layer: &LinearLayer) -> Result<()> {
    write_u32(w, layer.n_in as u32)?;
    write_u32(w, layer.n_out as u32)?;
    write_f32_slice(w, &layer.weights)?;
    write_f32_slice(w, &layer.bias)
}

fn read_linear<R: Read>(r: &mut R) -> Result<LinearLayer> {
    let n_in = read_dim(r)?;
    let n_out = read_dim(r)?;
    let weights = read_f32_vec(r, n_out * n_in)?;
    let bias = read_f32_vec(r, n_out)?;
    Ok(LinearLayer {
        n_in,
        n_out,
        weights,
        bias,
    })
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::WeightsFormat("truncated header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_dim<R: Read>(r: &mut R) -> Result<usize> {
    let v = read_u32(r)?;
    if v == 0 || v > MAX_DIM {
        return Err(Error::WeightsFormat(format!("dimension {v} out of range")));
    }
    Ok(v as usize)
}

fn write_f32_slice<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::WeightsFormat("truncated payload".into()))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groupnet::NetworkWeights;

    fn sample_weights() -> NetworkWeights {
        let mut w = NetworkWeights::embedder_random(&[8, 6, 6], 42);
        w.regressor = Some(NetworkWeights::random_regressor(28, &[8, 8, 4], 16, 43));
        w
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let w = sample_weights();
        let mut buf = Vec::new();
        write_weights(&mut buf, &w).unwrap();
        let got = read_weights(&mut buf.as_slice()).unwrap();
        assert_eq!(got, w);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let w = sample_weights();
        let mut buf = Vec::new();
        write_weights(&mut buf, &w).unwrap();
        buf[0] ^= 0xff;
        assert!(matches!(
            read_weights(&mut buf.as_slice()),
            Err(Error::WeightsFormat(_))
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let w = sample_weights();
        let mut buf = Vec::new();
        write_weights(&mut buf, &w).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(matches!(
            read_weights(&mut buf.as_slice()),
            Err(Error::WeightsFormat(_))
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let w = sample_weights();
        let mut buf = Vec::new();
        write_weights(&mut buf, &w).unwrap();
        buf.push(0);
        assert!(matches!(
            read_weights(&mut buf.as_slice()),
            Err(Error::WeightsFormat(_))
        ));
    }

    #[test]
    fn save_load_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let w = sample_weights();
        save_weights(&path, &w).unwrap();
        let got = load_weights(&path).unwrap();
        assert_eq!(got, w);
    }
}
