//! Binary file for extracted keypoint features, so extraction, matching and
//! registration can run as separate commands. Same conventions as the
//! weights file: magic + shape header, little-endian float32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::groupnet::{Descriptor, GroupFeature};
use crate::icosa::GROUP_ORDER;

use super::CloudFeatures;

const MAGIC: &[u8; 8] = b"ICOREGF1";
const MAX_DIM: u32 = 16384;

pub fn save_features(path: &Path, features: &CloudFeatures) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, features)
}

pub fn load_features(path: &Path) -> Result<CloudFeatures> {
    let mut r = BufReader::new(File::open(path)?);
    read_features(&mut r)
}

pub fn write_features<W: Write>(w: &mut W, features: &CloudFeatures) -> Result<()> {
    let k = features.positions.len();
    if features.f0.len() != k || features.fl.len() != k || features.descriptors.len() != k {
        return Err(Error::ShapeMismatch {
            expected: format!("{k} keypoints in every field"),
            got: "inconsistent feature arrays".into(),
        });
    }
    let n0 = features.f0.first().map_or(0, |f| f.channels());
    let nl = features.fl.first().map_or(0, |f| f.channels());
    w.write_all(MAGIC)?;
    w.write_all(&(k as u32).to_le_bytes())?;
    w.write_all(&(n0 as u32).to_le_bytes())?;
    w.write_all(&(nl as u32).to_le_bytes())?;
    for i in 0..k {
        w.write_all(&(features.keypoint_indices[i] as u32).to_le_bytes())?;
        let p = features.positions[i];
        for c in [p.x, p.y, p.z] {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
        write_f32s(w, features.f0[i].as_slice())?;
        write_f32s(w, features.fl[i].as_slice())?;
        write_f32s(w, &features.descriptors[i].values)?;
    }
    Ok(())
}

pub fn read_features<R: Read>(r: &mut R) -> Result<CloudFeatures> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::WeightsFormat("features file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::WeightsFormat("bad features magic".into()));
    }
    let k = read_u32(r)? as usize;
    let n0 = read_u32(r)?;
    let nl = read_u32(r)?;
    if n0 == 0 || n0 > MAX_DIM || nl == 0 || nl > MAX_DIM || k > 10_000_000 {
        return Err(Error::WeightsFormat("implausible feature dimensions".into()));
    }
    let (n0, nl) = (n0 as usize, nl as usize);
    let mut features = CloudFeatures {
        keypoint_indices: Vec::with_capacity(k),
        positions: Vec::with_capacity(k),
        f0: Vec::with_capacity(k),
        fl: Vec::with_capacity(k),
        descriptors: Vec::with_capacity(k),
    };
    for _ in 0..k {
        features.keypoint_indices.push(read_u32(r)? as usize);
        let xyz = read_f32s(r, 3)?;
        features
            .positions
            .push(Vector3::new(xyz[0], xyz[1], xyz[2]));
        let mut f0 = GroupFeature::zeros(n0, 0);
        f0.as_mut_slice()
            .copy_from_slice(&read_f32s(r, GROUP_ORDER * n0)?);
        features.f0.push(f0);
        let mut fl = GroupFeature::zeros(nl, 4);
        fl.as_mut_slice()
            .copy_from_slice(&read_f32s(r, GROUP_ORDER * nl)?);
        features.fl.push(fl);
        features.descriptors.push(Descriptor {
            values: read_f32s(r, nl)?,
        });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::WeightsFormat("trailing bytes in features file".into()));
    }
    Ok(features)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::WeightsFormat("truncated features header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::WeightsFormat("truncated features payload".into()))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}
