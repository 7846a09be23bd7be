//! PLY point-cloud reader and writer.
//!
//! Supported subset: ASCII and binary-little-endian files with float or
//! double x/y/z vertex properties. Unknown properties and elements are
//! skipped on read; big-endian files are rejected explicitly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Result<ScalarType> {
        Ok(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            other => return Err(Error::PlyFormat(format!("unknown property type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_f64<R: Read>(self, r: &mut R) -> Result<f64> {
        let mut buf = [0u8; 8];
        let b = &mut buf[..self.size()];
        r.read_exact(b)
            .map_err(|_| Error::PlyFormat("truncated binary payload".into()))?;
        Ok(match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(buf),
        })
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(ScalarType, String),
    List(ScalarType, ScalarType),
}

#[derive(Debug, Clone)]
struct ElementDef {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply_to(&mut w, cloud, format)
}

pub fn write_ply_to<W: Write>(w: &mut W, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    writeln!(w, "ply")?;
    match format {
        PlyFormat::Ascii => writeln!(w, "format ascii 1.0")?,
        PlyFormat::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
    }
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "end_header")?;
    match format {
        PlyFormat::Ascii => {
            for p in &cloud.points {
                // f32 Display round-trips the stored f32 exactly
                writeln!(w, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for p in &cloud.points {
                w.write_all(&(p.x as f32).to_le_bytes())?;
                w.write_all(&(p.y as f32).to_le_bytes())?;
                w.write_all(&(p.z as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let mut r = BufReader::new(File::open(path)?);
    read_ply_from(&mut r)
}

pub fn read_ply_from<R: BufRead>(r: &mut R) -> Result<PointCloud> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::PlyFormat("missing 'ply' magic line".into()));
    }

    let mut format: Option<PlyFormat> = None;
    let mut elements: Vec<ElementDef> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::PlyFormat("header ended before end_header".into()));
        }
        let trimmed = line.trim_end();
        let mut tokens = trimmed.split_whitespace();
        match tokens.next() {
            Some("comment") | Some("obj_info") | None => continue,
            Some("format") => {
                format = Some(match tokens.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some("binary_big_endian") => {
                        return Err(Error::PlyFormat(
                            "big-endian PLY is not supported".into(),
                        ))
                    }
                    other => {
                        return Err(Error::PlyFormat(format!("bad format line: {other:?}")))
                    }
                });
            }
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| Error::PlyFormat("element without name".into()))?;
                let count: usize = tokens
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::PlyFormat("element without count".into()))?;
                elements.push(ElementDef {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::PlyFormat("property before element".into()))?;
                let kind = tokens
                    .next()
                    .ok_or_else(|| Error::PlyFormat("property without type".into()))?;
                if kind == "list" {
                    let count_type = ScalarType::parse(tokens.next().ok_or_else(|| {
                        Error::PlyFormat("list property without count type".into())
                    })?)?;
                    let item_type = ScalarType::parse(tokens.next().ok_or_else(|| {
                        Error::PlyFormat("list property without item type".into())
                    })?)?;
                    tokens
                        .next()
                        .ok_or_else(|| Error::PlyFormat("list property without name".into()))?;
                    element
                        .properties
                        .push(Property::List(count_type, item_type));
                } else {
                    let scalar = ScalarType::parse(kind)?;
                    let name = tokens
                        .next()
                        .ok_or_else(|| Error::PlyFormat("property without name".into()))?;
                    element
                        .properties
                        .push(Property::Scalar(scalar, name.to_string()));
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::PlyFormat(format!("unknown header line '{other}'")))
            }
        }
    }
    let format = format.ok_or_else(|| Error::PlyFormat("header has no format line".into()))?;

    let mut points: Vec<Vector3<f64>> = Vec::new();
    for element in &elements {
        let is_vertex = element.name == "vertex";
        let coord_slots: Option<[usize; 3]> = if is_vertex {
            let find = |target: &str| -> Result<usize> {
                element
                    .properties
                    .iter()
                    .position(|p| match p {
                        Property::Scalar(t, name) => {
                            name == target
                                && matches!(t, ScalarType::F32 | ScalarType::F64)
                        }
                        _ => false,
                    })
                    .ok_or_else(|| {
                        Error::PlyFormat(format!("vertex element lacks float {target}"))
                    })
            };
            Some([find("x")?, find("y")?, find("z")?])
        } else {
            None
        };

        match format {
            PlyFormat::Ascii => {
                for _ in 0..element.count {
                    line.clear();
                    if r.read_line(&mut line)? == 0 {
                        return Err(Error::PlyFormat("truncated ascii payload".into()));
                    }
                    if !is_vertex {
                        continue;
                    }
                    // Walk the row property by property; lists consume a
                    // count token plus that many items.
                    let mut tokens = line.split_whitespace();
                    let mut next_f64 = |what: &str| -> Result<f64> {
                        let token = tokens
                            .next()
                            .ok_or_else(|| Error::PlyFormat(format!("row missing {what}")))?;
                        token
                            .parse::<f64>()
                            .map_err(|_| Error::PlyFormat(format!("bad value '{token}'")))
                    };
                    let mut coords = [0.0f64; 3];
                    for (pi, prop) in element.properties.iter().enumerate() {
                        match prop {
                            Property::Scalar(t, _) => {
                                let v = next_f64("scalar")?;
                                // float32 columns carry f32 values; quantize
                                // so ascii and binary files read identically
                                let v = if *t == ScalarType::F32 {
                                    v as f32 as f64
                                } else {
                                    v
                                };
                                if let Some(slots) = coord_slots {
                                    for (k, &slot) in slots.iter().enumerate() {
                                        if slot == pi {
                                            coords[k] = v;
                                        }
                                    }
                                }
                            }
                            Property::List(_, _) => {
                                let n = next_f64("list count")? as usize;
                                for _ in 0..n {
                                    next_f64("list item")?;
                                }
                            }
                        }
                    }
                    points.push(Vector3::new(coords[0], coords[1], coords[2]));
                }
            }
            PlyFormat::BinaryLittleEndian => {
                for _ in 0..element.count {
                    let mut coords = [0.0f64; 3];
                    for (pi, prop) in element.properties.iter().enumerate() {
                        match prop {
                            Property::Scalar(t, _) => {
                                let v = t.read_f64(r)?;
                                if let Some(slots) = coord_slots {
                                    for (k, &slot) in slots.iter().enumerate() {
                                        if slot == pi {
                                            coords[k] = v;
                                        }
                                    }
                                }
                            }
                            Property::List(count_t, item_t) => {
                                let n = count_t.read_f64(r)? as usize;
                                let mut skip = vec![0u8; n * item_t.size()];
                                r.read_exact(&mut skip).map_err(|_| {
                                    Error::PlyFormat("truncated list payload".into())
                                })?;
                            }
                        }
                    }
                    if is_vertex {
                        points.push(Vector3::new(coords[0], coords[1], coords[2]));
                    }
                }
            }
        }
    }
    PointCloud::new(points)
}
