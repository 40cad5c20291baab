//! PLY geometry I/O.
//!
//! Reads ASCII and binary little-endian PLY, keeping only the x/y/z
//! properties of the vertex element. Coordinates must already be integers;
//! floating point inputs are accepted only when voxelization is requested
//! explicitly, in which case they are rounded half-up to the grid.

use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

use crate::pc::PointCloud;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Round non-integer coordinates to the voxel grid instead of rejecting.
    pub voxelize: bool,
    /// Grid depth; inferred from the largest coordinate when absent.
    pub bit_depth: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PropType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PropType {
    fn parse(s: &str) -> Option<PropType> {
        Some(match s {
            "char" | "int8" => PropType::I8,
            "uchar" | "uint8" => PropType::U8,
            "short" | "int16" => PropType::I16,
            "ushort" | "uint16" => PropType::U16,
            "int" | "int32" => PropType::I32,
            "uint" | "uint32" => PropType::U32,
            "float" | "float32" => PropType::F32,
            "double" | "float64" => PropType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PropType::I8 | PropType::U8 => 1,
            PropType::I16 | PropType::U16 => 2,
            PropType::I32 | PropType::U32 | PropType::F32 => 4,
            PropType::F64 => 8,
        }
    }

    fn read_le(self, buf: &[u8]) -> f64 {
        match self {
            PropType::I8 => buf[0] as i8 as f64,
            PropType::U8 => buf[0] as f64,
            PropType::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            PropType::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            PropType::I32 => i32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            PropType::U32 => u32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            PropType::F32 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            PropType::F64 => f64::from_le_bytes(buf[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
struct Property {
    name: String,
    ty: PropType,
    is_list: bool,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
}

fn header_line<R: BufRead>(r: &mut R, lineno: &mut usize) -> Result<String> {
    let mut line = String::new();
    *lineno += 1;
    if r.read_line(&mut line)? == 0 {
        return Err(Error::Parse(format!("line {lineno}: unexpected end of header")));
    }
    Ok(line.trim().to_string())
}

fn parse_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut lineno = 0usize;
    if header_line(r, &mut lineno)? != "ply" {
        return Err(Error::Parse("line 1: not a PLY file (missing 'ply' magic)".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = header_line(r, &mut lineno)?;
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                format = Some(match tok.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLe,
                    other => {
                        return Err(Error::Parse(format!(
                            "line {lineno}: unsupported format {:?}",
                            other.unwrap_or("")
                        )))
                    }
                });
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| Error::Parse(format!("line {lineno}: element needs a name")))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("line {lineno}: element needs a count")))?;
                elements.push(Element { name: name.into(), count, props: Vec::new() });
            }
            Some("property") => {
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| Error::Parse(format!("line {lineno}: property before any element")))?;
                let t1 = tok.next().ok_or_else(|| Error::Parse(format!("line {lineno}: property needs a type")))?;
                if t1 == "list" {
                    let _count_ty = tok.next();
                    let val_ty = tok
                        .next()
                        .and_then(PropType::parse)
                        .ok_or_else(|| Error::Parse(format!("line {lineno}: bad list property")))?;
                    let name = tok.next().ok_or_else(|| Error::Parse(format!("line {lineno}: property needs a name")))?;
                    elem.props.push(Property { name: name.into(), ty: val_ty, is_list: true });
                } else {
                    let ty = PropType::parse(t1)
                        .ok_or_else(|| Error::Parse(format!("line {lineno}: unknown property type '{t1}'")))?;
                    let name = tok.next().ok_or_else(|| Error::Parse(format!("line {lineno}: property needs a name")))?;
                    elem.props.push(Property { name: name.into(), ty, is_list: false });
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(Error::Parse(format!("line {lineno}: unknown header keyword '{other}'"))),
        }
    }
    let format = format.ok_or_else(|| Error::Parse("header has no format line".into()))?;
    Ok(Header { format, elements })
}

fn grid_coord(v: f64, opts: &ReadOptions, idx: usize) -> Result<u32> {
    let r = if opts.voxelize {
        (v + 0.5).floor() // round half up
    } else {
        if v.fract() != 0.0 {
            return Err(Error::Parse(format!(
                "vertex {idx} has non-integer coordinate {v}; pass --voxelize to quantize"
            )));
        }
        v
    };
    if !(0.0..=u32::MAX as f64).contains(&r) {
        return Err(Error::Parse(format!("vertex {idx}: coordinate {v} is outside the non-negative grid")));
    }
    Ok(r as u32)
}

pub fn read_ply<R: BufRead>(mut r: R, opts: &ReadOptions) -> Result<PointCloud> {
    let header = parse_header(&mut r)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Parse("no vertex element".into()))?;

    // skip any elements declared before vertex
    for e in &header.elements[..vertex_pos] {
        match header.format {
            PlyFormat::Ascii => {
                let mut line = String::new();
                for _ in 0..e.count {
                    line.clear();
                    if r.read_line(&mut line)? == 0 {
                        return Err(Error::Parse(format!("element '{}' is truncated", e.name)));
                    }
                }
            }
            PlyFormat::BinaryLe => {
                if e.props.iter().any(|p| p.is_list) {
                    return Err(Error::Parse(format!(
                        "binary element '{}' with list properties precedes vertex data; unsupported layout",
                        e.name
                    )));
                }
                let row: usize = e.props.iter().map(|p| p.ty.size()).sum();
                std::io::copy(&mut r.by_ref().take((row * e.count) as u64), &mut std::io::sink())?;
            }
        }
    }

    let vertex = &header.elements[vertex_pos];
    if vertex.props.iter().any(|p| p.is_list) {
        return Err(Error::Parse("vertex element has list properties; unsupported".into()));
    }
    let mut xyz = [usize::MAX; 3];
    for (i, p) in vertex.props.iter().enumerate() {
        match p.name.as_str() {
            "x" => xyz[0] = i,
            "y" => xyz[1] = i,
            "z" => xyz[2] = i,
            _ => {}
        }
    }
    if xyz.contains(&usize::MAX) {
        return Err(Error::Parse("vertex element lacks x/y/z properties".into()));
    }

    let mut points = Vec::with_capacity(vertex.count);
    match header.format {
        PlyFormat::Ascii => {
            let mut line = String::new();
            for idx in 0..vertex.count {
                line.clear();
                if r.read_line(&mut line)? == 0 {
                    return Err(Error::Parse(format!("vertex data truncated at row {idx}")));
                }
                let vals: Vec<&str> = line.split_whitespace().collect();
                if vals.len() < vertex.props.len() {
                    return Err(Error::Parse(format!("vertex row {idx} has {} fields, expected {}", vals.len(), vertex.props.len())));
                }
                let mut p = [0u32; 3];
                for a in 0..3 {
                    let raw: f64 = vals[xyz[a]]
                        .parse()
                        .map_err(|_| Error::Parse(format!("vertex row {idx}: bad number '{}'", vals[xyz[a]])))?;
                    p[a] = grid_coord(raw, opts, idx)?;
                }
                points.push(p);
            }
        }
        PlyFormat::BinaryLe => {
            let row_size: usize = vertex.props.iter().map(|p| p.ty.size()).sum();
            let mut offsets = Vec::with_capacity(vertex.props.len());
            let mut off = 0;
            for p in &vertex.props {
                offsets.push(off);
                off += p.ty.size();
            }
            let mut buf = vec![0u8; row_size];
            for idx in 0..vertex.count {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Parse(format!("vertex data truncated at row {idx}")))?;
                let mut p = [0u32; 3];
                for a in 0..3 {
                    let prop = &vertex.props[xyz[a]];
                    let raw = prop.ty.read_le(&buf[offsets[xyz[a]]..]);
                    p[a] = grid_coord(raw, opts, idx)?;
                }
                points.push(p);
            }
        }
    }

    let bit_depth = match opts.bit_depth {
        Some(d) => d,
        None => {
            let max = points.iter().flat_map(|p| p.iter()).copied().max().unwrap_or(0);
            let mut d = 1;
            while (1u64 << d) <= max as u64 {
                d += 1;
            }
            d
        }
    };
    PointCloud::new(points, bit_depth)
}

pub fn read_ply_file(path: &Path, opts: &ReadOptions) -> Result<PointCloud> {
    let f = std::fs::File::open(path)?;
    read_ply(std::io::BufReader::new(f), opts)
}

pub fn write_ply<W: Write>(pc: &PointCloud, w: W, format: PlyFormat) -> Result<()> {
    let mut w = BufWriter::new(w);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLe => "binary_little_endian",
    };
    write!(
        w,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty uint x\nproperty uint y\nproperty uint z\nend_header\n",
        pc.len()
    )?;
    for p in pc.points() {
        match format {
            PlyFormat::Ascii => writeln!(w, "{} {} {}", p[0], p[1], p[2])?,
            PlyFormat::BinaryLe => {
                w.write_all(&p[0].to_le_bytes())?;
                w.write_all(&p[1].to_le_bytes())?;
                w.write_all(&p[2].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ply_file(pc: &PointCloud, path: &Path, format: PlyFormat) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_ply(pc, f, format)
}
