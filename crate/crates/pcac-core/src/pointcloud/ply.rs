//! PLY reader and writer for colored voxel clouds.
//!
//! Reads ASCII and binary little-endian files. Only the `vertex` element is
//! interpreted (`x y z red green blue`); other elements are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Coord, Rgb, VoxelizedFrame, MAX_DEPTH};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Parse(format!("unknown PLY scalar type '{other}'"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(bytes[0] as i8),
            Scalar::U8 => f64::from(bytes[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([bytes[0], bytes[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([bytes[0], bytes[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes(bytes[..4].try_into().unwrap())),
            Scalar::U32 => f64::from(u32::from_le_bytes(bytes[..4].try_into().unwrap())),
            Scalar::F32 => f64::from(f32::from_le_bytes(bytes[..4].try_into().unwrap())),
            Scalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    depth: Option<u32>,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut line = String::new();
    let next = |r: &mut R, line: &mut String| -> Result<bool> {
        line.clear();
        Ok(r.read_line(line)? > 0)
    };
    if !next(r, &mut line)? || line.trim_end() != "ply" {
        return Err(Error::Parse("missing 'ply' magic line".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut depth = None;
    loop {
        if !next(r, &mut line)? {
            return Err(Error::Parse("header ended before 'end_header'".into()));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["end_header"] => break,
            ["format", fmt, _version] => {
                format = Some(match *fmt {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(Error::UnsupportedContent(format!("PLY format '{other}'")))
                    }
                });
            }
            ["comment", "depth", d] => {
                depth = Some(
                    d.parse()
                        .map_err(|_| Error::Parse(format!("bad depth comment '{d}'")))?,
                );
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad element count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Parse("property before element".into()))?;
                el.props.push(Property::List {
                    count: Scalar::parse(count)?,
                    item: Scalar::parse(item)?,
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Parse("property before element".into()))?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty)?,
                });
            }
            _ => return Err(Error::Parse(format!("malformed header line '{}'", line.trim_end()))),
        }
    }
    let format = format.ok_or_else(|| Error::Parse("missing format line".into()))?;
    Ok(Header {
        format,
        elements,
        depth,
    })
}

/// Loads a PLY frame, inferring the voxel depth from a `comment depth N`
/// header line or, failing that, from the largest coordinate.
pub fn load_ply(path: &Path) -> Result<VoxelizedFrame> {
    load_ply_with_depth(path, None)
}

/// Loads a PLY frame; `depth` overrides any depth found in the header.
pub fn load_ply_with_depth(path: &Path, depth: Option<u32>) -> Result<VoxelizedFrame> {
    let mut r = BufReader::new(File::open(path)?);
    read_ply(&mut r, depth)
}

fn read_ply<R: BufRead>(r: &mut R, depth_flag: Option<u32>) -> Result<VoxelizedFrame> {
    let header = read_header(r)?;
    let mut coords: Vec<Coord> = Vec::new();
    let mut colors: Vec<Rgb> = Vec::new();
    let mut seen_vertex = false;

    let mut ascii_tokens = AsciiTokens::default();
    for el in &header.elements {
        let is_vertex = el.name == "vertex";
        let slots = if is_vertex {
            seen_vertex = true;
            Some(vertex_slots(el)?)
        } else {
            None
        };
        let mut row = vec![0.0f64; el.props.len()];
        for _ in 0..el.count {
            for (k, p) in el.props.iter().enumerate() {
                row[k] = match (header.format, p) {
                    (PlyFormat::Ascii, Property::Scalar { .. }) => ascii_tokens.next_value(r)?,
                    (PlyFormat::Ascii, Property::List { .. }) => {
                        let n = ascii_tokens.next_value(r)? as usize;
                        for _ in 0..n {
                            ascii_tokens.next_value(r)?;
                        }
                        0.0
                    }
                    (PlyFormat::BinaryLittleEndian, Property::Scalar { ty, .. }) => {
                        read_binary(r, *ty)?
                    }
                    (PlyFormat::BinaryLittleEndian, Property::List { count, item }) => {
                        let n = read_binary(r, *count)? as usize;
                        let mut skip = vec![0u8; n * item.size()];
                        r.read_exact(&mut skip).map_err(truncated)?;
                        0.0
                    }
                };
            }
            if let Some(s) = &slots {
                let c = [row[s[0]], row[s[1]], row[s[2]]];
                let mut coord = [0i32; 3];
                for (dst, v) in coord.iter_mut().zip(c) {
                    let q = v.round_ties_even();
                    if !q.is_finite() || q < 0.0 || q > f64::from(i32::MAX) {
                        return Err(Error::InvariantViolation(format!(
                            "coordinate value {v} is not a nonnegative voxel index"
                        )));
                    }
                    *dst = q as i32;
                }
                let mut rgb = [0u8; 3];
                for (dst, &slot) in rgb.iter_mut().zip(&s[3..]) {
                    let v = row[slot].round_ties_even();
                    if !(0.0..=255.0).contains(&v) {
                        return Err(Error::UnsupportedContent(format!(
                            "color value {} outside [0, 255]",
                            row[slot]
                        )));
                    }
                    *dst = v as u8;
                }
                coords.push(coord);
                colors.push(rgb);
            }
        }
    }
    if !seen_vertex {
        return Err(Error::UnsupportedContent("no vertex element".into()));
    }

    let depth = match depth_flag.or(header.depth) {
        Some(d) => d,
        None => infer_depth(&coords),
    };
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::Parse(format!("voxel depth {depth} out of range")));
    }
    VoxelizedFrame::from_points_merging(coords, colors, depth)
}

/// Smallest bit depth that holds every coordinate (at least 1).
pub(crate) fn infer_depth(coords: &[Coord]) -> u32 {
    let max = coords.iter().flatten().copied().max().unwrap_or(0).max(1) as u32;
    32 - max.leading_zeros()
}

fn vertex_slots(el: &Element) -> Result<[usize; 6]> {
    let find = |want: &str| {
        el.props.iter().position(|p| match p {
            Property::Scalar { name, .. } => name == want,
            Property::List { .. } => false,
        })
    };
    let mut slots = [0usize; 6];
    for (slot, name) in slots.iter_mut().zip(["x", "y", "z"]) {
        *slot = find(name).ok_or_else(|| Error::Parse(format!("vertex has no '{name}'")))?;
    }
    for (slot, name) in slots[3..].iter_mut().zip(["red", "green", "blue"]) {
        *slot = find(name).ok_or_else(|| {
            Error::UnsupportedContent(format!("vertex has no color property '{name}'"))
        })?;
    }
    Ok(slots)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Parse("PLY body is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_binary<R: Read>(r: &mut R, ty: Scalar) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf[..ty.size()]).map_err(truncated)?;
    Ok(ty.read_le(&buf))
}

#[derive(Default)]
struct AsciiTokens {
    line: Vec<String>,
    pos: usize,
}

impl AsciiTokens {
    fn next_value<R: BufRead>(&mut self, r: &mut R) -> Result<f64> {
        while self.pos >= self.line.len() {
            let mut s = String::new();
            if r.read_line(&mut s)? == 0 {
                return Err(Error::Parse("PLY body is truncated".into()));
            }
            self.line = s.split_whitespace().map(str::to_owned).collect();
            self.pos = 0;
        }
        let tok = &self.line[self.pos];
        self.pos += 1;
        tok.parse()
            .map_err(|_| Error::Parse(format!("bad numeric token '{tok}'")))
    }
}

/// Writes `x y z red green blue` as `int`/`uchar` properties with a depth comment.
pub fn write_ply(frame: &VoxelizedFrame, path: &Path, format: PlyFormat) -> Result<()> {
    write_ply_inner(frame, None, path, format)
}

/// As [`write_ply`] with one extra per-point `float` property.
pub fn write_ply_with_scalar(
    frame: &VoxelizedFrame,
    scalar_name: &str,
    scalar: &[f64],
    path: &Path,
    format: PlyFormat,
) -> Result<()> {
    if scalar.len() != frame.len() {
        return Err(Error::InvariantViolation(format!(
            "{} scalars for {} points",
            scalar.len(),
            frame.len()
        )));
    }
    write_ply_inner(frame, Some((scalar_name, scalar)), path, format)
}

fn write_ply_inner(
    frame: &VoxelizedFrame,
    scalar: Option<(&str, &[f64])>,
    path: &Path,
    format: PlyFormat,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0\ncomment depth {}", frame.depth())?;
    writeln!(w, "element vertex {}", frame.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property int {axis}")?;
    }
    for ch in ["red", "green", "blue"] {
        writeln!(w, "property uchar {ch}")?;
    }
    if let Some((name, _)) = scalar {
        writeln!(w, "property float {name}")?;
    }
    writeln!(w, "end_header")?;
    for (i, (c, rgb)) in frame.coords().iter().zip(frame.colors()).enumerate() {
        match format {
            PlyFormat::Ascii => {
                write!(w, "{} {} {} {} {} {}", c[0], c[1], c[2], rgb[0], rgb[1], rgb[2])?;
                if let Some((_, s)) = scalar {
                    write!(w, " {}", s[i] as f32)?;
                }
                writeln!(w)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in c {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(rgb)?;
                if let Some((_, s)) = scalar {
                    w.write_all(&(s[i] as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
