//! ASCII `.xyz` and PLY (ASCII / binary little-endian) readers and writers.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

/// Loads a cloud from `.xyz` or `.ply`, keeping file order.
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.display().to_string();
    let cloud = if bytes.starts_with(b"ply") {
        parse_ply(&bytes)?
    } else {
        parse_xyz(&bytes)?
    };
    Ok(cloud.with_source(id))
}

/// Writes by extension: `.ply` as binary little-endian float32, anything else
/// as ASCII xyz with round-trip precision.
pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let is_ply = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("ply"))
        .unwrap_or(false);
    if is_ply {
        return write_ply(path, cloud, PlyEncoding::BinaryLittleEndian);
    }
    let mut out = String::with_capacity(cloud.len() * 48);
    for p in cloud.points() {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud, encoding: PlyEncoding) -> Result<()> {
    let path = path.as_ref();
    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    let mut buf = Vec::with_capacity(cloud.len() * 12 + 128);
    write!(
        buf,
        "ply\nformat {format} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )
    .expect("writing to a Vec cannot fail");
    for p in cloud.points() {
        match encoding {
            PlyEncoding::Ascii => {
                writeln!(buf, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32).expect("vec write")
            }
            PlyEncoding::BinaryLittleEndian => {
                for c in p {
                    buf.extend_from_slice(&(*c as f32).to_le_bytes());
                }
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn parse_xyz(bytes: &[u8]) -> Result<PointCloud> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::parse("byte 0", e.to_string()))?;
    let mut pts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut p = [0.0; 3];
        for c in p.iter_mut() {
            let tok = it
                .next()
                .ok_or_else(|| Error::parse(format!("line {}", lineno + 1), "expected 3 coordinates"))?;
            *c = parse_coord(tok, || format!("line {}", lineno + 1))?;
        }
        pts.push(p);
    }
    PointCloud::new(pts)
}

fn parse_coord(tok: &str, loc: impl Fn() -> String) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(loc(), format!("bad number {tok:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(loc(), "non-finite coordinate"));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Option<Scalar>)>, // None = list property
}

fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let end_tag = b"end_header";
    let hdr_end = bytes
        .windows(end_tag.len())
        .position(|w| w == end_tag)
        .ok_or_else(|| Error::parse("header", "missing end_header"))?;
    let mut body_start = hdr_end + end_tag.len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = std::str::from_utf8(&bytes[..hdr_end])
        .map_err(|_| Error::parse("header", "header is not valid UTF-8"))?;

    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for (i, line) in header.lines().enumerate() {
        let loc = || format!("header line {}", i + 1);
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] | [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _ver] => {
                binary = Some(match *fmt {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    other => return Err(Error::parse(loc(), format!("unsupported format {other}"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::parse(loc(), "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] => elements
                .last_mut()
                .ok_or_else(|| Error::parse(loc(), "property before element"))?
                .props
                .push((name.to_string(), None)),
            ["property", ty, name] => {
                let s = Scalar::parse(ty)
                    .ok_or_else(|| Error::parse(loc(), format!("unknown property type {ty}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(loc(), "property before element"))?
                    .props
                    .push((name.to_string(), Some(s)));
            }
            _ => return Err(Error::parse(loc(), format!("malformed header line {line:?}"))),
        }
    }
    let binary = binary.ok_or_else(|| Error::parse("header", "missing format line"))?;
    let vpos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse("header", "no vertex element"))?;
    let vertex = &elements[vpos];
    let find = |n: &str| vertex.props.iter().position(|(p, _)| p == n);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::parse("header", "vertex element lacks x/y/z")),
    };
    if vertex.props.iter().any(|(_, t)| t.is_none()) {
        return Err(Error::parse("header", "list properties on vertex are not supported"));
    }

    let body = &bytes[body_start..];
    let mut pts = Vec::with_capacity(vertex.count);
    if binary {
        let mut offset = 0usize;
        for e in &elements[..vpos] {
            if e.props.iter().any(|(_, t)| t.is_none()) {
                return Err(Error::parse("header", "list element before vertex in binary PLY"));
            }
            offset += e.count * e.props.iter().map(|(_, t)| t.unwrap().size()).sum::<usize>();
        }
        let stride: usize = vertex.props.iter().map(|(_, t)| t.unwrap().size()).sum();
        let mut offs = Vec::with_capacity(vertex.props.len());
        let mut acc = 0;
        for (_, t) in &vertex.props {
            offs.push(acc);
            acc += t.unwrap().size();
        }
        for r in 0..vertex.count {
            let start = offset + r * stride;
            if start + stride > body.len() {
                return Err(Error::parse(
                    format!("byte offset {}", body_start + start),
                    format!("truncated payload: {} of {} vertices present", r, vertex.count),
                ));
            }
            let row = &body[start..start + stride];
            let get = |i: usize| vertex.props[i].1.unwrap().read_le(&row[offs[i]..]);
            let p: Point = [get(ix), get(iy), get(iz)];
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::parse(
                    format!("byte offset {}", body_start + start),
                    "non-finite coordinate",
                ));
            }
            pts.push(p);
        }
    } else {
        let text = std::str::from_utf8(body).map_err(|_| Error::parse("body", "invalid UTF-8"))?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header_lines = header.lines().count() + 1;
        for e in &elements[..vpos] {
            for _ in 0..e.count {
                lines.next();
            }
        }
        for r in 0..vertex.count {
            let (ln, line) = lines.next().ok_or_else(|| {
                Error::parse(
                    "end of file",
                    format!("truncated payload: {} of {} vertices present", r, vertex.count),
                )
            })?;
            let loc = || format!("line {}", header_lines + ln + 1);
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < vertex.props.len() {
                return Err(Error::parse(loc(), "too few values in vertex row"));
            }
            let typed = |i: usize| -> Result<f64> {
                let v = parse_coord(toks[i], loc)?;
                // a float32 property holds the nearest float32 to the printed decimal
                Ok(match vertex.props[i].1 {
                    Some(Scalar::F32) => toks[i].parse::<f32>().map(f64::from).unwrap_or(v),
                    _ => v,
                })
            };
            pts.push([typed(ix)?, typed(iy)?, typed(iz)?]);
        }
    }
    PointCloud::new(pts)
}
