//! PLY reading and writing.
//!
//! Supports `ascii 1.0` and `binary_little_endian 1.0`. Only the `vertex`
//! element is interpreted; other elements are skipped (elements declared
//! after `vertex` are never read).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::io::cloud::{norm, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(name: &str) -> Option<Scalar> {
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
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum PropertyKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropertyKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let magic_len = if bytes.starts_with(b"ply\n") {
        4
    } else if bytes.starts_with(b"ply\r\n") {
        5
    } else {
        return Err(Error::MalformedHeader("missing `ply` magic".into()));
    };

    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut pos = magic_len;
    loop {
        let rest = &bytes[pos..];
        let eol = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("missing end_header".into()))?;
        let line = std::str::from_utf8(&rest[..eol])
            .map_err(|_| Error::MalformedHeader("header is not valid text".into()))?
            .trim_end_matches('\r');
        pos += eol + 1;

        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                let kind = tokens.next().unwrap_or("");
                let version = tokens.next().unwrap_or("");
                let f = match kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    "binary_big_endian" => {
                        return Err(Error::UnsupportedFormat("binary_big_endian".into()))
                    }
                    other => return Err(Error::MalformedHeader(format!("unknown format `{other}`"))),
                };
                if version != "1.0" {
                    return Err(Error::UnsupportedFormat(format!("version `{version}`")));
                }
                format = Some(f);
            }
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| Error::MalformedHeader("element without name".into()))?;
                let count = tokens
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| Error::MalformedHeader(format!("bad count for element `{name}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::MalformedHeader("property before any element".into()))?;
                let bad = || Error::MalformedHeader(format!("bad property line `{line}`"));
                let ty = tokens.next().ok_or_else(bad)?;
                let kind = if ty == "list" {
                    let count = tokens.next().and_then(Scalar::parse).ok_or_else(bad)?;
                    let item = tokens.next().and_then(Scalar::parse).ok_or_else(bad)?;
                    PropertyKind::List { count, item }
                } else {
                    PropertyKind::Scalar(Scalar::parse(ty).ok_or_else(bad)?)
                };
                let name = tokens.next().ok_or_else(bad)?;
                element.properties.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            Some(other) => {
                return Err(Error::MalformedHeader(format!("unknown header keyword `{other}`")))
            }
        }
    }

    let format = format.ok_or_else(|| Error::MalformedHeader("missing format line".into()))?;
    Ok(Header {
        format,
        elements,
        body_offset: pos,
    })
}

/// Column slots of the vertex attributes we care about.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
    normal: Option<[usize; 3]>,
}

impl VertexLayout {
    fn from_element(el: &Element) -> Result<Self> {
        let find = |name: &str| {
            el.properties
                .iter()
                .position(|p| p.name == name && matches!(p.kind, PropertyKind::Scalar(_)))
        };
        let triple = |a: &str, b: &str, c: &str| match (find(a), find(b), find(c)) {
            (Some(i), Some(j), Some(k)) => Some([i, j, k]),
            _ => None,
        };
        let xyz = triple("x", "y", "z")
            .ok_or_else(|| Error::MalformedHeader("vertex element lacks x, y, z".into()))?;
        Ok(VertexLayout {
            xyz,
            rgb: triple("red", "green", "blue"),
            normal: triple("nx", "ny", "nz"),
        })
    }
}

/// Reads values of one element instance into `row` (lists are consumed and
/// dropped, their slot holds NaN).
trait BodyReader {
    fn read_row(&mut self, el: &Element, row: &mut [f64]) -> Option<()>;
}

struct AsciiReader<'a> {
    tokens: std::str::SplitAsciiWhitespace<'a>,
}

impl BodyReader for AsciiReader<'_> {
    fn read_row(&mut self, el: &Element, row: &mut [f64]) -> Option<()> {
        for (slot, prop) in row.iter_mut().zip(&el.properties) {
            match prop.kind {
                PropertyKind::Scalar(_) => *slot = self.tokens.next()?.parse().ok()?,
                PropertyKind::List { .. } => {
                    let n: usize = self.tokens.next()?.parse().ok()?;
                    for _ in 0..n {
                        self.tokens.next()?;
                    }
                    *slot = f64::NAN;
                }
            }
        }
        Some(())
    }
}

struct BinaryReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl BinaryReader<'_> {
    fn take(&mut self, ty: Scalar) -> Option<f64> {
        let end = self.pos + ty.size();
        let bytes = self.data.get(self.pos..end)?;
        self.pos = end;
        Some(ty.read_le(bytes))
    }
}

impl BodyReader for BinaryReader<'_> {
    fn read_row(&mut self, el: &Element, row: &mut [f64]) -> Option<()> {
        for (slot, prop) in row.iter_mut().zip(&el.properties) {
            match prop.kind {
                PropertyKind::Scalar(ty) => *slot = self.take(ty)?,
                PropertyKind::List { count, item } => {
                    let n = self.take(count)? as usize;
                    let end = self.pos.checked_add(n.checked_mul(item.size())?)?;
                    if end > self.data.len() {
                        return None;
                    }
                    self.pos = end;
                    *slot = f64::NAN;
                }
            }
        }
        Some(())
    }
}

fn color_channel(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn read_body(header: &Header, reader: &mut dyn BodyReader, name: &str) -> Result<PointCloud> {
    let vertex_idx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::MalformedHeader("no vertex element".into()))?;
    let vertex = &header.elements[vertex_idx];
    if vertex.count == 0 {
        return Err(Error::MalformedHeader("vertex element is empty".into()));
    }
    let layout = VertexLayout::from_element(vertex)?;

    // Skip elements preceding the vertex block.
    for el in &header.elements[..vertex_idx] {
        let mut scratch = vec![0.0; el.properties.len()];
        for _ in 0..el.count {
            reader.read_row(el, &mut scratch).ok_or(Error::TruncatedBody {
                expected: vertex.count,
                read: 0,
            })?;
        }
    }

    let n = vertex.count;
    let mut positions = Vec::with_capacity(n);
    let mut colors = layout.rgb.map(|_| Vec::with_capacity(n));
    let mut normals = layout.normal.map(|_| Vec::with_capacity(n));
    let mut row = vec![0.0; vertex.properties.len()];
    for read in 0..n {
        reader
            .read_row(vertex, &mut row)
            .ok_or(Error::TruncatedBody { expected: n, read })?;
        let [x, y, z] = layout.xyz;
        positions.push([row[x], row[y], row[z]]);
        if let (Some([r, g, b]), Some(c)) = (layout.rgb, colors.as_mut()) {
            c.push([color_channel(row[r]), color_channel(row[g]), color_channel(row[b])]);
        }
        if let (Some([a, b, c]), Some(nv)) = (layout.normal, normals.as_mut()) {
            nv.push([row[a], row[b], row[c]]);
        }
    }

    // File normals are often unnormalized; rescale, or drop the set if any is
    // degenerate.
    let normals = normals.and_then(|mut nv| {
        for nrm in nv.iter_mut() {
            let len = norm(*nrm);
            if !(len.is_finite() && len > 1e-12) {
                log::warn!("{name}: degenerate normal in file, ignoring file normals");
                return None;
            }
            *nrm = [nrm[0] / len, nrm[1] / len, nrm[2] / len];
        }
        Some(nv)
    });

    PointCloud::new(name, positions, colors, normals)
}

/// Parses a PLY byte buffer.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    parse_ply_named(bytes, "")
}

pub fn parse_ply_named(bytes: &[u8], name: &str) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let body = &bytes[header.body_offset..];
    match header.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body)
                .map_err(|_| Error::MalformedHeader("ASCII body is not valid text".into()))?;
            let mut reader = AsciiReader {
                tokens: text.split_ascii_whitespace(),
            };
            read_body(&header, &mut reader, name)
        }
        PlyFormat::BinaryLittleEndian => {
            let mut reader = BinaryReader { data: body, pos: 0 };
            read_body(&header, &mut reader, name)
        }
    }
}

/// Serializes a cloud. Positions and normals are written as `double`, so the
/// binary form round-trips exactly; the ASCII form prints shortest
/// round-trip decimals.
pub fn write_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    let _ = writeln!(header, "element vertex {}", cloud.len());
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals.is_some() {
        header.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if cloud.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");

    let mut out = header.into_bytes();
    match format {
        PlyFormat::Ascii => {
            let mut line = String::new();
            for i in 0..cloud.len() {
                line.clear();
                let p = cloud.positions[i];
                let _ = write!(line, "{} {} {}", p[0], p[1], p[2]);
                if let Some(n) = &cloud.normals {
                    let _ = write!(line, " {} {} {}", n[i][0], n[i][1], n[i][2]);
                }
                if let Some(c) = &cloud.colors {
                    let _ = write!(line, " {} {} {}", c[i][0], c[i][1], c[i][2]);
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for i in 0..cloud.len() {
                for v in cloud.positions[i] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(n) = &cloud.normals {
                    for v in n[i] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                if let Some(c) = &cloud.colors {
                    out.extend_from_slice(&c[i]);
                }
            }
        }
    }
    out
}
