use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{ColorPointCloud, PointCloudError};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
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
    fn parse(s: &str) -> Result<Self, PointCloudError> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(parse_err(format!("unknown property type `{other}`"))),
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

fn parse_err(msg: impl Into<String>) -> PointCloudError {
    PointCloudError::Parse(msg.into())
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PointCloudError> {
    let mut offset = 0;
    let mut next_line = || -> Result<&str, PointCloudError> {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err("header is not terminated by `end_header`"))?;
        offset += end + 1;
        std::str::from_utf8(&rest[..end])
            .map(|s| s.trim_end_matches('\r'))
            .map_err(|_| parse_err("header is not valid UTF-8"))
    };

    if next_line()?.trim() != "ply" {
        return Err(parse_err("missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = next_line()?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", fmt, _version] => {
                format = Some(match *fmt {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLittleEndian,
                    other => return Err(parse_err(format!("unsupported format `{other}`"))),
                });
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(format!("bad element count `{count}`")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err("property before any element"))?;
                el.properties.push(Property {
                    name: name.to_string(),
                    kind: PropertyKind::List {
                        count: Scalar::parse(count)?,
                        item: Scalar::parse(item)?,
                    },
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err("property before any element"))?;
                el.properties.push(Property {
                    name: name.to_string(),
                    kind: PropertyKind::Scalar(Scalar::parse(ty)?),
                });
            }
            _ => return Err(parse_err(format!("unrecognized header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| parse_err("missing `format` line"))?;
    Ok(Header { format, elements, body_offset: offset })
}

/// Sequential value source over either an ASCII or binary body.
trait Values {
    fn next(&mut self, ty: Scalar) -> Result<f64, PointCloudError>;
}

struct BinaryLe<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Values for BinaryLe<'_> {
    fn next(&mut self, ty: Scalar) -> Result<f64, PointCloudError> {
        let n = ty.size();
        let b = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| parse_err("truncated binary payload"))?;
        self.pos += n;
        Ok(match ty {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b.try_into().unwrap()),
        })
    }
}

struct Ascii<'a> {
    tokens: std::str::SplitAsciiWhitespace<'a>,
}

impl Values for Ascii<'_> {
    fn next(&mut self, ty: Scalar) -> Result<f64, PointCloudError> {
        let tok = self.tokens.next().ok_or_else(|| parse_err("truncated ascii payload"))?;
        let v: f64 = tok
            .parse()
            .map_err(|_| parse_err(format!("bad numeric token `{tok}`")))?;
        if ty == Scalar::F32 {
            // match the precision a binary file would carry
            return Ok(v as f32 as f64);
        }
        Ok(v)
    }
}

fn read_body(header: &Header, values: &mut dyn Values) -> Result<ColorPointCloud, PointCloudError> {
    for el in &header.elements {
        if el.name != "vertex" {
            skip_element(el, values)?;
            continue;
        }
        let find = |name: &str| {
            el.properties
                .iter()
                .position(|p| p.name == name && matches!(p.kind, PropertyKind::Scalar(_)))
                .ok_or_else(|| PointCloudError::MissingProperty(name.to_string()))
        };
        let slots = [find("x")?, find("y")?, find("z")?, find("red")?, find("green")?, find("blue")?];

        let mut positions = Vec::with_capacity(el.count);
        let mut colors = Vec::with_capacity(el.count);
        let mut row = vec![0.0; el.properties.len()];
        for _ in 0..el.count {
            for (prop, slot) in el.properties.iter().zip(row.iter_mut()) {
                *slot = match prop.kind {
                    PropertyKind::Scalar(ty) => values.next(ty)?,
                    PropertyKind::List { count, item } => {
                        skip_list(values, count, item)?;
                        0.0
                    }
                };
            }
            positions.push(Vec3::new(row[slots[0]], row[slots[1]], row[slots[2]]));
            let c = |v: f64| v.round().clamp(0.0, 255.0) as u8;
            colors.push([c(row[slots[3]]), c(row[slots[4]]), c(row[slots[5]])]);
        }
        return ColorPointCloud::new(positions, colors);
    }
    Err(PointCloudError::MissingProperty("vertex".into()))
}

fn skip_list(values: &mut dyn Values, count: Scalar, item: Scalar) -> Result<(), PointCloudError> {
    let n = values.next(count)?;
    if n < 0.0 {
        return Err(parse_err("negative list length"));
    }
    for _ in 0..n as usize {
        values.next(item)?;
    }
    Ok(())
}

fn skip_element(el: &Element, values: &mut dyn Values) -> Result<(), PointCloudError> {
    for _ in 0..el.count {
        for prop in &el.properties {
            match prop.kind {
                PropertyKind::Scalar(ty) => {
                    values.next(ty)?;
                }
                PropertyKind::List { count, item } => skip_list(values, count, item)?,
            }
        }
    }
    Ok(())
}

/// Parses a PLY document held in memory.
pub fn read_ply(bytes: &[u8]) -> Result<ColorPointCloud, PointCloudError> {
    let header = parse_header(bytes)?;
    let body = &bytes[header.body_offset..];
    match header.format {
        Format::BinaryLittleEndian => read_body(&header, &mut BinaryLe { bytes: body, pos: 0 }),
        Format::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| parse_err("ascii body is not valid UTF-8"))?;
            read_body(&header, &mut Ascii { tokens: text.split_ascii_whitespace() })
        }
    }
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<ColorPointCloud, PointCloudError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_ply(&bytes)
}

/// Writes binary little-endian PLY. Positions use `float` when every
/// coordinate is exactly representable in 32 bits and `double` otherwise,
/// so a save/load cycle is always bit-exact.
pub fn write_ply<W: Write>(cloud: &ColorPointCloud, mut w: W) -> std::io::Result<()> {
    let single = cloud
        .positions()
        .iter()
        .all(|p| p.iter().all(|&c| (c as f32) as f64 == c));
    let ty = if single { "float" } else { "double" };
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "comment scrforge")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property {ty} {axis}")?;
    }
    for ch in ["red", "green", "blue"] {
        writeln!(w, "property uchar {ch}")?;
    }
    writeln!(w, "end_header")?;
    for (p, c) in cloud.positions().iter().zip(cloud.colors()) {
        for &v in p.iter() {
            if single {
                w.write_all(&(v as f32).to_le_bytes())?;
            } else {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(c)?;
    }
    w.flush()
}

pub fn save_ply(cloud: &ColorPointCloud, path: impl AsRef<Path>) -> Result<(), PointCloudError> {
    write_ply(cloud, BufWriter::new(File::create(path)?))?;
    Ok(())
}
