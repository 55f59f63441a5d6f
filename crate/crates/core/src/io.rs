//! Point-set files (PLY, XYZ) and transform files (TOML).
//!
//! Binary PLY stores doubles and round-trips bit-exactly. Text formats are
//! written with 17 significant digits, which is enough to recover every
//! `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::em::{ModelParams, RegistrationReport};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointSet, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    PlyAscii,
    PlyBinaryLe,
    Xyz,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ply_ascii" | "ply-ascii" => Ok(Format::PlyAscii),
            "ply_binary_le" | "ply-binary-le" | "ply" => Ok(Format::PlyBinaryLe),
            "xyz" | "xyz_text" => Ok(Format::Xyz),
            other => Err(Error::InvalidConfig(format!("unknown point format '{other}'"))),
        }
    }
}

impl std::fmt::Display for Format {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Format::PlyAscii => "ply_ascii",
            Format::PlyBinaryLe => "ply_binary_le",
            Format::Xyz => "xyz",
        })
    }
}

impl Format {
    /// Guesses from the extension; `.ply` files are inspected on read.
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ply" => Some(Format::PlyBinaryLe),
            "xyz" | "txt" | "pts" => Some(Format::Xyz),
            _ => None,
        }
    }
}

/// Reads a point set and multiplies every coordinate by `scale`.
///
/// With `format = None` the format comes from the extension and, for PLY,
/// from the header's `format` line.
pub fn read_point_set(path: &Path, format: Option<Format>, scale: f64) -> Result<PointSet> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!("scale must be positive, got {scale}")));
    }
    let points = read_points(path, format)?;
    let points: Vec<Point3> = points.into_iter().map(|p| p * scale).collect();
    PointSet::new(0, points)
}

/// Reads raw coordinates; unlike [`read_point_set`] an empty file is accepted.
pub fn read_points(path: &Path, format: Option<Format>) -> Result<Vec<Point3>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = match format {
        Some(f) => f,
        None if bytes.starts_with(b"ply") => Format::PlyBinaryLe,
        None => Format::from_path(path).unwrap_or(Format::Xyz),
    };
    let points = match format {
        Format::Xyz => parse_xyz(path, &bytes)?,
        Format::PlyAscii | Format::PlyBinaryLe => parse_ply(path, &bytes)?,
    };
    if let Some(index) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::parse(path, format!("point {index}"), "non-finite coordinate"));
    }
    Ok(points)
}

pub fn write_point_set(set: &PointSet, path: &Path, format: Format) -> Result<()> {
    write_points(set.points(), path, format)
}

pub fn write_points(points: &[Point3], path: &Path, format: Format) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let result = match format {
        Format::Xyz => points
            .iter()
            .try_for_each(|p| writeln!(out, "{:.16e} {:.16e} {:.16e}", p.x, p.y, p.z)),
        Format::PlyAscii => write_ply_header(&mut out, "ascii", points.len()).and_then(|_| {
            points
                .iter()
                .try_for_each(|p| writeln!(out, "{:.16e} {:.16e} {:.16e}", p.x, p.y, p.z))
        }),
        Format::PlyBinaryLe => write_ply_header(&mut out, "binary_little_endian", points.len()).and_then(|_| {
            points.iter().try_for_each(|p| {
                out.write_all(&p.x.to_le_bytes())?;
                out.write_all(&p.y.to_le_bytes())?;
                out.write_all(&p.z.to_le_bytes())
            })
        }),
    };
    result.and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn write_ply_header(out: &mut impl Write, format: &str, count: usize) -> std::io::Result<()> {
    write!(
        out,
        "ply\nformat {format} 1.0\nelement vertex {count}\n\
         property double x\nproperty double y\nproperty double z\nend_header\n"
    )
}

fn parse_xyz(path: &Path, bytes: &[u8]) -> Result<Vec<Point3>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::parse(path, "byte offset", e.to_string()))?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let location = || format!("line {}", n + 1);
        let mut coords = [0.0f64; 3];
        let mut tokens = line.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty());
        for c in coords.iter_mut() {
            let token = tokens
                .next()
                .ok_or_else(|| Error::parse(path, location(), "expected three coordinates"))?;
            *c = token
                .parse()
                .map_err(|_| Error::parse(path, location(), format!("invalid number '{token}'")))?;
        }
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(Error::parse(path, location(), "non-finite coordinate"));
        }
        points.push(Point3::from(coords));
    }
    Ok(points)
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

    fn decode(self, b: &[u8]) -> f64 {
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

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, kind: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    binary: bool,
    elements: Vec<Element>,
    body_offset: usize,
    lines: usize,
}

fn parse_ply_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut lines = 0;
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(path, "header", "missing end_header"))?;
        let line = std::str::from_utf8(&bytes[offset..offset + end])
            .map_err(|_| Error::parse(path, format!("line {}", lines + 1), "header is not text"))?
            .trim_end_matches('\r');
        offset += end + 1;
        lines += 1;
        let location = || format!("line {lines}");
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if lines == 1 {
            if line.trim() != "ply" {
                return Err(Error::parse(path, location(), "missing 'ply' magic"));
            }
            continue;
        }
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", kind, _version] => {
                binary = Some(match *kind {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    "binary_big_endian" => {
                        return Err(Error::parse(path, location(), "big-endian PLY is not supported"));
                    }
                    other => return Err(Error::parse(path, location(), format!("unknown format '{other}'"))),
                });
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(path, location(), format!("invalid element count '{count}'")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count, item, _name] => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, location(), "property before element"))?;
                let (Some(count), Some(item)) = (Scalar::parse(count), Scalar::parse(item)) else {
                    return Err(Error::parse(path, location(), "unknown list property type"));
                };
                element.properties.push(Property::List { count, item });
            }
            ["property", kind, name] => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, location(), "property before element"))?;
                let kind = Scalar::parse(kind)
                    .ok_or_else(|| Error::parse(path, location(), format!("unknown property type '{kind}'")))?;
                element.properties.push(Property::Scalar {
                    name: name.to_string(),
                    kind,
                });
            }
            ["end_header"] => break,
            _ => return Err(Error::parse(path, location(), format!("unrecognised header line '{line}'"))),
        }
    }
    let binary = binary.ok_or_else(|| Error::parse(path, "header", "missing format line"))?;
    Ok(Header {
        binary,
        elements,
        body_offset: offset,
        lines,
    })
}

/// Locations of x, y, z among the vertex element's scalar properties.
fn position_slots(path: &Path, vertex: &Element) -> Result<[usize; 3]> {
    let mut slots = [usize::MAX; 3];
    for (k, p) in vertex.properties.iter().enumerate() {
        if let Property::Scalar { name, .. } = p {
            match name.as_str() {
                "x" => slots[0] = k,
                "y" => slots[1] = k,
                "z" => slots[2] = k,
                _ => {}
            }
        }
    }
    if slots.contains(&usize::MAX) {
        return Err(Error::parse(path, "header", "vertex element lacks x, y or z"));
    }
    Ok(slots)
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<Vec<Point3>> {
    let header = parse_ply_header(path, bytes)?;
    let position = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse(path, "header", "no vertex element"))?;
    let slots = position_slots(path, &header.elements[position])?;
    let last = position + 1 == header.elements.len();
    if header.binary {
        parse_ply_binary(path, &bytes[header.body_offset..], header.body_offset, &header.elements, position, slots, last)
    } else {
        let body = std::str::from_utf8(&bytes[header.body_offset..])
            .map_err(|_| Error::parse(path, "body", "ascii body is not text"))?;
        parse_ply_ascii(path, body, header.lines, &header.elements, position, slots, last)
    }
}

fn parse_ply_ascii(
    path: &Path,
    body: &str,
    header_lines: usize,
    elements: &[Element],
    vertex: usize,
    slots: [usize; 3],
    last: bool,
) -> Result<Vec<Point3>> {
    let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut points = Vec::new();
    for (e, element) in elements.iter().enumerate().take(vertex + 1) {
        for item in 0..element.count {
            let Some((n, line)) = lines.next() else {
                return Err(Error::parse(
                    path,
                    "end of file",
                    format!("expected {} {} entries, found {item}", element.count, element.name),
                ));
            };
            if e != vertex {
                continue;
            }
            let location = || format!("line {}", header_lines + n + 1);
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let mut values = Vec::with_capacity(element.properties.len());
            let mut cursor = 0;
            for p in &element.properties {
                let mut take = || {
                    let t = tokens
                        .get(cursor)
                        .ok_or_else(|| Error::parse(path, location(), "too few values"))?;
                    cursor += 1;
                    t.parse::<f64>()
                        .map_err(|_| Error::parse(path, location(), format!("invalid number '{t}'")))
                };
                match p {
                    Property::Scalar { .. } => values.push(take()?),
                    Property::List { .. } => {
                        let count = take()? as usize;
                        for _ in 0..count {
                            take()?;
                        }
                        values.push(f64::NAN);
                    }
                }
            }
            let p = Point3::new(values[slots[0]], values[slots[1]], values[slots[2]]);
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::parse(path, location(), "non-finite coordinate"));
            }
            points.push(p);
        }
    }
    if last {
        if let Some((n, _)) = lines.next() {
            return Err(Error::parse(
                path,
                format!("line {}", header_lines + n + 1),
                format!("more vertex lines than the declared {}", elements[vertex].count),
            ));
        }
    }
    Ok(points)
}

fn parse_ply_binary(
    path: &Path,
    body: &[u8],
    base: usize,
    elements: &[Element],
    vertex: usize,
    slots: [usize; 3],
    last: bool,
) -> Result<Vec<Point3>> {
    let mut cursor = 0usize;
    let short = |at: usize, what: &str| {
        Error::parse(path, format!("byte offset {}", base + at), format!("file ends inside {what}"))
    };
    let take = |cursor: &mut usize, kind: Scalar, what: &str| -> Result<f64> {
        let end = *cursor + kind.size();
        let bytes = body.get(*cursor..end).ok_or_else(|| short(*cursor, what))?;
        *cursor = end;
        Ok(kind.decode(bytes))
    };
    let mut points = Vec::new();
    let mut values = Vec::new();
    for (e, element) in elements.iter().enumerate().take(vertex + 1) {
        for _ in 0..element.count {
            values.clear();
            for p in &element.properties {
                match *p {
                    Property::Scalar { kind, .. } => values.push(take(&mut cursor, kind, &element.name)?),
                    Property::List { count, item } => {
                        let n = take(&mut cursor, count, &element.name)? as usize;
                        let end = cursor + n * item.size();
                        if end > body.len() {
                            return Err(short(cursor, &element.name));
                        }
                        cursor = end;
                        values.push(f64::NAN);
                    }
                }
            }
            if e == vertex {
                let p = Point3::new(values[slots[0]], values[slots[1]], values[slots[2]]);
                if !p.iter().all(|c| c.is_finite()) {
                    return Err(Error::parse(
                        path,
                        format!("vertex {}", points.len()),
                        "non-finite coordinate",
                    ));
                }
                points.push(p);
            }
        }
    }
    if last && cursor != body.len() {
        return Err(Error::parse(
            path,
            format!("byte offset {}", base + cursor),
            format!("{} trailing bytes after the declared vertices", body.len() - cursor),
        ));
    }
    Ok(points)
}

pub const TRANSFORM_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTransform {
    pub name: String,
    pub transform: RigidTransform,
}

/// Contents of a transform file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransformFile {
    pub version: u32,
    pub transforms: Vec<NamedTransform>,
    pub sigma2: Option<f64>,
    /// Free-form metadata; keys this crate does not know are kept as-is.
    pub metadata: toml::Table,
}

#[derive(Serialize, Deserialize)]
struct RawFile {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma2: Option<f64>,
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    metadata: toml::Table,
    #[serde(default, rename = "transform")]
    transforms: Vec<RawTransform>,
}

#[derive(Serialize, Deserialize)]
struct RawTransform {
    name: String,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl TransformFile {
    pub fn new(transforms: Vec<NamedTransform>) -> Self {
        Self {
            version: TRANSFORM_FILE_VERSION,
            transforms,
            sigma2: None,
            metadata: toml::Table::new(),
        }
    }

    /// Names sets `set0`, `set1`, ... when `names` is `None`.
    pub fn from_transforms(transforms: &[RigidTransform], names: Option<&[String]>) -> Self {
        Self::new(
            transforms
                .iter()
                .enumerate()
                .map(|(i, t)| NamedTransform {
                    name: names.and_then(|n| n.get(i).cloned()).unwrap_or_else(|| format!("set{i}")),
                    transform: *t,
                })
                .collect(),
        )
    }

    /// Transforms, sigma2 and run metadata of a finished registration.
    pub fn from_run(params: &ModelParams, report: &RegistrationReport, names: Option<&[String]>) -> Self {
        let mut file = Self::from_transforms(&params.transforms, names);
        file.sigma2 = Some(params.sigma2);
        file.metadata.insert("w".into(), params.w.into());
        file.metadata
            .insert("iterations".into(), (report.iterations_run() as i64).into());
        file.metadata.insert("converged".into(), report.converged.into());
        file
    }

    pub fn rigid_transforms(&self) -> Vec<RigidTransform> {
        self.transforms.iter().map(|t| t.transform).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.transforms.iter().map(|t| t.name.clone()).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        let raw = RawFile {
            version: self.version,
            sigma2: self.sigma2,
            metadata: self.metadata.clone(),
            transforms: self
                .transforms
                .iter()
                .map(|t| {
                    let r = t.transform.rotation();
                    let v = t.transform.translation();
                    RawTransform {
                        name: t.name.clone(),
                        rotation: [
                            r[(0, 0)], r[(0, 1)], r[(0, 2)],
                            r[(1, 0)], r[(1, 1)], r[(1, 2)],
                            r[(2, 0)], r[(2, 1)], r[(2, 2)],
                        ],
                        translation: [v.x, v.y, v.z],
                    }
                })
                .collect(),
        };
        toml::to_string(&raw).map_err(|e| Error::InvalidConfig(format!("cannot serialise transforms: {e}")))
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let raw: RawFile = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => format!("line {}", text[..span.start].matches('\n').count() + 1),
                None => "document".to_string(),
            };
            Error::parse(path, location, e.message().to_string())
        })?;
        if raw.version != TRANSFORM_FILE_VERSION {
            return Err(Error::parse(
                path,
                "version",
                format!("unsupported version {} (expected {TRANSFORM_FILE_VERSION})", raw.version),
            ));
        }
        if let Some(s) = raw.sigma2 {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::parse(path, "sigma2", format!("sigma2 must be positive, got {s}")));
            }
        }
        let mut transforms = Vec::with_capacity(raw.transforms.len());
        for t in raw.transforms {
            let rotation = Matrix3::from_row_slice(&t.rotation);
            let transform = RigidTransform::new(rotation, Vector3::from(t.translation)).map_err(|e| {
                Error::InvalidStoredTransform {
                    path: path.to_path_buf(),
                    set: t.name.clone(),
                    source: Box::new(e),
                }
            })?;
            transforms.push(NamedTransform { name: t.name, transform });
        }
        Ok(Self {
            version: raw.version,
            transforms,
            sigma2: raw.sigma2,
            metadata: raw.metadata,
        })
    }
}

pub fn read_transforms(path: &Path) -> Result<TransformFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TransformFile::from_toml(&text, path)
}

pub fn write_transforms(file: &TransformFile, path: &Path) -> Result<()> {
    let text = file.to_toml()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the final parameters of a run.
pub fn write_run_transforms(
    params: &ModelParams,
    report: &RegistrationReport,
    names: Option<&[String]>,
    path: &Path,
) -> Result<()> {
    write_transforms(&TransformFile::from_run(params, report, names), path)
}

/// Per-iteration trace as CSV rows.
pub fn trace_csv(report: &RegistrationReport) -> String {
    let mut out = String::from("iteration,objective,sigma2,max_transform_delta,sigma2_rel_change,elapsed_s\n");
    for it in &report.iterations {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            it.iteration,
            it.objective,
            it.sigma2,
            it.max_transform_delta,
            it.sigma2_rel_change,
            it.elapsed.as_secs_f64()
        );
    }
    out
}
