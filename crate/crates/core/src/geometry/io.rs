//! OBJ, PLY and XYZ readers plus an OBJ writer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::mesh::{Normalization, PointCloudWithNormals, Shape, TriangleMesh};
use super::GeometryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFormat {
    Obj,
    Ply,
    Xyz,
}

impl ShapeFormat {
    pub fn from_path(path: &Path) -> Result<Self, GeometryError> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "obj" => Ok(ShapeFormat::Obj),
            "ply" => Ok(ShapeFormat::Ply),
            "xyz" | "xyzn" | "pts" | "txt" => Ok(ShapeFormat::Xyz),
            other => Err(GeometryError::UnsupportedFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedShape {
    pub shape: Shape,
    pub normalization: Normalization,
}

/// Loads a shape, optionally normalizing it to a bounding sphere of radius
/// 0.5 around its centroid.
pub fn load_shape(path: &Path, normalize: bool) -> Result<LoadedShape, GeometryError> {
    let format = ShapeFormat::from_path(path)?;
    let bytes = fs::read(path).map_err(|e| GeometryError::Io(path.display().to_string(), e))?;
    let mut shape = match format {
        ShapeFormat::Obj => parse_obj(&String::from_utf8_lossy(&bytes))?,
        ShapeFormat::Ply => parse_ply(&bytes)?,
        ShapeFormat::Xyz => Shape::Cloud(parse_xyz(&String::from_utf8_lossy(&bytes))?),
    };
    let normalization = if normalize {
        shape.normalize()?
    } else {
        Normalization::IDENTITY
    };
    Ok(LoadedShape {
        shape,
        normalization,
    })
}

fn parse_err(line: usize, msg: impl Into<String>) -> GeometryError {
    GeometryError::Parse {
        line,
        message: msg.into(),
    }
}

fn parse_floats<'a>(
    it: impl Iterator<Item = &'a str>,
    count: usize,
    line: usize,
) -> Result<Vec<f64>, GeometryError> {
    let vals: Vec<f64> = it
        .take(count)
        .map(|t| t.parse::<f64>().map_err(|_| parse_err(line, format!("bad number '{t}'"))))
        .collect::<Result<_, _>>()?;
    if vals.len() < count {
        return Err(parse_err(line, format!("expected {count} numbers")));
    }
    Ok(vals)
}

fn obj_index(token: &str, count: usize, line: usize) -> Result<usize, GeometryError> {
    let i: i64 = token
        .parse()
        .map_err(|_| parse_err(line, format!("bad index '{token}'")))?;
    let idx = if i > 0 { i - 1 } else { count as i64 + i };
    if idx < 0 || idx as usize >= count {
        return Err(parse_err(line, format!("index {i} out of range")));
    }
    Ok(idx as usize)
}

pub fn parse_obj(text: &str) -> Result<Shape, GeometryError> {
    let mut vertices = Vec::new();
    let mut tex = Vec::new();
    let mut norms = Vec::new();
    // (v, vt, vn) per face corner.
    let mut faces: Vec<Vec<(usize, Option<usize>, Option<usize>)>> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut it = content.split_whitespace();
        match it.next() {
            Some("v") => {
                let v = parse_floats(it, 3, line)?;
                vertices.push([v[0], v[1], v[2]]);
            }
            Some("vt") => {
                let v = parse_floats(it, 2, line)?;
                tex.push([v[0], v[1]]);
            }
            Some("vn") => {
                let v = parse_floats(it, 3, line)?;
                norms.push([v[0], v[1], v[2]]);
            }
            Some("f") => {
                let mut corners = Vec::new();
                for tok in it {
                    let mut parts = tok.split('/');
                    let v = obj_index(parts.next().unwrap_or(""), vertices.len(), line)?;
                    let vt = match parts.next() {
                        Some(s) if !s.is_empty() => Some(obj_index(s, tex.len(), line)?),
                        _ => None,
                    };
                    let vn = match parts.next() {
                        Some(s) if !s.is_empty() => Some(obj_index(s, norms.len(), line)?),
                        _ => None,
                    };
                    corners.push((v, vt, vn));
                }
                if corners.len() < 3 {
                    return Err(parse_err(line, "face needs at least 3 vertices"));
                }
                faces.push(corners);
            }
            _ => {}
        }
    }
    if vertices.is_empty() {
        return Err(parse_err(0, "no vertices"));
    }
    if faces.is_empty() {
        if norms.len() != vertices.len() {
            return Err(GeometryError::MissingNormals);
        }
        return Ok(Shape::Cloud(PointCloudWithNormals::with_renormalized(vertices, norms)?));
    }
    let n = vertices.len();
    let mut uvs = vec![None; n];
    let mut vns = vec![None; n];
    let mut triangles = Vec::new();
    for corners in &faces {
        for &(v, vt, vn) in corners {
            if let Some(t) = vt {
                uvs[v] = Some(tex[t]);
            }
            if let Some(t) = vn {
                vns[v] = Some(norms[t]);
            }
        }
        for k in 1..corners.len() - 1 {
            triangles.push([corners[0].0, corners[k].0, corners[k + 1].0]);
        }
    }
    let mut mesh = TriangleMesh::new(vertices, triangles)?;
    if uvs.iter().all(|u| u.is_some()) {
        mesh.uvs = Some(uvs.into_iter().map(|u| u.unwrap()).collect());
    }
    if vns.iter().all(|u| u.is_some()) {
        mesh.normals = Some(vns.into_iter().map(|u| u.unwrap()).collect());
    }
    Ok(Shape::Mesh(mesh))
}

pub fn parse_xyz(text: &str) -> Result<PointCloudWithNormals, GeometryError> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).collect();
        if tokens.len() < 6 {
            return Err(GeometryError::MissingNormalsAt { line });
        }
        let v = parse_floats(tokens.into_iter(), 6, line)?;
        points.push([v[0], v[1], v[2]]);
        normals.push([v[3], v[4], v[5]]);
    }
    if points.is_empty() {
        return Err(parse_err(0, "no points"));
    }
    PointCloudWithNormals::with_renormalized(points, normals)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyEncoding {
    Ascii,
    LittleEndian,
    BigEndian,
}

#[derive(Debug, Clone, Copy)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => PlyScalar::I8,
            "uchar" | "uint8" => PlyScalar::U8,
            "short" | "int16" => PlyScalar::I16,
            "ushort" | "uint16" => PlyScalar::U16,
            "int" | "int32" => PlyScalar::I32,
            "uint" | "uint32" => PlyScalar::U32,
            "float" | "float32" => PlyScalar::F32,
            "double" | "float64" => PlyScalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::I8 | PlyScalar::U8 => 1,
            PlyScalar::I16 | PlyScalar::U16 => 2,
            PlyScalar::I32 | PlyScalar::U32 | PlyScalar::F32 => 4,
            PlyScalar::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
struct PlyProperty {
    name: String,
    scalar: PlyScalar,
    list_count: Option<PlyScalar>,
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

struct PlyReader<'a> {
    data: &'a [u8],
    pos: usize,
    encoding: PlyEncoding,
    tokens: std::vec::IntoIter<&'a str>,
}

impl<'a> PlyReader<'a> {
    fn read(&mut self, s: PlyScalar) -> Result<f64, GeometryError> {
        if self.encoding == PlyEncoding::Ascii {
            let tok = self.tokens.next().ok_or_else(|| parse_err(0, "truncated PLY body"))?;
            return tok
                .parse::<f64>()
                .map_err(|_| parse_err(0, format!("bad PLY value '{tok}'")));
        }
        let n = s.size();
        if self.pos + n > self.data.len() {
            return Err(parse_err(0, "truncated binary PLY body"));
        }
        let mut buf = [0u8; 8];
        buf[..n].copy_from_slice(&self.data[self.pos..self.pos + n]);
        self.pos += n;
        let le = self.encoding == PlyEncoding::LittleEndian;
        macro_rules! conv {
            ($t:ty, $n:expr) => {{
                let mut b = [0u8; $n];
                b.copy_from_slice(&buf[..$n]);
                (if le { <$t>::from_le_bytes(b) } else { <$t>::from_be_bytes(b) }) as f64
            }};
        }
        Ok(match s {
            PlyScalar::I8 => conv!(i8, 1),
            PlyScalar::U8 => conv!(u8, 1),
            PlyScalar::I16 => conv!(i16, 2),
            PlyScalar::U16 => conv!(u16, 2),
            PlyScalar::I32 => conv!(i32, 4),
            PlyScalar::U32 => conv!(u32, 4),
            PlyScalar::F32 => conv!(f32, 4),
            PlyScalar::F64 => conv!(f64, 8),
        })
    }
}

pub fn parse_ply(bytes: &[u8]) -> Result<Shape, GeometryError> {
    let header_end = bytes
        .windows(10)
        .position(|w| w == b"end_header")
        .ok_or_else(|| parse_err(1, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| parse_err(1, "non-UTF8 header"))?;
    let mut body_start = header_end + 10;
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let mut encoding = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for (ln, raw) in header.lines().enumerate() {
        let line = ln + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.first().copied() {
            Some("ply") if line == 1 => {}
            Some("format") => {
                encoding = Some(match toks.get(1).copied() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::LittleEndian,
                    Some("binary_big_endian") => PlyEncoding::BigEndian,
                    _ => return Err(parse_err(line, "unknown PLY format")),
                })
            }
            Some("element") => {
                let count = toks
                    .get(2)
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(line, "bad element count"))?;
                elements.push(PlyElement {
                    name: toks.get(1).unwrap_or(&"").to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(line, "property before element"))?;
                let prop = if toks.get(1) == Some(&"list") {
                    PlyProperty {
                        name: toks.get(4).unwrap_or(&"").to_string(),
                        list_count: Some(
                            toks.get(2)
                                .and_then(|t| PlyScalar::parse(t))
                                .ok_or_else(|| parse_err(line, "bad list count type"))?,
                        ),
                        scalar: toks
                            .get(3)
                            .and_then(|t| PlyScalar::parse(t))
                            .ok_or_else(|| parse_err(line, "bad list item type"))?,
                    }
                } else {
                    PlyProperty {
                        name: toks.get(2).unwrap_or(&"").to_string(),
                        list_count: None,
                        scalar: toks
                            .get(1)
                            .and_then(|t| PlyScalar::parse(t))
                            .ok_or_else(|| parse_err(line, "bad property type"))?,
                    }
                };
                el.props.push(prop);
            }
            _ => {}
        }
    }
    let encoding = encoding.ok_or_else(|| parse_err(1, "missing format line"))?;
    let body = &bytes[body_start.min(bytes.len())..];
    let text_tokens: Vec<&str> = if encoding == PlyEncoding::Ascii {
        std::str::from_utf8(body)
            .map_err(|_| parse_err(0, "non-UTF8 ASCII body"))?
            .split_whitespace()
            .collect()
    } else {
        Vec::new()
    };
    let mut reader = PlyReader {
        data: body,
        pos: 0,
        encoding,
        tokens: text_tokens.into_iter(),
    };
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut triangles = Vec::new();
    let mut has_normals = false;
    for el in &elements {
        let find = |n: &str| el.props.iter().position(|p| p.name == n);
        let (ix, iy, iz) = (find("x"), find("y"), find("z"));
        let (inx, iny, inz) = (find("nx"), find("ny"), find("nz"));
        if el.name == "vertex" {
            has_normals = inx.is_some() && iny.is_some() && inz.is_some();
        }
        for _ in 0..el.count {
            let mut scalars = vec![0.0; el.props.len()];
            let mut list: Vec<usize> = Vec::new();
            for (pi, p) in el.props.iter().enumerate() {
                match p.list_count {
                    Some(ct) => {
                        let n = reader.read(ct)? as usize;
                        let mut items = Vec::with_capacity(n);
                        for _ in 0..n {
                            items.push(reader.read(p.scalar)? as usize);
                        }
                        if p.name == "vertex_indices" || p.name == "vertex_index" {
                            list = items;
                        }
                    }
                    None => scalars[pi] = reader.read(p.scalar)?,
                }
            }
            if el.name == "vertex" {
                let get = |i: Option<usize>| i.map(|i| scalars[i]).unwrap_or(0.0);
                points.push([get(ix), get(iy), get(iz)]);
                if has_normals {
                    normals.push([get(inx), get(iny), get(inz)]);
                }
            } else if el.name == "face" && list.len() >= 3 {
                for k in 1..list.len() - 1 {
                    triangles.push([list[0], list[k], list[k + 1]]);
                }
            }
        }
    }
    if points.is_empty() {
        return Err(parse_err(0, "PLY has no vertices"));
    }
    if triangles.is_empty() {
        if !has_normals {
            return Err(GeometryError::MissingNormals);
        }
        return Ok(Shape::Cloud(PointCloudWithNormals::with_renormalized(points, normals)?));
    }
    let mut mesh = TriangleMesh::new(points, triangles)?;
    if has_normals {
        mesh.normals = Some(normals);
    }
    Ok(Shape::Mesh(mesh))
}

/// Serializes a mesh as OBJ. UVs and normals, when present, share the
/// vertex indices.
pub fn write_obj(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    if let Some(uvs) = &mesh.uvs {
        for t in uvs {
            let _ = writeln!(s, "vt {} {}", t[0], t[1]);
        }
    }
    if let Some(ns) = &mesh.normals {
        for n in ns {
            let _ = writeln!(s, "vn {} {} {}", n[0], n[1], n[2]);
        }
    }
    let (has_t, has_n) = (mesh.uvs.is_some(), mesh.normals.is_some());
    for t in &mesh.triangles {
        s.push('f');
        for &i in t {
            let k = i + 1;
            let _ = match (has_t, has_n) {
                (true, true) => write!(s, " {k}/{k}/{k}"),
                (true, false) => write!(s, " {k}/{k}"),
                (false, true) => write!(s, " {k}//{k}"),
                (false, false) => write!(s, " {k}"),
            };
        }
        s.push('\n');
    }
    s
}

pub fn save_obj(mesh: &TriangleMesh, path: &Path) -> Result<(), GeometryError> {
    fs::write(path, write_obj(mesh)).map_err(|e| GeometryError::Io(path.display().to_string(), e))
}

pub fn write_xyz(cloud: &PointCloudWithNormals) -> String {
    let mut s = String::new();
    for (p, n) in cloud.points.iter().zip(&cloud.normals) {
        let _ = writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], n[0], n[1], n[2]);
    }
    s
}
