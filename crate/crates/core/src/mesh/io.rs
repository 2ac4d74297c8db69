//! OBJ and PLY readers.
//!
//! Only geometry is kept: `v`/`f` records from OBJ, and the `vertex` (x, y, z)
//! and `face` (vertex_indices) elements from ASCII or binary PLY. Texture and
//! material statements are accepted and ignored.

use std::path::Path;

use super::{Mesh, Vec3};
use crate::{Error, Result};

/// A loaded mesh together with how many degenerate triangles were discarded.
#[derive(Debug, Clone)]
pub struct MeshLoad {
    pub mesh: Mesh,
    pub dropped_faces: usize,
}

/// Reads an OBJ or PLY file, picked by extension.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<MeshLoad> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let (vertices, polygons) = match ext.as_deref() {
        Some("obj") => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|_| Error::parse(path, "OBJ file is not valid UTF-8"))?;
            parse_obj(text).map_err(|d| Error::parse(path, d))?
        }
        Some("ply") => parse_ply(&bytes).map_err(|d| Error::parse(path, d))?,
        _ => return Err(Error::UnsupportedFormat { path: path.into() }),
    };
    if polygons.is_empty() {
        return Err(Error::parse(path, "no faces found"));
    }
    let (mesh, dropped_faces) = Mesh::from_polygons(vertices, &polygons)?;
    if dropped_faces > 0 {
        log::warn!("{}: dropped {dropped_faces} degenerate faces", path.display());
    }
    Ok(MeshLoad {
        mesh,
        dropped_faces,
    })
}

type Polygons = (Vec<Vec3>, Vec<Vec<u32>>);

/// Parses OBJ text into vertices and polygons (0-based indices).
/// Writes `mesh` as a Wavefront OBJ (vertices and triangles only).
pub fn write_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for v in mesh.vertices() {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z).map_err(io)?;
    }
    for f in mesh.faces() {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn parse_obj(text: &str) -> std::result::Result<Polygons, String> {
    let mut vertices = Vec::new();
    let mut polygons = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("line {}: bad vertex: {e}", lineno + 1))?;
                if coords.len() != 3 {
                    return Err(format!("line {}: vertex needs 3 coordinates", lineno + 1));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for tok in parts {
                    let idx_str = tok.split('/').next().unwrap_or("");
                    let idx: i64 = idx_str
                        .parse()
                        .map_err(|_| format!("line {}: bad face index {tok:?}", lineno + 1))?;
                    let resolved = match idx {
                        0 => return Err(format!("line {}: face index 0", lineno + 1)),
                        i if i > 0 => i - 1,
                        i => vertices.len() as i64 + i,
                    };
                    if resolved < 0 || resolved >= vertices.len() as i64 {
                        return Err(format!(
                            "line {}: face index {idx} out of range",
                            lineno + 1
                        ));
                    }
                    poly.push(resolved as u32);
                }
                if poly.len() < 3 {
                    return Err(format!("line {}: face with fewer than 3 vertices", lineno + 1));
                }
                polygons.push(poly);
            }
            _ => {}
        }
    }
    Ok((vertices, polygons))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Encoding {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

    fn read(self, buf: &[u8], enc: Encoding) -> f64 {
        macro_rules! rd {
            ($t:ty) => {{
                let arr = buf[..std::mem::size_of::<$t>()].try_into().unwrap();
                if enc == Encoding::BinaryBe {
                    <$t>::from_be_bytes(arr) as f64
                } else {
                    <$t>::from_le_bytes(arr) as f64
                }
            }};
        }
        match self {
            Scalar::I8 => rd!(i8),
            Scalar::U8 => rd!(u8),
            Scalar::I16 => rd!(i16),
            Scalar::U16 => rd!(u16),
            Scalar::I32 => rd!(i32),
            Scalar::U32 => rd!(u32),
            Scalar::F32 => rd!(f32),
            Scalar::F64 => rd!(f64),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    enc: Encoding,
}

impl Cursor<'_> {
    fn scalar(&mut self, ty: Scalar) -> std::result::Result<f64, String> {
        let n = ty.size();
        if self.pos + n > self.data.len() {
            return Err("unexpected end of binary PLY data".into());
        }
        let v = ty.read(&self.data[self.pos..], self.enc);
        self.pos += n;
        Ok(v)
    }
}

/// Parses ASCII or binary PLY bytes into vertices and polygons.
pub fn parse_ply(bytes: &[u8]) -> std::result::Result<Polygons, String> {
    let header_end = find_header_end(bytes).ok_or("missing end_header")?;
    let header = std::str::from_utf8(&bytes[..header_end.0]).map_err(|_| "header is not UTF-8")?;
    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut enc = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", f, _] => {
                enc = Some(match *f {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::BinaryLe,
                    "binary_big_endian" => Encoding::BinaryBe,
                    other => return Err(format!("unknown PLY format {other}")),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| format!("bad element count {count}"))?,
                props: Vec::new(),
            }),
            ["property", "list", c, i, name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                el.props.push(Property::List {
                    name: name.to_string(),
                    count: Scalar::parse(c).ok_or_else(|| format!("bad type {c}"))?,
                    item: Scalar::parse(i).ok_or_else(|| format!("bad type {i}"))?,
                });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or("property before element")?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty).ok_or_else(|| format!("bad type {ty}"))?,
                });
            }
            ["comment", ..] | ["obj_info", ..] | [] | ["end_header"] => {}
            _ => return Err(format!("unrecognized header line {line:?}")),
        }
    }
    let enc = enc.ok_or("missing format line")?;
    let body = &bytes[header_end.1..];

    let mut vertices = Vec::new();
    let mut polygons = Vec::new();
    let mut ascii_tokens = if enc == Encoding::Ascii {
        Some(
            std::str::from_utf8(body)
                .map_err(|_| "ASCII body is not UTF-8")?
                .split_whitespace(),
        )
    } else {
        None
    };
    let mut cursor = Cursor {
        data: body,
        pos: 0,
        enc,
    };
    let mut read = |ty: Scalar| -> std::result::Result<f64, String> {
        match ascii_tokens.as_mut() {
            Some(it) => it
                .next()
                .ok_or_else(|| "unexpected end of ASCII PLY data".to_string())?
                .parse::<f64>()
                .map_err(|e| e.to_string()),
            None => cursor.scalar(ty),
        }
    };

    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [None; 3];
            let mut face: Option<Vec<u32>> = None;
            for prop in &el.props {
                match prop {
                    Property::Scalar { name, ty } => {
                        let v = read(*ty)?;
                        if el.name == "vertex" {
                            match name.as_str() {
                                "x" => xyz[0] = Some(v),
                                "y" => xyz[1] = Some(v),
                                "z" => xyz[2] = Some(v),
                                _ => {}
                            }
                        }
                    }
                    Property::List { name, count, item } => {
                        let n = read(*count)?;
                        if !(n >= 0.0) || n.fract() != 0.0 {
                            return Err(format!("bad list length {n}"));
                        }
                        let mut items = Vec::with_capacity(n as usize);
                        for _ in 0..n as usize {
                            items.push(read(*item)?);
                        }
                        if el.name == "face"
                            && (name == "vertex_indices" || name == "vertex_index")
                        {
                            let idx = items
                                .into_iter()
                                .map(|v| {
                                    if v >= 0.0 && v.fract() == 0.0 {
                                        Ok(v as u32)
                                    } else {
                                        Err(format!("bad vertex index {v}"))
                                    }
                                })
                                .collect::<std::result::Result<Vec<_>, _>>()?;
                            face = Some(idx);
                        }
                    }
                }
            }
            if el.name == "vertex" {
                match xyz {
                    [Some(x), Some(y), Some(z)] => vertices.push(Vec3::new(x, y, z)),
                    _ => return Err("vertex element lacks x/y/z".into()),
                }
            } else if el.name == "face" {
                let f = face.ok_or("face element lacks vertex_indices")?;
                if f.len() < 3 {
                    return Err("face with fewer than 3 vertices".into());
                }
                if let Some(bad) = f.iter().find(|&&i| i as usize >= vertices.len()) {
                    return Err(format!("face index {bad} out of range"));
                }
                polygons.push(f);
            }
        }
    }
    Ok((vertices, polygons))
}

/// Returns (header length up to `end_header`, body offset).
fn find_header_end(bytes: &[u8]) -> Option<(usize, usize)> {
    let needle = b"end_header";
    let pos = bytes.windows(needle.len()).position(|w| w == needle)?;
    let mut body = pos + needle.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) == Some(&b'\n') {
        body += 1;
    }
    Some((pos + needle.len(), body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(name: &str, bytes: &[u8]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        (dir, p)
    }

    #[test]
    fn obj_single_triangle() {
        let (_d, p) = write_tmp("t.obj", b"v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n");
        let load = load_mesh(&p).unwrap();
        assert_eq!(load.mesh.face_count(), 1);
        assert_eq!(load.dropped_faces, 0);
    }

    #[test]
    fn obj_quad_and_slashes() {
        let src = "mtllib x.mtl\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nusemtl m\nf 1/1/1 2/1/1 3//1 4\n";
        let (_d, p) = write_tmp("q.obj", src.as_bytes());
        assert_eq!(load_mesh(&p).unwrap().mesh.face_count(), 2);
    }

    #[test]
    fn obj_negative_indices() {
        let (v, f) = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(f, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn obj_zero_area_face_dropped() {
        let src = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 0\nf 1 2 3\nf 1 2 4\n";
        let (_d, p) = write_tmp("z.obj", src.as_bytes());
        let load = load_mesh(&p).unwrap();
        // oracle: cross-product area of every face
        let (verts, polys) = parse_obj(src).unwrap();
        let zero = polys
            .iter()
            .filter(|f| {
                let a = verts[f[0] as usize];
                let b = verts[f[1] as usize];
                let c = verts[f[2] as usize];
                0.5 * (b - a).cross(&(c - a)).norm() <= 1e-12
            })
            .count();
        assert_eq!(zero, 1);
        assert_eq!(load.dropped_faces, zero);
        assert_eq!(load.mesh.face_count(), 1);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_mesh("/nonexistent/definitely.obj"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn no_faces_is_error() {
        let (_d, p) = write_tmp("n.obj", b"v 0 0 0\nv 1 0 0\n");
        assert!(load_mesh(&p).is_err());
        let (_d, p) = write_tmp("junk.obj", b"hello world\n");
        assert!(load_mesh(&p).is_err());
    }

    #[test]
    fn unknown_extension() {
        let (_d, p) = write_tmp("x.stl", b"solid");
        assert!(matches!(
            load_mesh(&p),
            Err(Error::UnsupportedFormat { .. })
        ));
    }

    #[test]
    fn ply_ascii_with_extra_props() {
        let src = "ply\nformat ascii 1.0\ncomment test\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 1\n1 0 0 2\n1 1 0 3\n0 1 0 4\n4 0 1 2 3\n";
        let (v, f) = parse_ply(src.as_bytes()).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(f, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn ply_binary_le_and_be() {
        for be in [false, true] {
            let fmt = if be {
                "binary_big_endian"
            } else {
                "binary_little_endian"
            };
            let mut bytes = format!(
                "ply\nformat {fmt} 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar uint vertex_indices\nend_header\n"
            )
            .into_bytes();
            for p in [[0.0f64, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]] {
                for c in p {
                    bytes.extend(if be { c.to_be_bytes() } else { c.to_le_bytes() });
                }
            }
            bytes.push(3);
            for i in [0u32, 1, 2] {
                bytes.extend(if be { i.to_be_bytes() } else { i.to_le_bytes() });
            }
            let (v, f) = parse_ply(&bytes).unwrap();
            assert_eq!(v[2], Vec3::new(0.0, 2.0, 0.0));
            assert_eq!(f, vec![vec![0, 1, 2]]);
        }
    }

    #[test]
    fn ply_truncated_binary() {
        let bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n\x00\x00";
        assert!(parse_ply(bytes).is_err());
    }

    #[test]
    fn obj_round_trip() {
        let m = crate::mesh::primitives::icosphere(1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.obj");
        write_obj(&m, &p).unwrap();
        let back = load_mesh(&p).unwrap();
        assert_eq!(back.mesh.faces(), m.faces());
        for (a, b) in back.mesh.vertices().iter().zip(m.vertices()) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
