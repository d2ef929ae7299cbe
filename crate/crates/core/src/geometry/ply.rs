//! Minimal PLY reader/writer for triangle meshes and oriented point clouds.
//!
//! The reader understands `ascii`, `binary_little_endian` and
//! `binary_big_endian` files. It extracts `vertex` positions (and normals
//! when all of `nx ny nz` are present) plus `face` index lists; any other
//! element or property is parsed and discarded. Polygons with more than three
//! vertices are fan-triangulated.

use std::io::{BufRead, Read, Write};

use byteorder::{BigEndian, LittleEndian, ReadBytesExt};

use super::{PointCloud, TriMesh, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
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
    fn parse(s: &str) -> Result<Scalar> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Ply(format!("unknown scalar type `{other}`"))),
        })
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar { name, .. } | Property::List { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Vertex/face content of a PLY file.
#[derive(Debug, Clone, Default)]
pub struct PlyData {
    pub vertices: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub faces: Vec<[u32; 3]>,
}

impl PlyData {
    pub fn into_mesh(self) -> Result<TriMesh> {
        TriMesh::new(self.vertices, self.faces)
    }

    /// Interprets the vertices as an oriented point cloud; normals must be present.
    pub fn into_cloud(self) -> Result<PointCloud> {
        let normals = self
            .normals
            .ok_or_else(|| Error::Ply("vertex element has no nx/ny/nz properties".into()))?;
        PointCloud::new(self.vertices, normals)
    }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<(PlyFormat, Vec<Element>)> {
    let mut line = String::new();
    let next_line = |r: &mut R, line: &mut String| -> Result<()> {
        line.clear();
        let n = r
            .read_line(line)
            .map_err(|e| Error::Ply(format!("reading header: {e}")))?;
        if n == 0 {
            return Err(Error::Ply("unexpected end of header".into()));
        }
        Ok(())
    };
    next_line(r, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::Ply("missing `ply` magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next_line(r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", fmt, _version] => {
                format = Some(match *fmt {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    "binary_big_endian" => PlyFormat::BinaryBigEndian,
                    other => return Err(Error::Ply(format!("unknown format `{other}`"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::Ply(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, name] => elements
                .last_mut()
                .ok_or_else(|| Error::Ply("property before element".into()))?
                .props
                .push(Property::List {
                    name: name.to_string(),
                    count: Scalar::parse(count)?,
                    item: Scalar::parse(item)?,
                }),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| Error::Ply("property before element".into()))?
                .props
                .push(Property::Scalar {
                    name: name.to_string(),
                    ty: Scalar::parse(ty)?,
                }),
            _ => return Err(Error::Ply(format!("malformed header line `{}`", line.trim_end()))),
        }
    }
    let format = format.ok_or_else(|| Error::Ply("missing format line".into()))?;
    Ok((format, elements))
}

trait ValueSource {
    fn scalar(&mut self, ty: Scalar) -> Result<f64>;
}

struct AsciiSource<'a> {
    tokens: std::str::SplitWhitespace<'a>,
}

impl ValueSource for AsciiSource<'_> {
    fn scalar(&mut self, _ty: Scalar) -> Result<f64> {
        let tok = self
            .tokens
            .next()
            .ok_or_else(|| Error::Ply("unexpected end of ascii data".into()))?;
        tok.parse::<f64>()
            .map_err(|_| Error::Ply(format!("bad number `{tok}`")))
    }
}

struct BinarySource<R, B> {
    reader: R,
    _order: std::marker::PhantomData<B>,
}

impl<R: Read, B: byteorder::ByteOrder> ValueSource for BinarySource<R, B> {
    fn scalar(&mut self, ty: Scalar) -> Result<f64> {
        let r = &mut self.reader;
        let v = match ty {
            Scalar::I8 => r.read_i8().map(f64::from),
            Scalar::U8 => r.read_u8().map(f64::from),
            Scalar::I16 => r.read_i16::<B>().map(f64::from),
            Scalar::U16 => r.read_u16::<B>().map(f64::from),
            Scalar::I32 => r.read_i32::<B>().map(f64::from),
            Scalar::U32 => r.read_u32::<B>().map(f64::from),
            Scalar::F32 => r.read_f32::<B>().map(f64::from),
            Scalar::F64 => r.read_f64::<B>(),
        };
        v.map_err(|e| Error::Ply(format!("truncated binary data: {e}")))
    }
}

fn read_body<S: ValueSource>(src: &mut S, elements: &[Element]) -> Result<PlyData> {
    let mut out = PlyData::default();
    for el in elements {
        let names: Vec<&str> = el.props.iter().map(Property::name).collect();
        let pos = |n: &str| names.iter().position(|&x| x == n);
        let xyz = [pos("x"), pos("y"), pos("z")];
        let nxyz = [pos("nx"), pos("ny"), pos("nz")];
        let has_normals = nxyz.iter().all(Option::is_some);
        let face_prop = pos("vertex_indices").or_else(|| pos("vertex_index"));
        let mut scalars = vec![0.0; el.props.len()];
        let mut list: Vec<u32> = Vec::new();
        if el.name == "vertex" {
            if xyz.iter().any(Option::is_none) {
                return Err(Error::Ply("vertex element lacks x/y/z".into()));
            }
            if has_normals {
                out.normals = Some(Vec::with_capacity(el.count));
            }
        }
        for _ in 0..el.count {
            for (k, prop) in el.props.iter().enumerate() {
                match prop {
                    Property::Scalar { ty, .. } => scalars[k] = src.scalar(*ty)?,
                    Property::List { count, item, .. } => {
                        let n = src.scalar(*count)?;
                        if n < 0.0 {
                            return Err(Error::Ply("negative list length".into()));
                        }
                        let keep = Some(k) == face_prop && el.name == "face";
                        if keep {
                            list.clear();
                        }
                        for _ in 0..n as usize {
                            let v = src.scalar(*item)?;
                            if keep {
                                if v < 0.0 {
                                    return Err(Error::Ply("negative vertex index".into()));
                                }
                                list.push(v as u32);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                let get = |o: Option<usize>| scalars[o.unwrap()];
                out.vertices.push(Vec3::new(get(xyz[0]), get(xyz[1]), get(xyz[2])));
                if let Some(normals) = out.normals.as_mut() {
                    normals.push(Vec3::new(get(nxyz[0]), get(nxyz[1]), get(nxyz[2])));
                }
            } else if el.name == "face" && face_prop.is_some() {
                if list.len() < 3 {
                    return Err(Error::Ply(format!("face with {} vertices", list.len())));
                }
                for k in 1..list.len() - 1 {
                    out.faces.push([list[0], list[k], list[k + 1]]);
                }
            }
        }
    }
    Ok(out)
}

pub fn read_ply<R: BufRead>(mut reader: R) -> Result<PlyData> {
    let (format, elements) = read_header(&mut reader)?;
    match format {
        PlyFormat::Ascii => {
            let mut text = String::new();
            reader
                .read_to_string(&mut text)
                .map_err(|e| Error::Ply(format!("reading ascii body: {e}")))?;
            let mut src = AsciiSource {
                tokens: text.split_whitespace(),
            };
            read_body(&mut src, &elements)
        }
        PlyFormat::BinaryLittleEndian => read_body(
            &mut BinarySource::<_, LittleEndian> {
                reader,
                _order: Default::default(),
            },
            &elements,
        ),
        PlyFormat::BinaryBigEndian => read_body(
            &mut BinarySource::<_, BigEndian> {
                reader,
                _order: Default::default(),
            },
            &elements,
        ),
    }
}

pub fn read_ply_file(path: &std::path::Path) -> Result<PlyData> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(std::io::BufReader::new(f))
}

fn header<W: Write>(w: &mut W, format: PlyFormat, comment: Option<&str>) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
        PlyFormat::BinaryBigEndian => "binary_big_endian",
    };
    writeln!(w, "format {fmt} 1.0")?;
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(w, "comment {line}")?;
        }
    }
    Ok(())
}

fn put_f64<W: Write>(w: &mut W, format: PlyFormat, v: f64) -> std::io::Result<()> {
    use byteorder::WriteBytesExt;
    match format {
        PlyFormat::Ascii => write!(w, "{v}"),
        PlyFormat::BinaryLittleEndian => w.write_f64::<LittleEndian>(v),
        PlyFormat::BinaryBigEndian => w.write_f64::<BigEndian>(v),
    }
}

/// Writes an oriented point cloud with `x y z nx ny nz` double properties.
pub fn write_cloud<W: Write>(w: &mut W, cloud: &PointCloud, format: PlyFormat) -> std::io::Result<()> {
    header(w, format, None)?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        writeln!(w, "property double {p}")?;
    }
    writeln!(w, "end_header")?;
    for (p, n) in cloud.points().iter().zip(cloud.normals()) {
        let vals = [p.x, p.y, p.z, n.x, n.y, n.z];
        for (k, v) in vals.iter().enumerate() {
            if format == PlyFormat::Ascii && k > 0 {
                write!(w, " ")?;
            }
            put_f64(w, format, *v)?;
        }
        if format == PlyFormat::Ascii {
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Writes a triangle mesh; the face list uses `uchar` counts and `int` indices.
pub fn write_mesh<W: Write>(
    w: &mut W,
    mesh: &TriMesh,
    format: PlyFormat,
    comment: Option<&str>,
) -> std::io::Result<()> {
    use byteorder::WriteBytesExt;
    header(w, format, comment)?;
    writeln!(w, "element vertex {}", mesh.vertices.len())?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property double {p}")?;
    }
    writeln!(w, "element face {}", mesh.faces.len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for v in &mesh.vertices {
        match format {
            PlyFormat::Ascii => writeln!(w, "{} {} {}", v.x, v.y, v.z)?,
            _ => {
                for c in v.iter() {
                    put_f64(w, format, *c)?;
                }
            }
        }
    }
    for f in &mesh.faces {
        match format {
            PlyFormat::Ascii => writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?,
            PlyFormat::BinaryLittleEndian => {
                w.write_u8(3)?;
                for &i in f {
                    w.write_i32::<LittleEndian>(i as i32)?;
                }
            }
            PlyFormat::BinaryBigEndian => {
                w.write_u8(3)?;
                for &i in f {
                    w.write_i32::<BigEndian>(i as i32)?;
                }
            }
        }
    }
    Ok(())
}
