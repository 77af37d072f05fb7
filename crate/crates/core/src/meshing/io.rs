//! PLY and OBJ mesh files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Binary little-endian PLY with float positions, uchar colors and int faces.
pub fn write_ply(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )
    .map_err(io)?;
    for (p, c) in mesh.vertices.iter().zip(&mesh.colors) {
        for x in [p.x, p.y, p.z] {
            w.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
        }
        w.write_all(c).map_err(io)?;
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8]).map_err(io)?;
        for &i in t {
            w.write_all(&(i as i32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads meshes in the layout produced by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<TriangleMesh> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut line = String::new();
    let (mut nv, mut nf) = (None, None);
    let mut vertex_props = Vec::new();
    let mut in_vertex = false;
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("missing end_header"));
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["ply"] | ["comment", ..] => {}
            ["format", "binary_little_endian", _] => {}
            ["format", ..] => return Err(bad("only binary_little_endian PLY is supported")),
            ["element", "vertex", n] => {
                nv = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", "face", n] => {
                nf = Some(n.parse::<usize>().map_err(|_| bad("bad face count"))?);
                in_vertex = false;
            }
            ["property", "list", "uchar", "int", _] if !in_vertex => {}
            ["property", ty, name] if in_vertex => vertex_props.push((ty.to_string(), name.to_string())),
            ["end_header"] => break,
            _ => return Err(bad(&format!("unsupported header line {:?}", line.trim()))),
        }
    }
    let expected: Vec<(&str, &str)> = vec![
        ("float", "x"),
        ("float", "y"),
        ("float", "z"),
        ("uchar", "red"),
        ("uchar", "green"),
        ("uchar", "blue"),
    ];
    let props: Vec<(&str, &str)> = vertex_props.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    if props != expected {
        return Err(bad("unsupported vertex layout"));
    }
    let (nv, nf) = (nv.ok_or_else(|| bad("no vertex element"))?, nf.unwrap_or(0));
    let truncated = |_| bad("truncated PLY body");
    let mut mesh = TriangleMesh::default();
    let mut buf = [0u8; 15];
    for _ in 0..nv {
        r.read_exact(&mut buf).map_err(truncated)?;
        let f = |k: usize| f32::from_le_bytes(buf[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        mesh.vertices.push(Point3::new(f(0), f(1), f(2)));
        mesh.colors.push([buf[12], buf[13], buf[14]]);
    }
    let mut face = [0u8; 13];
    for _ in 0..nf {
        r.read_exact(&mut face).map_err(truncated)?;
        if face[0] != 3 {
            return Err(bad("only triangle faces are supported"));
        }
        let i = |k: usize| i32::from_le_bytes(face[1 + 4 * k..5 + 4 * k].try_into().unwrap());
        let t = [i(0), i(1), i(2)];
        if t.iter().any(|&x| x < 0 || x as usize >= nv) {
            return Err(bad("face index out of range"));
        }
        mesh.triangles.push(t.map(|x| x as u32));
    }
    Ok(mesh)
}

/// Wavefront OBJ with positions and faces only.
pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for p in &mesh.vertices {
        writeln!(w, "v {} {} {}", p.x, p.y, p.z).map_err(io)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).map_err(io)?;
    }
    w.flush().map_err(io)
}
