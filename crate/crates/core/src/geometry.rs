//! Mesh prototypes, canonical space, rigid posing, mesh regularizers and OBJ
//! persistence.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Image};
use crate::quat::{self, Quat};

pub type Vec3 = Vector3<f64>;

pub const DEFAULT_TEXTURE_SIZE: usize = 256;
const TORUS_MAJOR_SEGMENTS: usize = 24;
const TORUS_MINOR_SEGMENTS: usize = 16;
const TORUS_RADIUS_RATIO: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PrototypeKind {
    SphereLow,
    SphereHigh,
    Torus,
}

impl PrototypeKind {
    pub const ALL: [PrototypeKind; 3] = [
        PrototypeKind::SphereLow,
        PrototypeKind::SphereHigh,
        PrototypeKind::Torus,
    ];

    /// Whether the texture wraps vertically (the torus is periodic in both
    /// directions, spheres only around their axis).
    pub fn wraps_v(self) -> bool {
        matches!(self, PrototypeKind::Torus)
    }

    pub fn is_sphere(self) -> bool {
        !matches!(self, PrototypeKind::Torus)
    }
}

impl fmt::Display for PrototypeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PrototypeKind::SphereLow => "SphereLow",
            PrototypeKind::SphereHigh => "SphereHigh",
            PrototypeKind::Torus => "Torus",
        };
        f.write_str(s)
    }
}

impl FromStr for PrototypeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spherelow" | "sphere_low" | "sphere-low" => Ok(PrototypeKind::SphereLow),
            "spherehigh" | "sphere_high" | "sphere-high" => Ok(PrototypeKind::SphereHigh),
            "torus" => Ok(PrototypeKind::Torus),
            other => Err(Error::InvalidArgument(format!(
                "unknown prototype {other:?}"
            ))),
        }
    }
}

/// Rigid 6-DoF pose: rotate first, then translate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: quat::IDENTITY,
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Pose {
            rotation: quat::normalize(&rotation),
            translation,
        }
    }

    pub fn transform(&self, v: &Vec3) -> Vec3 {
        quat::to_matrix(&self.rotation) * v + self.translation
    }
}

/// A deformable mesh with a fixed connectivity, fixed texture mapping and a
/// learnable texture.
#[derive(Clone, Debug, PartialEq)]
pub struct TexturedMesh {
    pub prototype: PrototypeKind,
    pub base_vertices: Vec<Vec3>,
    pub vertex_offsets: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Per-vertex texture coordinates in `[0, 1]^2`; `v` grows downwards.
    pub uv: Vec<[f64; 2]>,
    pub texture: Image,
}

impl TexturedMesh {
    pub fn new(
        prototype: PrototypeKind,
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        uv: Vec<[f64; 2]>,
        texture: Image,
    ) -> Result<Self> {
        if uv.len() != vertices.len() {
            return Err(Error::InvalidMesh(format!(
                "{} uv coordinates for {} vertices",
                uv.len(),
                vertices.len()
            )));
        }
        if texture.channels != 3 {
            return Err(Error::InvalidMesh("texture must be RGB".into()));
        }
        let n = vertices.len();
        let mesh = TexturedMesh {
            prototype,
            vertex_offsets: vec![Vec3::zeros(); n],
            base_vertices: vertices,
            faces,
            uv,
            texture,
        };
        mesh.check_indices()?;
        Ok(mesh)
    }

    pub fn vertex_count(&self) -> usize {
        self.base_vertices.len()
    }

    /// Effective vertices: base positions plus learned offsets.
    pub fn vertices(&self) -> Vec<Vec3> {
        self.base_vertices
            .iter()
            .zip(&self.vertex_offsets)
            .map(|(b, o)| b + o)
            .collect()
    }

    pub fn set_vertices(&mut self, vertices: &[Vec3]) {
        for ((o, b), v) in self
            .vertex_offsets
            .iter_mut()
            .zip(&self.base_vertices)
            .zip(vertices)
        {
            *o = v - b;
        }
    }

    fn check_indices(&self) -> Result<()> {
        let n = self.base_vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            for &i in f {
                if i as usize >= n {
                    return Err(Error::InvalidMesh(format!(
                        "face {fi} references vertex {i} but only {n} vertices exist"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} is degenerate")));
            }
        }
        Ok(())
    }

    /// Check that indices are valid and that the surface is a closed,
    /// consistently oriented 2-manifold (every directed edge appears once and
    /// its reverse appears once).
    pub fn validate(&self) -> Result<()> {
        self.check_indices()?;
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            if count != 1 || directed.get(&(b, a)) != Some(&1) {
                return Err(Error::InvalidMesh(format!(
                    "edge ({a}, {b}) is not shared by exactly two consistently oriented faces"
                )));
            }
        }
        Ok(())
    }

    /// 1-ring neighbors of each vertex, in ascending index order.
    pub fn neighbors(&self) -> Vec<Vec<u32>> {
        let mut sets = vec![BTreeSet::new(); self.vertex_count()];
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                sets[a as usize].insert(b);
                sets[b as usize].insert(a);
            }
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Texture coordinates per face corner, unwrapped across the periodic
    /// seams so that interpolation inside a face never crosses the seam.
    pub fn corner_uvs(&self) -> Vec<[[f64; 2]; 3]> {
        let wraps_v = self.prototype.wraps_v();
        self.faces
            .iter()
            .map(|f| {
                let mut c = [
                    self.uv[f[0] as usize],
                    self.uv[f[1] as usize],
                    self.uv[f[2] as usize],
                ];
                let is_pole = |uv: &[f64; 2]| !wraps_v && (uv[1] < 1e-9 || uv[1] > 1.0 - 1e-9);
                let poles: Vec<bool> = c.iter().map(is_pole).collect();
                unwrap_axis(&mut c, 0, &poles);
                if wraps_v {
                    unwrap_axis(&mut c, 1, &[false; 3]);
                }
                // a pole has no defined longitude; borrow it from the rest of the face
                let others: Vec<f64> = (0..3).filter(|&k| !poles[k]).map(|k| c[k][0]).collect();
                if !others.is_empty() {
                    let mean = others.iter().sum::<f64>() / others.len() as f64;
                    for k in 0..3 {
                        if poles[k] {
                            c[k][0] = mean;
                        }
                    }
                }
                c
            })
            .collect()
    }

    /// Move effective vertices to zero mean and unit total variance
    /// (mean squared distance to the centroid equals one).
    pub fn canonicalize_in_place(&mut self) -> Result<()> {
        let verts = self.vertices();
        if verts.len() < 4 {
            return Err(Error::DegenerateMesh(format!(
                "{} vertices, need at least 4",
                verts.len()
            )));
        }
        let n = verts.len() as f64;
        let mean = verts.iter().fold(Vec3::zeros(), |acc, v| acc + v) / n;
        let var = verts.iter().map(|v| (v - mean).norm_squared()).sum::<f64>() / n;
        if !var.is_finite() || var < 1e-18 {
            return Err(Error::DegenerateMesh(format!("vertex variance {var:e}")));
        }
        let scale = 1.0 / var.sqrt();
        let canonical: Vec<Vec3> = verts.iter().map(|v| (v - mean) * scale).collect();
        self.set_vertices(&canonical);
        Ok(())
    }
}

fn unwrap_axis(c: &mut [[f64; 2]; 3], axis: usize, skip: &[bool]) {
    let vals: Vec<f64> = (0..3).filter(|&k| !skip[k]).map(|k| c[k][axis]).collect();
    if vals.len() < 2 {
        return;
    }
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.5 {
        for k in 0..3 {
            if !skip[k] && c[k][axis] < 0.5 {
                c[k][axis] += 1.0;
            }
        }
    }
}

/// Build one of the three prototypes: canonicalized, zero offsets, white
/// texture of `DEFAULT_TEXTURE_SIZE`.
pub fn make_prototype(kind: PrototypeKind) -> TexturedMesh {
    make_prototype_with_texture(kind, DEFAULT_TEXTURE_SIZE)
}

pub fn make_prototype_with_texture(kind: PrototypeKind, texture_size: usize) -> TexturedMesh {
    let (vertices, faces, uv) = match kind {
        PrototypeKind::SphereLow => sphere(2),
        PrototypeKind::SphereHigh => sphere(3),
        PrototypeKind::Torus => torus(
            TORUS_MAJOR_SEGMENTS,
            TORUS_MINOR_SEGMENTS,
            TORUS_RADIUS_RATIO,
        ),
    };
    let texture = Image::filled(texture_size, texture_size, 3, 1.0);
    let mut mesh = TexturedMesh::new(kind, vertices, faces, uv, texture)
        .expect("prototype construction is valid");
    mesh.canonicalize_in_place()
        .expect("prototype vertices are not degenerate");
    let canonical = mesh.vertices();
    mesh.base_vertices = canonical;
    mesh.vertex_offsets = vec![Vec3::zeros(); mesh.vertex_count()];
    mesh
}

/// Unit icosphere by repeated midpoint subdivision of an icosahedron.
/// Faces are counter-clockwise seen from outside.
pub fn icosphere(subdivisions: usize) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let m = ((verts[a as usize] + verts[b as usize]) * 0.5).normalize();
                verts.push(m);
                (verts.len() - 1) as u32
            })
        };
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut vertices);
            let bc = midpoint(f[1], f[2], &mut vertices);
            let ca = midpoint(f[2], f[0], &mut vertices);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    (vertices, faces)
}

type MeshParts = (Vec<Vec3>, Vec<[u32; 3]>, Vec<[f64; 2]>);

fn sphere(subdivisions: usize) -> MeshParts {
    let (vertices, faces) = icosphere(subdivisions);
    let uv = vertices
        .iter()
        .map(|v| {
            let u = 0.5 + v.z.atan2(v.x) / (2.0 * std::f64::consts::PI);
            let vv = v.y.clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
            [u.rem_euclid(1.0), vv]
        })
        .collect();
    (vertices, faces, uv)
}

fn torus(major: usize, minor: usize, ratio: f64) -> MeshParts {
    use std::f64::consts::TAU;
    let mut vertices = Vec::with_capacity(major * minor);
    let mut uv = Vec::with_capacity(major * minor);
    for i in 0..major {
        let theta = TAU * i as f64 / major as f64;
        for j in 0..minor {
            let phi = TAU * j as f64 / minor as f64;
            let ring = 1.0 + ratio * phi.cos();
            vertices.push(Vec3::new(
                ring * theta.cos(),
                ratio * phi.sin(),
                ring * theta.sin(),
            ));
            uv.push([i as f64 / major as f64, j as f64 / minor as f64]);
        }
    }
    let idx = |i: usize, j: usize| ((i % major) * minor + (j % minor)) as u32;
    let mut faces = Vec::with_capacity(2 * major * minor);
    for i in 0..major {
        for j in 0..minor {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            faces.push([a, c, b]);
            faces.push([a, d, c]);
        }
    }
    (vertices, faces, uv)
}

pub fn canonicalize(mesh: &TexturedMesh) -> Result<TexturedMesh> {
    let mut out = mesh.clone();
    out.canonicalize_in_place()?;
    Ok(out)
}

/// Rotate every effective vertex by the pose quaternion, then translate.
pub fn apply_pose(mesh: &TexturedMesh, pose: &Pose) -> Vec<Vec3> {
    pose_vertices(&mesh.vertices(), pose)
}

/// Rotate then translate object-space vertices.
pub fn pose_vertices(vertices: &[Vec3], pose: &Pose) -> Vec<Vec3> {
    let r = quat::to_matrix(&quat::normalize(&pose.rotation));
    vertices.iter().map(|v| r * v + pose.translation).collect()
}

fn laplacian_coordinates(vertices: &[Vec3], neighbors: &[Vec<u32>]) -> Vec<Vec3> {
    vertices
        .iter()
        .zip(neighbors)
        .map(|(v, ring)| {
            if ring.is_empty() {
                return Vec3::zeros();
            }
            let mean = ring
                .iter()
                .fold(Vec3::zeros(), |acc, &j| acc + vertices[j as usize])
                / ring.len() as f64;
            v - mean
        })
        .collect()
}

/// Mean squared norm of the uniform-weight Laplacian coordinates.
pub fn laplacian_loss(mesh: &TexturedMesh) -> f64 {
    let verts = mesh.vertices();
    let deltas = laplacian_coordinates(&verts, &mesh.neighbors());
    deltas.iter().map(|d| d.norm_squared()).sum::<f64>() / verts.len() as f64
}

/// Laplacian loss and its gradient with respect to the effective vertices
/// (equivalently, the vertex offsets).
pub fn laplacian_loss_grad(mesh: &TexturedMesh, neighbors: &[Vec<u32>]) -> (f64, Vec<Vec3>) {
    let verts = mesh.vertices();
    let n = verts.len() as f64;
    let deltas = laplacian_coordinates(&verts, neighbors);
    let loss = deltas.iter().map(|d| d.norm_squared()).sum::<f64>() / n;
    let mut grad: Vec<Vec3> = deltas.iter().map(|d| d * (2.0 / n)).collect();
    for (i, ring) in neighbors.iter().enumerate() {
        if ring.is_empty() {
            continue;
        }
        let share = deltas[i] * (2.0 / n / ring.len() as f64);
        for &j in ring {
            grad[j as usize] -= share;
        }
    }
    (loss, grad)
}

/// Write effective vertices, per-vertex UVs and faces as Wavefront OBJ, with
/// the texture stored as a sibling 16-bit PNG and a minimal MTL file.
pub fn export_obj(mesh: &TexturedMesh, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("mesh")
        .to_string();
    let png_path = path.with_extension("png");
    let mtl_path = path.with_extension("mtl");

    let mut out = String::new();
    out.push_str(&format!("# prototype {}\n", mesh.prototype));
    out.push_str(&format!("mtllib {stem}.mtl\nusemtl texture\n"));
    for v in mesh.vertices() {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for uv in &mesh.uv {
        // OBJ texture space has its origin at the bottom-left corner
        out.push_str(&format!("vt {} {}\n", uv[0], 1.0 - uv[1]));
    }
    for f in &mesh.faces {
        let (a, b, c) = (f[0] + 1, f[1] + 1, f[2] + 1);
        out.push_str(&format!("f {a}/{a} {b}/{b} {c}/{c}\n"));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;

    let mtl = format!("newmtl texture\nKd 1 1 1\nmap_Kd {stem}.png\n");
    fs::write(&mtl_path, mtl).map_err(|e| Error::io(&mtl_path, e))?;
    image::save_linear_rgb16(&mesh.texture, &png_path)
}

/// Read a mesh written by [`export_obj`]. Imported positions become the base
/// vertices with zero offsets.
pub fn import_obj(path: &Path) -> Result<TexturedMesh> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let bad = |line: usize, msg: &str| Error::malformed("OBJ", format!("line {}: {msg}", line + 1));
    let mut prototype = None;
    let mut vertices = Vec::new();
    let mut tex = Vec::new();
    let mut faces = Vec::new();
    let mut face_uv: Vec<[usize; 3]> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("#") => {
                if parts.next() == Some("prototype") {
                    if let Some(name) = parts.next() {
                        prototype = Some(name.parse::<PrototypeKind>()?);
                    }
                }
            }
            Some("v") => {
                let xs: Vec<f64> = parts
                    .map(|p| p.parse::<f64>().map_err(|_| bad(ln, "bad vertex")))
                    .collect::<Result<_>>()?;
                if xs.len() < 3 {
                    return Err(bad(ln, "vertex needs 3 coordinates"));
                }
                vertices.push(Vec3::new(xs[0], xs[1], xs[2]));
            }
            Some("vt") => {
                let xs: Vec<f64> = parts
                    .map(|p| {
                        p.parse::<f64>()
                            .map_err(|_| bad(ln, "bad texture coordinate"))
                    })
                    .collect::<Result<_>>()?;
                if xs.len() < 2 {
                    return Err(bad(ln, "texture coordinate needs 2 values"));
                }
                tex.push([xs[0], 1.0 - xs[1]]);
            }
            Some("f") => {
                let corners: Vec<&str> = parts.collect();
                if corners.len() != 3 {
                    return Err(bad(ln, "only triangles are supported"));
                }
                let mut f = [0u32; 3];
                let mut t = [usize::MAX; 3];
                for (k, c) in corners.iter().enumerate() {
                    let mut it = c.split('/');
                    let vi: usize = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(ln, "bad face index"))?;
                    if vi == 0 {
                        return Err(bad(ln, "face index out of range"));
                    }
                    f[k] = (vi - 1) as u32;
                    if let Some(ti) = it.next().filter(|s| !s.is_empty()) {
                        let ti: usize = ti.parse().map_err(|_| bad(ln, "bad uv index"))?;
                        if ti == 0 {
                            return Err(bad(ln, "uv index out of range"));
                        }
                        t[k] = ti - 1;
                    }
                }
                faces.push(f);
                face_uv.push(t);
            }
            _ => {}
        }
    }
    if vertices.is_empty() {
        return Err(Error::malformed("OBJ", "no vertices"));
    }
    let n = vertices.len();
    for (fi, f) in faces.iter().enumerate() {
        if f.iter().any(|&i| i as usize >= n) {
            return Err(Error::malformed(
                "OBJ",
                format!("face {} references a vertex beyond {n}", fi + 1),
            ));
        }
    }
    let mut uv = vec![[0.0, 0.0]; n];
    for (f, t) in faces.iter().zip(&face_uv) {
        for k in 0..3 {
            if t[k] != usize::MAX {
                let coord = tex.get(t[k]).ok_or_else(|| {
                    Error::malformed("OBJ", format!("uv index {} out of range", t[k] + 1))
                })?;
                uv[f[k] as usize] = *coord;
            }
        }
    }
    let prototype = match prototype {
        Some(p) => p,
        None => match n {
            162 => PrototypeKind::SphereLow,
            642 => PrototypeKind::SphereHigh,
            384 => PrototypeKind::Torus,
            _ => return Err(Error::malformed("OBJ", "missing '# prototype' header")),
        },
    };
    let png_path = path.with_extension("png");
    let texture = if png_path.exists() {
        image::load_linear_rgb(&png_path)?
    } else {
        Image::filled(DEFAULT_TEXTURE_SIZE, DEFAULT_TEXTURE_SIZE, 3, 1.0)
    };
    TexturedMesh::new(prototype, vertices, faces, uv, texture)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mean_and_variance(vs: &[Vec3]) -> (Vec3, f64) {
        let n = vs.len() as f64;
        let mean = vs.iter().fold(Vec3::zeros(), |a, v| a + v) / n;
        let var = vs.iter().map(|v| (v - mean).norm_squared()).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn icosphere_counts_follow_recurrence() {
        for k in 0..4 {
            let (v, f) = icosphere(k);
            let p = 4usize.pow(k as u32);
            assert_eq!(v.len(), 10 * p + 2);
            assert_eq!(f.len(), 20 * p);
        }
    }

    #[test]
    fn prototypes_have_declared_sizes() {
        let low = make_prototype(PrototypeKind::SphereLow);
        assert_eq!((low.vertex_count(), low.faces.len()), (162, 320));
        let high = make_prototype(PrototypeKind::SphereHigh);
        assert_eq!((high.vertex_count(), high.faces.len()), (642, 1280));
        let torus = make_prototype(PrototypeKind::Torus);
        assert_eq!((torus.vertex_count(), torus.faces.len()), (384, 768));
    }

    #[test]
    fn prototypes_are_canonical_white_closed_manifolds() {
        for kind in PrototypeKind::ALL {
            let m = make_prototype(kind);
            m.validate().unwrap();
            let (mean, var) = mean_and_variance(&m.vertices());
            assert!(mean.norm() < 1e-12, "{kind}: mean {mean:?}");
            assert!((var - 1.0).abs() < 1e-12, "{kind}: variance {var}");
            assert!(m.texture.data.iter().all(|&v| v == 1.0));
            assert!(m.vertex_offsets.iter().all(|o| o.norm() == 0.0));
        }
    }

    #[test]
    fn faces_are_outward_oriented() {
        for kind in PrototypeKind::ALL {
            let m = make_prototype(kind);
            let v = m.vertices();
            // signed volume of a closed outward mesh is positive
            let vol: f64 = m
                .faces
                .iter()
                .map(|f| v[f[0] as usize].dot(&v[f[1] as usize].cross(&v[f[2] as usize])) / 6.0)
                .sum();
            assert!(vol > 0.0, "{kind}: volume {vol}");
        }
    }

    #[test]
    fn corner_uvs_never_span_the_seam() {
        for kind in PrototypeKind::ALL {
            let m = make_prototype(kind);
            for c in m.corner_uvs() {
                for axis in 0..2 {
                    let lo = c.iter().map(|x| x[axis]).fold(f64::INFINITY, f64::min);
                    let hi = c.iter().map(|x| x[axis]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(hi - lo < 0.5, "{kind}: corner span {}", hi - lo);
                }
            }
        }
    }

    #[test]
    fn canonicalize_is_similarity_invariant() {
        let m = make_prototype(PrototypeKind::Torus);
        let mut moved = m.clone();
        let shifted: Vec<Vec3> = m
            .vertices()
            .iter()
            .map(|v| v * 3.0 + Vec3::new(1.0, 1.0, 1.0))
            .collect();
        moved.set_vertices(&shifted);
        let a = canonicalize(&m).unwrap().vertices();
        let b = canonicalize(&moved).unwrap().vertices();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn canonicalize_rejects_degenerate_sets() {
        let mut m = make_prototype(PrototypeKind::SphereLow);
        let collapsed = vec![Vec3::new(0.5, 0.5, 0.5); m.vertex_count()];
        m.set_vertices(&collapsed);
        assert!(matches!(canonicalize(&m), Err(Error::DegenerateMesh(_))));
    }

    #[test]
    fn pose_identity_and_translation() {
        let m = make_prototype(PrototypeKind::SphereLow);
        let same = apply_pose(&m, &Pose::identity());
        assert_eq!(same, m.vertices());
        let moved = apply_pose(&m, &Pose::new(quat::IDENTITY, Vec3::new(0.0, 0.0, 5.0)));
        for (a, b) in moved.iter().zip(m.vertices()) {
            assert!((a.z - b.z - 5.0).abs() < 1e-12 && a.x == b.x && a.y == b.y);
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let q = quat::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let p = Pose::new(q, Vec3::zeros()).transform(&Vec3::x());
        assert!((p - Vec3::y()).norm() < 1e-9);
    }

    #[test]
    fn rotation_is_applied_before_translation() {
        let q = quat::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let p = Pose::new(q, Vec3::new(10.0, 0.0, 0.0)).transform(&Vec3::x());
        assert!((p - Vec3::new(10.0, 1.0, 0.0)).norm() < 1e-9);
    }

    /// Independent 1-ring evaluation straight from the face list.
    fn laplacian_oracle(verts: &[Vec3], faces: &[[u32; 3]]) -> f64 {
        let mut total = 0.0;
        for (i, v) in verts.iter().enumerate() {
            let mut ring: Vec<usize> = Vec::new();
            for f in faces {
                if let Some(k) = f.iter().position(|&x| x as usize == i) {
                    for d in [1, 2] {
                        let j = f[(k + d) % 3] as usize;
                        if !ring.contains(&j) {
                            ring.push(j);
                        }
                    }
                }
            }
            let mean = ring.iter().fold(Vec3::zeros(), |a, &j| a + verts[j]) / ring.len() as f64;
            total += (v - mean).norm_squared();
        }
        total / verts.len() as f64
    }

    #[test]
    fn icosahedron_laplacian_is_radial_constant() {
        let (verts, faces) = icosphere(0);
        let uv = vec![[0.5, 0.5]; verts.len()];
        let m = TexturedMesh::new(
            PrototypeKind::SphereLow,
            verts.clone(),
            faces.clone(),
            uv,
            Image::filled(2, 2, 3, 1.0),
        )
        .unwrap();
        let deltas = laplacian_coordinates(&verts, &m.neighbors());
        for (v, d) in verts.iter().zip(&deltas) {
            assert!(v.normalize().cross(&d.normalize()).norm() < 1e-12);
        }
        let expected = laplacian_oracle(&verts, &faces);
        // unit icosahedron: every vertex has 5 neighbours at height 1/sqrt(5)
        assert!((expected - (1.0 - 1.0 / 5f64.sqrt()).powi(2)).abs() < 1e-12);
        assert!((laplacian_loss(&m) - expected).abs() < 1e-12);
    }

    #[test]
    fn displacing_a_vertex_increases_laplacian() {
        let m = make_prototype(PrototypeKind::SphereLow);
        let mut bumped = m.clone();
        bumped.vertex_offsets[10] = bumped.base_vertices[10] * 0.3;
        assert!(laplacian_loss(&bumped) > laplacian_loss(&m));
    }

    #[test]
    fn flat_fan_with_centered_vertex_has_zero_laplacian_there() {
        let mut verts = vec![Vec3::zeros()];
        let mut faces = Vec::new();
        for k in 0..6 {
            let a = k as f64 * std::f64::consts::TAU / 6.0;
            verts.push(Vec3::new(a.cos(), a.sin(), 0.0));
            faces.push([0, 1 + k as u32, 1 + ((k + 1) % 6) as u32]);
        }
        let uv = vec![[0.5, 0.5]; verts.len()];
        let m = TexturedMesh::new(
            PrototypeKind::SphereLow,
            verts.clone(),
            faces,
            uv,
            Image::filled(2, 2, 3, 1.0),
        )
        .unwrap();
        let deltas = laplacian_coordinates(&verts, &m.neighbors());
        assert!(deltas[0].norm() < 1e-12);
    }

    #[test]
    fn laplacian_gradient_matches_finite_differences() {
        let mut m = make_prototype(PrototypeKind::SphereLow);
        for (i, o) in m.vertex_offsets.iter_mut().enumerate() {
            *o = Vec3::new(
                (i as f64 * 0.37).sin(),
                (i as f64 * 0.11).cos(),
                (i as f64 * 0.73).sin(),
            ) * 0.05;
        }
        let nb = m.neighbors();
        let (_, grad) = laplacian_loss_grad(&m, &nb);
        for &i in &[0usize, 17, 80, 161] {
            for axis in 0..3 {
                let h = 1e-6;
                let mut p = m.clone();
                p.vertex_offsets[i][axis] += h;
                let mut q = m.clone();
                q.vertex_offsets[i][axis] -= h;
                let fd = (laplacian_loss(&p) - laplacian_loss(&q)) / (2.0 * h);
                assert!((fd - grad[i][axis]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn obj_round_trip_sphere() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.obj");
        let mut m = make_prototype(PrototypeKind::SphereLow);
        m.vertex_offsets[3] = Vec3::new(0.01, -0.02, 0.03);
        export_obj(&m, &path).unwrap();
        assert!(path.with_extension("png").exists());
        let back = import_obj(&path).unwrap();
        assert_eq!(back.prototype, m.prototype);
        assert_eq!(back.faces, m.faces);
        let err = back
            .vertices()
            .iter()
            .zip(m.vertices())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-5);
        for (a, b) in back.uv.iter().zip(&m.uv) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn obj_export_torus_face_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("torus.obj");
        export_obj(&make_prototype(PrototypeKind::Torus), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 768);
    }

    #[test]
    fn obj_import_rejects_bad_face_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.obj");
        fs::write(
            &path,
            "# prototype SphereLow\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 7\n",
        )
        .unwrap();
        assert!(matches!(import_obj(&path), Err(Error::Malformed { .. })));
    }

    proptest! {
        #[test]
        fn pose_preserves_distances(
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
            t in prop::array::uniform3(-5.0f64..5.0),
        ) {
            prop_assume!(Vec3::from(axis).norm() > 1e-3);
            let m = make_prototype(PrototypeKind::SphereLow);
            let pose = Pose::new(quat::from_axis_angle(&Vec3::from(axis), angle), Vec3::from(t));
            let before = m.vertices();
            let after = apply_pose(&m, &pose);
            for (i, j) in [(0usize, 1usize), (5, 100), (42, 161)] {
                let d0 = (before[i] - before[j]).norm();
                let d1 = (after[i] - after[j]).norm();
                prop_assert!((d0 - d1).abs() < 1e-7);
            }
        }

        #[test]
        fn canonicalize_is_idempotent(scale in 0.1f64..10.0, shift in prop::array::uniform3(-3.0f64..3.0)) {
            let mut m = make_prototype(PrototypeKind::Torus);
            let moved: Vec<Vec3> = m.vertices().iter().map(|v| v * scale + Vec3::from(shift)).collect();
            m.set_vertices(&moved);
            let once = canonicalize(&m).unwrap();
            let twice = canonicalize(&once).unwrap();
            for (a, b) in once.vertices().iter().zip(twice.vertices()) {
                prop_assert!((a - b).norm() < 1e-12);
            }
            let (mean, _) = mean_and_variance(&once.vertices());
            prop_assert!(mean.norm() < 1e-9);
        }

        #[test]
        fn laplacian_is_rigid_invariant(
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
            t in prop::array::uniform3(-5.0f64..5.0),
        ) {
            prop_assume!(Vec3::from(axis).norm() > 1e-3);
            let mut m = make_prototype(PrototypeKind::SphereLow);
            m.vertex_offsets[7] = Vec3::new(0.2, 0.1, -0.1);
            let pose = Pose::new(quat::from_axis_angle(&Vec3::from(axis), angle), Vec3::from(t));
            let mut moved = m.clone();
            moved.set_vertices(&apply_pose(&m, &pose));
            prop_assert!((laplacian_loss(&m) - laplacian_loss(&moved)).abs() < 1e-10);
        }
    }
}
