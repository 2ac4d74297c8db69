//! Triangle meshes: ingestion, cleanup, normalization and face adjacency.

mod graph;
mod io;
pub mod primitives;

pub use graph::{FaceGraph, RingWalker};
pub use io::{load_mesh, parse_obj, parse_ply, write_obj, MeshLoad};

use nalgebra::Vector3;

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Faces with an area at or below this are treated as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// An indexed triangle mesh.
///
/// Construction validates indices; [`Mesh::from_polygons`] also triangulates
/// and drops degenerate faces.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
}

impl Mesh {
    /// Builds a mesh from triangles, rejecting out-of-range or repeated indices.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references a vertex outside [0, {n})"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} repeats a vertex index"
                )));
            }
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        Ok(Self { vertices, faces })
    }

    /// Fan-triangulates polygons and drops faces with area <= [`DEGENERATE_AREA`].
    ///
    /// Returns the mesh and the number of dropped triangles.
    pub fn from_polygons(vertices: Vec<Vec3>, polygons: &[Vec<u32>]) -> Result<(Self, usize)> {
        let n = vertices.len();
        let mut faces = Vec::with_capacity(polygons.len());
        let mut dropped = 0;
        for poly in polygons {
            if poly.len() < 3 {
                dropped += 1;
                continue;
            }
            if let Some(&bad) = poly.iter().find(|&&v| v as usize >= n) {
                return Err(Error::InvalidMesh(format!(
                    "vertex index {bad} outside [0, {n})"
                )));
            }
            for k in 1..poly.len() - 1 {
                let tri = [poly[0], poly[k], poly[k + 1]];
                if tri[0] == tri[1]
                    || tri[1] == tri[2]
                    || tri[0] == tri[2]
                    || triangle_area(&vertices, tri) <= DEGENERATE_AREA
                {
                    dropped += 1;
                } else {
                    faces.push(tri);
                }
            }
        }
        if faces.is_empty() {
            return Err(Error::EmptyMesh);
        }
        Ok((Self::new(vertices, faces)?, dropped))
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn face_vertices(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn face_area(&self, face: usize) -> f64 {
        triangle_area(&self.vertices, self.faces[face])
    }

    pub fn face_centroid(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.face_vertices(face);
        (a + b + c) / 3.0
    }

    pub fn face_centroids(&self) -> Vec<Vec3> {
        (0..self.face_count()).map(|f| self.face_centroid(f)).collect()
    }

    pub fn check_face(&self, face: usize) -> Result<()> {
        if face < self.face_count() {
            Ok(())
        } else {
            Err(Error::FaceOutOfRange {
                index: face,
                count: self.face_count(),
            })
        }
    }

    /// Mean length over the undirected edges of the mesh.
    pub fn mean_edge_length(&self) -> f64 {
        let mut edges: Vec<(u32, u32)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        let total: f64 = edges
            .iter()
            .map(|&(a, b)| (self.vertices[a as usize] - self.vertices[b as usize]).norm())
            .sum();
        total / edges.len() as f64
    }

    /// Length of the axis-aligned bounding box diagonal.
    pub fn bounding_diagonal(&self) -> f64 {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (hi - lo).norm()
    }

    /// Translates the vertex centroid to the origin and scales the farthest
    /// vertex onto the unit sphere.
    pub fn normalize(&self) -> Result<Mesh> {
        if self.vertices.is_empty() || self.faces.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let centroid =
            self.vertices.iter().fold(Vec3::zeros(), |acc, v| acc + v) / self.vertices.len() as f64;
        let radius = self
            .vertices
            .iter()
            .map(|v| (v - centroid).norm())
            .fold(0.0, f64::max);
        if !(radius > 0.0) || radius <= f64::EPSILON * centroid.norm().max(1.0) {
            return Err(Error::ZeroExtent);
        }
        let vertices = self
            .vertices
            .iter()
            .map(|v| (v - centroid) / radius)
            .collect();
        Ok(Mesh {
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// Concatenates meshes, offsetting indices.
    pub fn merge<'a>(parts: impl IntoIterator<Item = &'a Mesh>) -> Result<Mesh> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for part in parts {
            let base = vertices.len() as u32;
            vertices.extend_from_slice(&part.vertices);
            faces.extend(part.faces.iter().map(|f| f.map(|v| v + base)));
        }
        if faces.is_empty() {
            return Err(Error::EmptyMesh);
        }
        Mesh::new(vertices, faces)
    }

    /// Applies `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }
}

pub(crate) fn triangle_area(vertices: &[Vec3], f: [u32; 3]) -> f64 {
    let a = vertices[f[0] as usize];
    let b = vertices[f[1] as usize];
    let c = vertices[f[2] as usize];
    0.5 * (b - a).cross(&(c - a)).norm()
}
