use std::collections::HashMap;

use super::Mesh;
use crate::{Error, Result};

/// Face adjacency through shared vertices and through shared edges.
///
/// Neighbor lists are sorted and never contain the face itself.
#[derive(Debug, Clone)]
pub struct FaceGraph {
    vertex_adj: Vec<Vec<u32>>,
    edge_adj: Vec<Vec<u32>>,
}

impl FaceGraph {
    pub fn build(mesh: &Mesh) -> Self {
        let nf = mesh.face_count();
        let mut incident: Vec<Vec<u32>> = vec![Vec::new(); mesh.vertex_count()];
        for (fi, f) in mesh.faces().iter().enumerate() {
            for &v in f {
                incident[v as usize].push(fi as u32);
            }
        }

        let mut vertex_adj: Vec<Vec<u32>> = vec![Vec::new(); nf];
        for (fi, f) in mesh.faces().iter().enumerate() {
            let adj = &mut vertex_adj[fi];
            for &v in f {
                adj.extend(incident[v as usize].iter().filter(|&&g| g as usize != fi));
            }
            adj.sort_unstable();
            adj.dedup();
        }

        let mut edge_faces: HashMap<(u32, u32), Vec<u32>> = HashMap::with_capacity(nf * 3 / 2);
        for (fi, f) in mesh.faces().iter().enumerate() {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edge_faces
                    .entry((a.min(b), a.max(b)))
                    .or_default()
                    .push(fi as u32);
            }
        }
        let mut edge_adj: Vec<Vec<u32>> = vec![Vec::new(); nf];
        for faces in edge_faces.values() {
            for &a in faces {
                for &b in faces {
                    if a != b {
                        edge_adj[a as usize].push(b);
                    }
                }
            }
        }
        for adj in &mut edge_adj {
            adj.sort_unstable();
            adj.dedup();
        }

        Self {
            vertex_adj,
            edge_adj,
        }
    }

    pub fn face_count(&self) -> usize {
        self.vertex_adj.len()
    }

    /// Faces sharing at least one vertex with `face`.
    pub fn vertex_neighbors(&self, face: usize) -> &[u32] {
        &self.vertex_adj[face]
    }

    /// Faces sharing an edge with `face`.
    pub fn edge_neighbors(&self, face: usize) -> &[u32] {
        &self.edge_adj[face]
    }

    /// The q-rank neighborhood of `face`: every face joined to it by a path of
    /// vertex-adjacency hops with at most `q` intermediate faces, i.e. at most
    /// `q + 1` hops. Includes `face`. Sorted ascending.
    pub fn q_ring(&self, face: usize, q: usize) -> Result<Vec<u32>> {
        if face >= self.face_count() {
            return Err(Error::FaceOutOfRange {
                index: face,
                count: self.face_count(),
            });
        }
        let mut walker = RingWalker::new(self);
        let mut out = walker.ring(face, q).to_vec();
        out.sort_unstable();
        Ok(out)
    }

    /// Connected component id of every face (shared-vertex connectivity).
    pub fn components(&self) -> Vec<u32> {
        let n = self.face_count();
        let mut comp = vec![u32::MAX; n];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if comp[start] != u32::MAX {
                continue;
            }
            comp[start] = next;
            stack.push(start as u32);
            while let Some(f) = stack.pop() {
                for &g in &self.vertex_adj[f as usize] {
                    if comp[g as usize] == u32::MAX {
                        comp[g as usize] = next;
                        stack.push(g);
                    }
                }
            }
            next += 1;
        }
        comp
    }
}

/// Reusable breadth-first walker for repeated q-ring queries on one graph.
pub struct RingWalker<'g> {
    graph: &'g FaceGraph,
    stamp: Vec<u32>,
    epoch: u32,
    found: Vec<u32>,
}

impl<'g> RingWalker<'g> {
    pub fn new(graph: &'g FaceGraph) -> Self {
        Self {
            graph,
            stamp: vec![0; graph.face_count()],
            epoch: 0,
            found: Vec::new(),
        }
    }

    /// Faces within `q + 1` hops of `face`, in BFS order. `face` must be valid.
    pub fn ring(&mut self, face: usize, q: usize) -> &[u32] {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.fill(0);
            self.epoch = 1;
        }
        self.found.clear();
        self.found.push(face as u32);
        self.stamp[face] = self.epoch;
        let mut frontier = 0..1;
        for _ in 0..=q {
            let end = self.found.len();
            for i in frontier.clone() {
                let f = self.found[i] as usize;
                for &g in &self.graph.vertex_adj[f] {
                    if self.stamp[g as usize] != self.epoch {
                        self.stamp[g as usize] = self.epoch;
                        self.found.push(g);
                    }
                }
            }
            frontier = end..self.found.len();
            if frontier.is_empty() {
                break;
            }
        }
        &self.found
    }
}
