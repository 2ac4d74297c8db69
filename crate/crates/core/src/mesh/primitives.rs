//! Procedural meshes used by tests, fixtures and demos.

use std::collections::HashMap;

use super::{Mesh, Vec3};

/// Unit icosphere; `level` Loop-style midpoint subdivisions of an icosahedron
/// (20 · 4^level faces).
pub fn icosphere(level: u32) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
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
    for _ in 0..level {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                verts.len() as u32 - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    Mesh::new(verts, faces).expect("icosphere is valid")
}

/// Flat grid in the z = 0 plane spanning [0, nx·cell] × [0, ny·cell], two
/// triangles per cell.
pub fn grid(nx: usize, ny: usize, cell: f64) -> Mesh {
    let idx = |i: usize, j: usize| (j * (nx + 1) + i) as u32;
    let verts = (0..=ny)
        .flat_map(|j| (0..=nx).map(move |i| Vec3::new(i as f64 * cell, j as f64 * cell, 0.0)))
        .collect();
    let mut faces = Vec::with_capacity(nx * ny * 2);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    Mesh::new(verts, faces).expect("grid is valid")
}

/// Closed cylinder around the Y axis, centered at the origin.
pub fn cylinder(segments: usize, rings: usize, radius: f64, height: f64) -> Mesh {
    let segments = segments.max(3);
    let rings = rings.max(1);
    let mut verts = Vec::new();
    for r in 0..=rings {
        let y = -height / 2.0 + height * r as f64 / rings as f64;
        for s in 0..segments {
            let a = std::f64::consts::TAU * s as f64 / segments as f64;
            verts.push(Vec3::new(radius * a.cos(), y, radius * a.sin()));
        }
    }
    let ring = |r: usize, s: usize| (r * segments + s % segments) as u32;
    let mut faces = Vec::new();
    for r in 0..rings {
        for s in 0..segments {
            let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s + 1), ring(r + 1, s));
            faces.push([a, c, b]);
            faces.push([a, d, c]);
        }
    }
    let bottom = verts.len() as u32;
    verts.push(Vec3::new(0.0, -height / 2.0, 0.0));
    let top = verts.len() as u32;
    verts.push(Vec3::new(0.0, height / 2.0, 0.0));
    for s in 0..segments {
        faces.push([bottom, ring(0, s), ring(0, s + 1)]);
        faces.push([top, ring(rings, s + 1), ring(rings, s)]);
    }
    Mesh::new(verts, faces).expect("cylinder is valid")
}

/// Axis-aligned box with each side split into `n × n` quads.
pub fn subdivided_box(n: usize, half: Vec3) -> Mesh {
    let n = n.max(1);
    let mut verts: Vec<Vec3> = Vec::new();
    let mut index: HashMap<(i64, i64, i64), u32> = HashMap::new();
    let mut faces = Vec::new();
    let key = |p: Vec3| {
        (
            (p.x * 1e6).round() as i64,
            (p.y * 1e6).round() as i64,
            (p.z * 1e6).round() as i64,
        )
    };
    // (normal axis, sign)
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (u_ax, v_ax) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut vid = |i: usize, j: usize| -> u32 {
                let mut p = Vec3::zeros();
                p[axis] = sign;
                p[u_ax] = -1.0 + 2.0 * i as f64 / n as f64;
                p[v_ax] = -1.0 + 2.0 * j as f64 / n as f64;
                let p = p.component_mul(&half);
                *index.entry(key(p)).or_insert_with(|| {
                    verts.push(p);
                    verts.len() as u32 - 1
                })
            };
            for i in 0..n {
                for j in 0..n {
                    let (a, b, c, d) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
                    if sign > 0.0 {
                        faces.push([a, b, c]);
                        faces.push([a, c, d]);
                    } else {
                        faces.push([a, c, b]);
                        faces.push([a, d, c]);
                    }
                }
            }
        }
    }
    Mesh::new(verts, faces).expect("box is valid")
}

/// A three-part figure (head sphere, ellipsoid torso, two leg cylinders)
/// with a per-face part label: 0 = head, 1 = torso, 2 = leg.
pub fn humanoid() -> (Mesh, Vec<u32>) {
    let head = icosphere(3).map_vertices(|v| v * 0.32 + Vec3::new(0.0, 0.95, 0.0));
    let torso = icosphere(3).map_vertices(|v| v.component_mul(&Vec3::new(0.42, 0.55, 0.26)));
    let leg = cylinder(24, 12, 0.14, 0.9);
    let left = leg.map_vertices(|v| v + Vec3::new(-0.22, -1.05, 0.0));
    let right = leg.map_vertices(|v| v + Vec3::new(0.22, -1.05, 0.0));
    let mesh = Mesh::merge([&head, &torso, &left, &right]).expect("parts are valid");
    let mut labels = vec![0u32; head.face_count()];
    labels.extend(std::iter::repeat_n(1, torso.face_count()));
    labels.extend(std::iter::repeat_n(2, left.face_count() + right.face_count()));
    (mesh, labels)
}
