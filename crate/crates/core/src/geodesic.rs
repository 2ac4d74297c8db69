//! Face-to-face geodesic distances and the Gaussian helpers built on them.
//!
//! [`HeatGeodesics`] implements the heat method: one backward-Euler heat step
//! from the source face's vertices, a normalized per-face gradient field, and
//! a Poisson solve that integrates it back into a distance. Both operators are
//! factored once per mesh, so repeated sources only cost two triangular
//! solves each. [`dijkstra_geodesic`] is the graph-metric reference used to
//! check it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use crate::mesh::{FaceGraph, Mesh, Vec3};
use crate::sparse::{conjugate_gradient, CsrMatrix, FactorError, SkylineCholesky};
use crate::{Error, Result};

/// Distance from one source face to every face. Faces in other connected
/// components are `f64::INFINITY`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicField {
    pub source_face: usize,
    pub distance: Vec<f64>,
    /// Faces whose raw distance came out negative and was clamped to zero.
    pub clamped: usize,
}

impl GeodesicField {
    /// Writes `faceIndex,distance` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "faceIndex,distance")?;
            for (i, d) in self.distance.iter().enumerate() {
                writeln!(out, "{i},{d}")?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Envelope storage limit before falling back to conjugate gradients.
const MAX_FACTOR_ENTRIES: usize = 60_000_000;
const CG_TOLERANCE: f64 = 1e-8;

enum LinearSolver {
    Direct(SkylineCholesky),
    Iterative(CsrMatrix),
}

impl LinearSolver {
    /// Cholesky first; on failure regularize with `ε·I`, `ε = 1e-9 · trace / n`,
    /// and retry once; if the factor still cannot be built, use CG.
    fn prepare(a: CsrMatrix) -> Self {
        match SkylineCholesky::factor(&a, MAX_FACTOR_ENTRIES) {
            Ok(f) => return LinearSolver::Direct(f),
            Err(FactorError::TooLarge { entries }) => {
                log::info!("envelope of {entries} entries too large, using CG");
                return LinearSolver::Iterative(a);
            }
            Err(FactorError::NotPositiveDefinite { .. }) => {}
        }
        let eps = 1e-9 * a.trace() / a.dim().max(1) as f64;
        let reg = a.add_diagonal(eps);
        match SkylineCholesky::factor(&reg, MAX_FACTOR_ENTRIES) {
            Ok(f) => LinearSolver::Direct(f),
            Err(_) => LinearSolver::Iterative(reg),
        }
    }

    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            LinearSolver::Direct(f) => Ok(f.solve(b)),
            LinearSolver::Iterative(a) => {
                let mut x = vec![0.0; b.len()];
                let out = conjugate_gradient(a, b, &mut x, CG_TOLERANCE, 20 * b.len() + 100);
                if out.converged {
                    Ok(x)
                } else {
                    Err(Error::Solver(format!(
                        "conjugate gradient stalled at relative residual {:.3e} after {} iterations",
                        out.relative_residual, out.iterations
                    )))
                }
            }
        }
    }
}

/// Per-face data reused by every solve.
struct FaceFrame {
    verts: [usize; 3],
    /// cotangent of the interior angle at each corner
    cot: [f64; 3],
    area: f64,
    normal: Vec3,
}

/// Heat-method distance solver bound to one mesh.
///
/// Immutable after construction; solves for different sources may run
/// concurrently.
pub struct HeatGeodesics {
    positions: Vec<Vec3>,
    frames: Vec<FaceFrame>,
    heat: LinearSolver,
    poisson: LinearSolver,
    face_component: Vec<u32>,
    vertex_component: Vec<u32>,
    component_vertex_count: Vec<usize>,
    time_step: f64,
}

impl HeatGeodesics {
    /// Heat time `t = time_multiplier · h²`, `h` the mean edge length.
    pub fn new(mesh: &Mesh, time_multiplier: f64) -> Result<Self> {
        if !(time_multiplier > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "heat time multiplier {time_multiplier} must be positive"
            )));
        }
        let n = mesh.vertex_count();
        let positions = mesh.vertices().to_vec();
        let frames: Vec<FaceFrame> = mesh
            .faces()
            .iter()
            .map(|f| {
                let v = f.map(|i| i as usize);
                let p = v.map(|i| positions[i]);
                let cross = (p[1] - p[0]).cross(&(p[2] - p[0]));
                let double_area = cross.norm();
                let cot = [0, 1, 2].map(|k| {
                    let a = p[(k + 1) % 3] - p[k];
                    let b = p[(k + 2) % 3] - p[k];
                    a.dot(&b) / double_area
                });
                FaceFrame {
                    verts: v,
                    cot,
                    area: 0.5 * double_area,
                    normal: cross / double_area,
                }
            })
            .collect();

        let mut stiffness = Vec::with_capacity(frames.len() * 12);
        let mut mass = vec![0.0; n];
        for fr in &frames {
            for k in 0..3 {
                // edge opposite corner k
                let (i, j) = (fr.verts[(k + 1) % 3], fr.verts[(k + 2) % 3]);
                let w = 0.5 * fr.cot[k];
                stiffness.extend([(i, i, w), (j, j, w), (i, j, -w), (j, i, -w)]);
                mass[fr.verts[k]] += fr.area / 3.0;
            }
        }
        let stiffness = CsrMatrix::from_triplets(n, stiffness);
        let mass = CsrMatrix::from_triplets(n, mass.iter().enumerate().map(|(i, &m)| (i, i, m)).collect());

        let h = mesh.mean_edge_length();
        let time_step = time_multiplier * h * h;
        let heat = LinearSolver::prepare(mass.combine(1.0, &stiffness, time_step));
        let poisson = LinearSolver::prepare(stiffness);

        let face_component = FaceGraph::build(mesh).components();
        let n_comp = face_component.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
        let mut vertex_component = vec![u32::MAX; n];
        for (fr, &c) in frames.iter().zip(&face_component) {
            for &v in &fr.verts {
                vertex_component[v] = c;
            }
        }
        let mut component_vertex_count = vec![0; n_comp];
        for &c in &vertex_component {
            if c != u32::MAX {
                component_vertex_count[c as usize] += 1;
            }
        }

        Ok(Self {
            positions,
            frames,
            heat,
            poisson,
            face_component,
            vertex_component,
            component_vertex_count,
            time_step,
        })
    }

    pub fn face_count(&self) -> usize {
        self.frames.len()
    }

    pub fn time_step(&self) -> f64 {
        self.time_step
    }

    /// Distance at the face centroid from corner values of a distance field.
    ///
    /// Averaging corner values overestimates the centroid value because the
    /// distance function is convex. Locally the field is a cone `|x - s|`
    /// around a virtual source `s` lying upstream of the centroid along the
    /// field gradient; this solves for the centroid-to-source distance `D`
    /// whose cone reproduces the corner mean.
    fn centroid_distance(&self, fr: &FaceFrame, vals: [f64; 3], mean: f64) -> f64 {
        let p = fr.verts.map(|i| self.positions[i]);
        let mut grad = Vec3::zeros();
        for k in 0..3 {
            let opposite = p[(k + 2) % 3] - p[(k + 1) % 3];
            grad += fr.normal.cross(&opposite) * vals[k];
        }
        let norm = grad.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return mean;
        }
        let dir = grad / norm;
        let center = (p[0] + p[1] + p[2]) / 3.0;
        let offsets = p.map(|v| v - center);
        let cone = |d: f64| offsets.iter().map(|w| (w + dir * d).norm()).sum::<f64>() / 3.0;
        if cone(0.0) >= mean {
            return 0.0;
        }
        // cone(d) is increasing with cone(d) >= d, so the root lies in [0, mean]
        let (mut lo, mut hi) = (0.0, mean);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if cone(mid) < mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Distances from `source_face` to every face.
    pub fn distance_from(&self, source_face: usize) -> Result<GeodesicField> {
        if source_face >= self.face_count() {
            return Err(Error::FaceOutOfRange {
                index: source_face,
                count: self.face_count(),
            });
        }
        let n = self.positions.len();
        let src = &self.frames[source_face];

        let mut u0 = vec![0.0; n];
        for &v in &src.verts {
            u0[v] = 1.0;
        }
        let u = self.heat.solve(&u0)?;

        let mut div = vec![0.0; n];
        for fr in &self.frames {
            let p = fr.verts.map(|i| self.positions[i]);
            let uf = fr.verts.map(|i| u[i]);
            let mut grad = Vec3::zeros();
            for k in 0..3 {
                let opposite = p[(k + 2) % 3] - p[(k + 1) % 3];
                grad += fr.normal.cross(&opposite) * uf[k];
            }
            grad /= 2.0 * fr.area;
            let norm = grad.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                continue;
            }
            let x = -grad / norm;
            for k in 0..3 {
                let (j, l) = ((k + 1) % 3, (k + 2) % 3);
                // edges from corner k, each weighted by the cotangent of the
                // angle opposite it
                let e1 = p[j] - p[k];
                let e2 = p[l] - p[k];
                div[fr.verts[k]] += 0.5 * (fr.cot[l] * e1.dot(&x) + fr.cot[j] * e2.dot(&x));
            }
        }

        // K φ = -div, with the right-hand side projected onto the range of K
        let n_comp = self.component_vertex_count.len();
        let mut comp_sum = vec![0.0; n_comp];
        for (v, &c) in self.vertex_component.iter().enumerate() {
            if c != u32::MAX {
                comp_sum[c as usize] += div[v];
            }
        }
        let rhs: Vec<f64> = (0..n)
            .map(|v| match self.vertex_component[v] {
                u32::MAX => 0.0,
                c => -(div[v] - comp_sum[c as usize] / self.component_vertex_count[c as usize] as f64),
            })
            .collect();
        let phi = self.poisson.solve(&rhs)?;

        // Anchor the free constant so the source corners sit at their exact
        // in-plane distance from the source centroid.
        let center = src.verts.iter().map(|&v| self.positions[v]).sum::<Vec3>() / 3.0;
        let shift = src
            .verts
            .iter()
            .map(|&v| phi[v] - (self.positions[v] - center).norm())
            .sum::<f64>()
            / 3.0;
        let comp = self.face_component[source_face];
        let mut clamped = 0;
        let distance = self
            .frames
            .iter()
            .enumerate()
            .map(|(f, fr)| {
                if f == source_face {
                    return 0.0;
                }
                if self.face_component[f] != comp {
                    return f64::INFINITY;
                }
                let vals = fr.verts.map(|v| phi[v] - shift);
                let mean = vals.iter().sum::<f64>() / 3.0;
                if mean < 0.0 {
                    clamped += 1;
                    return 0.0;
                }
                self.centroid_distance(fr, vals, mean)
            })
            .collect();
        Ok(GeodesicField {
            source_face,
            distance,
            clamped,
        })
    }
}

/// One-shot heat-method distance with the default heat time (`t = h²`).
pub fn heat_geodesic(mesh: &Mesh, source_face: usize) -> Result<GeodesicField> {
    mesh.check_face(source_face)?;
    HeatGeodesics::new(mesh, 1.0)?.distance_from(source_face)
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest paths on the dual graph: faces are nodes, edge-adjacent faces are
/// joined with weight equal to the distance between their centroids.
pub fn dijkstra_geodesic(mesh: &Mesh, source_face: usize) -> Result<GeodesicField> {
    mesh.check_face(source_face)?;
    let graph = FaceGraph::build(mesh);
    let centroids = mesh.face_centroids();
    let mut dist = vec![f64::INFINITY; mesh.face_count()];
    dist[source_face] = 0.0;
    let mut heap = BinaryHeap::from([Entry(0.0, source_face)]);
    while let Some(Entry(d, f)) = heap.pop() {
        if d > dist[f] {
            continue;
        }
        for &g in graph.edge_neighbors(f) {
            let g = g as usize;
            let nd = d + (centroids[f] - centroids[g]).norm();
            if nd < dist[g] {
                dist[g] = nd;
                heap.push(Entry(nd, g));
            }
        }
    }
    Ok(GeodesicField {
        source_face,
        distance: dist,
        clamped: 0,
    })
}

/// Mean and standard deviation of a fitted normal distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mu: f64,
    pub sigma: f64,
}

/// Sample mean and population standard deviation (divide by count) of
/// `values`, with sigma floored at `sigma_floor`.
pub fn fit_gaussian(values: &[f64], sigma_floor: f64) -> Result<Gaussian> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot fit a Gaussian to no values".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite value {bad}")));
    }
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let sigma = (m2 / values.len() as f64).max(0.0).sqrt();
    Ok(Gaussian {
        mu: mean,
        sigma: sigma.max(sigma_floor),
    })
}

/// Normal probability density `exp(-(d-mu)²/(2σ²)) / (σ√(2π))`, kept strictly
/// positive when the exponential underflows.
pub fn gaussian_density(d: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    let z = (d - mu) / sigma;
    let p = (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    Ok(p.max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives;
    use proptest::prelude::*;

    #[test]
    fn source_face_is_zero() {
        let m = primitives::icosphere(2);
        for src in [0, 17, 200] {
            let f = heat_geodesic(&m, src).unwrap();
            assert_eq!(f.distance[src], 0.0);
            assert!(f.distance.iter().all(|d| d.is_finite() && *d >= 0.0));
        }
    }

    #[test]
    fn out_of_range_source() {
        let m = primitives::icosphere(0);
        assert!(matches!(heat_geodesic(&m, 20), Err(Error::FaceOutOfRange { .. })));
        assert!(matches!(dijkstra_geodesic(&m, 99), Err(Error::FaceOutOfRange { .. })));
    }

    #[test]
    fn disconnected_component_is_infinite() {
        let a = primitives::icosphere(1);
        let b = a.map_vertices(|v| v + Vec3::new(4.0, 0.0, 0.0));
        let m = Mesh::merge([&a, &b]).unwrap();
        let f = heat_geodesic(&m, 3).unwrap();
        assert!(f.distance[..80].iter().all(|d| d.is_finite()));
        assert!(f.distance[80..].iter().all(|d| d.is_infinite()));
        let g = dijkstra_geodesic(&m, 3).unwrap();
        assert!(g.distance[80..].iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn dijkstra_two_adjacent_triangles() {
        let m = Mesh::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::new(1.0, 1.0, 0.0)],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        let f = dijkstra_geodesic(&m, 0).unwrap();
        assert_eq!(f.distance[0], 0.0);
        let expect = (m.face_centroid(0) - m.face_centroid(1)).norm();
        assert!((f.distance[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn dijkstra_matches_floyd_warshall_on_grid() {
        let m = primitives::grid(5, 5, 0.2);
        let n = m.face_count();
        let g = FaceGraph::build(&m);
        let c = m.face_centroids();
        let mut d = vec![vec![f64::INFINITY; n]; n];
        for i in 0..n {
            d[i][i] = 0.0;
            for &j in g.edge_neighbors(i) {
                d[i][j as usize] = (c[i] - c[j as usize]).norm();
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i][k] + d[k][j];
                    if via < d[i][j] {
                        d[i][j] = via;
                    }
                }
            }
        }
        let field = dijkstra_geodesic(&m, 0).unwrap();
        for j in 0..n {
            assert!((field.distance[j] - d[0][j]).abs() < 1e-12);
        }
        // corner to corner
        assert!((field.distance[n - 1] - d[0][n - 1]).abs() < 1e-12);
    }

    fn flat_errors(cells: usize) -> (Vec<(f64, f64)>, f64) {
        let cell = 1.0 / cells as f64;
        let m = primitives::grid(cells, cells, cell);
        let c = m.face_centroids();
        let src = (cells / 2) * cells * 2 + cells;
        let f = heat_geodesic(&m, src).unwrap();
        let pairs = (0..m.face_count())
            .filter(|&i| i != src)
            .map(|i| (f.distance[i], (c[i] - c[src]).norm()))
            .collect();
        (pairs, cell)
    }

    #[test]
    fn coarse_flat_grid_error_is_order_h() {
        let (pairs, h) = flat_errors(5);
        let mut rel: Vec<f64> = pairs.iter().map(|(d, e)| ((d - e) / e).abs()).collect();
        rel.sort_by(f64::total_cmp);
        assert!(rel[rel.len() / 2] <= 0.10, "median relative error {}", rel[rel.len() / 2]);
        for (d, e) in pairs {
            assert!((d - e).abs() <= 0.75 * h, "heat {d} vs euclidean {e}");
        }
    }

    #[test]
    fn fine_flat_grid_within_ten_percent() {
        let (pairs, h) = flat_errors(40);
        for (d, e) in pairs {
            if e >= 3.0 * h {
                assert!(((d - e) / e).abs() <= 0.10, "heat {d} vs euclidean {e}");
            }
        }
    }

    #[test]
    fn csv_dump() {
        let f = GeodesicField {
            source_face: 0,
            distance: vec![0.0, 1.5],
            clamped: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        f.write_csv(&p).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "faceIndex,distance\n0,0\n1,1.5\n");
    }

    #[test]
    fn fit_constant_values_hits_floor() {
        let g = fit_gaussian(&[2.0, 2.0, 2.0], 1e-3).unwrap();
        assert_eq!(g.mu, 2.0);
        assert_eq!(g.sigma, 1e-3);
    }

    #[test]
    fn fit_two_points() {
        let g = fit_gaussian(&[0.0, 2.0], 1e-3).unwrap();
        assert_eq!((g.mu, g.sigma), (1.0, 1.0));
    }

    #[test]
    fn fit_empty_fails() {
        assert!(fit_gaussian(&[], 1e-3).is_err());
    }

    #[test]
    fn density_peak_and_shoulder() {
        let peak = gaussian_density(0.0, 0.0, 1.0).unwrap();
        assert!((peak - 0.398_942_280_401_432_7).abs() < 1e-15);
        let sh = gaussian_density(1.0, 0.0, 1.0).unwrap();
        assert!((sh - peak * (-0.5f64).exp()).abs() < 1e-15);
        assert!(gaussian_density(0.0, 0.0, 0.0).is_err());
        assert!(gaussian_density(0.0, 0.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn density_symmetric_and_decreasing(mu in -5.0f64..5.0, sigma in 0.01f64..3.0, a in 0.0f64..4.0, b in 0.0f64..4.0) {
            let pa = gaussian_density(mu + a, mu, sigma).unwrap();
            let pm = gaussian_density(mu - a, mu, sigma).unwrap();
            prop_assert!((pa - pm).abs() <= 1e-12 * pa.max(pm).max(1e-300));
            prop_assert!(pa > 0.0);
            if a + 1e-9 < b {
                let pb = gaussian_density(mu + b, mu, sigma).unwrap();
                prop_assert!(pb <= pa);
            }
        }
    }
}
