use meshreason::geodesic::{
    dijkstra_geodesic, fit_gaussian, gaussian_density, heat_geodesic, HeatGeodesics,
};
use meshreason::mesh::{primitives, Mesh, Vec3};

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// (median relative deviation, spearman) of heat against Dijkstra.
fn compare(mesh: &Mesh, source: usize) -> (f64, f64) {
    let heat = heat_geodesic(mesh, source).unwrap();
    let dij = dijkstra_geodesic(mesh, source).unwrap();
    let (mut h, mut d) = (Vec::new(), Vec::new());
    for (a, b) in heat.distance.iter().zip(&dij.distance) {
        if b.is_finite() && *b > 0.0 {
            h.push(*a);
            d.push(*b);
        }
    }
    let mut rel: Vec<f64> = h.iter().zip(&d).map(|(a, b)| ((a - b) / b).abs()).collect();
    rel.sort_by(f64::total_cmp);
    (rel[rel.len() / 2], spearman(&h, &d))
}

fn test_meshes() -> Vec<(&'static str, Mesh)> {
    vec![
        ("icosphere3", primitives::icosphere(3)),
        ("grid20", primitives::grid(20, 20, 0.05)),
        ("cylinder", primitives::cylinder(32, 16, 0.5, 1.6).normalize().unwrap()),
        ("box", primitives::subdivided_box(10, Vec3::new(1.0, 0.6, 0.4)).normalize().unwrap()),
    ]
}

#[test]
fn dijkstra_sits_above_heat_with_matching_ranks() {
    for (name, mesh) in test_meshes() {
        assert!(mesh.face_count() <= 2000);
        for source in [0, mesh.face_count() / 3, mesh.face_count() - 1] {
            let heat = heat_geodesic(&mesh, source).unwrap();
            let dij = dijkstra_geodesic(&mesh, source).unwrap();
            let above = heat
                .distance
                .iter()
                .zip(&dij.distance)
                .filter(|(h, d)| **d >= **h * 0.98)
                .count();
            assert!(above * 5 >= mesh.face_count() * 4, "{name}/{source}: {above} above");
            let (_, rho) = compare(&mesh, source);
            assert!(rho >= 0.94, "{name}/{source}: spearman {rho}");
        }
    }
}

#[test]
fn heat_matches_great_circle_on_sphere() {
    let mesh = primitives::icosphere(3);
    let c = mesh.face_centroids();
    let r = c.iter().map(|p| p.norm()).sum::<f64>() / c.len() as f64;
    for src in [0, 500, 1000] {
        let f = heat_geodesic(&mesh, src).unwrap();
        let a = c[src].normalize();
        let mut rel: Vec<f64> = (0..mesh.face_count())
            .filter(|&i| i != src)
            .map(|i| {
                let exact = r * a.dot(&c[i].normalize()).clamp(-1.0, 1.0).acos();
                ((f.distance[i] - exact) / exact).abs()
            })
            .collect();
        rel.sort_by(f64::total_cmp);
        assert!(rel[rel.len() / 2] <= 0.03, "source {src}: median {}", rel[rel.len() / 2]);
    }
}

#[test]
fn icosphere_antipode_is_half_circumference() {
    let mesh = primitives::icosphere(3);
    let src = 0;
    let c = mesh.face_centroids();
    let anti = (0..mesh.face_count())
        .min_by(|&a, &b| {
            let da = (c[a].normalize() + c[src].normalize()).norm();
            let db = (c[b].normalize() + c[src].normalize()).norm();
            da.total_cmp(&db)
        })
        .unwrap();
    let f = heat_geodesic(&mesh, src).unwrap();
    let r = c[src].norm();
    let expect = std::f64::consts::PI * r;
    let got = f.distance[anti];
    assert!(((got - expect) / expect).abs() <= 0.10, "{got} vs {expect}");
}

#[test]
fn clamped_faces_are_rare() {
    let mut total = 0;
    let mut clamped = 0;
    for (_, mesh) in test_meshes() {
        let solver = HeatGeodesics::new(&mesh, 1.0).unwrap();
        for src in [0, mesh.face_count() / 2] {
            let f = solver.distance_from(src).unwrap();
            assert!(f.distance.iter().all(|&d| d >= 0.0));
            total += f.distance.len();
            clamped += f.clamped;
        }
    }
    assert!(clamped as f64 <= 0.01 * total as f64, "{clamped} of {total} clamped");
}

#[test]
fn cached_solver_matches_one_shot() {
    let mesh = primitives::icosphere(2);
    let solver = HeatGeodesics::new(&mesh, 1.0).unwrap();
    for src in [3, 100] {
        assert_eq!(
            solver.distance_from(src).unwrap(),
            heat_geodesic(&mesh, src).unwrap()
        );
    }
}

#[test]
fn gaussian_fit_matches_two_pass() {
    let values: Vec<f64> = (0..1000)
        .map(|i| ((i as f64) * 0.7311).sin() * 3.0 + (i % 7) as f64)
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let g = fit_gaussian(&values, 1e-12).unwrap();
    assert!(((g.mu - mean) / mean).abs() <= 1e-9);
    assert!(((g.sigma - var.sqrt()) / var.sqrt()).abs() <= 1e-9);
}

#[test]
fn gaussian_density_integrates_to_one() {
    let (mu, sigma) = (0.7, 0.3);
    let (a, b) = (mu - 8.0 * sigma, mu + 8.0 * sigma);
    let steps = 20_000;
    let h = (b - a) / steps as f64;
    let mut sum = 0.5 * (gaussian_density(a, mu, sigma).unwrap() + gaussian_density(b, mu, sigma).unwrap());
    for i in 1..steps {
        sum += gaussian_density(a + i as f64 * h, mu, sigma).unwrap();
    }
    assert!((sum * h - 1.0).abs() <= 1e-6);
}
