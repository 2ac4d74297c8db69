use meshreason::mesh::{primitives, Mesh, Vec3};
use meshreason::render::{make_view_ring_at, pick_face, rasterize, BACKGROUND};

fn meshes() -> Vec<(&'static str, Mesh)> {
    let tilted = primitives::grid(12, 12, 0.1).map_vertices(|v| Vec3::new(v.x, v.y * 0.8, v.y * 0.6));
    vec![
        ("icosphere", primitives::icosphere(2)),
        ("box", primitives::subdivided_box(5, Vec3::new(0.5, 0.3, 0.4))),
        ("cylinder", primitives::cylinder(24, 8, 0.4, 1.2)),
        ("humanoid", primitives::humanoid().0),
        ("tilted_grid", tilted),
    ]
}

/// Away from the silhouette: the pixel and its 8 neighbours are all covered
/// or all background.
fn interior(ids: &[u32], w: usize, h: usize, x: usize, y: usize) -> bool {
    if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
        return false;
    }
    let c = ids[y * w + x] == BACKGROUND;
    (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| (ids[yy * w + xx] == BACKGROUND) == c))
}

#[test]
fn face_ids_match_ray_casting() {
    let res = 256u32;
    let (mut checked, mut agree, mut bg) = (0usize, 0usize, 0usize);
    for (name, mesh) in meshes() {
        let mesh = mesh.normalize().unwrap();
        let mut per_mesh = 0;
        for cam in make_view_ring_at(3, res, res, 2.5, 50.0, 20.0).unwrap() {
            let view = rasterize(&mesh, &cam, 0);
            let (w, h) = (res as usize, res as usize);
            let mut fg = Vec::new();
            let mut misses = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if interior(&view.face_id, w, h, x, y) {
                        if view.face_id[y * w + x] == BACKGROUND {
                            misses.push((x, y));
                        } else {
                            fg.push((x, y));
                        }
                    }
                }
            }
            // evenly spaced subsets keep the brute-force oracle cheap
            let step = (fg.len() / 150).max(1);
            for &(x, y) in fg.iter().step_by(step) {
                let id = view.face_id[y * w + x];
                checked += 1;
                per_mesh += 1;
                let hit = pick_face(&mesh, &cam, x as u32, y as u32).map(|(f, _)| f);
                if hit == Some(id) {
                    agree += 1;
                } else {
                    eprintln!("{name} ({x},{y}): raster {id}, ray {hit:?}");
                }
            }
            for &(x, y) in misses.iter().step_by((misses.len() / 20).max(1)) {
                bg += 1;
                assert!(pick_face(&mesh, &cam, x as u32, y as u32).is_none(), "{name} ({x},{y})");
            }
        }
        assert!(per_mesh >= 200, "{name}: {per_mesh} samples");
    }
    assert!(checked >= 1000 && bg > 0);
    let rate = agree as f64 / checked as f64;
    assert!(rate >= 0.999, "{agree}/{checked}");
}
