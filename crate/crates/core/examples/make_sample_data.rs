//! Regenerates the sample meshes, ground-truth files and the cube fixture.
//!
//! cargo run -p meshreason --example make_sample_data -- data

use std::collections::BTreeMap;
use std::path::PathBuf;

use meshreason::backend::{CandidateMask, FixtureBackend, OracleBackend, SegBackend, SegQuery};
use meshreason::eval::GroundTruth;
use meshreason::mesh::{primitives, write_obj, Mesh, Vec3};
use meshreason::pipeline::{render_views, PipelineConfig, PreparedMesh};

fn labels_by(mesh: &Mesh, f: impl Fn(Vec3) -> u32) -> Vec<u32> {
    (0..mesh.face_count()).map(|i| f(mesh.face_centroid(i))).collect()
}

fn save_gt(dir: &std::path::Path, name: &str, categories: &[&str], labels: Vec<u32>) -> meshreason::Result<GroundTruth> {
    let gt = GroundTruth::new(
        categories.iter().map(|s| s.to_string()).collect(),
        BTreeMap::from([(name.to_string(), labels)]),
    )?;
    gt.save(dir.join(format!("{name}_gt.json")))?;
    Ok(gt)
}

fn main() -> meshreason::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(&out).expect("create output dir");

    let cube = primitives::subdivided_box(6, Vec3::repeat(0.5));
    write_obj(&cube, out.join("cube.obj"))?;
    let cube_labels = labels_by(&cube, |c| (c.y > 0.0) as u32);
    save_gt(&out, "cube", &["bottom", "top"], cube_labels.clone())?;

    let sphere = primitives::icosphere(3);
    write_obj(&sphere, out.join("sphere.obj"))?;
    save_gt(&out, "sphere", &["bottom", "top"], labels_by(&sphere, |c| (c.y > 0.0) as u32))?;

    let (humanoid, parts) = primitives::humanoid();
    write_obj(&humanoid, out.join("humanoid.obj"))?;
    save_gt(&out, "humanoid", &["head", "torso", "leg"], parts)?;

    // fixture: 4 views at 256², two candidates per view
    let config = PipelineConfig {
        views: 4,
        resolution: 256,
        ..Default::default()
    };
    let prepared = PreparedMesh::from_mesh("cube", cube.clone(), 0)?;
    let views = render_views(&prepared.normalized, &config)?;
    let names: Vec<&str> = cube_labels.iter().map(|&l| if l == 1 { "top" } else { "bottom" }).collect();
    let top = OracleBackend::new(&names, "top");
    let upper: Vec<&str> = (0..cube.face_count())
        .map(|f| if cube.face_centroid(f).y > 0.2 { "upper" } else { "rest" })
        .collect();
    let upper = OracleBackend::new(&upper, "upper");
    let q = SegQuery::new("top part", 1)?;
    let mut fixture = BTreeMap::new();
    for v in &views {
        let mut cands: Vec<CandidateMask> = Vec::new();
        for (backend, conf, text) in [
            (&top, 0.92, "The top part is the upper half of the cube."),
            (&upper, 0.55, "The top rim of the cube."),
        ] {
            for mut c in backend.segment(v, &q)? {
                c.confidence = conf;
                c.text = text.to_string();
                cands.push(c);
            }
        }
        fixture.insert(v.view_index, cands);
    }
    FixtureBackend::write(out.join("cube_fixture"), &fixture)?;
    println!("wrote sample data to {}", out.display());
    Ok(())
}
