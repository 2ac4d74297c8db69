use std::collections::BTreeSet;
use std::path::PathBuf;

use meshreason::backend::{FixtureBackend, OracleBackend, SegBackend};
use meshreason::eval::{face_iou, GroundTruth};
use meshreason::fusion::{filter_topk_indices, fuse_views, FuseView};
use meshreason::mesh::load_mesh;
use meshreason::pipeline::{run_segment, PipelineConfig, PreparedMesh, Selections, Session};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn cube_config() -> PipelineConfig {
    PipelineConfig {
        views: 4,
        resolution: 256,
        ..Default::default()
    }
}

#[test]
fn sample_meshes_have_expected_face_counts() {
    for (name, faces) in [("cube.obj", 432), ("sphere.obj", 1280), ("humanoid.obj", 3808)] {
        let m = load_mesh(data(name)).unwrap();
        assert_eq!(m.mesh.face_count(), faces, "{name}");
        assert_eq!(m.dropped_faces, 0);
    }
}

fn strip_timestamp(path: &std::path::Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timestamp");
    v
}

#[test]
fn fixture_run_writes_outputs_and_is_repeatable() {
    let backend = FixtureBackend::open(data("cube_fixture")).unwrap();
    let mut results = Vec::new();
    for _ in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let (_, res, files) = run_segment(&data("cube.obj"), "top part", cube_config(), &backend, dir.path()).unwrap();
        assert!(files.result.exists() && files.ply.exists());
        assert_eq!(std::fs::read_dir(&files.views).unwrap().count(), 4);
        assert_eq!(std::fs::read_dir(&files.candidates).unwrap().count(), 8);
        let mut entries: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        entries.sort();
        assert_eq!(entries, ["candidates", "result.json", "segmented.ply", "views"]);
        assert!(res.labels.iter().any(|&l| l));
        let gt = GroundTruth::load(data("cube_gt.json")).unwrap();
        let top: BTreeSet<u32> = gt.faces_of("cube", 1).unwrap();
        assert!(face_iou(&res.selected_faces(), &top) > 0.5);
        let json = strip_timestamp(&files.result);
        assert_eq!(json["config"]["views"], 4);
        assert_eq!(json["config"]["fusion"]["k_max"], 3);
        assert_eq!(json["shape"], "cube");
        results.push(std::fs::read(&files.result).unwrap());
    }
    // byte-identical apart from the timestamp line
    let strip = |b: &[u8]| -> String {
        String::from_utf8_lossy(b)
            .lines()
            .filter(|l| !l.trim_start().starts_with("\"timestamp\""))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&results[0]), strip(&results[1]));
    assert_eq!(strip(&results[0]), strip(&results[2]));
}

#[test]
fn segmented_ply_colors_match_labels() {
    let backend = FixtureBackend::open(data("cube_fixture")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (_, res, files) = run_segment(&data("cube.obj"), "top part", cube_config(), &backend, dir.path()).unwrap();
    let text = std::fs::read_to_string(files.ply).unwrap();
    let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
    let faces = &body[body.len() - res.labels.len()..];
    for (line, &l) in faces.iter().zip(&res.labels) {
        let rgb: Vec<&str> = line.split_whitespace().skip(4).collect();
        assert_eq!(rgb, if l { ["255", "0", "0"] } else { ["128", "128", "128"] });
    }
}

fn cube_session() -> Session {
    let backend = FixtureBackend::open(data("cube_fixture")).unwrap();
    let mesh = PreparedMesh::load(data("cube.obj")).unwrap();
    Session::run(mesh, "top part", cube_config(), &backend).unwrap()
}

#[test]
fn selecting_the_default_kept_set_changes_nothing() {
    let s = cube_session();
    let default = s.fuse(&Selections::new()).unwrap();
    let sel: Selections = s
        .answers
        .iter()
        .enumerate()
        .map(|(i, a)| (i, filter_topk_indices(a.as_ref().unwrap(), &s.config.fusion)))
        .collect();
    assert_eq!(s.fuse(&sel).unwrap(), default);
}

#[test]
fn empty_selection_everywhere_labels_nothing() {
    let s = cube_session();
    let sel: Selections = (0..4).map(|i| (i, Vec::new())).collect();
    let r = s.fuse(&sel).unwrap();
    assert!(r.labels.iter().all(|&l| !l));
    assert!(r.explanations.is_empty());
}

#[test]
fn single_selection_matches_offline_fusion() {
    // two-view session, three candidates in view 0
    let mesh = PreparedMesh::load(data("cube.obj")).unwrap();
    let config = PipelineConfig { views: 2, resolution: 128, ..Default::default() };
    let gt = GroundTruth::load(data("cube_gt.json")).unwrap();
    let top = OracleBackend::from_ground_truth(&gt, "cube", "top").unwrap();
    let bottom = OracleBackend::from_ground_truth(&gt, "cube", "bottom").unwrap();
    let views = meshreason::pipeline::render_views(&mesh.normalized, &config).unwrap();
    let q = meshreason::backend::SegQuery::new("x", 5).unwrap();
    let mut answers = Vec::new();
    for v in &views {
        let mut c = top.segment(v, &q).unwrap();
        let mut b = bottom.segment(v, &q).unwrap();
        b[0].confidence = 0.5;
        c.extend(b.clone());
        b[0].confidence = 0.25;
        b[0].text = "again".into();
        c.extend(b);
        answers.push(Ok(c));
    }
    let s = Session::from_parts(mesh, q, config, "test".into(), views.clone(), answers.clone()).unwrap();
    let sel = Selections::from([(0, vec![2])]);
    let got = s.fuse(&sel).unwrap();
    let a0 = answers[0].as_ref().unwrap();
    let a1 = answers[1].as_ref().unwrap();
    let only = vec![a0[2].clone()];
    let kept1: Vec<_> = filter_topk_indices(a1, &s.config.fusion).into_iter().map(|i| a1[i].clone()).collect();
    let inputs = [
        FuseView { render: &views[0], candidates: Ok(&only), selection: None },
        FuseView { render: &views[1], candidates: Ok(&kept1), selection: None },
    ];
    let want = fuse_views(&s.context, &inputs, &s.config.fusion).unwrap();
    assert_eq!(got.labels, want.labels);
    assert_eq!(got.score, want.score);
    assert_eq!(got.explanations[0].text, "again");
    assert!(s.fuse(&Selections::from([(0, vec![7])])).is_err());
    assert!(s.fuse(&Selections::from([(9, vec![0])])).is_err());
}

#[test]
fn missing_mesh_names_the_path() {
    let backend = FixtureBackend::open(data("cube_fixture")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_segment(&data("nope.obj"), "q", cube_config(), &backend, dir.path()).err().unwrap();
    assert!(err.to_string().contains("nope.obj"), "{err}");
}
