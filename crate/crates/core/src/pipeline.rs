//! Render, segment, fuse, export.
//!
//! [`Session`] keeps the rendered views and backend answers of one run so
//! that fusion can be repeated with a user selection without rendering or
//! querying the backend again.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{CandidateMask, HttpConfig, SegBackend, SegQuery};
use crate::fusion::{fuse_views, FuseView, FusionConfig, FusionContext, SegmentationResult, ThresholdScope};
use crate::mesh::{load_mesh, Mesh};
use crate::render::{make_view_ring_at, rasterize, ViewRender};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSettings {
    pub timeout_secs: f64,
    pub retries: u32,
    pub max_concurrent: usize,
}

impl Default for HttpSettings {
    fn default() -> Self {
        let d = HttpConfig::default();
        HttpSettings {
            timeout_secs: d.timeout.as_secs_f64(),
            retries: d.retries,
            max_concurrent: d.max_concurrent,
        }
    }
}

impl HttpSettings {
    pub fn to_http_config(&self) -> Result<HttpConfig> {
        if !(self.timeout_secs > 0.0) || !self.timeout_secs.is_finite() {
            return Err(Error::InvalidArgument(format!("timeout {} s must be positive", self.timeout_secs)));
        }
        Ok(HttpConfig {
            timeout: Duration::from_secs_f64(self.timeout_secs),
            retries: self.retries,
            max_concurrent: self.max_concurrent,
            ..HttpConfig::default()
        })
    }
}

/// Every knob of a run. Echoed verbatim in each result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub views: usize,
    /// Square render size in pixels.
    pub resolution: u32,
    pub fov_degrees: f64,
    pub distance: f64,
    pub elevation_degrees: f64,
    pub max_candidates: usize,
    pub fusion: FusionConfig,
    pub http: HttpSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            views: 8,
            resolution: 1024,
            fov_degrees: 50.0,
            distance: 2.5,
            elevation_degrees: 0.0,
            max_candidates: 5,
            fusion: FusionConfig::default(),
            http: HttpSettings::default(),
        }
    }
}

/// Values given on the command line; `None` leaves the lower layer alone.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub views: Option<usize>,
    pub resolution: Option<u32>,
    pub fov_degrees: Option<f64>,
    pub distance: Option<f64>,
    pub elevation_degrees: Option<f64>,
    pub max_candidates: Option<usize>,
    pub area_diff_threshold: Option<f64>,
    pub k_max: Option<usize>,
    pub q: Option<usize>,
    pub smoothing_iterations: Option<usize>,
    pub min_pixels_per_face: Option<usize>,
    pub threshold_scope: Option<ThresholdScope>,
    pub timeout_secs: Option<f64>,
    pub retries: Option<u32>,
}

impl PipelineConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    /// Defaults, then the config file, then the overrides.
    pub fn resolve(file: Option<&Path>, overrides: &ConfigOverrides) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::from_json_file(p)?,
            None => Self::default(),
        };
        c.apply(overrides);
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, o: &ConfigOverrides) {
        fn set<T: Copy>(dst: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *dst = v;
            }
        }
        set(&mut self.views, o.views);
        set(&mut self.resolution, o.resolution);
        set(&mut self.fov_degrees, o.fov_degrees);
        set(&mut self.distance, o.distance);
        set(&mut self.elevation_degrees, o.elevation_degrees);
        set(&mut self.max_candidates, o.max_candidates);
        set(&mut self.fusion.area_diff_threshold, o.area_diff_threshold);
        set(&mut self.fusion.k_max, o.k_max);
        set(&mut self.fusion.q, o.q);
        set(&mut self.fusion.smoothing_iterations, o.smoothing_iterations);
        set(&mut self.fusion.min_pixels_per_face, o.min_pixels_per_face);
        set(&mut self.fusion.threshold_scope, o.threshold_scope);
        set(&mut self.http.timeout_secs, o.timeout_secs);
        set(&mut self.http.retries, o.retries);
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::InvalidArgument("views must be at least 1".into()));
        }
        if self.resolution == 0 || self.resolution > 8192 {
            return Err(Error::InvalidArgument(format!("resolution {} out of range", self.resolution)));
        }
        if self.max_candidates == 0 {
            return Err(Error::InvalidArgument("max_candidates must be at least 1".into()));
        }
        self.fusion.validate()?;
        self.http.to_http_config()?;
        // camera checks
        make_view_ring_at(1, 1, 1, self.distance, self.fov_degrees, self.elevation_degrees)?;
        Ok(())
    }
}

/// A loaded mesh plus its unit-sphere copy used for rendering and fusion.
#[derive(Debug, Clone)]
pub struct PreparedMesh {
    /// File stem, used as the shape name.
    pub name: String,
    pub original: Mesh,
    pub normalized: Mesh,
    pub dropped_faces: usize,
}

impl PreparedMesh {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let loaded = load_mesh(path)?;
        if loaded.dropped_faces > 0 {
            log::warn!("{}: dropped {} degenerate faces", path.display(), loaded.dropped_faces);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "mesh".into());
        Self::from_mesh(name, loaded.mesh, loaded.dropped_faces)
    }

    pub fn from_mesh(name: impl Into<String>, mesh: Mesh, dropped_faces: usize) -> Result<Self> {
        Ok(PreparedMesh {
            name: name.into(),
            normalized: mesh.normalize()?,
            original: mesh,
            dropped_faces,
        })
    }
}

/// Renders the camera ring described by `config` (views in parallel).
pub fn render_views(mesh: &Mesh, config: &PipelineConfig) -> Result<Vec<ViewRender>> {
    let cams = make_view_ring_at(
        config.views,
        config.resolution,
        config.resolution,
        config.distance,
        config.fov_degrees,
        config.elevation_degrees,
    )?;
    Ok(cams
        .par_iter()
        .enumerate()
        .map(|(i, c)| rasterize(mesh, c, i))
        .collect())
}

/// Backend answer for one view; `Err` holds the failure message.
pub type ViewAnswer = std::result::Result<Vec<CandidateMask>, String>;

/// Queries the backend for every view. A failing view is logged and kept as
/// an error so fusion can skip it.
pub fn segment_views(backend: &dyn SegBackend, views: &[ViewRender], query: &SegQuery) -> Vec<ViewAnswer> {
    views
        .par_iter()
        .map(|v| {
            backend.segment(v, query).map_err(|e| {
                log::warn!("view {} skipped: {e}", v.view_index);
                e.to_string()
            })
        })
        .collect()
}

/// Per-view chosen candidate indices.
pub type Selections = BTreeMap<usize, Vec<usize>>;

/// Everything needed to (re)fuse one query on one mesh.
pub struct Session {
    pub mesh: PreparedMesh,
    pub query: SegQuery,
    pub config: PipelineConfig,
    pub backend: String,
    pub views: Vec<ViewRender>,
    pub answers: Vec<ViewAnswer>,
    pub context: FusionContext,
}

impl Session {
    /// Renders and queries the backend.
    pub fn run(mesh: PreparedMesh, query: &str, config: PipelineConfig, backend: &dyn SegBackend) -> Result<Self> {
        config.validate()?;
        let query = SegQuery::new(query, config.max_candidates)?;
        let views = render_views(&mesh.normalized, &config)?;
        let answers = segment_views(backend, &views, &query);
        Self::from_parts(mesh, query, config, backend.describe(), views, answers)
    }

    /// Builds a session from views and answers obtained elsewhere.
    pub fn from_parts(
        mesh: PreparedMesh,
        query: SegQuery,
        config: PipelineConfig,
        backend: String,
        views: Vec<ViewRender>,
        answers: Vec<ViewAnswer>,
    ) -> Result<Self> {
        if views.len() != answers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} views but {} answers",
                views.len(),
                answers.len()
            )));
        }
        let context = FusionContext::new(&mesh.normalized, &config.fusion)?;
        Ok(Session {
            mesh,
            query,
            config,
            backend,
            views,
            answers,
            context,
        })
    }

    /// Checks that every selected index exists in its view's answer.
    pub fn check_selections(&self, selections: &Selections) -> Result<()> {
        for (&view, idx) in selections {
            let answer = self
                .answers
                .get(view)
                .ok_or_else(|| Error::InvalidSelection(format!("no view {view}")))?;
            let count = match answer {
                Ok(c) => c.len(),
                Err(_) if idx.is_empty() => 0,
                Err(_) => return Err(Error::InvalidSelection(format!("view {view} has no candidates"))),
            };
            if let Some(bad) = idx.iter().find(|&&j| j >= count) {
                return Err(Error::InvalidSelection(format!(
                    "view {view} has {count} candidates, index {bad} selected"
                )));
            }
        }
        Ok(())
    }

    /// Fuses with default top-k filtering, except in views listed in
    /// `selections`, which use exactly the chosen candidates.
    pub fn fuse(&self, selections: &Selections) -> Result<SegmentationResult> {
        self.check_selections(selections)?;
        let inputs: Vec<FuseView<'_>> = self
            .views
            .iter()
            .zip(&self.answers)
            .map(|(render, answer)| FuseView {
                render,
                candidates: match answer {
                    Ok(c) => Ok(c.as_slice()),
                    Err(e) => Err(e.as_str()),
                },
                selection: selections.get(&render.view_index).map(|s| s.as_slice()),
            })
            .collect();
        fuse_views(&self.context, &inputs, &self.config.fusion)
    }

    /// `result.json` contents.
    pub fn result_json(&self, result: &SegmentationResult, selections: &Selections, timestamp: u64) -> serde_json::Value {
        serde_json::json!({
            "shape": self.mesh.name,
            "query": self.query.text,
            "backend": self.backend,
            "timestamp": timestamp,
            "face_count": self.mesh.original.face_count(),
            "labels": result.labels,
            "score": result.score,
            "visibility": result.visibility,
            "explanations": result.explanations,
            "skipped_views": result.skipped_views,
            "selections": selections,
            "config": self.config,
        })
    }

    /// Writes `views/{i}.png`, `candidates/{i}_{j}.png`, `result.json` and
    /// `segmented.ply` under `out`.
    pub fn write_outputs(&self, out: &Path, result: &SegmentationResult, selections: &Selections) -> Result<OutputFiles> {
        let views_dir = out.join("views");
        let cand_dir = out.join("candidates");
        for d in [&views_dir, &cand_dir] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for v in &self.views {
            v.save_png(views_dir.join(format!("{}.png", v.view_index)))?;
        }
        for (v, answer) in self.views.iter().zip(&self.answers) {
            if let Ok(cands) = answer {
                for (j, c) in cands.iter().enumerate() {
                    let p = cand_dir.join(format!("{}_{j}.png", v.view_index));
                    std::fs::write(&p, c.png_bytes()).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        let result_path = out.join("result.json");
        let json = serde_json::to_string_pretty(&self.result_json(result, selections, unix_now()))?;
        std::fs::write(&result_path, json).map_err(|e| Error::io(&result_path, e))?;
        let ply = out.join("segmented.ply");
        result.write_colored_ply(&self.mesh.original, &ply)?;
        Ok(OutputFiles {
            result: result_path,
            ply,
            views: views_dir,
            candidates: cand_dir,
        })
    }
}

#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub result: PathBuf,
    pub ply: PathBuf,
    pub views: PathBuf,
    pub candidates: PathBuf,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// One batch run: load, render, segment, fuse, write. Fails if every view
/// failed upstream.
pub fn run_segment(
    mesh_path: &Path,
    query: &str,
    config: PipelineConfig,
    backend: &dyn SegBackend,
    out: &Path,
) -> Result<(Session, SegmentationResult, OutputFiles)> {
    let mesh = PreparedMesh::load(mesh_path)?;
    let session = Session::run(mesh, query, config, backend)?;
    let selections = Selections::new();
    let result = session.fuse(&selections)?;
    let files = session.write_outputs(out, &result, &selections)?;
    Ok((session, result, files))
}

/// Writes `views/{i}.png` and raw face-ID dumps `faceid/{i}.bin` plus
/// `cameras.json`.
pub fn render_to_dir(mesh: &Mesh, config: &PipelineConfig, out: &Path) -> Result<Vec<ViewRender>> {
    let views = render_views(mesh, config)?;
    let vdir = out.join("views");
    let fdir = out.join("faceid");
    for d in [&vdir, &fdir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for v in &views {
        v.save_png(vdir.join(format!("{}.png", v.view_index)))?;
        v.save_face_ids(fdir.join(format!("{}.bin", v.view_index)))?;
    }
    let cams: Vec<_> = views.iter().map(|v| &v.camera).collect();
    let path = out.join("cameras.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cams)?).map_err(|e| Error::io(&path, e))?;
    Ok(views)
}
