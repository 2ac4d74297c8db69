//! Python bindings. The pure-Python package `meshreason` wraps this module
//! and converts config dicts to JSON.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use meshreason::backend::BackendSpec;
use meshreason::eval::{self, GroundTruth, Predictions};
use meshreason::fusion::SegmentationResult;
use meshreason::geodesic;
use meshreason::mesh::{self as core_mesh, primitives, Vec3};
use meshreason::pipeline::{self, PipelineConfig, PreparedMesh, Selections};
use meshreason::render::{self, ViewRender};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: meshreason::Error) -> PyErr {
    use meshreason::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::Solver(_) | E::Backend { .. } | E::Protocol { .. } | E::AllViewsFailed | E::Image(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_config(config: Option<&str>) -> PyResult<PipelineConfig> {
    let c = match config {
        Some(s) => serde_json::from_str::<PipelineConfig>(s).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
        None => PipelineConfig::default(),
    };
    c.validate().map_err(err)?;
    Ok(c)
}

/// Triangle mesh.
#[pyclass(module = "meshreason", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Mesh {
    inner: Arc<core_mesh::Mesh>,
}

impl Mesh {
    fn wrap(m: core_mesh::Mesh) -> Self {
        Mesh { inner: Arc::new(m) }
    }
}

#[pymethods]
impl Mesh {
    #[new]
    fn new(vertices: Vec<[f64; 3]>, faces: Vec<[u32; 3]>) -> PyResult<Self> {
        let v = vertices.into_iter().map(Vec3::from).collect();
        Ok(Mesh::wrap(core_mesh::Mesh::new(v, faces).map_err(err)?))
    }

    /// Loads an OBJ or PLY file; polygons are fan-triangulated and
    /// degenerate faces dropped.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Mesh::wrap(core_mesh::load_mesh(&path).map_err(err)?.mesh))
    }

    #[staticmethod]
    fn icosphere(level: u32) -> Self {
        Mesh::wrap(primitives::icosphere(level))
    }

    /// Synthetic figure and its per-face part labels (0 head, 1 torso, 2 leg).
    #[staticmethod]
    fn humanoid() -> (Self, Vec<u32>) {
        let (m, l) = primitives::humanoid();
        (Mesh::wrap(m), l)
    }

    #[getter]
    fn vertex_count(&self) -> usize {
        self.inner.vertex_count()
    }

    #[getter]
    fn face_count(&self) -> usize {
        self.inner.face_count()
    }

    fn vertices(&self) -> Vec<[f64; 3]> {
        self.inner.vertices().iter().map(|v| [v.x, v.y, v.z]).collect()
    }

    fn faces(&self) -> Vec<[u32; 3]> {
        self.inner.faces().to_vec()
    }

    fn face_areas(&self) -> Vec<f64> {
        (0..self.inner.face_count()).map(|f| self.inner.face_area(f)).collect()
    }

    fn face_centroids(&self) -> Vec<[f64; 3]> {
        self.inner.face_centroids().iter().map(|v| [v.x, v.y, v.z]).collect()
    }

    fn bounding_diagonal(&self) -> f64 {
        self.inner.bounding_diagonal()
    }

    /// Copy centered at the origin and scaled into the unit sphere.
    fn normalize(&self) -> PyResult<Self> {
        Ok(Mesh::wrap(self.inner.normalize().map_err(err)?))
    }

    fn write_obj(&self, path: PathBuf) -> PyResult<()> {
        core_mesh::write_obj(&self.inner, &path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Mesh({} vertices, {} faces)", self.inner.vertex_count(), self.inner.face_count())
    }
}

/// One rendered view.
#[pyclass(module = "meshreason", frozen, skip_from_py_object)]
struct View {
    inner: ViewRender,
}

#[pymethods]
impl View {
    #[getter]
    fn index(&self) -> usize {
        self.inner.view_index
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height
    }

    /// Row-major face IDs; `BACKGROUND` where nothing was hit.
    fn face_ids(&self) -> Vec<u32> {
        self.inner.face_id.clone()
    }

    fn face_at(&self, x: u32, y: u32) -> PyResult<u32> {
        if x >= self.inner.width || y >= self.inner.height {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) outside the image")));
        }
        Ok(self.inner.face_at(x, y))
    }

    /// Pixel count per visible face.
    fn visible_faces(&self) -> BTreeMap<u32, usize> {
        render::visible_faces(&self.inner)
    }

    fn png<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.png_bytes())
    }

    fn __repr__(&self) -> String {
        format!("View({}, {}x{})", self.inner.view_index, self.inner.width, self.inner.height)
    }
}

/// Renders a ring of views around the mesh (normalize it first for the
/// default camera distance to frame it).
#[pyfunction]
#[pyo3(signature = (mesh, views = 8, resolution = 256, fov = 50.0, distance = 2.5, elevation = 0.0))]
fn render_views(
    py: Python<'_>,
    mesh: &Mesh,
    views: usize,
    resolution: u32,
    fov: f64,
    distance: f64,
    elevation: f64,
) -> PyResult<Vec<View>> {
    let cfg = PipelineConfig {
        views,
        resolution,
        fov_degrees: fov,
        distance,
        elevation_degrees: elevation,
        ..PipelineConfig::default()
    };
    cfg.validate().map_err(err)?;
    let m = mesh.inner.clone();
    let out = py.detach(move || pipeline::render_views(&m, &cfg)).map_err(err)?;
    Ok(out.into_iter().map(|inner| View { inner }).collect())
}

/// Heat-method distances with a cached factorization.
#[pyclass(module = "meshreason", frozen)]
struct HeatGeodesics {
    inner: geodesic::HeatGeodesics,
}

#[pymethods]
impl HeatGeodesics {
    #[new]
    #[pyo3(signature = (mesh, time_multiplier = 1.0))]
    fn new(py: Python<'_>, mesh: &Mesh, time_multiplier: f64) -> PyResult<Self> {
        let m = mesh.inner.clone();
        let inner = py
            .detach(move || geodesic::HeatGeodesics::new(&m, time_multiplier))
            .map_err(err)?;
        Ok(HeatGeodesics { inner })
    }

    /// Distance from the centroid of `face` to every face centroid.
    fn distance_from(&self, py: Python<'_>, face: usize) -> PyResult<Vec<f64>> {
        py.detach(|| self.inner.distance_from(face))
            .map(|d| d.distance)
            .map_err(err)
    }
}

#[pyfunction]
fn heat_geodesic(py: Python<'_>, mesh: &Mesh, face: usize) -> PyResult<Vec<f64>> {
    let m = mesh.inner.clone();
    py.detach(move || geodesic::heat_geodesic(&m, face))
        .map(|d| d.distance)
        .map_err(err)
}

/// Shortest paths over the face adjacency graph (centroid-to-centroid edges).
#[pyfunction]
fn dijkstra_geodesic(py: Python<'_>, mesh: &Mesh, face: usize) -> PyResult<Vec<f64>> {
    let m = mesh.inner.clone();
    py.detach(move || geodesic::dijkstra_geodesic(&m, face))
        .map(|d| d.distance)
        .map_err(err)
}

/// Population mean and standard deviation, with `sigma` at least `sigma_floor`.
#[pyfunction]
#[pyo3(signature = (values, sigma_floor = 0.0))]
fn fit_gaussian(values: Vec<f64>, sigma_floor: f64) -> PyResult<(f64, f64)> {
    let g = geodesic::fit_gaussian(&values, sigma_floor).map_err(err)?;
    Ok((g.mu, g.sigma))
}

#[pyfunction]
fn gaussian_density(x: f64, mu: f64, sigma: f64) -> PyResult<f64> {
    geodesic::gaussian_density(x, mu, sigma).map_err(err)
}

#[pyfunction]
fn face_iou(pred: BTreeSet<u32>, gt: BTreeSet<u32>) -> f64 {
    eval::face_iou(&pred, &gt)
}

/// Per-category mIoU.
#[pyclass(module = "meshreason", frozen)]
struct EvalReport {
    inner: eval::EvalReport,
}

#[pymethods]
impl EvalReport {
    #[getter]
    fn categories(&self) -> Vec<String> {
        self.inner.categories.clone()
    }

    /// Percentages, same order as `categories`.
    #[getter]
    fn per_category(&self) -> Vec<f64> {
        self.inner.per_category.clone()
    }

    #[getter]
    fn mean(&self) -> f64 {
        self.inner.mean
    }

    #[getter]
    fn shape_count(&self) -> usize {
        self.inner.shape_count
    }

    #[pyo3(signature = (model = "Ours"))]
    fn table(&self, model: &str) -> String {
        self.inner.table(model)
    }

    fn to_json(&self) -> String {
        self.inner.to_json().to_string()
    }
}

/// `predictions` maps shape name to per-face category index (or None);
/// `ground_truth` maps shape name to per-face category index.
#[pyfunction]
#[pyo3(signature = (predictions, categories, ground_truth, face_areas = None))]
fn miou_report(
    predictions: Predictions,
    categories: Vec<String>,
    ground_truth: BTreeMap<String, Vec<u32>>,
    face_areas: Option<BTreeMap<String, Vec<f64>>>,
) -> PyResult<EvalReport> {
    let gt = GroundTruth::new(categories, ground_truth).map_err(err)?;
    let inner = eval::miou_report(&predictions, &gt, face_areas.as_ref()).map_err(err)?;
    Ok(EvalReport { inner })
}

/// Fused labeling of one query.
#[pyclass(module = "meshreason", frozen)]
struct Segmentation {
    inner: SegmentationResult,
}

#[pymethods]
impl Segmentation {
    #[getter]
    fn labels(&self) -> Vec<bool> {
        self.inner.labels.clone()
    }

    #[getter]
    fn score(&self) -> Vec<f64> {
        self.inner.score.clone()
    }

    #[getter]
    fn visibility(&self) -> Vec<u32> {
        self.inner.visibility.clone()
    }

    fn selected_faces(&self) -> BTreeSet<u32> {
        self.inner.selected_faces()
    }

    /// `(view, text, confidence)` of every candidate that took part.
    #[getter]
    fn explanations(&self) -> Vec<(usize, String, f64)> {
        self.inner
            .explanations
            .iter()
            .map(|e| (e.view, e.text.clone(), e.confidence))
            .collect()
    }

    #[getter]
    fn skipped_views(&self) -> Vec<(usize, String)> {
        self.inner
            .skipped_views
            .iter()
            .map(|s| (s.view, s.reason.clone()))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Segmentation({} of {} faces)",
            self.inner.selected_faces().len(),
            self.inner.labels.len()
        )
    }
}

/// Rendered views plus backend answers for one mesh and query; fuse as often
/// as needed with different candidate selections.
#[pyclass(module = "meshreason", frozen, subclass)]
struct Session {
    inner: pipeline::Session,
}

#[pymethods]
impl Session {
    /// `backend` is `http:<url>`, `fixture:<dir>` or `oracle:<gt.json>:<label>`.
    /// `config` is a JSON object string; missing keys take default values.
    #[new]
    #[pyo3(signature = (mesh_path, query, backend, config = None))]
    fn new(py: Python<'_>, mesh_path: PathBuf, query: String, backend: &str, config: Option<&str>) -> PyResult<Self> {
        let config = parse_config(config)?;
        let spec: BackendSpec = backend.parse().map_err(err)?;
        let inner = py
            .detach(move || {
                let mesh = PreparedMesh::load(&mesh_path)?;
                let b = spec.build(&mesh.name, mesh.original.face_count(), config.http.to_http_config()?)?;
                pipeline::Session::run(mesh, &query, config, b.as_ref())
            })
            .map_err(err)?;
        Ok(Session { inner })
    }

    #[getter]
    fn shape(&self) -> String {
        self.inner.mesh.name.clone()
    }

    #[getter]
    fn query(&self) -> String {
        self.inner.query.text.clone()
    }

    /// Per view: a list of `(confidence, text)` or the error string.
    fn candidates<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyAny>>> {
        self.inner
            .answers
            .iter()
            .map(|a| match a {
                Ok(c) => {
                    let list: Vec<(f64, String)> = c.iter().map(|m| (m.confidence, m.text.clone())).collect();
                    Ok(list.into_pyobject(py)?.into_any())
                }
                Err(e) => Ok(e.clone().into_pyobject(py)?.into_any()),
            })
            .collect()
    }

    /// Fuses; views listed in `selections` use exactly those candidates.
    #[pyo3(signature = (selections = None))]
    fn fuse(&self, py: Python<'_>, selections: Option<Selections>) -> PyResult<Segmentation> {
        let sel = selections.unwrap_or_default();
        let inner = py.detach(|| self.inner.fuse(&sel)).map_err(err)?;
        Ok(Segmentation { inner })
    }

    /// Writes views, candidates, result.json and segmented.ply under `out`.
    #[pyo3(signature = (out, result, selections = None))]
    fn write(&self, out: PathBuf, result: &Segmentation, selections: Option<Selections>) -> PyResult<PathBuf> {
        let sel = selections.unwrap_or_default();
        Ok(self.inner.write_outputs(&out, &result.inner, &sel).map_err(err)?.result)
    }

    /// The result.json document as a dict, without writing files.
    #[pyo3(signature = (result, selections = None))]
    fn result_json<'py>(&self, py: Python<'py>, result: &Segmentation, selections: Option<Selections>) -> PyResult<Bound<'py, PyAny>> {
        let sel = selections.unwrap_or_default();
        let text = self
            .inner
            .result_json(&result.inner, &sel, pipeline::unix_now())
            .to_string();
        py.import("json")?.call_method1("loads", (text,))
    }
}

/// Defaults of every pipeline setting, as a JSON string.
#[pyfunction]
fn default_config() -> String {
    serde_json::to_string(&PipelineConfig::default()).unwrap_or_default()
}

#[pymodule]
fn _meshreason(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BACKGROUND", render::BACKGROUND)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Mesh>()?;
    m.add_class::<View>()?;
    m.add_class::<HeatGeodesics>()?;
    m.add_class::<EvalReport>()?;
    m.add_class::<Segmentation>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(render_views, m)?)?;
    m.add_function(wrap_pyfunction!(heat_geodesic, m)?)?;
    m.add_function(wrap_pyfunction!(dijkstra_geodesic, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_density, m)?)?;
    m.add_function(wrap_pyfunction!(face_iou, m)?)?;
    m.add_function(wrap_pyfunction!(miou_report, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
