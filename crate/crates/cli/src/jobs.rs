//! In-process job queue behind the HTTP service.
//!
//! Jobs live in memory; their artifacts are written under `{root}/{id}/` in
//! the same layout as `meshreason segment`. A single worker thread executes
//! jobs one at a time. Parallelism happens inside a job, across views.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex, RwLock};

use anyhow::{anyhow, bail, Context, Result};
use meshreason::backend::{BackendSpec, SegQuery};
use meshreason::fusion::SegmentationResult;
use meshreason::mesh::{load_mesh, Mesh};
use meshreason::pipeline::{render_views, segment_views, unix_now, PipelineConfig, PreparedMesh, Selections, Session};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Rendering,
    Segmenting,
    Fusing,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateInfo {
    pub index: usize,
    pub confidence: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewInfo {
    pub index: usize,
    pub candidates: Vec<CandidateInfo>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Serializable part of a job, also persisted as `job.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobMeta {
    pub id: String,
    pub state: JobState,
    pub query: String,
    /// Mesh file name inside `input/`.
    pub mesh_file: String,
    pub config: PipelineConfig,
    pub views: Vec<ViewInfo>,
    pub selections: Selections,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

struct JobData {
    meta: JobMeta,
    session: Option<Arc<Session>>,
    /// Bumped on every accepted selection.
    generation: u64,
    viewer_mesh: Option<Arc<Mesh>>,
}

pub struct Job {
    dir: PathBuf,
    data: Mutex<JobData>,
}

impl Job {
    pub fn snapshot(&self) -> JobMeta {
        self.data.lock().unwrap().meta.clone()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn fail(&self, msg: String) {
        log::warn!("job {} failed: {msg}", self.dir.display());
        let meta = {
            let mut d = self.data.lock().unwrap();
            d.meta.state = JobState::Failed;
            d.meta.error = Some(msg);
            d.meta.clone()
        };
        persist_meta(&self.dir, &meta);
    }

    /// Mesh as uploaded (after cleanup), for the viewer payload.
    pub fn viewer_mesh(&self) -> Result<Arc<Mesh>> {
        let mut d = self.data.lock().unwrap();
        if let Some(m) = &d.viewer_mesh {
            return Ok(m.clone());
        }
        let path = self.dir.join("input").join(&d.meta.mesh_file);
        let mesh = Arc::new(load_mesh(&path)?.mesh);
        d.viewer_mesh = Some(mesh.clone());
        Ok(mesh)
    }
}

enum Task {
    Run(Arc<Job>),
    Refuse(Arc<Job>),
}

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("{0}")]
    NotReady(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

pub struct JobManager {
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    jobs: RwLock<BTreeMap<String, Arc<Job>>>,
    tx: Mutex<Sender<Task>>,
    backend: Option<BackendSpec>,
    base_config: PipelineConfig,
}

impl JobManager {
    /// `jobs_dir = None` keeps artifacts in a temporary directory removed on
    /// drop. With a directory, finished jobs found there are reloaded
    /// read-only.
    pub fn new(jobs_dir: Option<PathBuf>, backend: Option<BackendSpec>, base_config: PipelineConfig) -> Result<Arc<Self>> {
        let (root, tmp) = match jobs_dir {
            Some(d) => {
                std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
                (d, None)
            }
            None => {
                let t = tempfile::Builder::new().prefix("meshreason-jobs").tempdir()?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        let (tx, rx) = channel::<Task>();
        let mgr = Arc::new(JobManager {
            root,
            _tmp: tmp,
            jobs: RwLock::new(BTreeMap::new()),
            tx: Mutex::new(tx),
            backend,
            base_config,
        });
        mgr.reload();
        let weak = Arc::downgrade(&mgr);
        std::thread::Builder::new()
            .name("job-worker".into())
            .spawn(move || {
                for task in rx {
                    let Some(mgr) = weak.upgrade() else { break };
                    let (job, refuse) = match task {
                        Task::Run(j) => (j, false),
                        Task::Refuse(j) => (j, true),
                    };
                    let outcome = catch_unwind(AssertUnwindSafe(|| {
                        if refuse {
                            mgr.refuse(&job)
                        } else {
                            mgr.execute(&job)
                        }
                    }));
                    match outcome {
                        Ok(Ok(())) => {}
                        Ok(Err(e)) => job.fail(format!("{e:#}")),
                        Err(_) => job.fail("internal error (worker panicked)".into()),
                    }
                }
            })?;
        Ok(mgr)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, id: &str) -> Option<Arc<Job>> {
        self.jobs.read().unwrap().get(id).cloned()
    }

    /// Job config: the service config with `overrides` (a partial config
    /// object) merged on top.
    pub fn job_config(&self, overrides: Option<&serde_json::Value>) -> Result<PipelineConfig, SubmitError> {
        let Some(o) = overrides else {
            return Ok(self.base_config.clone());
        };
        if !o.is_object() {
            return Err(SubmitError::BadRequest("config must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(&self.base_config).map_err(anyhow::Error::from)?;
        merge(&mut base, o);
        let cfg: PipelineConfig =
            serde_json::from_value(base).map_err(|e| SubmitError::BadRequest(format!("config: {e}")))?;
        cfg.validate().map_err(|e| SubmitError::BadRequest(format!("config: {e}")))?;
        Ok(cfg)
    }

    /// Stores the upload and queues the job.
    pub fn submit(
        &self,
        file_name: &str,
        bytes: &[u8],
        query: &str,
        overrides: Option<&serde_json::Value>,
    ) -> Result<String, SubmitError> {
        if query.trim().is_empty() {
            return Err(SubmitError::BadRequest("query is empty".into()));
        }
        let mesh_file = sanitize_file_name(file_name)?;
        let config = self.job_config(overrides)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.root.join(&id);
        let input = dir.join("input");
        std::fs::create_dir_all(&input).map_err(anyhow::Error::from)?;
        std::fs::write(input.join(&mesh_file), bytes).map_err(anyhow::Error::from)?;
        let meta = JobMeta {
            id: id.clone(),
            state: JobState::Rendering,
            query: query.to_string(),
            mesh_file,
            config,
            views: Vec::new(),
            selections: Selections::new(),
            error: None,
        };
        persist_meta(&dir, &meta);
        let job = Arc::new(Job {
            dir,
            data: Mutex::new(JobData {
                meta,
                session: None,
                generation: 0,
                viewer_mesh: None,
            }),
        });
        self.jobs.write().unwrap().insert(id.clone(), job.clone());
        self.tx.lock().unwrap().send(Task::Run(job)).map_err(|_| anyhow!("job worker stopped"))?;
        Ok(id)
    }

    /// Records new selections and queues a re-fuse. Only views listed in
    /// `selections` are restricted; the others use default filtering.
    pub fn select(&self, job: &Arc<Job>, selections: Selections) -> Result<(), SelectionError> {
        {
            let mut d = job.data.lock().unwrap();
            let session = match (&d.session, d.meta.state) {
                (Some(s), JobState::Fusing | JobState::Done) => s.clone(),
                (_, JobState::Failed) => return Err(SelectionError::NotReady("job failed".into())),
                (None, JobState::Done) => {
                    return Err(SelectionError::NotReady("job was reloaded from disk and is read-only".into()))
                }
                _ => return Err(SelectionError::NotReady("job has not finished segmenting".into())),
            };
            session
                .check_selections(&selections)
                .map_err(|e| SelectionError::Invalid(e.to_string()))?;
            d.meta.selections = selections;
            d.meta.state = JobState::Fusing;
            d.generation += 1;
        }
        self.tx
            .lock()
            .unwrap()
            .send(Task::Refuse(job.clone()))
            .map_err(|_| SelectionError::NotReady("job worker stopped".into()))
    }

    fn execute(&self, job: &Arc<Job>) -> Result<()> {
        let (mesh_file, query, config) = {
            let d = job.data.lock().unwrap();
            (d.meta.mesh_file.clone(), d.meta.query.clone(), d.meta.config.clone())
        };
        let dir = job.dir.clone();
        let mesh_path = dir.join("input").join(&mesh_file);
        let loaded = load_mesh(&mesh_path)?;
        let name = Path::new(&mesh_file)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "mesh".into());
        let mesh = PreparedMesh::from_mesh(name, loaded.mesh, loaded.dropped_faces)?;
        let query = SegQuery::new(&query, config.max_candidates)?;

        let views = render_views(&mesh.normalized, &config)?;
        let vdir = dir.join("views");
        std::fs::create_dir_all(&vdir)?;
        for v in &views {
            v.save_png(vdir.join(format!("{}.png", v.view_index)))?;
        }
        {
            let mut d = job.data.lock().unwrap();
            d.meta.views = views
                .iter()
                .map(|v| ViewInfo {
                    index: v.view_index,
                    candidates: Vec::new(),
                    error: None,
                })
                .collect();
            d.meta.state = JobState::Segmenting;
        }

        let spec = self
            .backend
            .as_ref()
            .ok_or_else(|| anyhow!("no segmentation backend configured (use --backend or MESHREASON_BACKEND)"))?;
        let backend = spec.build(&mesh.name, mesh.original.face_count(), config.http.to_http_config()?)?;
        let answers = segment_views(backend.as_ref(), &views, &query);
        let cdir = dir.join("candidates");
        std::fs::create_dir_all(&cdir)?;
        let mut infos = Vec::with_capacity(views.len());
        for (v, a) in views.iter().zip(&answers) {
            let mut info = ViewInfo {
                index: v.view_index,
                candidates: Vec::new(),
                error: None,
            };
            match a {
                Ok(cands) => {
                    for (j, c) in cands.iter().enumerate() {
                        std::fs::write(cdir.join(format!("{}_{j}.png", v.view_index)), c.png_bytes())?;
                        info.candidates.push(CandidateInfo {
                            index: j,
                            confidence: c.confidence,
                            text: c.text.clone(),
                        });
                    }
                }
                Err(e) => info.error = Some(e.clone()),
            }
            infos.push(info);
        }
        {
            let mut d = job.data.lock().unwrap();
            d.meta.views = infos;
            d.meta.state = JobState::Fusing;
        }

        let session = Session::from_parts(mesh, query, config, backend.describe(), views, answers)?;
        job.data.lock().unwrap().session = Some(Arc::new(session));
        self.refuse(job)
    }

    /// Fuses with the job's current selections. If newer selections arrived
    /// meanwhile the job stays in `fusing`; their queued task finishes it.
    fn refuse(&self, job: &Arc<Job>) -> Result<()> {
        let (session, selections, generation) = {
            let d = job.data.lock().unwrap();
            let Some(s) = d.session.clone() else {
                bail!("job has no segmentation session")
            };
            (s, d.meta.selections.clone(), d.generation)
        };
        let result = session.fuse(&selections)?;
        write_result(&job.dir, &session, &result, &selections)?;
        let meta = {
            let mut d = job.data.lock().unwrap();
            if d.generation != generation {
                return Ok(());
            }
            d.meta.state = JobState::Done;
            d.meta.clone()
        };
        persist_meta(&job.dir, &meta);
        Ok(())
    }

    fn reload(&self) {
        let Ok(entries) = std::fs::read_dir(&self.root) else { return };
        let mut jobs = self.jobs.write().unwrap();
        for e in entries.flatten() {
            let dir = e.path();
            let Ok(text) = std::fs::read_to_string(dir.join("job.json")) else { continue };
            let Ok(mut meta) = serde_json::from_str::<JobMeta>(&text) else {
                log::warn!("ignoring unreadable {}", dir.join("job.json").display());
                continue;
            };
            if meta.state != JobState::Done || !dir.join("result.json").is_file() {
                meta.state = JobState::Failed;
                meta.error.get_or_insert_with(|| "interrupted by a service restart".into());
            }
            jobs.insert(
                meta.id.clone(),
                Arc::new(Job {
                    dir,
                    data: Mutex::new(JobData {
                        meta,
                        session: None,
                        generation: 0,
                        viewer_mesh: None,
                    }),
                }),
            );
        }
        if !jobs.is_empty() {
            log::info!("reloaded {} job(s) from {}", jobs.len(), self.root.display());
        }
    }
}

fn write_result(dir: &Path, session: &Session, result: &SegmentationResult, selections: &Selections) -> Result<()> {
    let json = serde_json::to_string_pretty(&session.result_json(result, selections, unix_now()))?;
    let ply = dir.join("segmented.ply");
    result.write_colored_ply(&session.mesh.original, &ply)?;
    // readers never see a half-written result
    let tmp = dir.join("result.json.tmp");
    std::fs::write(&tmp, json)?;
    std::fs::rename(&tmp, dir.join("result.json"))?;
    Ok(())
}

fn persist_meta(dir: &Path, meta: &JobMeta) {
    let res = serde_json::to_string_pretty(meta)
        .map_err(anyhow::Error::from)
        .and_then(|s| std::fs::write(dir.join("job.json"), s).map_err(Into::into));
    if let Err(e) = res {
        log::warn!("could not persist {}: {e}", dir.display());
    }
}

fn merge(dst: &mut serde_json::Value, src: &serde_json::Value) {
    match (dst, src) {
        (serde_json::Value::Object(d), serde_json::Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

/// Keeps the extension and a filesystem-safe stem.
fn sanitize_file_name(name: &str) -> Result<String, SubmitError> {
    let base = Path::new(name).file_name().and_then(|s| s.to_str()).unwrap_or("");
    let path = Path::new(base);
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .filter(|e| e == "obj" || e == "ply")
        .ok_or_else(|| SubmitError::BadRequest(format!("mesh file {name:?} must be .obj or .ply")))?;
    let stem: String = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let stem = if stem.is_empty() { "mesh".to_string() } else { stem };
    Ok(format!("{stem}.{ext}"))
}
