use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use meshreason::backend::BackendSpec;
use meshreason::eval::{find_results, load_predictions, miou_report, GroundTruth};
use meshreason::fusion::ThresholdScope;
use meshreason::mesh::load_mesh;
use meshreason::pipeline::{render_to_dir, run_segment, ConfigOverrides, PipelineConfig, PreparedMesh};

use crate::jobs::JobManager;

/// Exit code 2: bad input (missing files, invalid flags or config).
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_FAILURE: u8 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl CliError {
    fn input(e: impl Into<anyhow::Error>) -> Self {
        CliError {
            code: EXIT_INPUT,
            source: e.into(),
        }
    }
}

/// Library errors about user input map to exit code 2, the rest to 1.
impl From<meshreason::Error> for CliError {
    fn from(e: meshreason::Error) -> Self {
        use meshreason::Error as E;
        let code = match e {
            E::Io { .. }
            | E::Parse { .. }
            | E::UnsupportedFormat { .. }
            | E::EmptyMesh
            | E::InvalidMesh(_)
            | E::ZeroExtent
            | E::InvalidArgument(_)
            | E::InvalidCamera(_) => EXIT_INPUT,
            _ => EXIT_FAILURE,
        };
        CliError {
            code,
            source: e.into(),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError {
            code: EXIT_FAILURE,
            source: e,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "meshreason", version, about = "Zero-shot 3D part segmentation from multi-view 2D reasoning masks")]
pub struct Cli {
    /// Debug logging.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the view ring of a mesh (images, face-ID buffers, cameras).
    Render(RenderArgs),
    /// Segment the part of a mesh described by a text query.
    Segment(SegmentArgs),
    /// Score result.json predictions against ground truth.
    Eval(EvalArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
}

/// Pipeline knobs shared by every subcommand that runs the pipeline.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of views around the mesh [default: 8].
    #[arg(long)]
    pub views: Option<usize>,
    /// Square render resolution in pixels [default: 1024].
    #[arg(long = "res")]
    pub resolution: Option<u32>,
    /// Vertical field of view in degrees [default: 50].
    #[arg(long)]
    pub fov: Option<f64>,
    /// Camera distance from the center of the unit-sphere normalized mesh [default: 2.5].
    #[arg(long)]
    pub distance: Option<f64>,
    /// Camera elevation in degrees [default: 0].
    #[arg(long, allow_hyphen_values = true)]
    pub elevation: Option<f64>,
    /// Candidates requested per view [default: 5].
    #[arg(long)]
    pub max_candidates: Option<usize>,
    /// Area-difference threshold T as a fraction of the image [default: 0.25].
    #[arg(long = "area-threshold")]
    pub area_diff_threshold: Option<f64>,
    /// Maximum masks kept per view [default: 3].
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Ring size for neighbourhood averaging [default: 5].
    #[arg(long)]
    pub q: Option<usize>,
    /// Visibility smoothing iterations [default: 3].
    #[arg(long)]
    pub smoothing: Option<usize>,
    /// Pixels a face needs inside a mask to count [default: 1].
    #[arg(long)]
    pub min_pixels: Option<usize>,
    /// Faces the global threshold averages over: all-faces or covered [default: all-faces].
    #[arg(long, value_parser = parse_scope)]
    pub threshold_scope: Option<ThresholdScope>,
    /// Backend request timeout in seconds [default: 120].
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Backend retries on transient errors [default: 2].
    #[arg(long)]
    pub retries: Option<u32>,
}

fn parse_scope(s: &str) -> Result<ThresholdScope, String> {
    match s.replace('-', "_").as_str() {
        "all_faces" => Ok(ThresholdScope::AllFaces),
        "covered" => Ok(ThresholdScope::Covered),
        _ => Err(format!("{s:?}: expected all-faces or covered")),
    }
}

impl ConfigArgs {
    pub fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            views: self.views,
            resolution: self.resolution,
            fov_degrees: self.fov,
            distance: self.distance,
            elevation_degrees: self.elevation,
            max_candidates: self.max_candidates,
            area_diff_threshold: self.area_diff_threshold,
            k_max: self.k_max,
            q: self.q,
            smoothing_iterations: self.smoothing,
            min_pixels_per_face: self.min_pixels,
            threshold_scope: self.threshold_scope,
            timeout_secs: self.timeout,
            retries: self.retries,
        }
    }

    pub fn resolve(&self) -> Result<PipelineConfig, CliError> {
        Ok(PipelineConfig::resolve(self.config.as_deref(), &self.overrides())?)
    }
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long, default_value = "render")]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    /// Text prompt describing the part.
    #[arg(long)]
    pub query: String,
    /// http:<url>, fixture:<dir> or oracle:<gt.json>:<label>.
    #[arg(long, env = "MESHREASON_BACKEND", value_parser = parse_backend)]
    pub backend: BackendSpec,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

fn parse_backend(s: &str) -> Result<BackendSpec, String> {
    s.parse().map_err(|e: meshreason::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory searched recursively for result.json files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth JSON.
    #[arg(long)]
    pub gt: PathBuf,
    /// Row label in the table.
    #[arg(long, default_value = "Ours")]
    pub model: String,
    /// Where eval_report.json and eval_table.txt go [default: the prediction directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Weight faces by area; needs --meshes.
    #[arg(long, requires = "meshes")]
    pub area_weighted: bool,
    /// Directory holding <shape>.obj or <shape>.ply for every evaluated shape.
    #[arg(long)]
    pub meshes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "MESHREASON_BACKEND", value_parser = parse_backend)]
    pub backend: Option<BackendSpec>,
    /// Keep job artifacts here and reload finished jobs on start.
    #[arg(long)]
    pub jobs_dir: Option<PathBuf>,
    /// Upload size limit in MiB.
    #[arg(long, default_value_t = 64)]
    pub max_upload_mb: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Render(a) => render(a),
        Command::Segment(a) => segment(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::input(anyhow!("{what} not found: {}", path.display())))
    }
}

fn render(a: RenderArgs) -> Result<(), CliError> {
    require_file(&a.mesh, "mesh file")?;
    let config = a.config.resolve()?;
    let mesh = PreparedMesh::load(&a.mesh)?;
    let views = render_to_dir(&mesh.normalized, &config, &a.out)?;
    println!("rendered {} views of {} to {}", views.len(), a.mesh.display(), a.out.display());
    Ok(())
}

fn segment(a: SegmentArgs) -> Result<(), CliError> {
    require_file(&a.mesh, "mesh file")?;
    let config = a.config.resolve()?;
    let mesh = PreparedMesh::load(&a.mesh)?;
    let backend = a
        .backend
        .build(&mesh.name, mesh.original.face_count(), config.http.to_http_config()?)?;
    log::info!("backend {}", backend.describe());
    let (_, result, files) = run_segment(&a.mesh, &a.query, config, backend.as_ref(), &a.out)?;
    for s in &result.skipped_views {
        eprintln!("warning: view {} skipped: {}", s.view, s.reason);
    }
    println!(
        "{} of {} faces selected; wrote {}",
        result.selected_faces().len(),
        result.labels.len(),
        files.result.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    if !a.pred.is_dir() {
        return Err(CliError::input(anyhow!("prediction directory not found: {}", a.pred.display())));
    }
    require_file(&a.gt, "ground truth")?;
    let gt = GroundTruth::load(&a.gt)?;
    let files = find_results(&a.pred)?;
    if files.is_empty() {
        return Err(CliError::input(anyhow!("no result.json files under {}", a.pred.display())));
    }
    let preds = load_predictions(&files, &gt)?;
    let areas = match (&a.area_weighted, &a.meshes) {
        (true, Some(dir)) => Some(face_areas(dir, preds.keys())?),
        _ => None,
    };
    let report = miou_report(&preds, &gt, areas.as_ref())?;
    let table = report.table(&a.model);
    print!("{table}");
    let out = a.out.unwrap_or_else(|| a.pred.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let json = serde_json::to_string_pretty(&report.to_json()).map_err(anyhow::Error::from)?;
    std::fs::write(out.join("eval_report.json"), json).context("writing eval_report.json")?;
    std::fs::write(out.join("eval_table.txt"), &table).context("writing eval_table.txt")?;
    Ok(())
}

fn face_areas<'a>(dir: &Path, shapes: impl Iterator<Item = &'a String>) -> Result<BTreeMap<String, Vec<f64>>, CliError> {
    let mut out = BTreeMap::new();
    for s in shapes {
        let path = ["obj", "ply"]
            .iter()
            .map(|e| dir.join(format!("{s}.{e}")))
            .find(|p| p.is_file())
            .ok_or_else(|| CliError::input(anyhow!("no mesh for shape {s} in {}", dir.display())))?;
        let mesh = load_mesh(&path)?.mesh;
        out.insert(s.clone(), (0..mesh.face_count()).map(|f| mesh.face_area(f)).collect());
    }
    Ok(out)
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let config = a.config.resolve()?;
    if a.backend.is_none() {
        log::warn!("no backend configured; jobs will fail until --backend or MESHREASON_BACKEND is set");
    }
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::input(anyhow!("bad address {}:{}: {e}", a.host, a.port)))?;
    let jobs = JobManager::new(a.jobs_dir, a.backend, config)?;
    let app = crate::server::router(jobs.clone(), a.max_upload_mb * 1024 * 1024);
    let rt = tokio::runtime::Runtime::new().map_err(anyhow::Error::from)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("cannot listen on {addr}"))?;
        log::info!("serving on http://{addr} (jobs in {})", jobs.root().display());
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("server error")
    })?;
    Ok(())
}
