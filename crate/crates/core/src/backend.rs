//! Segmentation backends: turn one rendered view plus a text query into
//! candidate masks.
//!
//! Three implementations share the [`SegBackend`] trait: an HTTP client for
//! the `v1` wire protocol, a fixture reader for recorded answers, and an
//! oracle that paints ground-truth faces straight from the face-ID buffer.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::eval::GroundTruth;
use crate::render::{ViewRender, BACKGROUND};
use crate::{Error, Result};

/// Environment variable consulted when no `--backend` is given.
pub const BACKEND_ENV: &str = "MESHREASON_BACKEND";

/// 8-bit mask values at or above this are foreground.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegQuery {
    pub text: String,
    pub max_candidates: usize,
}

impl SegQuery {
    pub fn new(text: impl Into<String>, max_candidates: usize) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("query text is empty".into()));
        }
        if max_candidates == 0 {
            return Err(Error::InvalidArgument("max_candidates must be at least 1".into()));
        }
        Ok(SegQuery {
            text,
            max_candidates,
        })
    }
}

/// One binary mask proposed for a view.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMask {
    pub width: u32,
    pub height: u32,
    /// Row-major, `true` = foreground.
    pub mask: Vec<bool>,
    pub confidence: f64,
    pub text: String,
    /// `[x0, y0, x1, y1)`; all zeros for an empty mask.
    pub bbox: [u32; 4],
}

impl CandidateMask {
    /// Builds a candidate with the tight bounding box of `mask`.
    pub fn new(
        width: u32,
        height: u32,
        mask: Vec<bool>,
        confidence: f64,
        text: impl Into<String>,
    ) -> Result<Self> {
        if mask.len() != width as usize * height as usize {
            return Err(Error::InvalidArgument(format!(
                "mask has {} pixels, expected {}x{}",
                mask.len(),
                width,
                height
            )));
        }
        let bbox = tight_bbox(width, height, &mask);
        Ok(CandidateMask {
            width,
            height,
            mask,
            confidence,
            text: text.into(),
            bbox,
        })
    }

    pub fn is_foreground(&self, x: u32, y: u32) -> bool {
        self.mask[y as usize * self.width as usize + x as usize]
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Foreground pixels as a fraction of the image area.
    pub fn area_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.foreground_count() as f64 / self.mask.len() as f64
    }

    /// 8-bit grayscale PNG, foreground 255.
    pub fn png_bytes(&self) -> Vec<u8> {
        let pixels = self.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width, self.height, pixels)
            .expect("mask matches dimensions");
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .expect("in-memory PNG encoding");
        buf.into_inner()
    }
}

/// Tight `[x0, y0, x1, y1)` box around the foreground, or all zeros.
pub fn tight_bbox(width: u32, height: u32, mask: &[bool]) -> [u32; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..height {
        let row = &mask[y as usize * width as usize..(y as usize + 1) * width as usize];
        for (x, &m) in row.iter().enumerate() {
            if m {
                let x = x as u32;
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == u32::MAX {
        [0; 4]
    } else {
        [x0, y0, x1, y1]
    }
}

/// Decodes a PNG mask, thresholding at [`MASK_THRESHOLD`].
pub fn decode_mask_png(bytes: &[u8]) -> Result<(u32, u32, Vec<bool>)> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    let mask = img.into_raw().into_iter().map(|v| v >= MASK_THRESHOLD).collect();
    Ok((w, h, mask))
}

/// A candidate as reported by a backend, before boundary checks.
#[derive(Debug, Clone)]
pub struct RawCandidate {
    pub width: u32,
    pub height: u32,
    pub mask: Vec<bool>,
    pub confidence: f64,
    pub text: String,
    pub bbox: Option<[u32; 4]>,
}

/// Boundary checks shared by every backend: dimensions must match the view,
/// confidence must lie in [0, 1], a supplied bbox must contain the foreground
/// (it is then tightened). Zero-confidence candidates are dropped, the rest
/// sorted by confidence descending and truncated to `max_candidates`.
pub fn finalize_candidates(
    view: &ViewRender,
    query: &SegQuery,
    raw: Vec<RawCandidate>,
) -> Result<Vec<CandidateMask>> {
    let vi = view.view_index;
    let mut out = Vec::with_capacity(raw.len());
    for (j, c) in raw.into_iter().enumerate() {
        if c.width != view.width || c.height != view.height {
            return Err(Error::Protocol {
                view: vi,
                field: format!("candidates[{j}].mask"),
                message: format!(
                    "mask is {}x{} but view is {}x{}",
                    c.width, c.height, view.width, view.height
                ),
            });
        }
        if !(0.0..=1.0).contains(&c.confidence) {
            return Err(Error::Protocol {
                view: vi,
                field: format!("candidates[{j}].confidence"),
                message: format!("{} is outside [0, 1]", c.confidence),
            });
        }
        if c.confidence == 0.0 {
            continue;
        }
        let cand = CandidateMask::new(c.width, c.height, c.mask, c.confidence, c.text)?;
        if let Some(b) = c.bbox {
            if !bbox_contains(b, cand.bbox, cand.foreground_count() == 0) {
                return Err(Error::Protocol {
                    view: vi,
                    field: format!("candidates[{j}].bbox"),
                    message: format!("{b:?} does not contain the mask foreground {:?}", cand.bbox),
                });
            }
        }
        out.push(cand);
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out.truncate(query.max_candidates);
    Ok(out)
}

fn bbox_contains(outer: [u32; 4], tight: [u32; 4], empty: bool) -> bool {
    if outer[0] > outer[2] || outer[1] > outer[3] {
        return false;
    }
    empty || (outer[0] <= tight[0] && outer[1] <= tight[1] && outer[2] >= tight[2] && outer[3] >= tight[3])
}

/// Anything that can propose masks for a view. Implementations must be safe
/// to call from several threads at once.
pub trait SegBackend: Send + Sync {
    fn segment(&self, view: &ViewRender, query: &SegQuery) -> Result<Vec<CandidateMask>>;

    /// Short description for logs and result metadata.
    fn describe(&self) -> String;
}

// ---------------------------------------------------------------------------
// Oracle

/// Paints the faces of one ground-truth label from the face-ID buffer.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    target: Vec<bool>,
    label: String,
}

impl OracleBackend {
    /// `labels[f]` is the label name of face `f`. A target that never occurs
    /// yields a backend that always answers with no candidates.
    pub fn new<S: AsRef<str>>(labels: &[S], target: &str) -> Self {
        OracleBackend {
            target: labels.iter().map(|l| l.as_ref() == target).collect(),
            label: target.to_string(),
        }
    }

    /// Oracle for `label` on shape `shape` of a ground-truth file.
    pub fn from_ground_truth(gt: &GroundTruth, shape: &str, label: &str) -> Result<Self> {
        let ids = gt
            .shapes
            .get(shape)
            .ok_or_else(|| Error::InvalidArgument(format!("ground truth has no shape {shape:?}")))?;
        let names: Vec<&str> = ids.iter().map(|&i| gt.categories[i as usize].as_str()).collect();
        Ok(OracleBackend::new(&names, label))
    }

    pub fn face_count(&self) -> usize {
        self.target.len()
    }

    /// Whether `face` carries the target label.
    pub fn is_target(&self, face: u32) -> bool {
        self.target.get(face as usize).copied().unwrap_or(false)
    }
}

impl SegBackend for OracleBackend {
    fn segment(&self, view: &ViewRender, query: &SegQuery) -> Result<Vec<CandidateMask>> {
        if let Some(&bad) = view
            .face_id
            .iter()
            .find(|&&f| f != BACKGROUND && f as usize >= self.target.len())
        {
            return Err(Error::Backend {
                view: view.view_index,
                message: format!(
                    "face {bad} is not covered by the oracle labels ({} faces)",
                    self.target.len()
                ),
            });
        }
        let mask: Vec<bool> = view
            .face_id
            .iter()
            .map(|&f| f != BACKGROUND && self.target[f as usize])
            .collect();
        if !mask.iter().any(|&m| m) {
            return Ok(Vec::new());
        }
        let raw = RawCandidate {
            width: view.width,
            height: view.height,
            mask,
            confidence: 1.0,
            text: self.label.clone(),
            bbox: None,
        };
        finalize_candidates(view, query, vec![raw])
    }

    fn describe(&self) -> String {
        format!("oracle:{}", self.label)
    }
}

// ---------------------------------------------------------------------------
// Fixture

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureCandidate {
    pub mask_png: String,
    pub confidence: f64,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureView {
    pub view: usize,
    pub candidates: Vec<FixtureCandidate>,
}

/// Replays recorded candidates from `manifest.json` in a directory.
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    dir: PathBuf,
    views: HashMap<usize, Vec<FixtureCandidate>>,
}

impl FixtureBackend {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries: Vec<FixtureView> =
            serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
        let mut views = HashMap::new();
        for entry in entries {
            if views.insert(entry.view, entry.candidates).is_some() {
                return Err(Error::parse(&path, format!("view {} listed twice", entry.view)));
            }
        }
        Ok(FixtureBackend { dir, views })
    }

    /// Writes a fixture directory (masks plus manifest) from in-memory
    /// candidates, keyed by view index.
    pub fn write(dir: impl AsRef<Path>, views: &BTreeMap<usize, Vec<CandidateMask>>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Vec::new();
        for (&view, cands) in views {
            let mut entries = Vec::new();
            for (j, c) in cands.iter().enumerate() {
                let name = format!("view{view}_mask{j}.png");
                let path = dir.join(&name);
                std::fs::write(&path, c.png_bytes()).map_err(|e| Error::io(&path, e))?;
                entries.push(FixtureCandidate {
                    mask_png: name,
                    confidence: c.confidence,
                    text: c.text.clone(),
                });
            }
            manifest.push(FixtureView {
                view,
                candidates: entries,
            });
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

impl SegBackend for FixtureBackend {
    fn segment(&self, view: &ViewRender, query: &SegQuery) -> Result<Vec<CandidateMask>> {
        let vi = view.view_index;
        let Some(entries) = self.views.get(&vi) else {
            return Ok(Vec::new());
        };
        let mut raw = Vec::with_capacity(entries.len());
        for c in entries {
            let path = self.dir.join(&c.mask_png);
            let bytes = std::fs::read(&path).map_err(|e| Error::Backend {
                view: vi,
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            let (width, height, mask) = decode_mask_png(&bytes).map_err(|e| Error::Backend {
                view: vi,
                message: format!("cannot decode {}: {e}", path.display()),
            })?;
            raw.push(RawCandidate {
                width,
                height,
                mask,
                confidence: c.confidence,
                text: c.text.clone(),
                bbox: None,
            });
        }
        finalize_candidates(view, query, raw)
    }

    fn describe(&self) -> String {
        format!("fixture:{}", self.dir.display())
    }
}

// ---------------------------------------------------------------------------
// HTTP

#[derive(Debug, Serialize)]
struct WireRequest<'a> {
    image_png_base64: String,
    query: &'a str,
    max_candidates: usize,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    candidates: Vec<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub timeout: Duration,
    pub retries: u32,
    pub max_concurrent: usize,
    /// Initial pause between retries; doubles each attempt.
    pub backoff: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            timeout: Duration::from_secs(120),
            retries: 2,
            max_concurrent: 4,
            backoff: Duration::from_millis(200),
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Client for a remote reasoning-segmentation service speaking `v1`.
pub struct HttpBackend {
    endpoint: String,
    agent: ureq::Agent,
    config: HttpConfig,
    slots: Slots,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.endpoint)
            .field("config", &self.config)
            .finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl HttpBackend {
    pub fn new(base_url: &str, config: HttpConfig) -> Result<Self> {
        let base = base_url.trim_end_matches('/');
        let rest = base
            .strip_prefix("http://")
            .or_else(|| base.strip_prefix("https://"))
            .ok_or_else(|| Error::InvalidArgument(format!("backend URL {base_url:?} must start with http:// or https://")))?;
        if rest.is_empty() || rest.starts_with('/') {
            return Err(Error::InvalidArgument(format!("backend URL {base_url:?} has no host")));
        }
        if config.max_concurrent == 0 {
            return Err(Error::InvalidArgument("max_concurrent must be at least 1".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            endpoint: format!("{base}/v1/segment"),
            agent,
            slots: Slots {
                free: Mutex::new(config.max_concurrent),
                cv: Condvar::new(),
            },
            config,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, view: &ViewRender, body: &WireRequest<'_>) -> std::result::Result<WireResponse, Attempt> {
        let vi = view.view_index;
        let mut resp = match self.agent.post(&self.endpoint).send_json(body) {
            Ok(r) => r,
            Err(e) => return Err(Attempt::Retry(e.to_string())),
        };
        let status = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(512 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| Attempt::Retry(format!("reading response: {e}")))?;
        if status != 200 {
            let snippet = String::from_utf8_lossy(&bytes[..bytes.len().min(200)]).into_owned();
            let msg = format!("HTTP {status}: {snippet}");
            return Err(if status >= 500 || status == 429 || status == 408 {
                Attempt::Retry(msg)
            } else {
                Attempt::Fatal(Error::Backend { view: vi, message: msg })
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| {
            Attempt::Fatal(Error::Protocol {
                view: vi,
                field: "body".into(),
                message: e.to_string(),
            })
        })
    }
}

fn decode_wire_candidate(view: usize, j: usize, v: &serde_json::Value) -> Result<RawCandidate> {
    let field = |name: &str| format!("candidates[{j}].{name}");
    let violation = |name: &str, message: String| Error::Protocol {
        view,
        field: field(name),
        message,
    };
    let obj = v
        .as_object()
        .ok_or_else(|| violation("", "candidate is not an object".into()))?;
    let b64 = obj
        .get("mask_png_base64")
        .and_then(|m| m.as_str())
        .ok_or_else(|| violation("mask_png_base64", "missing or not a string".into()))?;
    let confidence = obj
        .get("confidence")
        .and_then(|c| c.as_f64())
        .ok_or_else(|| violation("confidence", "missing or not a number".into()))?;
    let text = match obj.get("text") {
        Some(serde_json::Value::String(s)) => s.clone(),
        _ => return Err(violation("text", "missing or not a string".into())),
    };
    let bbox = match obj.get("bbox") {
        None | Some(serde_json::Value::Null) => None,
        Some(b) => {
            let arr: Vec<u32> = serde_json::from_value(b.clone())
                .map_err(|e| violation("bbox", e.to_string()))?;
            let arr: [u32; 4] = arr
                .try_into()
                .map_err(|a: Vec<u32>| violation("bbox", format!("expected 4 integers, got {}", a.len())))?;
            Some(arr)
        }
    };
    let png = BASE64
        .decode(b64)
        .map_err(|e| violation("mask_png_base64", e.to_string()))?;
    let (width, height, mask) =
        decode_mask_png(&png).map_err(|e| violation("mask_png_base64", e.to_string()))?;
    Ok(RawCandidate {
        width,
        height,
        mask,
        confidence,
        text,
        bbox,
    })
}

impl SegBackend for HttpBackend {
    fn segment(&self, view: &ViewRender, query: &SegQuery) -> Result<Vec<CandidateMask>> {
        let vi = view.view_index;
        let body = WireRequest {
            image_png_base64: BASE64.encode(view.png_bytes()),
            query: &query.text,
            max_candidates: query.max_candidates,
        };
        let _slot = self.slots.acquire();
        let mut delay = self.config.backoff;
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                log::warn!("view {vi}: retrying after {last}");
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(view, &body) {
                Ok(resp) => {
                    let raw = resp
                        .candidates
                        .iter()
                        .enumerate()
                        .map(|(j, v)| decode_wire_candidate(vi, j, v))
                        .collect::<Result<Vec<_>>>()?;
                    return finalize_candidates(view, query, raw);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(Error::Backend {
            view: vi,
            message: format!(
                "{} unreachable after {} attempts: {last}",
                self.endpoint,
                self.config.retries + 1
            ),
        })
    }

    fn describe(&self) -> String {
        format!("http:{}", self.endpoint)
    }
}

// ---------------------------------------------------------------------------
// Selection by string

/// Parsed `--backend` value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendSpec {
    Http(String),
    Fixture(PathBuf),
    Oracle { ground_truth: PathBuf, label: String },
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidArgument(format!(
                "backend {s:?}: expected http:<url>, fixture:<dir> or oracle:<gt.json>:<label>"
            ))
        };
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(BackendSpec::Http(s.to_string()));
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "http" if !rest.is_empty() => Ok(BackendSpec::Http(rest.to_string())),
            "fixture" if !rest.is_empty() => Ok(BackendSpec::Fixture(PathBuf::from(rest))),
            "oracle" => {
                let (gt, label) = rest.rsplit_once(':').ok_or_else(bad)?;
                if gt.is_empty() || label.is_empty() {
                    return Err(bad());
                }
                Ok(BackendSpec::Oracle {
                    ground_truth: PathBuf::from(gt),
                    label: label.to_string(),
                })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Http(url) => write!(f, "http:{url}"),
            BackendSpec::Fixture(dir) => write!(f, "fixture:{}", dir.display()),
            BackendSpec::Oracle {
                ground_truth,
                label,
            } => write!(f, "oracle:{}:{label}", ground_truth.display()),
        }
    }
}

impl BackendSpec {
    /// Reads [`BACKEND_ENV`], if set and non-empty.
    pub fn from_env() -> Option<Result<Self>> {
        std::env::var(BACKEND_ENV)
            .ok()
            .filter(|v| !v.trim().is_empty())
            .map(|v| v.trim().parse())
    }

    /// Instantiates the backend. `shape` names the mesh for oracle lookups;
    /// a ground-truth file with a single shape is used regardless of name.
    pub fn build(&self, shape: &str, face_count: usize, http: HttpConfig) -> Result<Box<dyn SegBackend>> {
        Ok(match self {
            BackendSpec::Http(url) => Box::new(HttpBackend::new(url, http)?),
            BackendSpec::Fixture(dir) => Box::new(FixtureBackend::open(dir)?),
            BackendSpec::Oracle {
                ground_truth,
                label,
            } => {
                let gt = GroundTruth::load(ground_truth)?;
                let name = if gt.shapes.len() == 1 {
                    gt.shapes.keys().next().cloned().unwrap_or_default()
                } else {
                    shape.to_string()
                };
                let oracle = OracleBackend::from_ground_truth(&gt, &name, label)?;
                if oracle.face_count() != face_count {
                    return Err(Error::EvalMismatch(format!(
                        "ground truth shape {name:?} has {} faces, mesh has {face_count}",
                        oracle.face_count()
                    )));
                }
                Box::new(oracle)
            }
        })
    }
}
