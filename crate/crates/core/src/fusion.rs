//! Lifting per-view masks onto the mesh: top-k filtering, mask-to-face
//! mapping, Gaussian geodesic reweighting, voting, smoothing and the global
//! threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::CandidateMask;
use crate::geodesic::{fit_gaussian, gaussian_density, HeatGeodesics};
use crate::mesh::{FaceGraph, Mesh, RingWalker, Vec3};
use crate::render::{ViewRender, BACKGROUND};
use crate::{Error, Result};

/// Which faces the global threshold averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    /// Mean over every face of the mesh.
    #[default]
    AllFaces,
    /// Mean over faces covered by at least one kept mask (`n > 0`).
    Covered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Area-difference threshold T, as a fraction of the image area.
    pub area_diff_threshold: f64,
    pub k_max: usize,
    /// Ring radius used to average distances around each face.
    pub q: usize,
    pub smoothing_iterations: usize,
    pub min_pixels_per_face: usize,
    /// Gaussian sigma floor as a fraction of the mesh bounding diagonal.
    pub sigma_floor_ratio: f64,
    /// Heat time is this multiple of the squared mean edge length.
    pub heat_time_multiplier: f64,
    pub threshold_scope: ThresholdScope,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            area_diff_threshold: 0.25,
            k_max: 3,
            q: 5,
            smoothing_iterations: 3,
            min_pixels_per_face: 1,
            sigma_floor_ratio: 1e-3,
            heat_time_multiplier: 1.0,
            threshold_scope: ThresholdScope::AllFaces,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.area_diff_threshold) {
            return bad(format!("area_diff_threshold {} not in [0, 1]", self.area_diff_threshold));
        }
        if self.k_max == 0 {
            return bad("k_max must be at least 1".into());
        }
        if self.min_pixels_per_face == 0 {
            return bad("min_pixels_per_face must be at least 1".into());
        }
        if !(self.sigma_floor_ratio > 0.0) || !self.sigma_floor_ratio.is_finite() {
            return bad(format!("sigma_floor_ratio {} must be positive", self.sigma_floor_ratio));
        }
        if !(self.heat_time_multiplier > 0.0) || !self.heat_time_multiplier.is_finite() {
            return bad(format!("heat_time_multiplier {} must be positive", self.heat_time_multiplier));
        }
        Ok(())
    }
}

/// Faces covered by one kept mask in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFaceSet {
    pub view: usize,
    pub mask: usize,
    /// Face to covered pixel count.
    pub faces: BTreeMap<u32, usize>,
    pub central_face: Option<u32>,
    pub confidence: f64,
}

/// Per-face score and visibility count `n` (number of kept masks covering
/// the face). Before smoothing, `score > 0` implies `n > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceScores {
    pub score: Vec<f64>,
    pub visibility: Vec<u32>,
}

impl FaceScores {
    pub fn zeros(face_count: usize) -> Self {
        FaceScores {
            score: vec![0.0; face_count],
            visibility: vec![0; face_count],
        }
    }

    pub fn face_count(&self) -> usize {
        self.score.len()
    }
}

/// Running sums `raw(f) = Σ r(f)·S` and `n(f)` over masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    pub raw: Vec<f64>,
    pub visibility: Vec<u32>,
}

impl Accumulator {
    pub fn new(face_count: usize) -> Self {
        Accumulator {
            raw: vec![0.0; face_count],
            visibility: vec![0; face_count],
        }
    }

    /// Adds one mask: `raw(f) += r(f)·S`, `n(f) += 1` for every covered face.
    pub fn add(&mut self, set: &MaskFaceSet, weights: &BTreeMap<u32, f64>) {
        for &f in set.faces.keys() {
            let r = weights.get(&f).copied().unwrap_or(0.0);
            self.raw[f as usize] += r * set.confidence;
            self.visibility[f as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &Accumulator) {
        for (a, b) in self.raw.iter_mut().zip(&other.raw) {
            *a += b;
        }
        for (a, b) in self.visibility.iter_mut().zip(&other.visibility) {
            *a += b;
        }
    }

    /// `score(f) = n(f)·raw(f)`.
    pub fn finish(self) -> FaceScores {
        let score = self
            .raw
            .iter()
            .zip(&self.visibility)
            .map(|(r, &n)| n as f64 * r)
            .collect();
        FaceScores {
            score,
            visibility: self.visibility,
        }
    }
}

/// Same as [`Accumulator::add`], in functional form.
pub fn accumulate(mut acc: Accumulator, set: &MaskFaceSet, weights: &BTreeMap<u32, f64>) -> Accumulator {
    acc.add(set, weights);
    acc
}

/// Indices of the candidates to keep. Input must be sorted by confidence
/// descending. If the top two differ in area fraction by more than T only
/// the first survives, otherwise the first `k_max`.
pub fn filter_topk_indices(candidates: &[CandidateMask], config: &FusionConfig) -> Vec<usize> {
    if candidates.len() < 2 {
        return (0..candidates.len()).collect();
    }
    let a1 = candidates[0].area_fraction();
    let a2 = candidates[1].area_fraction();
    let k = if (a1 - a2).abs() > config.area_diff_threshold {
        1
    } else {
        config.k_max.min(candidates.len())
    };
    (0..k).collect()
}

pub fn filter_topk(candidates: &[CandidateMask], config: &FusionConfig) -> Vec<CandidateMask> {
    filter_topk_indices(candidates, config)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect()
}

/// Faces under the mask's foreground pixels inside its bbox, with pixel
/// counts, dropping faces seen by fewer than `min_pixels_per_face` pixels.
pub fn mask_faces(
    view: &ViewRender,
    candidate: &CandidateMask,
    mask_index: usize,
    config: &FusionConfig,
) -> Result<MaskFaceSet> {
    if candidate.width != view.width || candidate.height != view.height {
        return Err(Error::DimensionMismatch {
            got_w: candidate.width,
            got_h: candidate.height,
            want_w: view.width,
            want_h: view.height,
        });
    }
    let [x0, y0, x1, y1] = candidate.bbox;
    let mut faces = BTreeMap::new();
    for y in y0..y1.min(view.height) {
        for x in x0..x1.min(view.width) {
            if !candidate.is_foreground(x, y) {
                continue;
            }
            let f = view.face_at(x, y);
            if f != BACKGROUND {
                *faces.entry(f).or_insert(0usize) += 1;
            }
        }
    }
    faces.retain(|_, &mut c| c >= config.min_pixels_per_face);
    Ok(MaskFaceSet {
        view: view.view_index,
        mask: mask_index,
        faces,
        central_face: None,
        confidence: candidate.confidence,
    })
}

/// Area-weighted mean of the covered face centroids, projected back into the
/// view; the face under that pixel if it is covered, else the covered face
/// whose centroid is nearest the mean point (lowest index on ties).
pub fn central_face(mesh: &Mesh, view: &ViewRender, set: &MaskFaceSet) -> Result<u32> {
    if set.faces.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "view {} mask {} covers no faces",
            set.view, set.mask
        )));
    }
    let mut sum = Vec3::zeros();
    let mut total = 0.0;
    for &f in set.faces.keys() {
        mesh.check_face(f as usize)?;
        let a = mesh.face_area(f as usize);
        sum += mesh.face_centroid(f as usize) * a;
        total += a;
    }
    let center = if total > 0.0 {
        sum / total
    } else {
        set.faces.keys().map(|&f| mesh.face_centroid(f as usize)).sum::<Vec3>() / set.faces.len() as f64
    };
    if let Some((sx, sy, _)) = view.camera.frame().project(&center) {
        if sx >= 0.0 && sy >= 0.0 && sx < view.width as f64 && sy < view.height as f64 {
            let f = view.face_at(sx as u32, sy as u32);
            if set.faces.contains_key(&f) {
                return Ok(f);
            }
        }
    }
    let mut best = (f64::INFINITY, 0u32);
    for &f in set.faces.keys() {
        let d = (mesh.face_centroid(f as usize) - center).norm_squared();
        if d < best.0 {
            best = (d, f);
        }
    }
    Ok(best.1)
}

/// Gaussian weights over the covered faces.
///
/// Distances come from the heat method started at the central face,
/// averaged over each face's q-ring restricted to the covered set. A normal
/// distribution is fitted to those averages and each face gets its density.
/// Covered faces unreachable from the central face take the largest finite
/// distance in the set.
pub fn gaussian_reweight(
    mesh: &Mesh,
    graph: &FaceGraph,
    geodesics: &HeatGeodesics,
    set: &MaskFaceSet,
    q: usize,
    sigma_floor: f64,
) -> Result<BTreeMap<u32, f64>> {
    let center = set
        .central_face
        .ok_or_else(|| Error::InvalidArgument("central face not set".into()))?;
    let field = geodesics.distance_from(center as usize)?;
    let cap = set
        .faces
        .keys()
        .map(|&f| field.distance[f as usize])
        .filter(|d| d.is_finite())
        .fold(0.0, f64::max);
    let mut inside = vec![false; mesh.face_count()];
    for &f in set.faces.keys() {
        inside[f as usize] = true;
    }
    let dist = |f: u32| {
        let d = field.distance[f as usize];
        if d.is_finite() {
            d
        } else {
            cap
        }
    };
    let mut walker = RingWalker::new(graph);
    let faces: Vec<u32> = set.faces.keys().copied().collect();
    let mut smoothed = Vec::with_capacity(faces.len());
    for &f in &faces {
        let (mut sum, mut count) = (0.0, 0usize);
        for &g in walker.ring(f as usize, q) {
            if inside[g as usize] {
                sum += dist(g);
                count += 1;
            }
        }
        smoothed.push(sum / count as f64);
    }
    let g = fit_gaussian(&smoothed, sigma_floor)?;
    faces
        .iter()
        .zip(&smoothed)
        .map(|(&f, &d)| Ok((f, gaussian_density(d, g.mu, g.sigma)?)))
        .collect()
}

/// `iterations` rounds of averaging each score with its edge neighbors.
pub fn visibility_smooth(scores: &FaceScores, graph: &FaceGraph, iterations: usize) -> FaceScores {
    let mut cur = scores.score.clone();
    let mut next = vec![0.0; cur.len()];
    for _ in 0..iterations {
        for (f, out) in next.iter_mut().enumerate() {
            let nb = graph.edge_neighbors(f);
            let s: f64 = cur[f] + nb.iter().map(|&g| cur[g as usize]).sum::<f64>();
            *out = s / (1 + nb.len()) as f64;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    FaceScores {
        score: cur,
        visibility: scores.visibility.clone(),
    }
}

/// Relative slack on the threshold comparison so that faces sitting exactly
/// at the mean are not lost to summation rounding.
const THRESHOLD_SLACK: f64 = 1e-12;

/// Mean score over the faces in `scope` (0 if there are none).
pub fn threshold(scores: &FaceScores, scope: ThresholdScope) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    let mut count = 0usize;
    for (s, &n) in scores.score.iter().zip(&scores.visibility) {
        if scope == ThresholdScope::AllFaces || n > 0 {
            // Neumaier summation
            let t = sum + s;
            if sum.abs() >= s.abs() {
                comp += (sum - t) + s;
            } else {
                comp += (s - t) + sum;
            }
            sum = t;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum + comp) / count as f64
    }
}

/// `label(f) = score(f) ≥ θ ∧ n(f) > 0` with θ from [`threshold`].
pub fn global_filter(scores: &FaceScores, scope: ThresholdScope) -> Vec<bool> {
    let theta = threshold(scores, scope);
    let cut = theta - theta.abs() * THRESHOLD_SLACK;
    scores
        .score
        .iter()
        .zip(&scores.visibility)
        .map(|(&s, &n)| n > 0 && s >= cut)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub view: usize,
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedView {
    pub view: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub labels: Vec<bool>,
    /// Final (smoothed) scores.
    pub score: Vec<f64>,
    pub visibility: Vec<u32>,
    pub explanations: Vec<Explanation>,
    pub config: FusionConfig,
    pub skipped_views: Vec<SkippedView>,
}

impl SegmentationResult {
    pub fn selected_faces(&self) -> BTreeSet<u32> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l)
            .map(|(f, _)| f as u32)
            .collect()
    }

    /// Writes an ASCII PLY with per-face colors: selected faces red, the
    /// rest gray.
    pub fn write_colored_ply(&self, mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
        write_colored_ply(mesh, &self.labels, path)
    }
}

pub const SELECTED_RGB: [u8; 3] = [255, 0, 0];
pub const UNSELECTED_RGB: [u8; 3] = [128, 128, 128];

pub fn write_colored_ply(mesh: &Mesh, labels: &[bool], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if labels.len() != mesh.face_count() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} faces",
            labels.len(),
            mesh.face_count()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         element face {}\nproperty list uchar int vertex_indices\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        mesh.vertex_count(),
        mesh.face_count()
    )
    .map_err(io)?;
    for v in mesh.vertices() {
        writeln!(out, "{} {} {}", v.x as f32, v.y as f32, v.z as f32).map_err(io)?;
    }
    for (f, &on) in mesh.faces().iter().zip(labels) {
        let [r, g, b] = if on { SELECTED_RGB } else { UNSELECTED_RGB };
        writeln!(out, "3 {} {} {} {r} {g} {b}", f[0], f[1], f[2]).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// One view as seen by [`fuse_views`].
#[derive(Debug, Clone, Copy)]
pub struct FuseView<'a> {
    pub render: &'a ViewRender,
    /// `Err` carries the reason the backend failed for this view.
    pub candidates: std::result::Result<&'a [CandidateMask], &'a str>,
    /// Chosen candidate indices; bypasses top-k filtering when present.
    pub selection: Option<&'a [usize]>,
}

/// Everything fusion needs about a mesh, built once and reused across
/// queries.
pub struct FusionContext {
    pub mesh: Mesh,
    pub graph: FaceGraph,
    pub geodesics: HeatGeodesics,
    pub sigma_floor: f64,
}

impl FusionContext {
    pub fn new(mesh: &Mesh, config: &FusionConfig) -> Result<Self> {
        config.validate()?;
        Ok(FusionContext {
            mesh: mesh.clone(),
            graph: FaceGraph::build(mesh),
            geodesics: HeatGeodesics::new(mesh, config.heat_time_multiplier)?,
            sigma_floor: config.sigma_floor_ratio * mesh.bounding_diagonal(),
        })
    }
}

struct ViewOutput {
    view: usize,
    acc: Accumulator,
    explanations: Vec<Explanation>,
}

fn process_view(ctx: &FusionContext, fv: &FuseView<'_>, cands: &[CandidateMask], config: &FusionConfig) -> Result<ViewOutput> {
    let view = fv.render;
    let kept = match fv.selection {
        Some(sel) => {
            if let Some(&bad) = sel.iter().find(|&&j| j >= cands.len()) {
                return Err(Error::InvalidSelection(format!(
                    "view {} has {} candidates, index {bad} selected",
                    view.view_index,
                    cands.len()
                )));
            }
            let mut s = sel.to_vec();
            s.sort_unstable();
            s.dedup();
            s
        }
        None => filter_topk_indices(cands, config),
    };
    let mut acc = Accumulator::new(ctx.mesh.face_count());
    let mut explanations = Vec::with_capacity(kept.len());
    for j in kept {
        let c = &cands[j];
        explanations.push(Explanation {
            view: view.view_index,
            text: c.text.clone(),
            confidence: c.confidence,
        });
        let mut set = mask_faces(view, c, j, config)?;
        if set.faces.is_empty() {
            continue;
        }
        set.central_face = Some(central_face(&ctx.mesh, view, &set)?);
        let weights = gaussian_reweight(&ctx.mesh, &ctx.graph, &ctx.geodesics, &set, config.q, ctx.sigma_floor)?;
        acc.add(&set, &weights);
    }
    Ok(ViewOutput {
        view: view.view_index,
        acc,
        explanations,
    })
}

/// Full fusion over all views. Per-view work runs in parallel; partial sums
/// are merged in view-index order so the result does not depend on the
/// order of `views`.
pub fn fuse_views(ctx: &FusionContext, views: &[FuseView<'_>], config: &FusionConfig) -> Result<SegmentationResult> {
    config.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("no views to fuse".into()));
    }
    let mut seen = BTreeSet::new();
    for v in views {
        if !seen.insert(v.render.view_index) {
            return Err(Error::InvalidArgument(format!("view index {} appears twice", v.render.view_index)));
        }
    }
    let mut skipped = Vec::new();
    let mut work = Vec::new();
    for v in views {
        match v.candidates {
            Ok(c) => work.push((v, c)),
            Err(reason) => skipped.push(SkippedView {
                view: v.render.view_index,
                reason: reason.to_string(),
            }),
        }
    }
    if work.is_empty() {
        return Err(Error::AllViewsFailed);
    }
    let mut outputs = work
        .par_iter()
        .map(|(v, c)| process_view(ctx, v, c, config))
        .collect::<Result<Vec<_>>>()?;
    outputs.sort_by_key(|o| o.view);
    skipped.sort_by_key(|s| s.view);

    let mut total = Accumulator::new(ctx.mesh.face_count());
    let mut explanations = Vec::new();
    for o in outputs {
        total.merge(&o.acc);
        explanations.extend(o.explanations);
    }
    let scores = visibility_smooth(&total.finish(), &ctx.graph, config.smoothing_iterations);
    Ok(SegmentationResult {
        labels: global_filter(&scores, config.threshold_scope),
        score: scores.score,
        visibility: scores.visibility,
        explanations,
        config: config.clone(),
        skipped_views: skipped,
    })
}

/// Fusion with default filtering in every view; `per_view[i]` belongs to
/// `views[i]`.
pub fn fuse(
    ctx: &FusionContext,
    views: &[ViewRender],
    per_view: &[Vec<CandidateMask>],
    config: &FusionConfig,
) -> Result<SegmentationResult> {
    if views.len() != per_view.len() {
        return Err(Error::InvalidArgument(format!(
            "{} views but {} candidate lists",
            views.len(),
            per_view.len()
        )));
    }
    let inputs: Vec<FuseView<'_>> = views
        .iter()
        .zip(per_view)
        .map(|(render, c)| FuseView {
            render,
            candidates: Ok(c.as_slice()),
            selection: None,
        })
        .collect();
    fuse_views(ctx, &inputs, config)
}

/// Per-face category: the highest-scoring category among those whose
/// global filter accepts the face (which implies `n > 0`), lowest index on
/// ties; `None` if no category accepts it.
pub fn multi_query_label(results: &[FaceScores], scope: ThresholdScope) -> Result<Vec<Option<u32>>> {
    let first = results
        .first()
        .ok_or_else(|| Error::InvalidArgument("no categories".into()))?;
    let n = first.face_count();
    if results.iter().any(|r| r.face_count() != n || r.visibility.len() != n) {
        return Err(Error::InvalidArgument("category score arrays differ in length".into()));
    }
    let accepted: Vec<Vec<bool>> = results.iter().map(|r| global_filter(r, scope)).collect();
    Ok((0..n)
        .map(|f| {
            let mut best: Option<(u32, f64)> = None;
            for (c, r) in results.iter().enumerate() {
                if !accepted[c][f] {
                    continue;
                }
                let s = r.score[f];
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((c as u32, s));
                }
            }
            best.map(|(c, _)| c)
        })
        .collect())
}
