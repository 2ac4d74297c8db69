//! Per-category mIoU evaluation against labeled meshes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-face category labels for a set of shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub categories: Vec<String>,
    /// Shape name to one category index per face.
    pub shapes: BTreeMap<String, Vec<u32>>,
}

impl GroundTruth {
    pub fn new(categories: Vec<String>, shapes: BTreeMap<String, Vec<u32>>) -> Result<Self> {
        let gt = GroundTruth { categories, shapes };
        gt.validate()?;
        Ok(gt)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let gt: GroundTruth =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        gt.validate().map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(gt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::InvalidArgument("ground truth has no categories".into()));
        }
        let unique: BTreeSet<&String> = self.categories.iter().collect();
        if unique.len() != self.categories.len() {
            return Err(Error::InvalidArgument("duplicate category names".into()));
        }
        for (name, labels) in &self.shapes {
            if let Some(bad) = labels.iter().find(|&&l| l as usize >= self.categories.len()) {
                return Err(Error::InvalidArgument(format!(
                    "shape {name:?} uses label {bad} but only {} categories exist",
                    self.categories.len()
                )));
            }
        }
        Ok(())
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.eq_ignore_ascii_case(name.trim()))
    }

    /// Faces of `shape` labeled with category `c`.
    pub fn faces_of(&self, shape: &str, c: usize) -> Option<BTreeSet<u32>> {
        let labels = self.shapes.get(shape)?;
        Some(select(labels.iter().map(|&l| Some(l)), c))
    }
}

fn select(labels: impl Iterator<Item = Option<u32>>, c: usize) -> BTreeSet<u32> {
    labels
        .enumerate()
        .filter(|(_, l)| *l == Some(c as u32))
        .map(|(f, _)| f as u32)
        .collect()
}

/// `|pred ∩ gt| / |pred ∪ gt|`; 1 when both are empty.
pub fn face_iou(pred: &BTreeSet<u32>, gt: &BTreeSet<u32>) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let inter = pred.intersection(gt).count();
    let union = pred.len() + gt.len() - inter;
    inter as f64 / union as f64
}

/// Area-weighted IoU: each face counts with `weights[f]`.
pub fn face_iou_weighted(pred: &BTreeSet<u32>, gt: &BTreeSet<u32>, weights: &[f64]) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let w = |f: &u32| weights.get(*f as usize).copied().unwrap_or(0.0);
    let inter: f64 = pred.intersection(gt).map(w).sum();
    let union: f64 = pred.union(gt).map(w).sum();
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Per-face predicted category (`None` = unassigned), keyed by shape name.
pub type Predictions = BTreeMap<String, Vec<Option<u32>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<String>,
    /// Percent, unrounded, in category order.
    pub per_category: Vec<f64>,
    /// Shape name to per-category IoU in [0, 1].
    pub per_shape: BTreeMap<String, Vec<f64>>,
    pub shape_count: usize,
    /// Mean of `per_category`, percent.
    pub mean: f64,
    pub area_weighted: bool,
}

/// Per category: mean over shapes of the face IoU, in percent.
///
/// `face_areas` switches to area-weighted IoU and must then hold one weight
/// vector per shape.
pub fn miou_report(
    predictions: &Predictions,
    gt: &GroundTruth,
    face_areas: Option<&BTreeMap<String, Vec<f64>>>,
) -> Result<EvalReport> {
    if gt.shapes.is_empty() {
        return Err(Error::EvalMismatch("ground truth has no shapes".into()));
    }
    for name in predictions.keys() {
        if !gt.shapes.contains_key(name) {
            return Err(Error::EvalMismatch(format!("prediction for unknown shape {name:?}")));
        }
    }
    let nc = gt.categories.len();
    let mut per_shape = BTreeMap::new();
    for (name, labels) in &gt.shapes {
        let pred = predictions
            .get(name)
            .ok_or_else(|| Error::EvalMismatch(format!("no prediction for shape {name:?}")))?;
        if pred.len() != labels.len() {
            return Err(Error::EvalMismatch(format!(
                "shape {name:?}: prediction has {} faces, ground truth {}",
                pred.len(),
                labels.len()
            )));
        }
        if let Some(bad) = pred.iter().flatten().find(|&&l| l as usize >= nc) {
            return Err(Error::EvalMismatch(format!("shape {name:?}: label {bad} out of range")));
        }
        let weights = match face_areas {
            Some(areas) => {
                let w = areas
                    .get(name)
                    .ok_or_else(|| Error::EvalMismatch(format!("no face areas for {name:?}")))?;
                if w.len() != labels.len() {
                    return Err(Error::EvalMismatch(format!("shape {name:?}: face area count mismatch")));
                }
                Some(w)
            }
            None => None,
        };
        let ious = (0..nc)
            .map(|c| {
                let p = select(pred.iter().copied(), c);
                let g = select(labels.iter().map(|&l| Some(l)), c);
                match weights {
                    Some(w) => face_iou_weighted(&p, &g, w),
                    None => face_iou(&p, &g),
                }
            })
            .collect();
        per_shape.insert(name.clone(), ious);
    }
    let n = per_shape.len() as f64;
    let per_category: Vec<f64> = (0..nc)
        .map(|c| 100.0 * per_shape.values().map(|v: &Vec<f64>| v[c]).sum::<f64>() / n)
        .collect();
    let mean = per_category.iter().sum::<f64>() / nc as f64;
    Ok(EvalReport {
        categories: gt.categories.clone(),
        per_category,
        shape_count: per_shape.len(),
        per_shape,
        mean,
        area_weighted: face_areas.is_some(),
    })
}

impl EvalReport {
    /// Plain-text table: a header with one column per category and one row
    /// for `model`, values in percent with two decimals.
    pub fn table(&self, model: &str) -> String {
        let widths: Vec<usize> = self.categories.iter().map(|c| c.len().max(6)).collect();
        let first = model.len().max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<first$}", "Model");
        for (c, w) in self.categories.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        let _ = write!(out, "{model:<first$}");
        for (v, w) in self.per_category.iter().zip(&widths) {
            let _ = write!(out, "  {v:>w$.2}");
        }
        out.push('\n');
        let _ = writeln!(out, "mIoU {:.2} over {} shape(s)", self.mean, self.shape_count);
        out
    }

    /// Machine-readable form; percentages rounded to two decimals.
    pub fn to_json(&self) -> serde_json::Value {
        let r2 = |v: f64| (v * 100.0).round() / 100.0;
        let per_category: serde_json::Map<String, serde_json::Value> = self
            .categories
            .iter()
            .zip(&self.per_category)
            .map(|(c, v)| (c.clone(), r2(*v).into()))
            .collect();
        serde_json::json!({
            "categories": self.categories,
            "per_category": per_category,
            "per_shape": self.per_shape,
            "shape_count": self.shape_count,
            "mean": r2(self.mean),
            "area_weighted": self.area_weighted,
        })
    }
}

/// Finds every `result.json` below `dir` (sorted).
pub fn find_results(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path.file_name().is_some_and(|n| n == "result.json") {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir.as_ref(), &mut out)?;
    out.sort();
    Ok(out)
}

/// Category a single-query result answers: an exact (case-insensitive)
/// category name, or the one category named as a whole word in the query.
fn query_category(query: &str, gt: &GroundTruth) -> Option<usize> {
    if let Some(c) = gt.category_index(query) {
        return Some(c);
    }
    let words: BTreeSet<String> = query
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect();
    let hits: Vec<usize> = gt
        .categories
        .iter()
        .enumerate()
        .filter(|(_, c)| words.contains(&c.to_ascii_lowercase()))
        .map(|(i, _)| i)
        .collect();
    (hits.len() == 1).then(|| hits[0])
}

/// Collects predictions from `result.json` files.
///
/// Each file names its `shape`. A file with `categories` carries one
/// category name index (or null) per face; otherwise `labels` are booleans
/// for the category its `query` names. Several files for one shape are
/// merged; a later assignment of the same face wins.
pub fn load_predictions(files: &[PathBuf], gt: &GroundTruth) -> Result<Predictions> {
    let mut preds: Predictions = BTreeMap::new();
    for path in files {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        let bad = |msg: &str| Error::parse(path, msg.to_string());
        let shape = v
            .get("shape")
            .and_then(|s| s.as_str())
            .ok_or_else(|| bad("missing \"shape\""))?;
        let labels = v
            .get("labels")
            .and_then(|l| l.as_array())
            .ok_or_else(|| bad("missing \"labels\" array"))?;
        let gt_faces = gt
            .shapes
            .get(shape)
            .ok_or_else(|| Error::EvalMismatch(format!("{}: unknown shape {shape:?}", path.display())))?
            .len();
        if labels.len() != gt_faces {
            return Err(Error::EvalMismatch(format!(
                "{}: {} labels but shape {shape:?} has {gt_faces} faces",
                path.display(),
                labels.len()
            )));
        }
        let entry = preds
            .entry(shape.to_string())
            .or_insert_with(|| vec![None; gt_faces]);
        if let Some(cats) = v.get("categories").and_then(|c| c.as_array()) {
            let map: Vec<Option<usize>> = cats
                .iter()
                .map(|c| c.as_str().and_then(|c| gt.category_index(c)))
                .collect();
            for (f, l) in labels.iter().enumerate() {
                if l.is_null() {
                    continue;
                }
                let k = l.as_u64().ok_or_else(|| bad("label is not an index"))? as usize;
                let c = map
                    .get(k)
                    .copied()
                    .flatten()
                    .ok_or_else(|| bad("label names a category missing from the ground truth"))?;
                entry[f] = Some(c as u32);
            }
        } else {
            let query = v
                .get("query")
                .and_then(|q| q.as_str())
                .ok_or_else(|| bad("boolean labels need a \"query\""))?;
            let c = query_category(query, gt).ok_or_else(|| {
                Error::EvalMismatch(format!(
                    "{}: query {query:?} does not name exactly one category",
                    path.display()
                ))
            })?;
            for (f, l) in labels.iter().enumerate() {
                if l.as_bool().ok_or_else(|| bad("label is not a boolean"))? {
                    entry[f] = Some(c as u32);
                }
            }
        }
    }
    Ok(preds)
}
