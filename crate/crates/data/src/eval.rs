//! COCO-style detection evaluation: greedy matching, 101-point interpolated
//! AP over the IoU grid 0.50:0.05:0.95, and size-stratified AP/AR.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sfmkit_core::loss::iou;
use sfmkit_core::BBox;

use crate::voc::{box_size_category, AnnotationSet, SizeCategory, SizeThresholds};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MAX_DETS: usize = 100;
pub const RECALL_POINTS: usize = 101;

/// The ten IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid detection: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
    pub class: String,
}

impl Detection {
    pub fn new(
        image_id: impl Into<String>,
        bbox: BBox,
        score: f64,
        class: impl Into<String>,
    ) -> Result<Self, EvalError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(EvalError::Invalid(format!("score {score} outside [0, 1]")));
        }
        bbox.validate()
            .map_err(|e| EvalError::Invalid(e.to_string()))?;
        Ok(Detection {
            image_id: image_id.into(),
            bbox,
            score,
            class: class.into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BBox,
    pub class: String,
}

/// Ground truth for every box of an annotation set. Image ids are kept even
/// for images without boxes, see [`gt_image_ids`].
pub fn ground_truths(set: &AnnotationSet) -> Vec<GroundTruth> {
    set.images
        .iter()
        .flat_map(|img| {
            img.boxes.iter().map(|b| GroundTruth {
                image_id: img.id.clone(),
                bbox: b.bbox,
                class: b.label.clone(),
            })
        })
        .collect()
}

pub fn gt_image_ids(set: &AnnotationSet) -> BTreeSet<String> {
    set.images.iter().map(|i| i.id.clone()).collect()
}

/// Detection image ids that name no known image, sorted and deduplicated.
pub fn orphan_image_ids(dets: &[Detection], images: &BTreeSet<String>) -> Vec<String> {
    dets.iter()
        .filter(|d| !images.contains(&d.image_id))
        .map(|d| d.image_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IdValue {
    Str(String),
    Int(i64),
}

#[derive(Deserialize)]
struct RawDetection {
    image_id: IdValue,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
    class: String,
}

/// Parses one detection per non-empty line:
/// `{"image_id", "x1", "y1", "x2", "y2", "score", "class"}`.
pub fn parse_detections_jsonl(text: &str) -> Result<Vec<Detection>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDetection = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let id = match raw.image_id {
            IdValue::Str(s) => s,
            IdValue::Int(n) => n.to_string(),
        };
        let det = Detection::new(
            id,
            BBox::raw(raw.x1, raw.y1, raw.x2, raw.y2),
            raw.score,
            raw.class,
        )
        .map_err(|e| EvalError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(det);
    }
    Ok(out)
}

pub fn detections_to_jsonl(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let v = serde_json::json!({
            "image_id": d.image_id,
            "x1": d.bbox.x1, "y1": d.bbox.y1, "x2": d.bbox.x2, "y2": d.bbox.y2,
            "score": d.score,
            "class": d.class,
        });
        s.push_str(&v.to_string());
        s.push('\n');
    }
    s
}

// ----------------------------------------------------------------- matching

/// Indices of `scores` by descending score; equal scores keep input order.
pub fn confidence_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Greedy matching of detections (already in confidence order) to ground truth.
///
/// Each detection takes the unmatched box with the highest IoU ≥ `thresh`,
/// preferring boxes that are not ignored; ties go to the lowest index.
/// Returns the matched ground-truth index for each detection.
pub fn greedy_match(
    dets: &[BBox],
    gts: &[BBox],
    gt_ignore: &[bool],
    thresh: f64,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut found = None;
        for tier in [false, true] {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt_ignore[g] != tier {
                    continue;
                }
                let v = iou(d, gt).unwrap_or(0.0);
                if v >= thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                found = Some(g);
                break;
            }
        }
        if let Some(g) = found {
            taken[g] = true;
        }
        out.push(found);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Detection indices in the order they were matched.
    pub order: Vec<usize>,
    /// Matched ground-truth index, aligned with `order`.
    pub matched: Vec<Option<usize>>,
    /// True-positive flags, aligned with `order`.
    pub tp: Vec<bool>,
}

/// Matches detections of a single image and class against its ground truth.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> MatchResult {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = confidence_order(&scores);
    let boxes: Vec<BBox> = order.iter().map(|&i| dets[i].bbox).collect();
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let matched = greedy_match(&boxes, &gt_boxes, &vec![false; gts.len()], iou_thresh);
    let tp = matched.iter().map(Option::is_some).collect();
    MatchResult { order, matched, tp }
}

/// 101-point interpolated AP from detections in confidence order.
/// `None` when `n_gt == 0`.
pub fn average_precision(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let (recall, mut precision) = pr_curve(tp, n_gt);
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut i = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while i < recall.len() && recall[i] < r {
            i += 1;
        }
        if i < recall.len() {
            sum += precision[i];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

fn pr_curve(tp: &[bool], n_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut ntp = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        ntp += usize::from(t);
        recall.push(ntp as f64 / n_gt as f64);
        precision.push(ntp as f64 / (i + 1) as f64);
    }
    (recall, precision)
}

// ------------------------------------------------------------- COCO summary

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum AreaRange {
    All,
    Only(SizeCategory),
}

const RANGES: [AreaRange; 4] = [
    AreaRange::All,
    AreaRange::Only(SizeCategory::Small),
    AreaRange::Only(SizeCategory::Medium),
    AreaRange::Only(SizeCategory::Large),
];

impl AreaRange {
    fn contains(self, b: &BBox, t: &SizeThresholds) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Only(c) => box_size_category(b, t) == c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// AP averaged over the ten IoU thresholds.
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ar: Option<f64>,
    pub ar_s: Option<f64>,
    pub ar_m: Option<f64>,
    pub ar_l: Option<f64>,
    pub iou_thresholds: Vec<f64>,
    pub ap_per_threshold: Vec<Option<f64>>,
    pub size_thresholds: SizeThresholds,
    pub max_dets: usize,
    pub images: usize,
    pub detections: usize,
    pub ground_truths: usize,
}

/// Per image/class evaluation at one IoU threshold and area range.
struct ImageEval {
    scores: Vec<f64>,
    tp: Vec<bool>,
    ignore: Vec<bool>,
    n_gt: usize,
}

fn evaluate_image(
    dets: &[&Detection],
    gts: &[&GroundTruth],
    range: AreaRange,
    thresh: f64,
    sizes: &SizeThresholds,
) -> ImageEval {
    let gt_ignore: Vec<bool> = gts
        .iter()
        .map(|g| !range.contains(&g.bbox, sizes))
        .collect();
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    let matched = greedy_match(&boxes, &gt_boxes, &gt_ignore, thresh);
    let ignore = matched
        .iter()
        .zip(dets)
        .map(|(m, d)| match m {
            Some(g) => gt_ignore[*g],
            None => !range.contains(&d.bbox, sizes),
        })
        .collect();
    ImageEval {
        scores: dets.iter().map(|d| d.score).collect(),
        tp: matched.iter().map(Option::is_some).collect(),
        ignore,
        n_gt: gt_ignore.iter().filter(|&&i| !i).count(),
    }
}

/// AP and final recall for one class from its per-image evaluations.
fn accumulate(evals: &[ImageEval]) -> (Option<f64>, Option<f64>) {
    let n_gt: usize = evals.iter().map(|e| e.n_gt).sum();
    if n_gt == 0 {
        return (None, None);
    }
    let mut scores = Vec::new();
    let mut tp = Vec::new();
    for e in evals {
        for k in 0..e.scores.len() {
            if !e.ignore[k] {
                scores.push(e.scores[k]);
                tp.push(e.tp[k]);
            }
        }
    }
    let order = confidence_order(&scores);
    let tp: Vec<bool> = order.iter().map(|&i| tp[i]).collect();
    let recall = tp.iter().filter(|&&t| t).count() as f64 / n_gt as f64;
    (average_precision(&tp, n_gt), Some(recall))
}

fn mean_defined(xs: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.into_iter().flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Full COCO-style summary. Images are processed in id order, detections of
/// each image and class in confidence order (stable), capped at [`MAX_DETS`].
pub fn coco_map(dets: &[Detection], gts: &[GroundTruth], sizes: &SizeThresholds) -> EvalReport {
    type Key<'a> = (&'a str, &'a str);
    let mut groups: BTreeMap<Key, (Vec<&Detection>, Vec<&GroundTruth>)> = BTreeMap::new();
    for g in gts {
        groups.entry((&g.class, &g.image_id)).or_default().1.push(g);
    }
    for d in dets {
        groups.entry((&d.class, &d.image_id)).or_default().0.push(d);
    }
    for (ds, _) in groups.values_mut() {
        let scores: Vec<f64> = ds.iter().map(|d| d.score).collect();
        let order = confidence_order(&scores);
        *ds = order.into_iter().take(MAX_DETS).map(|i| ds[i]).collect();
    }
    let images: BTreeSet<&str> = dets
        .iter()
        .map(|d| d.image_id.as_str())
        .chain(gts.iter().map(|g| g.image_id.as_str()))
        .collect();
    let classes: BTreeSet<&str> = groups.keys().map(|k| k.0).collect();
    let thresholds = iou_thresholds();
    let nt = thresholds.len();

    // (class, range, threshold) -> (ap, recall)
    let cells: Vec<(&str, AreaRange, usize)> = classes
        .iter()
        .flat_map(|&c| {
            RANGES
                .iter()
                .flat_map(move |&r| (0..nt).map(move |t| (c, r, t)))
        })
        .collect();
    let results: Vec<(Option<f64>, Option<f64>)> = cells
        .par_iter()
        .map(|&(c, r, t)| {
            let evals: Vec<ImageEval> = groups
                .range((c, "")..)
                .take_while(|(k, _)| k.0 == c)
                .map(|(_, (ds, gs))| evaluate_image(ds, gs, r, thresholds[t], sizes))
                .collect();
            accumulate(&evals)
        })
        .collect();
    let lookup: BTreeMap<(&str, AreaRange, usize), (Option<f64>, Option<f64>)> =
        cells.iter().copied().zip(results).collect();

    let ap_at =
        |r: AreaRange, t: usize| mean_defined(classes.iter().map(|&c| lookup[&(c, r, t)].0));
    let ar_at =
        |r: AreaRange, t: usize| mean_defined(classes.iter().map(|&c| lookup[&(c, r, t)].1));
    let over_t = |f: &dyn Fn(usize) -> Option<f64>| mean_defined((0..thresholds.len()).map(f));
    let ap_per_threshold: Vec<Option<f64>> = (0..thresholds.len())
        .map(|t| ap_at(AreaRange::All, t))
        .collect();
    let small = AreaRange::Only(SizeCategory::Small);
    let medium = AreaRange::Only(SizeCategory::Medium);
    let large = AreaRange::Only(SizeCategory::Large);

    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        map: mean_defined(ap_per_threshold.iter().copied()),
        ap50: ap_per_threshold[0],
        ap75: ap_per_threshold[5],
        ap_s: over_t(&|t| ap_at(small, t)),
        ap_m: over_t(&|t| ap_at(medium, t)),
        ap_l: over_t(&|t| ap_at(large, t)),
        ar: over_t(&|t| ar_at(AreaRange::All, t)),
        ar_s: over_t(&|t| ar_at(small, t)),
        ar_m: over_t(&|t| ar_at(medium, t)),
        ar_l: over_t(&|t| ar_at(large, t)),
        iou_thresholds: thresholds,
        ap_per_threshold,
        size_thresholds: *sizes,
        max_dets: MAX_DETS,
        images: images.len(),
        detections: dets.len(),
        ground_truths: gts.len(),
    }
}

/// Percentage with one decimal, e.g. `0.807 → "80.7"`; undefined values print as `-`.
pub fn format_pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.1}", x * 100.0),
        None => "-".to_string(),
    }
}

pub fn render_report_text(r: &EvalReport) -> String {
    let cols = [
        ("mAP", r.map),
        ("AP50", r.ap50),
        ("AP75", r.ap75),
        ("APS", r.ap_s),
        ("APM", r.ap_m),
        ("ARS", r.ar_s),
        ("ARM", r.ar_m),
    ];
    let mut s = String::new();
    for (name, _) in &cols {
        let _ = write!(s, "{name:>6}");
    }
    s.push('\n');
    for (_, v) in &cols {
        let _ = write!(s, "{:>6}", format_pct(*v));
    }
    s.push('\n');
    let _ = writeln!(
        s,
        "# {} images, {} detections, {} ground-truth boxes; S <= {} px^2, M <= {} px^2; maxDets {}",
        r.images,
        r.detections,
        r.ground_truths,
        r.size_thresholds.small_max_area,
        r.size_thresholds.medium_max_area,
        r.max_dets
    );
    s
}

pub fn render_report_json(r: &EvalReport) -> String {
    serde_json::to_string_pretty(r).expect("report serializes")
}
