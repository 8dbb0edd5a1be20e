//! Pascal VOC annotation ingestion and box-size statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sfmkit_core::BBox;

pub const TARGET_CLASS: &str = "chicken";
pub const STATS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum VocError {
    #[error("{path}: xml parse error at line {line}, column {col}: {msg}")]
    Xml {
        path: String,
        line: u32,
        col: u32,
        msg: String,
    },
    #[error("{path}: missing field '{field}'")]
    MissingField { path: String, field: String },
    #[error("{path}: bad value for '{field}': {value:?}")]
    BadValue {
        path: String,
        field: String,
        value: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image list names ids with no annotation file: {0:?}")]
    MissingImages(Vec<String>),
    #[error("domain error: {0}")]
    Domain(String),
}

impl VocError {
    /// Errors confined to one file; a directory load skips such files.
    pub fn is_record_level(&self) -> bool {
        matches!(
            self,
            VocError::MissingField { .. } | VocError::BadValue { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocObject {
    pub name: String,
    pub bbox: BBox,
    pub difficult: bool,
}

/// One parsed annotation document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub filename: Option<String>,
    pub width: f64,
    pub height: f64,
    pub depth: Option<u32>,
    pub objects: Vec<VocObject>,
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, tag: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(tag))
}

fn text_of<'a>(node: roxmltree::Node<'a, '_>, tag: &str) -> Option<&'a str> {
    child(node, tag).and_then(|n| n.text()).map(str::trim)
}

/// Parses one VOC XML document. `origin` names the source in errors.
pub fn parse_voc_xml(doc: &str, origin: &str) -> Result<ImageRecord, VocError> {
    let xml = roxmltree::Document::parse(doc).map_err(|e| {
        let pos = e.pos();
        VocError::Xml {
            path: origin.to_string(),
            line: pos.row,
            col: pos.col,
            msg: e.to_string(),
        }
    })?;
    let missing = |field: &str| VocError::MissingField {
        path: origin.to_string(),
        field: field.to_string(),
    };
    let num = |node: roxmltree::Node, field: &str, label: &str| -> Result<f64, VocError> {
        let raw = text_of(node, field).ok_or_else(|| missing(label))?;
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| VocError::BadValue {
                path: origin.to_string(),
                field: label.to_string(),
                value: raw.to_string(),
            })
    };
    let root = xml.root_element();
    if !root.has_tag_name("annotation") {
        return Err(missing("annotation"));
    }
    let size = child(root, "size").ok_or_else(|| missing("size"))?;
    let width = num(size, "width", "size/width")?;
    let height = num(size, "height", "size/height")?;
    if width <= 0.0 || height <= 0.0 {
        return Err(VocError::BadValue {
            path: origin.to_string(),
            field: "size".into(),
            value: format!("{width}x{height}"),
        });
    }
    let depth = text_of(size, "depth").and_then(|d| d.parse().ok());
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = text_of(obj, "name").ok_or_else(|| missing("object/name"))?;
        let bb = child(obj, "bndbox").ok_or_else(|| missing("object/bndbox"))?;
        let coords =
            ["xmin", "ymin", "xmax", "ymax"].map(|f| num(bb, f, &format!("object/bndbox/{f}")));
        let [x1, y1, x2, y2] = coords;
        let difficult = text_of(obj, "difficult").is_some_and(|d| d == "1");
        objects.push(VocObject {
            name: name.to_string(),
            bbox: BBox::raw(x1?, y1?, x2?, y2?),
            difficult,
        });
    }
    Ok(ImageRecord {
        filename: text_of(root, "filename").map(str::to_string),
        width,
        height,
        depth,
        objects,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Writes a record back as VOC XML; parsing the result yields the same record.
pub fn serialize_voc_xml(rec: &ImageRecord) -> String {
    let mut s = String::from("<annotation>\n");
    if let Some(f) = &rec.filename {
        let _ = writeln!(s, "\t<filename>{}</filename>", escape(f));
    }
    let _ = writeln!(s, "\t<size>");
    let _ = writeln!(s, "\t\t<width>{}</width>", rec.width);
    let _ = writeln!(s, "\t\t<height>{}</height>", rec.height);
    if let Some(d) = rec.depth {
        let _ = writeln!(s, "\t\t<depth>{d}</depth>");
    }
    let _ = writeln!(s, "\t</size>");
    for o in &rec.objects {
        let _ = writeln!(s, "\t<object>");
        let _ = writeln!(s, "\t\t<name>{}</name>", escape(&o.name));
        let _ = writeln!(s, "\t\t<difficult>{}</difficult>", u8::from(o.difficult));
        let _ = writeln!(s, "\t\t<bndbox>");
        let b = &o.bbox;
        let _ = writeln!(s, "\t\t\t<xmin>{}</xmin>", b.x1);
        let _ = writeln!(s, "\t\t\t<ymin>{}</ymin>", b.y1);
        let _ = writeln!(s, "\t\t\t<xmax>{}</xmax>", b.x2);
        let _ = writeln!(s, "\t\t\t<ymax>{}</ymax>", b.y2);
        let _ = writeln!(s, "\t\t</bndbox>");
        let _ = writeln!(s, "\t</object>");
    }
    s.push_str("</annotation>\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub boxes: Vec<LabeledBox>,
}

/// A dataset split after clamping boxes to their images.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub split: String,
    pub images: Vec<AnnotatedImage>,
    /// Boxes that had at least one coordinate clipped to the image.
    pub clamp_events: usize,
    /// Boxes with no area left after clipping; not included in `images`.
    pub dropped_boxes: usize,
    /// Box counts per class name other than [`TARGET_CLASS`].
    pub flagged_classes: BTreeMap<String, usize>,
    /// Files skipped because of record-level errors.
    pub skipped: Vec<String>,
}

impl AnnotationSet {
    pub fn new(split: impl Into<String>) -> Self {
        AnnotationSet {
            split: split.into(),
            ..Default::default()
        }
    }

    /// Adds one image, clamping its boxes to the image bounds.
    pub fn push_record(&mut self, id: impl Into<String>, rec: &ImageRecord) {
        let mut boxes = Vec::with_capacity(rec.objects.len());
        for o in &rec.objects {
            let mut b = o.bbox;
            if b.clamp_to(rec.width, rec.height) {
                self.clamp_events += 1;
            }
            if b.is_degenerate() {
                self.dropped_boxes += 1;
                log::warn!("dropping box with no area after clamping: {:?}", o.bbox);
                continue;
            }
            if o.name != TARGET_CLASS {
                *self.flagged_classes.entry(o.name.clone()).or_default() += 1;
            }
            boxes.push(LabeledBox {
                bbox: b,
                label: o.name.clone(),
            });
        }
        self.images.push(AnnotatedImage {
            id: id.into(),
            width: rec.width,
            height: rec.height,
            boxes,
        });
    }

    pub fn box_count(&self) -> usize {
        self.images.iter().map(|i| i.boxes.len()).sum()
    }
}

fn read_image_list(path: &Path) -> Result<Vec<String>, VocError> {
    let text = fs::read_to_string(path).map_err(|source| VocError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().next().unwrap_or(l).to_string())
        .collect())
}

/// Loads every `*.xml` under `dir` (non-recursive), optionally restricted to the
/// ids in `image_list`. Image ids are file stems; files are processed in name order.
///
/// Malformed XML aborts the load. Files with missing or invalid fields are
/// skipped with a warning and listed in [`AnnotationSet::skipped`].
pub fn load_voc_dir(
    dir: &Path,
    image_list: Option<&Path>,
    split: &str,
) -> Result<AnnotationSet, VocError> {
    let io_err = |p: &Path| {
        let path = p.display().to_string();
        move |source| VocError::Io { path, source }
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("xml")) && p.is_file())
        .collect();
    files.sort();
    if let Some(list) = image_list {
        let wanted = read_image_list(list)?;
        let have: BTreeSet<String> = files.iter().map(|p| stem(p)).collect();
        let missing: Vec<String> = wanted
            .iter()
            .filter(|w| !have.contains(*w))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(VocError::MissingImages(missing));
        }
        let wanted: BTreeSet<String> = wanted.into_iter().collect();
        files.retain(|p| wanted.contains(&stem(p)));
    }
    let parsed: Vec<(String, Result<ImageRecord, VocError>)> = files
        .par_iter()
        .map(|p| {
            let origin = p.display().to_string();
            let rec = fs::read_to_string(p)
                .map_err(io_err(p))
                .and_then(|text| parse_voc_xml(&text, &origin));
            (stem(p), rec)
        })
        .collect();
    let mut set = AnnotationSet::new(split);
    for (id, rec) in parsed {
        match rec {
            Ok(r) => set.push_record(id, &r),
            Err(e) if e.is_record_level() => {
                log::warn!("skipping {id}: {e}");
                set.skipped.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(set)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

// ------------------------------------------------------------- size stats

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeThresholds {
    pub small_max_area: f64,
    pub medium_max_area: f64,
}

impl Default for SizeThresholds {
    /// COCO convention: 32² and 96² pixels.
    fn default() -> Self {
        SizeThresholds {
            small_max_area: 32.0 * 32.0,
            medium_max_area: 96.0 * 96.0,
        }
    }
}

impl SizeThresholds {
    pub fn new(small_max_area: f64, medium_max_area: f64) -> Result<Self, VocError> {
        if !(small_max_area > 0.0 && small_max_area < medium_max_area)
            || !medium_max_area.is_finite()
        {
            return Err(VocError::Domain(format!(
                "size thresholds need 0 < small < medium, got {small_max_area}, {medium_max_area}"
            )));
        }
        Ok(SizeThresholds {
            small_max_area,
            medium_max_area,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeCategory {
    Small,
    Medium,
    Large,
}

/// Area `≤ small` is small, `≤ medium` is medium, anything larger is large.
pub fn box_size_category(b: &BBox, t: &SizeThresholds) -> SizeCategory {
    let a = b.area();
    if a <= t.small_max_area {
        SizeCategory::Small
    } else if a <= t.medium_max_area {
        SizeCategory::Medium
    } else {
        SizeCategory::Large
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub schema_version: u32,
    pub split: String,
    pub images: usize,
    pub boxes: usize,
    pub n_s: usize,
    pub n_m: usize,
    pub n_l: usize,
    /// Percentages rounded to two decimals.
    pub pct_s: f64,
    pub pct_m: f64,
    pub pct_l: f64,
    pub thresholds: SizeThresholds,
    pub clamp_events: usize,
    pub flagged_classes: BTreeMap<String, usize>,
}

fn pct2(n: usize, total: usize) -> f64 {
    (n as f64 * 10000.0 / total as f64).round() / 100.0
}

pub fn dataset_stats(set: &AnnotationSet, t: &SizeThresholds) -> Result<DatasetStats, VocError> {
    let boxes = set.box_count();
    if set.images.is_empty() || boxes == 0 {
        return Err(VocError::Domain(format!(
            "split '{}' has {} images and {} boxes; statistics need at least one box",
            set.split,
            set.images.len(),
            boxes
        )));
    }
    let (mut n_s, mut n_m, mut n_l) = (0, 0, 0);
    for b in set.images.iter().flat_map(|i| &i.boxes) {
        match box_size_category(&b.bbox, t) {
            SizeCategory::Small => n_s += 1,
            SizeCategory::Medium => n_m += 1,
            SizeCategory::Large => n_l += 1,
        }
    }
    Ok(DatasetStats {
        schema_version: STATS_SCHEMA_VERSION,
        split: set.split.clone(),
        images: set.images.len(),
        boxes,
        n_s,
        n_m,
        n_l,
        pct_s: pct2(n_s, boxes),
        pct_m: pct2(n_m, boxes),
        pct_l: pct2(n_l, boxes),
        thresholds: *t,
        clamp_events: set.clamp_events,
        flagged_classes: set.flagged_classes.clone(),
    })
}

/// Integer with comma thousands separators, e.g. `68,850`.
pub fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Aligned table: `Split | Images | Boxes | S(%) | M(%) | L(%)`, one row per split.
pub fn render_stats_table(rows: &[DatasetStats]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>8} {:>10} {:>7} {:>7} {:>7}",
        "Split", "Images", "Boxes", "S(%)", "M(%)", "L(%)"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>10} {:>7.2} {:>7.2} {:>7.2}",
            r.split,
            r.images,
            group_thousands(r.boxes),
            r.pct_s,
            r.pct_m,
            r.pct_l
        );
    }
    if let Some(r) = rows.first() {
        let _ = writeln!(
            s,
            "# size thresholds: S <= {} px^2, M <= {} px^2",
            r.thresholds.small_max_area, r.thresholds.medium_max_area
        );
    }
    s
}
