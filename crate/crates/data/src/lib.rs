//! Annotation ingestion, dataset statistics and detection evaluation.

pub mod eval;
pub mod voc;

pub use eval::{coco_map, Detection, EvalReport, GroundTruth};
pub use voc::{dataset_stats, load_voc_dir, parse_voc_xml, AnnotationSet, SizeThresholds};
