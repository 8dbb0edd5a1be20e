//! Desk-scale training: momentum SGD, a synthetic square-detection task and a
//! memorization run over it.

mod detector;
mod overfit;
mod sgd;
mod toy;

pub use detector::{assign, Assignment, DetectorConfig, DetectorPass, DetectorVars, ToyDetector};
pub use overfit::{
    overfit_toy, task_loss, write_trace_csv, LrSchedule, OverfitConfig, OverfitReport, TrainError,
    MAX_OVERFIT_SAMPLES,
};
pub use sgd::{SgdConfig, SgdState};
pub use toy::{make_toy_task, ToySample, ToyTask, NOISE_STD, OBJECT_LEVEL, SQUARE_SIDES};
