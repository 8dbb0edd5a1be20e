use std::io::Write;

use serde::{Deserialize, Serialize};

use super::detector::ToyDetector;
use super::sgd::{SgdConfig, SgdState};
use super::toy::ToyTask;
use crate::error::TensorError;
use crate::ops::NormMode;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const MAX_OVERFIT_SAMPLES: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    /// Pass when the final loss is below this fraction of the initial loss.
    pub pass_ratio: f64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        OverfitConfig {
            steps: 500,
            batch_size: 2,
            sgd: SgdConfig::default(),
            schedule: LrSchedule::Constant,
            pass_ratio: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    /// Mean loss over the whole task after each optimizer step.
    pub trace: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub passed: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mean per-sample loss over the task, batch norm in train mode.
pub fn task_loss(model: &ToyDetector, task: &ToyTask) -> Result<f64, TensorError> {
    let mut s = 0.0;
    for sample in &task.samples {
        s += model.eval_loss(sample, NormMode::Train)?;
    }
    Ok(s / task.samples.len() as f64)
}

/// Trains `model` on the task with minibatches drawn in fixed cyclic order.
pub fn overfit_toy(
    task: &ToyTask,
    model: &mut ToyDetector,
    cfg: &OverfitConfig,
) -> Result<OverfitReport, TrainError> {
    let n = task.samples.len();
    if n == 0 || n > MAX_OVERFIT_SAMPLES {
        return Err(TensorError::Config(format!(
            "overfit needs 1..={MAX_OVERFIT_SAMPLES} samples, got {n}"
        ))
        .into());
    }
    if cfg.batch_size == 0 {
        return Err(TensorError::Config("batch_size must be positive".into()).into());
    }
    let initial_loss = task_loss(model, task)?;
    if !initial_loss.is_finite() {
        return Err(TrainError::Divergence {
            step: 0,
            loss: initial_loss,
        });
    }
    let mut opt = SgdState::new(cfg.sgd);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut cursor = 0;
    for step in 0..cfg.steps {
        let mut acc: Option<Vec<Tensor>> = None;
        for _ in 0..cfg.batch_size {
            let sample = &task.samples[cursor % n];
            cursor += 1;
            let mut tape = Tape::new();
            let vars = model.leaves(&mut tape);
            let pass = model.sample_loss(&mut tape, &vars, sample, NormMode::Train)?;
            let l = tape.value(pass.loss).data()[0];
            if !l.is_finite() {
                return Err(TrainError::Divergence { step, loss: l });
            }
            let seed = Tensor::scalar(1.0 / cfg.batch_size as f64);
            let grads = tape.backward_with(pass.loss, seed)?;
            let g = model.grads_in_order(&vars, &grads);
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| {
                    a.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(x, y)| *x += y)
                }),
            }
            if let (Some(p), Some(tr)) = (model.sfm.as_mut(), pass.sfm.as_ref()) {
                p.update_running_stats(&tape, tr);
            }
        }
        let grads = acc.expect("batch_size > 0");
        let mut params = model.params_mut();
        opt.step(&mut params, &grads)?;
        let l = task_loss(model, task)?;
        if !l.is_finite() {
            return Err(TrainError::Divergence { step, loss: l });
        }
        trace.push(l);
    }
    let final_loss = trace.last().copied().unwrap_or(initial_loss);
    Ok(OverfitReport {
        passed: final_loss < cfg.pass_ratio * initial_loss,
        trace,
        initial_loss,
        final_loss,
    })
}

/// Writes `step,loss` rows with a header line.
pub fn write_trace_csv<W: Write>(mut w: W, trace: &[f64]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, l)?;
    }
    Ok(())
}
