use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sfmkit_core::io::{read_tensor, write_tensor};
use sfmkit_core::ops::NormMode;
use sfmkit_core::sfm::{Checkpoint, CheckpointError, SfmConfig};
use sfmkit_core::suite::{run_grad_suite, SuiteConfig};
use sfmkit_core::train::{
    make_toy_task, overfit_toy, write_trace_csv, DetectorConfig, OverfitConfig, ToyDetector,
    TrainError,
};
use sfmkit_core::OpKind;
use sfmkit_data::eval::{
    coco_map, ground_truths, gt_image_ids, orphan_image_ids, parse_detections_jsonl,
    render_report_json, render_report_text,
};
use sfmkit_data::voc::{dataset_stats, load_voc_dir, render_stats_table};

use crate::config::RunConfig;
use crate::error::{CliError, Exit};
use crate::{
    EvalArgs, ForwardArgs, GradcheckArgs, ModeArg, StatsArgs, TrainArgs, OUTPUT_SCHEMA_VERSION,
};

type Out<'a> = &'a mut dyn Write;

fn emit(out: Out, s: &str) -> Result<(), CliError> {
    out.write_all(s.as_bytes())
        .map_err(|e| CliError::io(format!("writing output: {e}")))
}

fn emit_json(out: Out, v: &serde_json::Value) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(v).expect("json value serializes");
    emit(out, &(s + "\n"))
}

fn read_file(p: &Path) -> Result<String, CliError> {
    fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))
}

pub fn gradcheck(
    a: &GradcheckArgs,
    cfg: &RunConfig,
    json: bool,
    out: Out,
) -> Result<Exit, CliError> {
    let fault = a
        .inject_fault
        .as_deref()
        .map(|s| s.parse::<OpKind>())
        .transpose()
        .map_err(|e| CliError::config(e.to_string()))?;
    if a.seeds == 0 {
        return Err(CliError::config("--seeds must be positive"));
    }
    let sc = SuiteConfig {
        seeds: a.seeds,
        base_seed: cfg.seed,
        ..SuiteConfig::default()
    };
    let report = run_grad_suite(&sc, fault).map_err(|e| CliError::config(e.to_string()))?;
    let worst = report.worst().expect("suite is never empty");
    let failures: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if json {
        emit_json(
            out,
            &json!({
                "schema_version": OUTPUT_SCHEMA_VERSION,
                "passed": report.passed(),
                "config": sc,
                "worst": worst.name,
                "failures": failures,
                "cases": report.cases,
            }),
        )?;
    } else {
        let mut s = String::new();
        for c in &report.cases {
            s += &format!(
                "{:<26} {:<5} {:>10.2e}  tol {:.0e}  {}\n",
                c.name,
                serde_json::to_value(c.group)
                    .unwrap()
                    .as_str()
                    .unwrap_or(""),
                c.max_rel_error,
                c.tolerance,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
        s += &format!("worst: {} ({:.2e})\n", worst.name, worst.max_rel_error);
        emit(out, &s)?;
    }
    if report.passed() {
        Ok(Exit::Ok)
    } else {
        log::error!("gradient check failed: {}", failures.join(", "));
        Ok(Exit::GradCheck)
    }
}

fn checkpoint_error(e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io(e) => CliError::io(e.to_string()),
        CheckpointError::Json(e) => CliError::io(format!("checkpoint: {e}")),
        CheckpointError::Mismatch(m) => CliError::config(m),
    }
}

pub fn forward(
    a: &ForwardArgs,
    heads: Option<usize>,
    json: bool,
    out: Out,
) -> Result<Exit, CliError> {
    let ckpt = Checkpoint::from_json(&read_file(&a.checkpoint)?).map_err(checkpoint_error)?;
    if let Some(h) = heads {
        if h != ckpt.config.heads {
            return Err(CliError::config(format!(
                "--heads {h} conflicts with checkpoint heads {}",
                ckpt.config.heads
            )));
        }
    }
    let params = ckpt.into_params().map_err(checkpoint_error)?;
    let file =
        File::open(&a.input).map_err(|e| CliError::io(format!("{}: {e}", a.input.display())))?;
    let (x, dtype) = read_tensor(BufReader::new(file))
        .map_err(|e| CliError::io(format!("{}: {e}", a.input.display())))?;
    let c = params.config.channels;
    if x.ndim() != 3 || x.shape()[0] != c {
        return Err(CliError::mismatch(format!(
            "input shape {:?} does not fit a block with {c} channels",
            x.shape()
        )));
    }
    let mode = match a.mode {
        ModeArg::Train => NormMode::Train,
        ModeArg::Infer => NormMode::Infer,
    };
    let y = params
        .forward(&x, mode)
        .map_err(|e| CliError::mismatch(e.to_string()))?;
    let file = File::create(&a.output)
        .map_err(|e| CliError::io(format!("{}: {e}", a.output.display())))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, &y, dtype).map_err(|e| CliError::io(e.to_string()))?;
    w.flush().map_err(|e| CliError::io(e.to_string()))?;
    if json {
        emit_json(
            out,
            &json!({
                "schema_version": OUTPUT_SCHEMA_VERSION,
                "input_shape": x.shape(),
                "output_shape": y.shape(),
                "mode": format!("{:?}", a.mode).to_lowercase(),
                "output": a.output,
            }),
        )?;
    }
    Ok(Exit::Ok)
}

pub fn train_toy(a: &TrainArgs, cfg: &RunConfig, json: bool, out: Out) -> Result<Exit, CliError> {
    if a.no_sfm && a.checkpoint.is_some() {
        return Err(CliError::config(
            "--checkpoint needs the fusion block; drop --no-sfm",
        ));
    }
    let block = SfmConfig::new(cfg.channels).with_heads(cfg.heads);
    block
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    let task = make_toy_task(cfg.seed, cfg.samples, cfg.channels, cfg.size, cfg.size)
        .map_err(|e| CliError::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut model = ToyDetector::new(
        cfg.channels,
        (!a.no_sfm).then_some(&block),
        DetectorConfig::default(),
        &mut rng,
    )
    .map_err(|e| CliError::config(e.to_string()))?;
    let oc = OverfitConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        sgd: cfg.sgd(),
        ..OverfitConfig::default()
    };
    let report = match overfit_toy(&task, &mut model, &oc) {
        Ok(r) => r,
        Err(e @ TrainError::Divergence { .. }) => {
            return Err(CliError::new(Exit::Divergence, e.to_string()))
        }
        Err(TrainError::Tensor(e)) => return Err(CliError::config(e.to_string())),
    };

    let mut csv = Vec::new();
    write_trace_csv(&mut csv, &report.trace).expect("writing to memory");
    match &a.trace {
        Some(p) => fs::write(p, &csv).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?,
        None if !json => emit(out, std::str::from_utf8(&csv).expect("ascii csv"))?,
        None => {}
    }
    if let (Some(p), Some(sfm)) = (&a.checkpoint, &model.sfm) {
        let text = Checkpoint::from_params(sfm)
            .to_json()
            .map_err(checkpoint_error)?;
        fs::write(p, text).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
    }
    log::info!(
        "loss {:.6} -> {:.6} ({:.2}% of initial) after {} steps",
        report.initial_loss,
        report.final_loss,
        100.0 * report.final_loss / report.initial_loss,
        report.trace.len()
    );
    if json {
        emit_json(
            out,
            &json!({
                "schema_version": OUTPUT_SCHEMA_VERSION,
                "settings": cfg,
                "initial_loss": report.initial_loss,
                "final_loss": report.final_loss,
                "passed": report.passed,
                "trace": report.trace,
            }),
        )?;
    }
    Ok(Exit::Ok)
}

pub fn stats(a: &StatsArgs, cfg: &RunConfig, json: bool, out: Out) -> Result<Exit, CliError> {
    let t = cfg.size_thresholds()?;
    let sets = if a.list.is_empty() {
        vec![load_voc_dir(&a.dir, None, &a.split)?]
    } else {
        a.list
            .iter()
            .map(|l| {
                let name = l
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                load_voc_dir(&a.dir, Some(l), &name)
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    let mut rows = Vec::with_capacity(sets.len());
    for set in &sets {
        for (class, n) in &set.flagged_classes {
            log::warn!("{}: {n} box(es) of unexpected class '{class}'", set.split);
        }
        if set.clamp_events > 0 {
            log::warn!(
                "{}: {} box(es) clamped to image bounds",
                set.split,
                set.clamp_events
            );
        }
        rows.push(dataset_stats(set, &t)?);
    }
    if json {
        emit_json(
            out,
            &json!({ "schema_version": OUTPUT_SCHEMA_VERSION, "splits": rows }),
        )
    } else {
        emit(out, &render_stats_table(&rows))
    }?;
    Ok(Exit::Ok)
}

pub fn eval(a: &EvalArgs, cfg: &RunConfig, json: bool, out: Out) -> Result<Exit, CliError> {
    let t = cfg.size_thresholds()?;
    let text = read_file(&a.detections)?;
    let dets = parse_detections_jsonl(&text)
        .map_err(|e| CliError::io(format!("{}: {e}", a.detections.display())))?;
    let set = load_voc_dir(&a.gt, a.list.as_deref(), "eval")?;
    let orphans = orphan_image_ids(&dets, &gt_image_ids(&set));
    if !orphans.is_empty() {
        return Err(CliError::mismatch(format!(
            "detections reference images without ground truth: {}",
            orphans.join(", ")
        )));
    }
    let report = coco_map(&dets, &ground_truths(&set), &t);
    if json {
        emit(out, &(render_report_json(&report) + "\n"))?;
    } else {
        emit(out, &render_report_text(&report))?;
    }
    Ok(Exit::Ok)
}
