//! Files written by a run and the checkpoint reader used by `eval`.
//!
//! CSV floats use six significant digits in the style of C's `%g`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::json;

use crate::error::{Result, StageContext, TameError};
use crate::experts::{write_pool_checkpoint, ExpertPool, StepRecord};
use crate::nn::Network;
use crate::selector::SelectorNet;

use super::config::ExperimentConfig;
use super::eval::{evaluate, mean_defined, AccuracyMatrix, PredictionRecord};
use super::experiment::{load_data, prepare_stream, ExperimentResult};

/// `%g` with six significant digits.
pub fn g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const TRACE_HEADER: &str = "step,task,expert_id,raw_loss,smoothed_loss,threshold,fired,event";

pub fn write_trace<W: Write>(w: &mut W, trace: &[StepRecord], step_tasks: &[usize]) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for (r, t) in trace.iter().zip(step_tasks) {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.step,
            t,
            r.expert_id,
            g6(r.raw_loss),
            g6(r.smoothed_loss),
            r.threshold.map(g6).unwrap_or_default(),
            u8::from(r.fired),
            r.event.as_str()
        )?;
    }
    Ok(())
}

/// One row per segment: `segment,task,acc_task_0,...`; undefined cells are empty.
pub fn write_acc_matrix<W: Write>(w: &mut W, m: &AccuracyMatrix) -> Result<()> {
    let cols: Vec<String> = (0..m.tasks()).map(|i| format!("task_{i}")).collect();
    writeln!(w, "segment,task,{}", cols.join(","))?;
    for (j, row) in m.rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.map(g6).unwrap_or_default()).collect();
        writeln!(w, "{j},{},{}", m.segment_tasks[j], cells.join(","))?;
    }
    Ok(())
}

pub fn write_predictions<W: Write>(w: &mut W, log: &[PredictionRecord]) -> Result<()> {
    writeln!(w, "task,sample,expert,truth,predicted")?;
    for r in log {
        let pred = if r.predicted == usize::MAX {
            -1
        } else {
            r.predicted as i64
        };
        writeln!(
            w,
            "{},{},{},{},{}",
            r.task, r.sample, r.expert, r.truth, pred
        )?;
    }
    Ok(())
}

pub fn summary_json(r: &ExperimentResult) -> serde_json::Value {
    json!({
        "acc": r.acc,
        "pre_prune_acc": r.pre_prune_acc,
        "oracle_acc": r.oracle_acc,
        "selector_accuracy": r.selector_accuracy,
        "expert_count": r.expert_count,
        "create_events": r.create_events,
        "switch_events": r.switch_events,
        "steps": r.trace.len(),
        "total_params": r.total_params,
        "surviving_params": r.surviving_params,
        "final_row": r.matrix.final_row(),
        "expert_tasks": r.expert_tasks,
        "cp": r.cp,
        "cs": r.config.cs,
        "alpha": r.config.detector.alpha,
        "stream": r.config.stream.kind.as_str(),
        "wall_time_s": r.wall_time_s,
        "seeds": {
            "master": r.config.seed,
            "stream": r.seeds.stream,
            "pool": r.seeds.pool,
            "buffers": r.seeds.buffers,
            "selector": r.seeds.selector,
            "retrain": r.seeds.retrain,
        },
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes `trace.csv`, `acc_matrix.csv`, `predictions.csv`, `summary.json` and `checkpoints/`.
pub fn write_all(dir: &Path, r: &ExperimentResult) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    let mut w = create(&dir.join("trace.csv"))?;
    write_trace(&mut w, &r.trace, &r.step_tasks)?;
    w.flush()?;
    let mut w = create(&dir.join("acc_matrix.csv"))?;
    write_acc_matrix(&mut w, &r.matrix)?;
    w.flush()?;
    let mut w = create(&dir.join("predictions.csv"))?;
    write_predictions(&mut w, &r.predictions)?;
    w.flush()?;
    let summary = serde_json::to_string_pretty(&summary_json(r))
        .map_err(|e| TameError::format(e.to_string()))?;
    fs::write(dir.join("summary.json"), summary + "\n")?;
    write_checkpoint_dir(&dir.join("checkpoints"), r)
}

fn write_checkpoint_dir(dir: &Path, r: &ExperimentResult) -> Result<()> {
    let mut w = create(&dir.join("pool.bin"))?;
    let nets: Vec<&Network> = r.experts.iter().collect();
    write_pool_checkpoint(&mut w, r.active_expert, &nets)?;
    w.flush()?;
    let mut w = create(&dir.join("selector.bin"))?;
    r.selector.net().write_checkpoint(&mut w)?;
    w.flush()?;
    let maps =
        serde_json::to_string(&r.label_maps).map_err(|e| TameError::format(e.to_string()))?;
    fs::write(dir.join("label_maps.json"), maps)?;
    fs::write(dir.join("config.txt"), r.config.to_kv_string())?;
    Ok(())
}

/// Trained artifacts read back from a checkpoint directory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub experts: Vec<Network>,
    pub selector: SelectorNet,
    pub label_maps: Vec<Vec<usize>>,
}

/// Reads `dir`, which may be a run directory or its `checkpoints/` subdirectory.
pub fn read_checkpoint_dir(dir: &Path) -> Result<Checkpoint> {
    let dir = if dir.join("checkpoints").is_dir() {
        dir.join("checkpoints")
    } else {
        dir.to_path_buf()
    };
    let config = ExperimentConfig::parse_str(&fs::read_to_string(dir.join("config.txt"))?)?;
    let (_, experts) =
        ExpertPool::read_checkpoint(&mut fs::read(dir.join("pool.bin"))?.as_slice())?;
    let selector = SelectorNet::from_network(Network::read_checkpoint(
        &mut fs::read(dir.join("selector.bin"))?.as_slice(),
    )?);
    let label_maps: Vec<Vec<usize>> =
        serde_json::from_str(&fs::read_to_string(dir.join("label_maps.json"))?)
            .map_err(|e| TameError::format(format!("label_maps.json: {e}")))?;
    if label_maps.len() != experts.len() || selector.experts() != experts.len() {
        return Err(TameError::format(format!(
            "checkpoint holds {} experts, {} label maps and a selector for {} experts",
            experts.len(),
            label_maps.len(),
            selector.experts()
        )));
    }
    Ok(Checkpoint {
        config,
        experts,
        selector,
        label_maps,
    })
}

/// Rebuilds the test sets of a checkpointed run and evaluates its final system on every task of
/// the stream. Returns the accuracy row and ACC.
pub fn evaluate_checkpoint(dir: &Path, data_dir: Option<&Path>) -> Result<(Vec<Option<f64>>, f64)> {
    let mut ck = read_checkpoint_dir(dir).stage("reading checkpoint")?;
    if let Some(d) = data_dir {
        ck.config.data_dir = d.to_path_buf();
    }
    let data = load_data(&ck.config)?;
    let stream = prepare_stream(&ck.config, data.as_ref())?;
    let matrix = AccuracyMatrix::new(stream.segment_tasks(), stream.tasks.len());
    let seen = matrix.seen_through(stream.segments.len() - 1);
    let (row, _) = evaluate(
        Some(&ck.selector),
        &ck.experts,
        &ck.label_maps,
        &stream.tasks,
        &seen,
        None,
    )
    .stage("evaluation")?;
    let acc = mean_defined(&row);
    Ok((row, acc))
}
