//! Accuracy matrix, ACC, routing diagnostics and per-sample prediction logs.

use crate::error::{Result, TameError};
use crate::experts::StepRecord;
use crate::nn::Network;
use crate::selector::{predict_routed, SelectorNet};

use super::stream::TaskInfo;

/// `rows[j][i]`: accuracy on task `i` after segment `j`; `None` before task `i` first appears.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    pub segment_tasks: Vec<usize>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(segment_tasks: Vec<usize>, tasks: usize) -> Self {
        let rows = vec![vec![None; tasks]; segment_tasks.len()];
        AccuracyMatrix {
            segment_tasks,
            rows,
        }
    }

    pub fn tasks(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Tasks that occur in segments `0..=segment`.
    pub fn seen_through(&self, segment: usize) -> Vec<bool> {
        let mut seen = vec![false; self.tasks()];
        for &t in &self.segment_tasks[..=segment] {
            seen[t] = true;
        }
        seen
    }

    pub fn final_row(&self) -> &[Option<f64>] {
        self.rows.last().map_or(&[], Vec::as_slice)
    }

    /// Mean of the defined entries of the final row.
    pub fn acc(&self) -> f64 {
        mean_defined(self.final_row())
    }
}

pub fn mean_defined(row: &[Option<f64>]) -> f64 {
    let vals: Vec<f64> = row.iter().flatten().copied().collect();
    if vals.is_empty() {
        return 0.0;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionRecord {
    pub task: usize,
    pub sample: usize,
    pub expert: usize,
    pub truth: usize,
    pub predicted: usize,
}

/// Expert → majority ground-truth task among the batches it trained on, or `None` for an expert
/// that never trained.
pub fn expert_tasks(
    trace: &[StepRecord],
    step_tasks: &[usize],
    experts: usize,
) -> Vec<Option<usize>> {
    let tasks = step_tasks.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; tasks]; experts];
    for (r, &t) in trace.iter().zip(step_tasks) {
        if r.expert_id < experts {
            counts[r.expert_id][t] += 1;
        }
    }
    counts
        .iter()
        .map(|c| {
            // Ties go to the earlier task.
            let (best, &n) = c.iter().enumerate().rev().max_by_key(|&(_, &n)| n)?;
            (n > 0).then_some(best)
        })
        .collect()
}

/// Local-to-global label map for every expert, taken from its majority task.
pub fn label_maps(expert_tasks: &[Option<usize>], tasks: &[TaskInfo]) -> Vec<Vec<usize>> {
    expert_tasks
        .iter()
        .map(|t| {
            t.and_then(|t| tasks.get(t))
                .map_or_else(Vec::new, |i| i.label_map.clone())
        })
        .collect()
}

/// Per-task accuracy of the routed system on every task marked in `seen`, plus the per-sample
/// log. `routes` supplies the expert per test row of each task; `None` uses the selector.
pub fn evaluate(
    selector: Option<&SelectorNet>,
    experts: &[Network],
    label_maps: &[Vec<usize>],
    tasks: &[TaskInfo],
    seen: &[bool],
    oracle: Option<&[Option<usize>]>,
) -> Result<(Vec<Option<f64>>, Vec<PredictionRecord>)> {
    let mut row = vec![None; tasks.len()];
    let mut log = Vec::new();
    for (t, info) in tasks.iter().enumerate() {
        if !seen.get(t).copied().unwrap_or(false) {
            continue;
        }
        let n = info.test_y.len();
        let routes = match (oracle, selector) {
            (Some(expert_tasks), _) => {
                let e = expert_tasks
                    .iter()
                    .position(|&et| et == Some(t))
                    .unwrap_or(usize::MAX);
                vec![e; n]
            }
            (None, Some(sel)) => sel.route(&info.test_x)?,
            (None, None) => {
                return Err(TameError::config(
                    "evaluation needs a selector or oracle routes",
                ))
            }
        };
        let predicted = predict_routed(experts, &info.test_x, &routes, label_maps)?;
        let correct = predicted
            .iter()
            .zip(&info.test_y)
            .filter(|(p, y)| p == y)
            .count();
        row[t] = Some(if n == 0 {
            0.0
        } else {
            correct as f64 / n as f64
        });
        log.extend((0..n).map(|i| PredictionRecord {
            task: t,
            sample: i,
            expert: routes[i],
            truth: info.test_y[i],
            predicted: predicted[i],
        }));
    }
    Ok((row, log))
}

/// Fraction of test inputs the selector sends to an expert whose majority task is the input's
/// own task.
pub fn selector_accuracy(log: &[PredictionRecord], expert_tasks: &[Option<usize>]) -> f64 {
    if log.is_empty() {
        return 0.0;
    }
    let hits = log
        .iter()
        .filter(|r| expert_tasks.get(r.expert).copied().flatten() == Some(r.task))
        .count();
    hits as f64 / log.len() as f64
}
