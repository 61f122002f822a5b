//! End-to-end runs: stream training, selector training, expert pruning and evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, StageContext, TameError};
use crate::experts::{ExpertPool, StepEvent, StepRecord, StreamBuffers};
use crate::nn::Network;
use crate::selector::{prune_l1, retrain_pruned, train_selector, SelectorNet};

use super::config::{ExperimentConfig, Seeds};
use super::eval::{
    evaluate, expert_tasks, label_maps, selector_accuracy, AccuracyMatrix, PredictionRecord,
};
use super::idx::{load_mnist, Mnist};
use super::report;
use super::stream::{build_stream, TaskStream};

/// State after the stream has been consumed.
#[derive(Debug, Clone)]
pub struct Trained {
    pub pool: ExpertPool,
    pub buffers: StreamBuffers,
    pub trace: Vec<StepRecord>,
    /// Ground-truth task of every consumed batch, kept for evaluation only.
    pub step_tasks: Vec<usize>,
    pub matrix: AccuracyMatrix,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub cp: usize,
    /// ACC of the final system (pruned experts, pruned selector).
    pub acc: f64,
    /// ACC before the experts are pruned.
    pub pre_prune_acc: f64,
    /// ACC of the pruned experts when every test input is routed by its true task.
    pub oracle_acc: f64,
    pub selector_accuracy: f64,
    pub expert_count: usize,
    pub create_events: usize,
    pub switch_events: usize,
    pub total_params: usize,
    pub surviving_params: usize,
    pub wall_time_s: f64,
    pub matrix: AccuracyMatrix,
    pub trace: Vec<StepRecord>,
    pub step_tasks: Vec<usize>,
    pub predictions: Vec<PredictionRecord>,
    pub expert_tasks: Vec<Option<usize>>,
    pub label_maps: Vec<Vec<usize>>,
    pub experts: Vec<Network>,
    pub selector: SelectorNet,
    pub active_expert: usize,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Option<Mnist>> {
    cfg.validate().stage("validating config")?;
    if cfg.stream.kind.needs_mnist() {
        load_mnist(&cfg.data_dir).map(Some).stage("loading data")
    } else {
        Ok(None)
    }
}

pub fn prepare_stream(cfg: &ExperimentConfig, data: Option<&Mnist>) -> Result<TaskStream> {
    let mut spec = cfg.stream.clone();
    spec.seed = cfg.seeds().stream;
    build_stream(&spec, data).stage("building stream")
}

/// Feeds every batch of `stream` to a fresh pool. Only the batches reach the pool; task ids are
/// collected on the side for evaluation.
pub fn train_stream(cfg: &ExperimentConfig, stream: &TaskStream) -> Result<Trained> {
    cfg.validate().stage("validating config")?;
    let seeds = cfg.seeds();
    let arch = cfg
        .expert_architecture(&stream.input_shape, stream.classes_per_task)
        .stage("building experts")?;
    let mut sgd = cfg.sgd;
    sgd.batch_size = stream.batch_size;
    let mut pool = ExpertPool::new(arch, cfg.detector, sgd, seeds.pool)
        .stage("building experts")?
        .with_warmup(cfg.warmup_steps);
    let mut buffers = StreamBuffers::new(cfg.cs, cfg.cp, seeds.buffers);
    let mut trace = Vec::with_capacity(stream.total_batches());
    let mut step_tasks = Vec::with_capacity(stream.total_batches());
    let mut matrix = AccuracyMatrix::new(stream.segment_tasks(), stream.tasks.len());

    let mut current = 0;
    for lb in stream.batches() {
        if lb.segment != current {
            if cfg.eval_each_segment {
                matrix.rows[current] = interim_row(
                    cfg,
                    stream,
                    &pool,
                    &buffers,
                    &trace,
                    &step_tasks,
                    &matrix,
                    current,
                )?;
            }
            current = lb.segment;
        }
        trace.push(
            pool.step(&lb.batch, &mut buffers)
                .stage("training on stream")?,
        );
        step_tasks.push(lb.task);
    }
    if trace.is_empty() {
        return Err(TameError::config(
            "the stream produced no batches; check batch_size",
        ))
        .stage("training on stream");
    }
    Ok(Trained {
        pool,
        buffers,
        trace,
        step_tasks,
        matrix,
    })
}

/// Accuracy row after `segment` with unpruned experts and a selector trained on a copy of the
/// current selector buffer.
#[allow(clippy::too_many_arguments)]
fn interim_row(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    pool: &ExpertPool,
    buffers: &StreamBuffers,
    trace: &[StepRecord],
    step_tasks: &[usize],
    matrix: &AccuracyMatrix,
    segment: usize,
) -> Result<Vec<Option<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds().selector ^ (segment as u64 + 1) << 40);
    let selector = train_selector(
        &buffers.selector,
        pool.len(),
        &cfg.selector,
        &cfg.prune,
        &mut rng,
    )
    .stage("interim selector training")?;
    let experts: Vec<Network> = pool.experts().iter().map(|e| e.net().clone()).collect();
    let et = expert_tasks(trace, step_tasks, pool.len());
    let maps = label_maps(&et, &stream.tasks);
    let (row, _) = evaluate(
        Some(&selector),
        &experts,
        &maps,
        &stream.tasks,
        &matrix.seen_through(segment),
        None,
    )
    .stage("interim evaluation")?;
    Ok(row)
}

/// Trains and prunes the selector on the selector buffer of a finished stream.
pub fn final_selector(cfg: &ExperimentConfig, trained: &Trained) -> Result<SelectorNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds().selector);
    train_selector(
        &trained.buffers.selector,
        trained.pool.len(),
        &cfg.selector,
        &cfg.prune,
        &mut rng,
    )
    .stage("selector training")
}

/// Expert pruning with prune buffers of capacity `cp` and final evaluation. `trained` is left
/// untouched, so one stream run can be finished under several capacities.
pub fn finish(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    trained: &Trained,
    selector: SelectorNet,
    cp: usize,
    started: Instant,
) -> Result<ExperimentResult> {
    let seeds = cfg.seeds();
    let pool = &trained.pool;
    let n = pool.len();
    let buffers = trained.buffers.with_prune_capacity(cp);

    let et = expert_tasks(&trained.trace, &trained.step_tasks, n);
    let maps = label_maps(&et, &stream.tasks);
    let last = stream.segments.len() - 1;
    let seen = trained.matrix.seen_through(last);

    let mut experts: Vec<Network> = pool.experts().iter().map(|e| e.net().clone()).collect();
    let total_params: usize = experts.iter().map(Network::parameter_count).sum();
    let (pre_row, _) = evaluate(Some(&selector), &experts, &maps, &stream.tasks, &seen, None)
        .stage("pre-prune evaluation")?;

    if cfg.prune.expert_rate > 0.0 {
        for (id, net) in experts.iter_mut().enumerate() {
            prune_l1(net, cfg.prune.expert_rate).stage("expert pruning")?;
            let mut rng = ChaCha8Rng::seed_from_u64(seeds.retrain.wrapping_add(id as u64));
            if let Some(buf) = buffers.prune.get(id) {
                retrain_pruned(net, buf, &cfg.prune, &mut rng).stage("expert retraining")?;
            }
        }
    }
    let surviving_params: usize = experts.iter().map(Network::parameter_count).sum();

    let (row, predictions) = evaluate(Some(&selector), &experts, &maps, &stream.tasks, &seen, None)
        .stage("evaluation")?;
    let (oracle_row, _) = evaluate(None, &experts, &maps, &stream.tasks, &seen, Some(&et))
        .stage("oracle evaluation")?;
    let mut matrix = trained.matrix.clone();
    matrix.rows[last] = row;

    let count = |ev: StepEvent| trained.trace.iter().filter(|r| r.event == ev).count();
    let mut config = cfg.clone();
    config.cp = cp;
    Ok(ExperimentResult {
        config,
        seeds,
        cp,
        acc: matrix.acc(),
        pre_prune_acc: super::eval::mean_defined(&pre_row),
        oracle_acc: super::eval::mean_defined(&oracle_row),
        selector_accuracy: selector_accuracy(&predictions, &et),
        expert_count: n,
        create_events: count(StepEvent::Create),
        switch_events: count(StepEvent::Switch),
        total_params,
        surviving_params,
        wall_time_s: started.elapsed().as_secs_f64(),
        matrix,
        trace: trained.trace.clone(),
        step_tasks: trained.step_tasks.clone(),
        predictions,
        expert_tasks: et,
        label_maps: maps,
        experts,
        selector,
        active_expert: pool.active_id(),
    })
}

/// Runs one experiment in memory and writes its artifacts when `cfg.out` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let started = Instant::now();
    let data = load_data(cfg)?;
    let stream = prepare_stream(cfg, data.as_ref())?;
    drop(data);
    let trained = train_stream(cfg, &stream)?;
    let selector = final_selector(cfg, &trained)?;
    let result = finish(cfg, &stream, &trained, selector, cfg.cp, started)?;
    if let Some(out) = &cfg.out {
        report::write_all(out, &result).stage("writing outputs")?;
    }
    Ok(result)
}

/// One result per prune-buffer capacity. The stream is consumed once: prune buffers are filled
/// at the largest capacity and cut down, which retains exactly what a smaller buffer would have.
/// Outputs go to `<out>/cp_<value>` when `cfg.out` is set.
pub fn run_cp_sweep(cfg: &ExperimentConfig, values: &[usize]) -> Result<Vec<ExperimentResult>> {
    let started = Instant::now();
    let max = *values
        .iter()
        .max()
        .ok_or_else(|| TameError::config("no sweep values"))?;
    let data = load_data(cfg)?;
    let stream = prepare_stream(cfg, data.as_ref())?;
    drop(data);
    let mut big = cfg.clone();
    big.cp = max;
    let trained = train_stream(&big, &stream)?;
    let selector = final_selector(cfg, &trained)?;
    values
        .iter()
        .map(|&cp| {
            let result = finish(cfg, &stream, &trained, selector.clone(), cp, started)?;
            if let Some(out) = &cfg.out {
                report::write_all(&out.join(format!("cp_{cp}")), &result)
                    .stage("writing outputs")?;
            }
            Ok(result)
        })
        .collect()
}

/// Independent runs with one key set to each value. Outputs go to `<out>/<key>_<value>`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    key: &str,
    values: &[String],
) -> Result<Vec<ExperimentResult>> {
    if key.eq_ignore_ascii_case("cp") {
        let caps = values
            .iter()
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| TameError::config(format!("bad cp value '{v}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        return run_cp_sweep(cfg, &caps);
    }
    values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.set(key, v)?;
            c.out = cfg
                .out
                .as_ref()
                .map(|o| o.join(format!("{key}_{}", v.trim())));
            run_experiment(&c)
        })
        .collect()
}
