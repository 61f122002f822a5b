//! The expert pool and the online training loop.
//!
//! Exactly one expert is active at a time. For every incoming batch the active expert's loss is
//! smoothed tentatively and compared to its threshold. Without a deviation the expert keeps the
//! batch. On a deviation every expert is probed in creation order with the batch; the first one
//! whose candidate smoothed loss stays below its own threshold becomes active, and if none does a
//! fresh expert is created. Only the expert that ends up training on the batch commits a smoothed
//! loss and a window entry, so dormant experts keep the state they had when they were last
//! trained.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::buffers::{PruneSample, ReservoirBuffer, SelectorSample};
use crate::drift::{get_threshold, update_smoothed, DetectorConfig, LossWindow, SmoothedLoss};
use crate::error::{Result, TameError};
use crate::nn::{sgd_step, Gradients, LayerSpec, Network, SgdConfig, Velocity};
use crate::tensor::Tensor;
use crate::wire::*;

/// A labelled minibatch as seen by the learner. It carries no task identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Layer layout used for every new expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertArchitecture {
    pub input_shape: Vec<usize>,
    pub specs: Vec<LayerSpec>,
}

#[derive(Debug, Clone)]
pub struct ExpertState {
    id: usize,
    net: Network,
    smoothed: SmoothedLoss,
    window: LossWindow,
    velocity: Velocity,
    updates: usize,
}

impl ExpertState {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn smoothed(&self) -> SmoothedLoss {
        self.smoothed
    }

    pub fn window(&self) -> &LossWindow {
        &self.window
    }

    pub fn threshold(&self, min_fill: usize) -> Option<f64> {
        get_threshold(&self.window, min_fill)
    }

    /// Number of SGD steps this expert has taken.
    pub fn updates(&self) -> usize {
        self.updates
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Stay,
    SwitchTo(usize),
    Create,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    None,
    Switch,
    Create,
}

impl StepEvent {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepEvent::None => "none",
            StepEvent::Switch => "switch",
            StepEvent::Create => "create",
        }
    }
}

/// Detector and training outcome for one batch. Losses and threshold refer to the expert that
/// trained on the batch; the threshold is the one its window gave before this batch was added.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub expert_id: usize,
    pub raw_loss: f64,
    pub smoothed_loss: f64,
    pub threshold: Option<f64>,
    /// Whether the previously active expert deviated on this batch.
    pub fired: bool,
    pub event: StepEvent,
}

/// Selector buffer plus one prune buffer per expert, filled from the stream.
#[derive(Debug, Clone)]
pub struct StreamBuffers {
    pub selector: ReservoirBuffer<SelectorSample>,
    pub prune: Vec<ReservoirBuffer<PruneSample>>,
    prune_capacity: usize,
    seed: u64,
}

impl StreamBuffers {
    pub fn new(selector_capacity: usize, prune_capacity: usize, seed: u64) -> Self {
        StreamBuffers {
            selector: ReservoirBuffer::new(selector_capacity, seed),
            prune: Vec::new(),
            prune_capacity,
            seed,
        }
    }

    pub fn prune_capacity(&self) -> usize {
        self.prune_capacity
    }

    /// Makes sure a prune buffer exists for `expert_id`.
    pub fn register(&mut self, expert_id: usize) {
        while self.prune.len() <= expert_id {
            let id = self.prune.len() as u64;
            self.prune.push(ReservoirBuffer::new(
                self.prune_capacity,
                self.seed.wrapping_add(id + 1),
            ));
        }
    }

    /// Offers every sample of `batch` to the selector buffer (labelled with `expert_id`) and to
    /// that expert's prune buffer, using one shared priority per sample.
    pub fn offer_batch(
        &mut self,
        batch: &Batch,
        expert_id: usize,
        priorities: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.register(expert_id);
        let item_shape = batch.x.item_shape().to_vec();
        for (i, &y) in batch.y.iter().enumerate() {
            let priority: f32 = StandardNormal.sample(priorities);
            let row = batch.x.row(i);
            self.selector.insert_with(priority, || SelectorSample {
                x: Tensor::new(item_shape.clone(), row.to_vec()).expect("row matches item shape"),
                expert_id,
            });
            self.prune[expert_id].insert_with(priority, || PruneSample {
                x: Tensor::new(item_shape.clone(), row.to_vec()).expect("row matches item shape"),
                y,
            });
        }
        Ok(())
    }

    /// Copy with every prune buffer cut down to its `capacity` highest-priority entries.
    pub fn with_prune_capacity(&self, capacity: usize) -> StreamBuffers {
        StreamBuffers {
            selector: self.selector.clone(),
            prune: self.prune.iter().map(|b| b.truncated(capacity)).collect(),
            prune_capacity: capacity,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpertPool {
    architecture: ExpertArchitecture,
    detector: DetectorConfig,
    sgd: SgdConfig,
    warmup_steps: usize,
    experts: Vec<ExpertState>,
    active: usize,
    steps: usize,
    init_rng: ChaCha8Rng,
    priority_rng: ChaCha8Rng,
}

impl ExpertPool {
    /// An empty pool; the first expert is created by the first call to
    /// [`ExpertPool::add_expert`] or [`ExpertPool::step`].
    pub fn new(
        architecture: ExpertArchitecture,
        detector: DetectorConfig,
        sgd: SgdConfig,
        seed: u64,
    ) -> Result<Self> {
        detector.validate()?;
        sgd.validate()?;
        // Fail early on an architecture that cannot be built.
        Network::zeroed(architecture.input_shape.clone(), &architecture.specs)?;
        Ok(ExpertPool {
            architecture,
            detector,
            sgd,
            warmup_steps: 0,
            experts: Vec::new(),
            active: 0,
            steps: 0,
            init_rng: ChaCha8Rng::seed_from_u64(seed),
            priority_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        })
    }

    /// Ramps every new expert's learning rate linearly from `lr / steps` to `lr` over its first
    /// `steps` updates.
    pub fn with_warmup(mut self, steps: usize) -> Self {
        self.warmup_steps = steps;
        self
    }

    pub fn experts(&self) -> &[ExpertState] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [ExpertState] {
        &mut self.experts
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn active_id(&self) -> usize {
        self.active
    }

    pub fn detector(&self) -> &DetectorConfig {
        &self.detector
    }

    pub fn architecture(&self) -> &ExpertArchitecture {
        &self.architecture
    }

    /// Number of batches consumed by [`ExpertPool::step`].
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Appends a freshly initialised expert with id `len()` and makes it active.
    pub fn add_expert(&mut self) -> Result<usize> {
        let id = self.experts.len();
        let net = Network::new(
            self.architecture.input_shape.clone(),
            &self.architecture.specs,
            &mut self.init_rng,
        )?;
        let velocity = Velocity::zeros_like(&net);
        self.experts.push(ExpertState {
            id,
            net,
            smoothed: SmoothedLoss::absent(),
            window: LossWindow::new(self.detector.window_size),
            velocity,
            updates: 0,
        });
        self.active = id;
        Ok(id)
    }

    fn ensure_expert(&mut self) -> Result<()> {
        if self.experts.is_empty() {
            self.add_expert()?;
        }
        Ok(())
    }

    /// Decision for a batch on which the active expert's raw loss is `active_loss`. Read-only.
    fn decide(&self, batch: &Batch, active_loss: f64) -> Result<Decision> {
        let active = &self.experts[self.active];
        let tentative = update_smoothed(active.smoothed, active_loss, self.detector.alpha)?;
        let threshold = active.threshold(self.detector.min_fill);
        if !threshold.is_some_and(|t| tentative.value().expect("just updated") > t) {
            return Ok(Decision::Stay);
        }
        self.probe(batch, Some((self.active, active_loss)))
    }

    /// Probes every expert in creation order and returns the first whose candidate smoothed loss
    /// `alpha · L_e + (1 − alpha) · L_s` is below its own threshold. Experts without a smoothed
    /// loss or with an under-filled window are skipped. `known` supplies an already computed
    /// loss for one expert.
    pub fn probe(&self, batch: &Batch, known: Option<(usize, f64)>) -> Result<Decision> {
        for e in &self.experts {
            let Some(threshold) = e.threshold(self.detector.min_fill) else {
                continue;
            };
            if e.smoothed.value().is_none() {
                continue;
            }
            let loss = match known {
                Some((id, loss)) if id == e.id => loss,
                _ => e.net.loss(&batch.x, &batch.y)? as f64,
            };
            if e.smoothed.candidate(loss, self.detector.alpha) < threshold {
                return Ok(Decision::SwitchTo(e.id));
            }
        }
        Ok(Decision::Create)
    }

    /// Detects a deviation of the active expert on `batch` and applies the outcome of the probe:
    /// switches the active expert or creates a new one. No expert's detector state changes.
    pub fn probe_and_switch(&mut self, batch: &Batch) -> Result<Decision> {
        self.ensure_expert()?;
        let loss = self.experts[self.active].net.loss(&batch.x, &batch.y)? as f64;
        let decision = self.decide(batch, loss)?;
        self.apply(decision)?;
        Ok(decision)
    }

    fn apply(&mut self, decision: Decision) -> Result<()> {
        match decision {
            Decision::Stay => {}
            Decision::SwitchTo(id) => self.active = id,
            Decision::Create => {
                self.add_expert()?;
            }
        }
        Ok(())
    }

    /// One SGD step of the active expert on `batch`, committing the batch loss to its smoothed
    /// loss and window. Returns `(raw loss, smoothed loss, threshold before the update)`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<(f64, f64, Option<f64>)> {
        self.ensure_expert()?;
        let (loss, grads) = self.experts[self.active]
            .net
            .loss_and_grads(&batch.x, &batch.y)?;
        self.commit_and_train(loss as f64, &grads)
    }

    fn commit_and_train(
        &mut self,
        loss: f64,
        grads: &Gradients,
    ) -> Result<(f64, f64, Option<f64>)> {
        let min_fill = self.detector.min_fill;
        let alpha = self.detector.alpha;
        let mut sgd = self.sgd;
        let warmup = self.warmup_steps;
        let e = &mut self.experts[self.active];
        let threshold = e.threshold(min_fill);
        e.smoothed = update_smoothed(e.smoothed, loss, alpha)?;
        e.window.push(loss);
        if e.updates < warmup {
            sgd.learning_rate *= (e.updates + 1) as f32 / warmup as f32;
        }
        sgd_step(&mut e.net, grads, &sgd, &mut e.velocity)?;
        e.updates += 1;
        Ok((loss, e.smoothed.value().expect("just updated"), threshold))
    }

    /// Consumes one batch: detection, probe/switch/create, one training step on the resulting
    /// active expert, and buffer sampling.
    pub fn step(&mut self, batch: &Batch, buffers: &mut StreamBuffers) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(TameError::config("empty batch"));
        }
        self.ensure_expert()?;
        let (loss, grads) = self.experts[self.active]
            .net
            .loss_and_grads(&batch.x, &batch.y)?;
        let loss = loss as f64;
        let decision = self.decide(batch, loss)?;
        let (raw, smoothed, threshold) = match decision {
            Decision::Stay => self.commit_and_train(loss, &grads)?,
            other => {
                self.apply(other)?;
                self.train_step(batch)?
            }
        };
        let event = match decision {
            Decision::Stay => StepEvent::None,
            Decision::SwitchTo(_) => StepEvent::Switch,
            Decision::Create => StepEvent::Create,
        };
        buffers.offer_batch(batch, self.active, &mut self.priority_rng)?;
        let record = StepRecord {
            step: self.steps,
            expert_id: self.active,
            raw_loss: raw,
            smoothed_loss: smoothed,
            threshold,
            fired: decision != Decision::Stay,
            event,
        };
        self.steps += 1;
        Ok(record)
    }

    /// Runs [`ExpertPool::step`] over every batch in order and returns the per-step records.
    pub fn run_stream<I>(
        &mut self,
        batches: I,
        buffers: &mut StreamBuffers,
    ) -> Result<Vec<StepRecord>>
    where
        I: IntoIterator<Item = Batch>,
    {
        batches
            .into_iter()
            .map(|batch| self.step(&batch, buffers))
            .collect()
    }

    /// Writes `"TPOL" version:u32 expert_count:u32 active_id:u32` followed by every expert's
    /// network checkpoint in id order.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let nets: Vec<&Network> = self.experts.iter().map(|e| &e.net).collect();
        write_pool_checkpoint(w, self.active, &nets)
    }

    /// Reads the networks of a pool checkpoint: `(active_id, networks)`.
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(usize, Vec<Network>)> {
        read_magic(r, b"TPOL")?;
        let version = read_u32(r)?;
        if version != 1 {
            return Err(TameError::format(format!(
                "unsupported pool version {version}"
            )));
        }
        let count = read_len(r)?;
        let active = read_len(r)?;
        if count > 0 && active >= count {
            return Err(TameError::format(format!(
                "active expert {active} out of range for {count} experts"
            )));
        }
        let nets = (0..count)
            .map(|_| Network::read_checkpoint(r))
            .collect::<Result<Vec<_>>>()?;
        Ok((active, nets))
    }
}

/// Writes networks in the pool checkpoint layout of [`ExpertPool::write_checkpoint`].
pub fn write_pool_checkpoint<W: Write>(w: &mut W, active: usize, nets: &[&Network]) -> Result<()> {
    w.write_all(b"TPOL")?;
    write_u32(w, 1)?;
    write_len(w, nets.len())?;
    write_len(w, active)?;
    for net in nets {
        net.write_checkpoint(w)?;
    }
    Ok(())
}
