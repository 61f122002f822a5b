//! Task-agnostic continual learning with a pool of expert networks.
//!
//! A stream of labelled batches is consumed without task identities. The active expert's batch
//! loss is smoothed with an exponentially weighted moving average and compared against a
//! mean + 3σ threshold over a window of its recent raw losses. A significant deviation triggers a
//! probe of all existing experts; the first one whose smoothed loss would stay under its own
//! threshold takes over, otherwise a new expert is created. Reservoir buffers collect a uniform
//! subsample of the stream for training a selector network (input → expert id) and for
//! retraining the experts after L1 magnitude pruning.

pub mod buffers;
pub mod drift;
pub mod error;
pub mod experts;
pub mod harness;
pub mod nn;
pub mod selector;
pub mod tensor;
mod wire;

pub use buffers::{PruneSample, ReservoirBuffer, SelectorSample};
pub use drift::{DetectorConfig, LossWindow, SmoothedLoss};
pub use error::{Result, TameError};
pub use experts::{Batch, ExpertPool, ExpertState, StepEvent, StepRecord};
pub use nn::{Network, SgdConfig};
pub use selector::{PruneConfig, SelectorNet};
pub use tensor::Tensor;
