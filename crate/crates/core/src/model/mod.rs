//! Order-equivariant set network conditioned on a support set.

mod deepsets;
mod instance;

pub use deepsets::{Architecture, DeepSetsNet, NetConfig, Prediction, DECISION_THRESHOLD};
pub use instance::{PairedInstance, SetBatch};
