//! 3D segmentation network with semantic-guided skip connections and
//! boundary-aware supervision, plus the data, training and evaluation
//! harness around it.
//!
//! Tensors are plain `Vec`s in `(batch, channel, height, width, depth)`
//! order. Training runs in `f32`; gradient checks use `f64`.

pub mod boundary;
pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod mhd;
pub mod network;
pub mod optim;
pub mod phantom;
pub mod scalar;
pub mod sg;
pub mod volume;

pub use boundary::{BoundaryTargets, OrganTaxonomy, SoftenConfig};
pub use error::{Error, Result};
pub use experiment::{AblationFlags, ExperimentConfig};
pub use losses::{LossBreakdown, LossConfig};
pub use metrics::{CaseMetrics, MetricsReport};
pub use network::{Network, NetworkConfig, NetworkOutputs};
pub use optim::OptimConfig;
pub use phantom::{PhantomConfig, SegSample};
pub use scalar::Scalar;
pub use sg::{FusionMode, SgModuleParams};
pub use volume::{FeatureVolume, LabelVolume, Spacing};
