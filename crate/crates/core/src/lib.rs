//! Self-debiasing calibration for generalized category discovery over
//! fixed embedding vectors.
//!
//! A biased model is pre-trained on the labeled (known) categories and
//! frozen. A second model, initialized from KMeans prototypes, is trained on
//! unlabeled data with pseudo-labels that come from balanced optimal
//! transport over logits corrected by the frozen model's outputs.

pub mod benchmark;
pub mod calibration;
pub mod clustering;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod transport;

pub use calibration::{CalibrationFlags, CalibrationState};
pub use clustering::{estimate_k, hungarian, kmeans, KMeansResult};
pub use data::{load_dataset, save_dataset, DatasetFormat, EmbeddingDataset, LabelSpace, SplitTag, SyntheticConfig};
pub use error::{Result, SdcError};
pub use evaluation::{h_score, InferenceMode, MetricsReport, Quadrants};
pub use model::{BiasedModel, Checkpoint, TrainableModel};
pub use numerics::Matrix;
pub use pipeline::{run_discovery, Arm, DiscoveryOutcome, PipelineConfig};
pub use transport::{sinkhorn_pseudo_labels, TransportPlan};
