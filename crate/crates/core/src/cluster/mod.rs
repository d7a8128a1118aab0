//! Synthetic imbalanced clustering with pseudo-label self-training.

mod buffer;
mod dataset;
mod model;
mod quality;
mod train;

pub use buffer::{MemoryBuffer, Stacked};
pub use dataset::{class_sizes, generate_imbalanced_mixture, DatasetConfig, SyntheticDataset};
pub use model::{cross_entropy, swapped_loss, PrototypeModel};
pub use quality::{pseudo_label_quality, PseudoLabelQuality};
pub use train::{hard_labels, train, EpochRecord, RunHistory, SolverChoice, StepRecord, TrainConfig};
