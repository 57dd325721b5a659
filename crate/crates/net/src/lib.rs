//! Segmentation network for grid patterns: a reduced U-Net, its training
//! loop and checkpoint format.

pub mod arch;
pub mod checkpoint;
pub mod error;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod train;

pub use arch::ArchSpec;
pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint};
pub use error::{NetError, Result};
pub use model::{build_model, forward, ParamSet};
pub use train::{evaluate, predict_full, train, train_on, EpochRecord, HyperParams};
