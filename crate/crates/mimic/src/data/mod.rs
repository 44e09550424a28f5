//! Dataset ingestion, resampling, normalization and augmentation.

mod augment;
mod dataset;
mod ops;
pub mod synth;

pub use augment::{augment, AugmentPolicy};
pub use dataset::{
    load_dataset, save_labeled, save_pool, DataError, DatasetFile, LabeledDataset, UnlabeledPool,
};
pub use ops::{denormalize, downsample, normalize, ChannelStats};
