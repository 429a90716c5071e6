//! Data ingestion, preprocessing, splits and generated corpora.

pub mod dataset;
pub mod image;
pub mod split;
pub mod synthetic;
pub mod transform;

pub use dataset::{list_images, load_dataset, Dataset, Sample};
pub use split::{kfold_split, split_train_test, SplitPlan};
pub use transform::{augment, preprocess, Preprocess};
