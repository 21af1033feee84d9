//! Dataset ingestion and run-log persistence.
//!
//! Three sources feed [`LabeledBatch`]: seeded synthetic Gaussian blobs,
//! the CIFAR-10 binary format, and IDX image/label file pairs. Pixels
//! always come out in `[0, 1]` (bytes are mapped as `byte / 255`) with a
//! channel-first layout where channels exist. Loaders return structured
//! format errors carrying the offending byte offset; corrupt input never
//! panics.

mod cifar;
mod idx;
mod runlog;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::LabeledBatch;

pub use cifar::load_cifar10_bin;
pub use idx::load_idx;
pub use runlog::{read_run_log, run_log_from_str, run_log_to_string, write_run_log};
pub use synthetic::{gen_gaussian_blobs, SyntheticSpec};

/// Where a dataset came from; recorded in run-log headers so a run can be
/// reproduced from its header alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    GaussianBlobs(SyntheticSpec),
    Cifar10Bin {
        paths: Vec<String>,
    },
    Idx {
        images: String,
        labels: String,
        /// Reshape `[n, h, w]` to `[n, 1, h, w]` for convolutional models.
        #[serde(default)]
        channel_dim: bool,
    },
}

impl DatasetSpec {
    /// Materializes the dataset this spec describes.
    pub fn load(&self) -> Result<LabeledBatch> {
        match self {
            DatasetSpec::GaussianBlobs(spec) => gen_gaussian_blobs(spec),
            DatasetSpec::Cifar10Bin { paths } => load_cifar10_bin(paths),
            DatasetSpec::Idx { images, labels, channel_dim } => {
                let batch = load_idx(images.as_ref(), labels.as_ref())?;
                if *channel_dim {
                    batch.with_channel_dim()
                } else {
                    Ok(batch)
                }
            }
        }
    }
}
