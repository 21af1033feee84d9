//! CIFAR-10 binary format reader.
//!
//! Each record is 3073 bytes: one label byte (0-9) followed by 1024 red,
//! 1024 green and 1024 blue bytes, each plane row-major 32x32. Pixels map
//! to `byte / 255`, giving a `[n, 3, 32, 32]` channel-first batch.

use std::path::{Path, PathBuf};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::nn::LabeledBatch;

const RECORD_BYTES: usize = 3073;
const PIXELS: usize = 3072;

/// Loads and concatenates one or more `.bin` files.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledBatch> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path: &Path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        if bytes.len() % RECORD_BYTES != 0 {
            let offset = (bytes.len() / RECORD_BYTES * RECORD_BYTES) as u64;
            return Err(Error::FormatAtByte {
                offset,
                msg: format!(
                    "{}: truncated record, {} trailing bytes",
                    path.display(),
                    bytes.len() % RECORD_BYTES
                ),
            });
        }
        for (rec, chunk) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
            let label = chunk[0];
            if label > 9 {
                return Err(Error::FormatAtByte {
                    offset: (rec * RECORD_BYTES) as u64,
                    msg: format!("{}: label byte {label} > 9", path.display()),
                });
            }
            labels.push(label as usize);
            data.extend(chunk[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    debug_assert_eq!(data.len(), n * PIXELS);
    LabeledBatch::new(DenseArray::new(vec![n, 3, 32, 32], data)?, labels)
}

/// Convenience for the usual `data_batch_*.bin` naming.
pub fn cifar10_train_paths(dir: &Path) -> Vec<PathBuf> {
    (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
}
