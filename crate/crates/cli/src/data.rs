use iffnn::datasets::{filter_two_class, load_inben, load_mnist_dir, split_validation, DatasetSplit};
use serde::{Deserialize, Serialize};

use crate::config::DatasetRef;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDigest {
    pub size: usize,
    pub digest: String,
}

impl SplitDigest {
    fn of(split: &DatasetSplit) -> Self {
        Self {
            size: split.len(),
            digest: split.digest_hex(),
        }
    }
}

/// Identifies the exact examples a run saw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDigests {
    pub kind: String,
    /// SHA-256 of the container file, for INBEN.
    pub file: Option<String>,
    pub train: SplitDigest,
    pub valid: SplitDigest,
    pub test: SplitDigest,
}

/// Train / validation / test splits ready for a model.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: DatasetSplit,
    pub valid: DatasetSplit,
    pub test: DatasetSplit,
    /// Ground-truth feature sets of the test examples, for INBEN.
    pub test_ground_truth: Option<Vec<Vec<usize>>>,
    pub digests: DatasetDigests,
}

/// Validation size used when the config does not set one: 10,000 for the
/// full 60,000-example MNIST training set, one sixth otherwise.
pub fn default_valid_size(train_len: usize) -> usize {
    (train_len + 3) / 6
}

pub fn prepare(dataset: &DatasetRef, valid_size: Option<usize>, valid_seed: u64) -> Result<PreparedData, CliError> {
    let (train, valid, test, gt, file) = match dataset {
        DatasetRef::Mnist(dir) | DatasetRef::MnistPair(dir, ..) => {
            let (full, test) = load_mnist_dir(dir)?;
            let n_valid = valid_size.unwrap_or_else(|| default_valid_size(full.len()));
            let (train, valid) = split_validation(&full, n_valid, valid_seed)?;
            match *dataset {
                DatasetRef::MnistPair(_, a, b) => (
                    filter_two_class(&train, a, b)?,
                    filter_two_class(&valid, a, b)?,
                    filter_two_class(&test, a, b)?,
                    None,
                    None,
                ),
                _ => (train, valid, test, None, None),
            }
        }
        DatasetRef::Inben(path) => {
            let data = load_inben(path)?;
            (
                data.train.split,
                data.valid.split,
                data.test.split,
                Some(data.test.ground_truth),
                Some(data.file_digest),
            )
        }
    };
    let digests = DatasetDigests {
        kind: dataset.kind(),
        file,
        train: SplitDigest::of(&train),
        valid: SplitDigest::of(&valid),
        test: SplitDigest::of(&test),
    };
    Ok(PreparedData {
        train,
        valid,
        test,
        test_ground_truth: gt,
        digests,
    })
}
