//! In-memory labeled splits and the loaders that produce them.

mod idx;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::inben::{self, InbenDataset, InbenError, InbenSpec, LabeledSample};
use crate::tensor::{Tensor, TensorError};

pub use idx::{load_mnist_dir, load_mnist_idx, parse_idx_images, parse_idx_labels, MnistFiles};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated file: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Inben(#[from] InbenError),
}

/// An immutable set of labeled examples sharing one input shape.
///
/// Features are stored row-major in one buffer; example `i` occupies
/// `features[i * input_len .. (i + 1) * input_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    input_shape: Vec<usize>,
    classes: usize,
    features: Arc<Vec<f64>>,
    labels: Vec<usize>,
    digest: [u8; 32],
}

impl DatasetSplit {
    pub fn new(
        input_shape: &[usize],
        classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        let m: usize = input_shape.iter().product();
        if input_shape.is_empty() || m == 0 {
            return Err(DataError::Invalid(format!("input shape {input_shape:?} is empty")));
        }
        if features.len() != m * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature values for {} examples of size {m}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Label { label: bad, classes }.into());
        }
        crate::tensor::check_finite("dataset", &features)?;
        let digest = content_digest(input_shape, classes, &features, &labels);
        Ok(Self {
            input_shape: input_shape.to_vec(),
            classes,
            features: Arc::new(features),
            labels,
            digest,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn features_of(&self, i: usize) -> &[f64] {
        let m = self.input_len();
        &self.features[i * m..(i + 1) * m]
    }

    /// Example `i` as an `input_shape` tensor and its label.
    pub fn example(&self, i: usize) -> (Tensor, usize) {
        let x = Tensor::from_raw(self.input_shape.clone(), self.features_of(i).to_vec());
        (x, self.labels[i])
    }

    /// `[indices.len(), ...input_shape]` batch of the selected examples.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let m = self.input_len();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(self.features_of(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.input_shape);
        Tensor::from_raw(shape, data)
    }

    /// A new split holding the selected examples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(&self.input_shape, self.classes, self.batch(indices).to_vec(), labels)
            .expect("subset of a valid split is valid")
    }

    /// Examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// SHA-256 over the shape, class count, features and labels.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }
}

fn content_digest(shape: &[usize], classes: usize, features: &[f64], labels: &[usize]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"IFFNNDS1");
    h.update((shape.len() as u64).to_le_bytes());
    for &d in shape {
        h.update((d as u64).to_le_bytes());
    }
    h.update((classes as u64).to_le_bytes());
    h.update((labels.len() as u64).to_le_bytes());
    for v in features {
        h.update(v.to_le_bytes());
    }
    for &l in labels {
        h.update((l as u64).to_le_bytes());
    }
    h.finalize().into()
}

/// Seeded shuffle, then the first `n_valid` shuffled examples become the
/// validation split. Both outputs keep the original relative order.
pub fn split_validation(
    split: &DatasetSplit,
    n_valid: usize,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit), DataError> {
    if n_valid >= split.len() {
        return Err(DataError::Invalid(format!(
            "validation size {n_valid} must be below the split size {}",
            split.len()
        )));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut valid = order[..n_valid].to_vec();
    let mut train = order[n_valid..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    Ok((split.subset(&train), split.subset(&valid)))
}

/// Keeps the examples of classes `a` and `b`, relabeled to 0 and 1.
pub fn filter_two_class(split: &DatasetSplit, a: usize, b: usize) -> Result<DatasetSplit, DataError> {
    if a == b {
        return Err(DataError::Invalid(format!("classes must differ, got {a} twice")));
    }
    let counts = split.class_counts();
    for c in [a, b] {
        if counts.get(c).copied().unwrap_or(0) == 0 {
            return Err(DataError::Invalid(format!("class {c} does not occur in the split")));
        }
    }
    let keep: Vec<usize> = (0..split.len())
        .filter(|&i| split.labels[i] == a || split.labels[i] == b)
        .collect();
    let m = split.input_len();
    let mut features = Vec::with_capacity(keep.len() * m);
    let mut labels = Vec::with_capacity(keep.len());
    for &i in &keep {
        features.extend_from_slice(split.features_of(i));
        labels.push(usize::from(split.labels[i] == b));
    }
    DatasetSplit::new(&split.input_shape, 2, features, labels)
}

/// An INBEN split as model input plus each example's ground-truth features.
#[derive(Debug, Clone, PartialEq)]
pub struct InbenSplit {
    pub split: DatasetSplit,
    pub ground_truth: Vec<Vec<usize>>,
}

impl InbenSplit {
    pub fn from_samples(spec: &InbenSpec, samples: &[LabeledSample]) -> Result<Self, DataError> {
        let features = samples
            .iter()
            .flat_map(|s| s.x.iter().map(|&b| f64::from(b)))
            .collect();
        let labels = samples.iter().map(|s| s.label).collect();
        Ok(Self {
            split: DatasetSplit::new(&[spec.m], spec.classes, features, labels)?,
            ground_truth: samples.iter().map(|s| s.ground_truth.clone()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InbenData {
    pub spec: InbenSpec,
    pub data_seed: u64,
    pub train: InbenSplit,
    pub valid: InbenSplit,
    pub test: InbenSplit,
    /// SHA-256 of the file bytes.
    pub file_digest: String,
}

impl InbenData {
    pub fn from_dataset(data: &InbenDataset, file_digest: String) -> Result<Self, DataError> {
        Ok(Self {
            spec: data.spec.clone(),
            data_seed: data.data_seed,
            train: InbenSplit::from_samples(&data.spec, &data.train)?,
            valid: InbenSplit::from_samples(&data.spec, &data.valid)?,
            test: InbenSplit::from_samples(&data.spec, &data.test)?,
            file_digest,
        })
    }
}

/// Reads an INBEN container; features become `[m]` tensors of 0.0 / 1.0.
pub fn load_inben(path: &std::path::Path) -> Result<InbenData, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let data = match inben::decode(&bytes) {
        Ok(d) => d,
        Err(InbenError::Integrity(m)) => return Err(DataError::Integrity(m)),
        Err(e) => return Err(e.into()),
    };
    InbenData::from_dataset(&data, hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> DatasetSplit {
        let features = (0..n * 2).map(|v| v as f64).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        DatasetSplit::new(&[2], classes, features, labels).unwrap()
    }

    #[test]
    fn validates_construction() {
        assert!(DatasetSplit::new(&[2], 2, vec![0.0; 3], vec![0, 1]).is_err());
        assert!(DatasetSplit::new(&[2], 2, vec![0.0; 4], vec![0, 2]).is_err());
        assert!(DatasetSplit::new(&[2], 2, vec![0.0, f64::NAN, 0.0, 0.0], vec![0, 1]).is_err());
        let s = toy(3, 2);
        assert_eq!(s.example(1), (Tensor::vector(vec![2.0, 3.0]).unwrap(), 1));
        assert_eq!(s.batch(&[2, 0]).to_vec(), vec![4.0, 5.0, 0.0, 1.0]);
    }

    #[test]
    fn digest_tracks_content() {
        assert_eq!(toy(5, 2).digest(), toy(5, 2).digest());
        assert_ne!(toy(5, 2).digest(), toy(6, 2).digest());
        assert_ne!(toy(6, 2).digest(), toy(6, 3).digest());
    }

    #[test]
    fn validation_split_is_a_seeded_partition() {
        let s = toy(100, 4);
        let (train, valid) = split_validation(&s, 20, 0).unwrap();
        assert_eq!((train.len(), valid.len()), (80, 20));
        let mut rows: Vec<Vec<u64>> = train
            .features()
            .chunks(2)
            .chain(valid.features().chunks(2))
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        let mut orig: Vec<Vec<u64>> = s.features().chunks(2).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        orig.sort();
        assert_eq!(rows, orig);
        assert_eq!(split_validation(&s, 20, 0).unwrap().1, valid);
        assert_ne!(split_validation(&s, 20, 1).unwrap().1, valid);
        assert!(split_validation(&s, 100, 0).is_err());
    }

    #[test]
    fn inben_files_load_as_binary_splits() {
        use crate::inben::{encode, generate_dataset, generate_spec, InbenParams};
        let spec = generate_spec(&InbenParams {
            m: 12,
            classes: 3,
            ..InbenParams::default()
        })
        .unwrap();
        let data = generate_dataset(&spec, [30, 6, 6], 1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.inben");
        inben::write_dataset(&path, &data).unwrap();
        let loaded = load_inben(&path).unwrap();
        assert_eq!(loaded, load_inben(&path).unwrap());
        assert_eq!(loaded.spec, spec);
        assert_eq!(loaded.train.split.len(), 30);
        assert_eq!(loaded.test.split.input_shape(), &[12]);
        assert!(loaded.train.split.features().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(loaded.train.ground_truth[0], data.train[0].ground_truth);
        assert_eq!(loaded.file_digest, hex::encode(Sha256::digest(encode(&data))));

        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_inben(&path), Err(DataError::Integrity(_))));
    }

    #[test]
    fn two_class_filter_relabels() {
        let s = toy(30, 3);
        let f = filter_two_class(&s, 2, 0).unwrap();
        assert_eq!(f.classes(), 2);
        assert_eq!(f.len(), 20);
        for i in 0..f.len() {
            let orig = s.features_of(0).len();
            assert_eq!(orig, 2);
            let first = f.features_of(i)[0] as usize / 2;
            let want = usize::from(s.labels()[first] == 0);
            assert_eq!(f.labels()[i], want);
        }
        let pure = filter_two_class(&toy(10, 2), 0, 1).unwrap();
        assert_eq!(pure, toy(10, 2));
        assert!(filter_two_class(&toy(10, 2), 0, 5).is_err());
    }
}
