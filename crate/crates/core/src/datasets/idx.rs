//! IDX containers as used by MNIST, optionally gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{DataError, DatasetSplit};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, DataError> {
    let needed = 4 + 4 * dims;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(DataError::BadMagic {
            expected: magic,
            found: word(0),
        });
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

fn body(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], DataError> {
    if bytes.len() < offset + len {
        return Err(DataError::Truncated {
            needed: offset + len,
            have: bytes.len(),
        });
    }
    Ok(&bytes[offset..offset + len])
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), DataError> {
    let d = header(bytes, IMAGE_MAGIC, 3)?;
    let pixels = body(bytes, 16, d[0] * d[1] * d[2])?;
    Ok((d[0], d[1], d[2], pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    let d = header(bytes, LABEL_MAGIC, 1)?;
    body(bytes, 8, d[0])
}

/// Loads an image/label file pair as `[rows, cols]` examples scaled to
/// `[0, 1]` by `byte / 255`, with 10 classes.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<DatasetSplit, DataError> {
    let img_bytes = read_maybe_gz(images)?;
    let lbl_bytes = read_maybe_gz(labels)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let lbls = parse_idx_labels(&lbl_bytes)?;
    if lbls.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: lbls.len(),
        });
    }
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = lbls.iter().map(|&l| usize::from(l)).collect();
    DatasetSplit::new(&[rows, cols], 10, features, labels)
}

/// The four standard MNIST files found in one directory.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    /// Locates the standard file names, with or without `.gz`.
    pub fn locate(dir: &Path) -> Result<Self, DataError> {
        let find = |stem: &str| -> Result<PathBuf, DataError> {
            for name in [format!("{stem}.gz"), stem.to_string()] {
                let p = dir.join(name);
                if p.is_file() {
                    return Ok(p);
                }
            }
            Err(DataError::Io {
                path: dir.join(stem).display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            })
        };
        Ok(Self {
            train_images: find("train-images-idx3-ubyte")?,
            train_labels: find("train-labels-idx1-ubyte")?,
            test_images: find("t10k-images-idx3-ubyte")?,
            test_labels: find("t10k-labels-idx1-ubyte")?,
        })
    }

    pub fn paths(&self) -> [&Path; 4] {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
    }
}

/// Loads `(train, test)` from a directory holding the standard files.
pub fn load_mnist_dir(dir: &Path) -> Result<(DatasetSplit, DatasetSplit), DataError> {
    let f = MnistFiles::locate(dir)?;
    Ok((
        load_mnist_idx(&f.train_images, &f.train_labels)?,
        load_mnist_idx(&f.test_images, &f.test_labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for w in [IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&w.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn labels(l: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(l.len() as u32).to_be_bytes());
        b.extend_from_slice(l);
        b
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn loads_plain_and_gzipped_files() {
        let dir = tempfile::tempdir().unwrap();
        let px = [0u8, 255, 51, 102, 7, 8, 9, 10];
        let img = images(2, 2, 2, &px);
        let i = write(dir.path(), "img", &img);
        let l = write(dir.path(), "lbl", &labels(&[3, 9]));
        let split = load_mnist_idx(&i, &l).unwrap();
        assert_eq!(split.input_shape(), &[2, 2]);
        assert_eq!(split.labels(), &[3, 9]);
        assert_eq!(split.features_of(0), &[0.0, 1.0, 0.2, 0.4]);

        let mut gz = GzEncoder::new(Vec::new(), Compression::default());
        gz.write_all(&img).unwrap();
        let ig = write(dir.path(), "img.gz", &gz.finish().unwrap());
        assert_eq!(load_mnist_idx(&ig, &l).unwrap(), split);
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let l = write(dir.path(), "lbl", &labels(&[1, 2]));
        let short = write(dir.path(), "short", &images(2, 2, 2, &[0; 7]));
        assert!(matches!(load_mnist_idx(&short, &l), Err(DataError::Truncated { .. })));
        let swapped = write(dir.path(), "swapped", &labels(&[1; 20]));
        assert!(matches!(load_mnist_idx(&swapped, &l), Err(DataError::BadMagic { .. })));
        let three = write(dir.path(), "three", &images(3, 1, 1, &[0; 3]));
        assert!(matches!(
            load_mnist_idx(&three, &l),
            Err(DataError::CountMismatch { images: 3, labels: 2 })
        ));
        let bad_label = write(dir.path(), "bad", &labels(&[1, 12]));
        let two = write(dir.path(), "two", &images(2, 1, 1, &[0; 2]));
        assert!(load_mnist_idx(&two, &bad_label).is_err());
        assert!(matches!(
            load_mnist_idx(&dir.path().join("missing"), &l),
            Err(DataError::Io { .. })
        ));
    }
}
