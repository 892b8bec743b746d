//! INBEN container and canonical spec text.
//!
//! Binary layout, integers little-endian:
//!
//! ```text
//! header
//!   magic       8 bytes  "INBENDS\0"
//!   version     u32      1
//!   m, classes  u32, u32
//!   split sizes u32 x 3  train, valid, test
//!   digest      32 bytes SHA-256 of everything after the header
//! spec
//!   spec seed u64, data seed u64, density f64 bits
//!   k, len_min, len_max, default class   u32 x 4
//!   priority    (classes - 1) x u32
//!   n_patterns  u32, then per pattern: class u32, len u32, len x u32 indices
//! records, train then valid then test
//!   bits        ceil(m / 8) bytes, feature i at bit (i % 8) of byte i / 8
//!   label       u32
//!   S1          u32 length, then indices as u32
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{label_sample, ground_truth_features, InbenDataset, InbenError, InbenSpec, LabeledSample, Pattern};

pub const INBEN_MAGIC: &[u8; 8] = b"INBENDS\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 6 + 32;

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode_body(data: &InbenDataset) -> Vec<u8> {
    let s = &data.spec;
    let mut b = Vec::new();
    b.extend_from_slice(&s.seed.to_le_bytes());
    b.extend_from_slice(&data.data_seed.to_le_bytes());
    b.extend_from_slice(&s.density.to_bits().to_le_bytes());
    for v in [s.k, s.len_min, s.len_max, s.default_class] {
        put(&mut b, v);
    }
    for &c in &s.priority {
        put(&mut b, c);
    }
    put(&mut b, s.patterns.len());
    for p in &s.patterns {
        put(&mut b, p.class);
        put(&mut b, p.indices.len());
        for &i in &p.indices {
            put(&mut b, i);
        }
    }
    let bytes_per = s.m.div_ceil(8);
    for sample in data.train.iter().chain(&data.valid).chain(&data.test) {
        let mut packed = vec![0u8; bytes_per];
        for (i, &bit) in sample.x.iter().enumerate() {
            packed[i / 8] |= bit << (i % 8);
        }
        b.extend_from_slice(&packed);
        put(&mut b, sample.label);
        put(&mut b, sample.ground_truth.len());
        for &i in &sample.ground_truth {
            put(&mut b, i);
        }
    }
    b
}

/// Serializes a dataset to bytes.
pub fn encode(data: &InbenDataset) -> Vec<u8> {
    let body = encode_body(data);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(INBEN_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        data.spec.m,
        data.spec.classes,
        data.train.len(),
        data.valid.len(),
        data.test.len(),
    ] {
        put(&mut out, v);
    }
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    out
}

pub fn write_dataset(path: &Path, data: &InbenDataset) -> Result<(), InbenError> {
    fs::write(path, encode(data))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], InbenError> {
        if self.buf.len() - self.pos < n {
            return Err(InbenError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, InbenError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, InbenError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses bytes written by [`encode`], checking the digest and re-labeling
/// every sample against the embedded spec.
pub fn decode(bytes: &[u8]) -> Result<InbenDataset, InbenError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != INBEN_MAGIC {
        return Err(InbenError::Format("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(InbenError::Format(format!("unsupported version {version}")));
    }
    let m = r.u32()?;
    let classes = r.u32()?;
    let sizes = [r.u32()?, r.u32()?, r.u32()?];
    let digest = r.take(32)?;
    if Sha256::digest(&bytes[HEADER_LEN..]).as_slice() != digest {
        return Err(InbenError::Integrity("body digest does not match header".into()));
    }

    let seed = r.u64()?;
    let data_seed = r.u64()?;
    let density = f64::from_bits(r.u64()?);
    let (k, len_min, len_max, default_class) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if classes < 2 {
        return Err(InbenError::Format(format!("class count {classes}")));
    }
    let priority = (0..classes - 1).map(|_| r.u32()).collect::<Result<_, _>>()?;
    let n_patterns = r.u32()?;
    let mut patterns = Vec::with_capacity(n_patterns.min(1 << 16));
    for _ in 0..n_patterns {
        let class = r.u32()?;
        let len = r.u32()?;
        let indices = (0..len).map(|_| r.u32()).collect::<Result<_, _>>()?;
        patterns.push(Pattern { class, indices });
    }
    let spec = InbenSpec {
        m,
        classes,
        patterns,
        priority,
        default_class,
        seed,
        density,
        k,
        len_min,
        len_max,
    };
    spec.validate()
        .map_err(|e| InbenError::Format(format!("embedded spec: {e}")))?;

    let bytes_per = m.div_ceil(8);
    let mut splits: Vec<Vec<LabeledSample>> = Vec::with_capacity(3);
    for &n in &sizes {
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let packed = r.take(bytes_per)?;
            let x: Vec<u8> = (0..m).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
            let label = r.u32()?;
            let len = r.u32()?;
            let ground_truth: Vec<usize> = (0..len).map(|_| r.u32()).collect::<Result<_, _>>()?;
            let oracle = label_sample(&spec, &x).class;
            let truth = ground_truth_features(&spec, &x).unwrap_or_default();
            if oracle != label || truth != ground_truth {
                return Err(InbenError::Integrity(format!(
                    "record {} disagrees with the spec oracle",
                    samples.len()
                )));
            }
            samples.push(LabeledSample { x, label, ground_truth });
        }
        splits.push(samples);
    }
    if r.pos != bytes.len() {
        return Err(InbenError::Format("trailing bytes".into()));
    }
    let test = splits.pop().unwrap();
    let valid = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(InbenDataset {
        spec,
        data_seed,
        train,
        valid,
        test,
    })
}

pub fn read_dataset(path: &Path) -> Result<InbenDataset, InbenError> {
    decode(&fs::read(path)?)
}

/// Canonical, diffable text form of a spec.
pub fn spec_text(spec: &InbenSpec) -> String {
    let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    let mut out = String::new();
    writeln!(out, "m = {}", spec.m).unwrap();
    writeln!(out, "classes = {}", spec.classes).unwrap();
    writeln!(out, "default_class = {}", spec.default_class).unwrap();
    writeln!(out, "priority = {}", join(&spec.priority)).unwrap();
    writeln!(out, "seed = {}", spec.seed).unwrap();
    writeln!(out, "density = {:?}", spec.density).unwrap();
    writeln!(out, "k = {}", spec.k).unwrap();
    writeln!(out, "len_min = {}", spec.len_min).unwrap();
    writeln!(out, "len_max = {}", spec.len_max).unwrap();
    for p in &spec.patterns {
        writeln!(out, "pattern = {}: {}", p.class, join(&p.indices)).unwrap();
    }
    out
}
