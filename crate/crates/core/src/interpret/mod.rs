//! Per-feature importance, feature rankings, Accuracy@N and PGM export.
//!
//! The importance of feature `i` for class `j` is its additive contribution
//! `W(x)[j, i] * x_i` to logit `j`. Binary maps have two rows indexed by
//! class id: row 1 (positive class) is `w_i x_i` and row 0 is its negation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::datasets::DatasetSplit;
use crate::models::{argmax, Model, ModelError, Trunk};
use crate::tensor::Tensor;

const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class {class} out of range for {classes} classes")]
    Class { class: usize, classes: usize },
    #[error("ground-truth feature set is empty")]
    EmptyGroundTruth,
    #[error("no correctly classified non-default samples to score")]
    EmptyPopulation,
    #[error("{0} has no exact feature importance")]
    UnsupportedHead(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Importance scores `[rows, m]` plus the input shape they unflatten to.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    scores: Tensor,
    input_shape: Vec<usize>,
}

impl ImportanceMap {
    pub fn new(scores: Tensor, input_shape: &[usize]) -> Result<Self, InterpretError> {
        let m: usize = input_shape.iter().product();
        if scores.rank() != 2 || scores.shape()[1] != m {
            return Err(InterpretError::Shape(format!(
                "scores {:?} do not cover input {input_shape:?}",
                scores.shape()
            )));
        }
        Ok(Self {
            scores,
            input_shape: input_shape.to_vec(),
        })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn row(&self, class: usize) -> &[f64] {
        let m = self.features();
        &self.scores.data()[class * m..(class + 1) * m]
    }

    pub fn row_sum(&self, class: usize) -> f64 {
        self.row(class).iter().sum()
    }
}

fn same_len(a: &Tensor, b: &Tensor, what: &str) -> Result<(), InterpretError> {
    if a.len() != b.len() {
        return Err(InterpretError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Binary map from the weight vector `w` and flattened input.
pub fn importance_bc(w: &Tensor, x_flat: &Tensor, input_shape: &[usize]) -> Result<ImportanceMap, InterpretError> {
    same_len(w, x_flat, "weights vs input")?;
    let m = w.len();
    let pos: Vec<f64> = w.data().iter().zip(x_flat.data()).map(|(w, x)| w * x).collect();
    let mut data: Vec<f64> = pos.iter().map(|v| -v).collect();
    data.extend(pos);
    ImportanceMap::new(Tensor::new(&[2, m], data).map_err(ModelError::from)?, input_shape)
}

/// Multi-class map `scores[j, i] = W[j, i] * x_i`.
pub fn importance_mc(w: &Tensor, x_flat: &Tensor, input_shape: &[usize]) -> Result<ImportanceMap, InterpretError> {
    if w.rank() != 2 || w.shape()[1] != x_flat.len() {
        return Err(InterpretError::Shape(format!(
            "weights {:?} vs input {:?}",
            w.shape(),
            x_flat.shape()
        )));
    }
    let m = x_flat.len();
    let data = w
        .data()
        .chunks_exact(m)
        .flat_map(|row| row.iter().zip(x_flat.data()).map(|(w, x)| w * x))
        .collect();
    ImportanceMap::new(Tensor::new(w.shape(), data).map_err(ModelError::from)?, input_shape)
}

/// Sums a `[ch, h, w]` map over channels into an `[h, w]` map. A `[h, w]`
/// map is returned unchanged.
pub fn aggregate_channels(map: &ImportanceMap) -> Result<ImportanceMap, InterpretError> {
    match map.input_shape[..] {
        [_, _] => Ok(map.clone()),
        [ch, h, w] => {
            let c = map.classes();
            let area = h * w;
            let mut data = vec![0.0; c * area];
            for j in 0..c {
                let row = map.row(j);
                for k in 0..ch {
                    for p in 0..area {
                        data[j * area + p] += row[k * area + p];
                    }
                }
            }
            ImportanceMap::new(Tensor::new(&[c, area], data).map_err(ModelError::from)?, &[h, w])
        }
        _ => Err(InterpretError::Shape(format!(
            "input shape {:?} has no channel axis",
            map.input_shape
        ))),
    }
}

/// Feature indices by descending importance for `class`; ties keep
/// ascending index order.
pub fn rank_features(map: &ImportanceMap, class: usize) -> Result<Vec<usize>, InterpretError> {
    if class >= map.classes() {
        return Err(InterpretError::Class {
            class,
            classes: map.classes(),
        });
    }
    let row = map.row(class);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    Ok(order)
}

/// `|S1 ∩ top_N| / N` with `N = |S1|`.
pub fn accuracy_at_n(ground_truth: &[usize], ranking: &[usize]) -> Result<f64, InterpretError> {
    let n = ground_truth.len();
    if n == 0 {
        return Err(InterpretError::EmptyGroundTruth);
    }
    let top = &ranking[..n.min(ranking.len())];
    let hits = ground_truth.iter().filter(|i| top.contains(i)).count();
    Ok(hits as f64 / n as f64)
}

/// One sample's forward pass viewed as importance.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub map: ImportanceMap,
    /// Per-class logits; binary models report `[-z, z]`.
    pub logits: Vec<f64>,
    /// Per-class biases, in the same convention as `logits`.
    pub biases: Vec<f64>,
    pub predicted: usize,
}

/// Whether `model` has exact per-feature importance: IFFNN heads always,
/// plain heads only without a trunk (logistic / softmax regression).
pub fn supports_importance(model: &Model) -> bool {
    model.spec().head.is_iffnn() || model.spec().trunk == Trunk::None
}

/// Explains every example of `x` (`[batch, ...input_shape]`).
pub fn explain_batch(model: &Model, x: &Tensor) -> Result<Vec<Explanation>, InterpretError> {
    let spec = model.spec();
    if !supports_importance(model) {
        return Err(InterpretError::UnsupportedHead(format!(
            "a {} head on a {} trunk",
            spec.head,
            spec.trunk.kind()
        )));
    }
    let tape = Tape::new();
    let fwd = model.forward(&tape, x)?;
    let logits = fwd.logits.value();
    let xf = fwd.x_flat.value();
    let (m, c) = (spec.input_len(), spec.classes);
    let batch = xf.shape()[0];
    let bias = model.param("head.bias").expect("every head has a bias").data().to_vec();
    let weights = fwd.weights.map(|w| w.value());
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let x_row = Tensor::new(&[m], xf.data()[b * m..(b + 1) * m].to_vec()).map_err(ModelError::from)?;
        let (map, lg, biases) = if spec.head.is_binary() {
            let w = match &weights {
                Some(w) => w.data()[b * m..(b + 1) * m].to_vec(),
                None => model.param("head.weight").expect("plain head").data().to_vec(),
            };
            let map = importance_bc(&Tensor::new(&[m], w).map_err(ModelError::from)?, &x_row, &spec.input_shape)?;
            let z = logits.data()[b];
            (map, vec![-z, z], vec![-bias[0], bias[0]])
        } else {
            let w = match &weights {
                Some(w) => w.data()[b * c * m..(b + 1) * c * m].to_vec(),
                None => model.param("head.weight").expect("plain head").data().to_vec(),
            };
            let map = importance_mc(&Tensor::new(&[c, m], w).map_err(ModelError::from)?, &x_row, &spec.input_shape)?;
            (map, logits.data()[b * c..(b + 1) * c].to_vec(), bias.clone())
        };
        let predicted = if spec.head.is_binary() {
            usize::from(lg[1] >= 0.0)
        } else {
            argmax(&lg)
        };
        out.push(Explanation {
            map,
            logits: lg,
            biases,
            predicted,
        });
    }
    Ok(out)
}

/// Explains one example of shape `input_shape`.
pub fn explain(model: &Model, x: &Tensor) -> Result<Explanation, InterpretError> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xb = x.reshape(&shape).map_err(ModelError::from)?;
    Ok(explain_batch(model, &xb)?.pop().expect("one example"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyAtN {
    pub mean: f64,
    /// Correctly classified samples with a non-empty ground truth.
    pub population: usize,
}

/// Mean Accuracy@N over the correctly classified samples whose ground truth
/// is non-empty. Rankings are toward the true (= predicted) class.
pub fn mean_accuracy_at_n(
    model: &Model,
    split: &DatasetSplit,
    ground_truth: &[Vec<usize>],
) -> Result<AccuracyAtN, InterpretError> {
    if ground_truth.len() != split.len() {
        return Err(InterpretError::Shape(format!(
            "{} ground-truth sets for {} samples",
            ground_truth.len(),
            split.len()
        )));
    }
    let mut total = 0.0;
    let mut population = 0;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        for (e, &i) in explain_batch(model, &split.batch(chunk))?.iter().zip(chunk) {
            let label = split.labels()[i];
            if e.predicted != label || ground_truth[i].is_empty() {
                continue;
            }
            total += accuracy_at_n(&ground_truth[i], &rank_features(&e.map, label)?)?;
            population += 1;
        }
    }
    if population == 0 {
        return Err(InterpretError::EmptyPopulation);
    }
    Ok(AccuracyAtN {
        mean: total / population as f64,
        population,
    })
}

/// Grey levels of one class row: `128 + 128 * s / max|s|`, rounded and
/// clipped to `[0, 255]`; an all-zero row is uniform 128.
pub fn importance_pixels(map: &ImportanceMap, class: usize) -> Result<Vec<u8>, InterpretError> {
    if class >= map.classes() {
        return Err(InterpretError::Class {
            class,
            classes: map.classes(),
        });
    }
    let row = map.row(class);
    let scale = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(row
        .iter()
        .map(|&s| {
            let v = if scale > 0.0 { 128.0 + 128.0 * s / scale } else { 128.0 };
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect())
}

/// Binary PGM (P5, maxval 255) bytes.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize), InterpretError> {
    match shape {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        _ => Err(InterpretError::Shape(format!("{shape:?} is not a 2-D image"))),
    }
}

/// Writes one class's importance as a greyscale image.
pub fn export_importance_image(map: &ImportanceMap, class: usize, path: &Path) -> Result<(), InterpretError> {
    let (h, w) = image_dims(&map.input_shape)?;
    fs::write(path, encode_pgm(w, h, &importance_pixels(map, class)?))?;
    Ok(())
}

/// Writes an input image with values in `[0, 1]` as `round(255 v)`.
pub fn export_input_image(x: &Tensor, path: &Path) -> Result<(), InterpretError> {
    let (h, w) = image_dims(x.shape())?;
    let px: Vec<u8> = x
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    fs::write(path, encode_pgm(w, h, &px))?;
    Ok(())
}

/// One line of an interpretation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretRecord {
    pub sample: usize,
    pub true_class: usize,
    pub predicted: usize,
    /// Class whose importance is ranked.
    pub class: usize,
    /// `|S1|` when a ground truth is known, else the number of listed features.
    pub n: usize,
    pub accuracy_at_n: Option<f64>,
    /// `(feature, score)` for the top `n` features.
    pub top: Vec<(usize, f64)>,
}

/// Builds the report record of one explained sample. Without a ground truth
/// the top `default_n` features are listed.
pub fn report_record(
    sample: usize,
    true_class: usize,
    class: usize,
    explanation: &Explanation,
    ground_truth: Option<&[usize]>,
    default_n: usize,
) -> Result<InterpretRecord, InterpretError> {
    let ranking = rank_features(&explanation.map, class)?;
    let (n, acc) = match ground_truth {
        Some(s1) if !s1.is_empty() => (s1.len(), Some(accuracy_at_n(s1, &ranking)?)),
        _ => (default_n.min(ranking.len()), None),
    };
    let row = explanation.map.row(class);
    Ok(InterpretRecord {
        sample,
        true_class,
        predicted: explanation.predicted,
        class,
        n,
        accuracy_at_n: acc,
        top: ranking[..n].iter().map(|&i| (i, row[i])).collect(),
    })
}

/// Worst relative gap between `row_sum(j) + b_j` and logit `j`. The scale
/// is the larger of `|logit_j|` and `Σ_i |score_ji| + |b_j|`, the magnitude
/// at which summation rounding occurs.
pub fn additivity_error(e: &Explanation) -> f64 {
    (0..e.logits.len())
        .map(|j| {
            let lhs = e.map.row_sum(j) + e.biases[j];
            let mass: f64 = e.map.row(j).iter().map(|v| v.abs()).sum::<f64>() + e.biases[j].abs();
            let scale = e.logits[j].abs().max(mass);
            if scale == 0.0 {
                0.0
            } else {
                (lhs - e.logits[j]).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
