//! INBEN: binary feature vectors labeled by class-owned patterns.
//!
//! Each non-default class owns `k` patterns (sets of feature indices). A
//! pattern matches a sample when the sample is 1 at every index of the
//! pattern. The label is the highest-priority class with a matching pattern,
//! or the default class when nothing matches. The ground-truth explanation of
//! a sample is the union of its label's matching patterns.
//!
//! All indices are 0-based.

mod format;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use format::{decode, encode, read_dataset, spec_text, write_dataset, INBEN_MAGIC};

#[derive(Debug, Error)]
pub enum InbenError {
    #[error("invalid INBEN config: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("sample belongs to the default class and has no deciding features")]
    DefaultClass,
    #[error("malformed INBEN file: {0}")]
    Format(String),
    #[error("INBEN integrity check failed: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub class: usize,
    /// Strictly increasing feature indices.
    pub indices: Vec<usize>,
}

impl Pattern {
    pub fn matches(&self, x: &[u8]) -> bool {
        self.indices.iter().all(|&i| x[i] == 1)
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InbenParams {
    pub m: usize,
    pub classes: usize,
    /// Patterns per non-default class.
    pub k: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Bernoulli bit density; `None` calibrates it so the default class gets
    /// about a `1/classes` share of unconstrained draws.
    pub density: Option<f64>,
    pub seed: u64,
}

impl Default for InbenParams {
    fn default() -> Self {
        Self {
            m: 1000,
            classes: 10,
            k: 5,
            len_min: 2,
            len_max: 5,
            density: None,
            seed: 0,
        }
    }
}

impl InbenParams {
    pub fn validate(&self) -> Result<(), InbenError> {
        let bad = |m: String| Err(InbenError::Config(m));
        if self.classes < 2 {
            return bad(format!("classes = {} must be at least 2", self.classes));
        }
        if self.k == 0 {
            return bad("k (patterns per class) must be at least 1".into());
        }
        if !(1 <= self.len_min && self.len_min <= self.len_max && self.len_max <= self.m) {
            return bad(format!(
                "need 1 <= len_min ({}) <= len_max ({}) <= m ({})",
                self.len_min, self.len_max, self.m
            ));
        }
        if let Some(p) = self.density {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("density {p} must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InbenSpec {
    pub m: usize,
    pub classes: usize,
    /// Grouped by class in priority order, `k` per class.
    pub patterns: Vec<Pattern>,
    /// Non-default classes, highest priority first.
    pub priority: Vec<usize>,
    pub default_class: usize,
    pub seed: u64,
    pub density: f64,
    pub k: usize,
    pub len_min: usize,
    pub len_max: usize,
}

/// Result of [`label_sample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub class: usize,
    /// Positions in `spec.patterns` of the matching patterns of `class`.
    pub matched: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSample {
    /// 0/1 values, length `m`.
    pub x: Vec<u8>,
    pub label: usize,
    /// Sorted deciding features; empty iff `label` is the default class.
    pub ground_truth: Vec<usize>,
}

/// A generated dataset: the spec, the sampling seed and three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct InbenDataset {
    pub spec: InbenSpec,
    pub data_seed: u64,
    pub train: Vec<LabeledSample>,
    pub valid: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl InbenSpec {
    /// Assembles and validates a spec from explicit parts. The generator
    /// fields are taken from the patterns (k = most patterns of one class,
    /// lengths = observed range).
    pub fn from_parts(
        m: usize,
        classes: usize,
        patterns: Vec<Pattern>,
        priority: Vec<usize>,
        default_class: usize,
        density: f64,
    ) -> Result<Self, InbenError> {
        let lens = patterns.iter().map(|p| p.indices.len());
        let len_min = lens.clone().min().unwrap_or(1);
        let len_max = lens.max().unwrap_or(1);
        let k = (0..classes)
            .map(|c| patterns.iter().filter(|p| p.class == c).count())
            .max()
            .unwrap_or(0);
        let spec = Self {
            m,
            classes,
            patterns,
            priority,
            default_class,
            seed: 0,
            density,
            k,
            len_min,
            len_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), InbenError> {
        let bad = |m: String| Err(InbenError::Config(m));
        if self.classes < 2 || self.default_class >= self.classes {
            return bad(format!(
                "default class {} invalid for {} classes",
                self.default_class, self.classes
            ));
        }
        let mut expected: Vec<usize> = (0..self.classes).filter(|&c| c != self.default_class).collect();
        let mut got = self.priority.clone();
        got.sort_unstable();
        expected.sort_unstable();
        if got != expected {
            return bad(format!("priority {:?} is not a permutation of the non-default classes", self.priority));
        }
        for p in &self.patterns {
            if p.indices.is_empty()
                || p.indices.windows(2).any(|w| w[0] >= w[1])
                || p.indices.last().is_some_and(|&i| i >= self.m)
            {
                return bad(format!("pattern {:?} must be non-empty, increasing and below m", p.indices));
            }
            if p.class == self.default_class || p.class >= self.classes {
                return bad(format!("pattern owned by invalid class {}", p.class));
            }
        }
        for &c in &self.priority {
            if !self.patterns.iter().any(|p| p.class == c) {
                return bad(format!("class {c} owns no pattern"));
            }
        }
        if !(self.density > 0.0 && self.density < 1.0) {
            return bad(format!("density {} must lie in (0, 1)", self.density));
        }
        Ok(())
    }

    /// Position of `class` in the priority order; the default class ranks last.
    pub fn rank(&self, class: usize) -> usize {
        self.priority.iter().position(|&c| c == class).unwrap_or(self.priority.len())
    }

    pub fn patterns_of(&self, class: usize) -> impl Iterator<Item = (usize, &Pattern)> {
        self.patterns.iter().enumerate().filter(move |(_, p)| p.class == class)
    }
}

/// Draws `k` patterns for every non-default class in priority order.
///
/// A candidate that contains all indices of a pattern of a higher-priority
/// class could never decide a sample and is redrawn; after 10,000 failed
/// draws for one pattern the configuration is reported infeasible.
pub fn generate_spec(params: &InbenParams) -> Result<InbenSpec, InbenError> {
    params.validate()?;
    const MAX_TRIES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let default_class = params.classes - 1;
    let mut priority: Vec<usize> = (0..default_class).collect();
    priority.shuffle(&mut rng);

    let mut patterns: Vec<Pattern> = Vec::new();
    for &class in &priority {
        let higher = patterns.len();
        for _ in 0..params.k {
            let mut tries = 0;
            let indices = loop {
                tries += 1;
                if tries > MAX_TRIES {
                    return Err(InbenError::Infeasible(format!(
                        "no pattern for class {class} avoids the higher-priority patterns after {MAX_TRIES} draws"
                    )));
                }
                let len = rng.gen_range(params.len_min..=params.len_max);
                let mut idx = rand::seq::index::sample(&mut rng, params.m, len).into_vec();
                idx.sort_unstable();
                let dominated = patterns[..higher]
                    .iter()
                    .any(|p| p.indices.iter().all(|i| idx.binary_search(i).is_ok()));
                if !dominated {
                    break idx;
                }
            };
            patterns.push(Pattern { class, indices });
        }
    }

    let mut spec = InbenSpec {
        m: params.m,
        classes: params.classes,
        patterns,
        priority,
        default_class,
        seed: params.seed,
        density: params.density.unwrap_or(0.5),
        k: params.k,
        len_min: params.len_min,
        len_max: params.len_max,
    };
    if params.density.is_none() {
        spec.density = calibrate_density(&spec, params.seed);
    }
    spec.validate()?;
    Ok(spec)
}

/// Bisects the density at which about `1/classes` of Bernoulli draws match
/// no pattern. The pilot sample of 2,000 draws reuses the same uniforms for
/// every candidate density, so the estimate is monotone in the density.
pub fn calibrate_density(spec: &InbenSpec, seed: u64) -> f64 {
    const PILOT: usize = 2000;
    let target = 1.0 / spec.classes as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // only pattern features influence matching; their smallest uniform per
    // pattern decides whether the pattern matches at a given density
    let pilot: Vec<Vec<f64>> = (0..PILOT)
        .map(|_| {
            let u: Vec<f64> = (0..spec.m).map(|_| rng.gen::<f64>()).collect();
            spec.patterns
                .iter()
                .map(|p| p.indices.iter().map(|&i| u[i]).fold(0.0, f64::max))
                .collect()
        })
        .collect();
    let default_share = |p: f64| {
        let none = pilot.iter().filter(|maxes| maxes.iter().all(|&mx| mx >= p)).count();
        none as f64 / PILOT as f64
    };
    let (mut lo, mut hi) = (1e-6, 1.0 - 1e-6);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if default_share(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Labels `x` by the highest-priority class with a matching pattern.
pub fn label_sample(spec: &InbenSpec, x: &[u8]) -> Labeling {
    for &class in &spec.priority {
        let matched: Vec<usize> = spec
            .patterns_of(class)
            .filter(|(_, p)| p.matches(x))
            .map(|(i, _)| i)
            .collect();
        if !matched.is_empty() {
            return Labeling { class, matched };
        }
    }
    Labeling {
        class: spec.default_class,
        matched: Vec::new(),
    }
}

/// Union of the index sets of all matching patterns of the sample's class.
pub fn ground_truth_features(spec: &InbenSpec, x: &[u8]) -> Result<Vec<usize>, InbenError> {
    let l = label_sample(spec, x);
    if l.matched.is_empty() {
        return Err(InbenError::DefaultClass);
    }
    let set: BTreeSet<usize> = l
        .matched
        .iter()
        .flat_map(|&i| spec.patterns[i].indices.iter().copied())
        .collect();
    Ok(set.into_iter().collect())
}

fn labeled(spec: &InbenSpec, x: Vec<u8>) -> LabeledSample {
    let label = label_sample(spec, &x).class;
    let ground_truth = ground_truth_features(spec, &x).unwrap_or_default();
    LabeledSample { x, label, ground_truth }
}

/// Draw `index` of split `split`: its own ChaCha8 stream, so the bits do not
/// depend on how draws are distributed over threads.
fn draw(spec: &InbenSpec, seed: u64, split: u64, index: u64) -> LabeledSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 56) | index);
    let x = (0..spec.m).map(|_| u8::from(rng.gen_bool(spec.density))).collect();
    labeled(spec, x)
}

/// Draws per parallel round.
const ROUND: usize = 4096;
/// Draw budget per requested sample.
const BUDGET_PER_SAMPLE: usize = 500;

/// Per-class quotas for `n` samples: `n / c` each, the remainder going to the
/// lowest class ids.
pub fn class_quotas(n: usize, classes: usize) -> Vec<usize> {
    (0..classes).map(|j| n / classes + usize::from(j < n % classes)).collect()
}

fn generate_split(
    spec: &InbenSpec,
    n: usize,
    seed: u64,
    split: u64,
) -> Result<Vec<LabeledSample>, InbenError> {
    let mut remaining = class_quotas(n, spec.classes);
    let mut out = Vec::with_capacity(n);
    let budget = BUDGET_PER_SAMPLE * n;
    let mut next = 0usize;
    while out.len() < n {
        if next >= budget {
            let missing: Vec<String> = remaining
                .iter()
                .enumerate()
                .filter(|(_, &r)| r > 0)
                .map(|(c, r)| format!("class {c} short by {r}"))
                .collect();
            return Err(InbenError::Infeasible(format!(
                "class balance not reached within {budget} draws ({})",
                missing.join(", ")
            )));
        }
        let end = (next + ROUND).min(budget);
        let batch: Vec<LabeledSample> = (next..end)
            .into_par_iter()
            .map(|i| draw(spec, seed, split, i as u64))
            .collect();
        next = end;
        for s in batch {
            if remaining[s.label] > 0 {
                remaining[s.label] -= 1;
                out.push(s);
                if out.len() == n {
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Draws class-balanced train, validation and test splits.
///
/// Samples are i.i.d. Bernoulli(density) vectors accepted in draw order
/// while their class quota is open. `threads` sizes the worker pool; the
/// output does not depend on it.
pub fn generate_dataset(
    spec: &InbenSpec,
    sizes: [usize; 3],
    seed: u64,
    threads: usize,
) -> Result<InbenDataset, InbenError> {
    spec.validate()?;
    if sizes.contains(&0) {
        return Err(InbenError::Config(format!("split sizes {sizes:?} must all be positive")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| InbenError::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        Ok(InbenDataset {
            spec: spec.clone(),
            data_seed: seed,
            train: generate_split(spec, sizes[0], seed, 0)?,
            valid: generate_split(spec, sizes[1], seed, 1)?,
            test: generate_split(spec, sizes[2], seed, 2)?,
        })
    })
}
