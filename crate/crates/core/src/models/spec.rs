//! Declarative architecture descriptions and their canonical text form.

use std::fmt;
use std::str::FromStr;

use super::ModelError;
use crate::autodiff::Activation;

/// One convolution block: `kernels` filters of `size x size` (stride 1,
/// same padding), the activation, then `pool x pool` max pooling when
/// `pool > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub kernels: usize,
    pub size: usize,
    pub pool: usize,
}

impl fmt::Display for ConvBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kernels, self.size, self.pool)
    }
}

impl FromStr for ConvBlock {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || ModelError::InvalidSpec(format!("conv block `{s}` is not kernels:size:pool"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        Ok(ConvBlock {
            kernels: nums[0],
            size: nums[1],
            pool: nums[2],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trunk {
    /// Features go straight to the head (LR / SR when the head is plain).
    None,
    /// Fully connected layers of the given widths.
    Fc { hidden: Vec<usize> },
    /// A projection to width `hidden[0]` followed by one highway layer per
    /// entry; all entries must be equal.
    Highway { hidden: Vec<usize> },
    /// Convolution blocks followed by a flatten.
    Cnn { blocks: Vec<ConvBlock> },
}

impl Trunk {
    pub fn kind(&self) -> &'static str {
        match self {
            Trunk::None => "none",
            Trunk::Fc { .. } => "fc",
            Trunk::Highway { .. } => "highway",
            Trunk::Cnn { .. } => "cnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    PlainBc,
    PlainMc,
    IffnnBc,
    IffnnMc,
}

impl HeadKind {
    pub fn is_binary(self) -> bool {
        matches!(self, HeadKind::PlainBc | HeadKind::IffnnBc)
    }

    pub fn is_iffnn(self) -> bool {
        matches!(self, HeadKind::IffnnBc | HeadKind::IffnnMc)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::PlainBc => "plain-bc",
            HeadKind::PlainMc => "plain-mc",
            HeadKind::IffnnBc => "iffnn-bc",
            HeadKind::IffnnMc => "iffnn-mc",
        })
    }
}

impl FromStr for HeadKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain-bc" => Ok(HeadKind::PlainBc),
            "plain-mc" => Ok(HeadKind::PlainMc),
            "iffnn-bc" => Ok(HeadKind::IffnnBc),
            "iffnn-mc" => Ok(HeadKind::IffnnMc),
            other => Err(ModelError::InvalidSpec(format!("unknown head kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub trunk: Trunk,
    pub activation: Activation,
    pub head: HeadKind,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    /// Number of scalar input features `m`.
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |msg: String| Err(ModelError::InvalidSpec(msg));
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return invalid(format!("input shape {:?} must have positive extents", self.input_shape));
        }
        if self.classes < 2 {
            return invalid(format!("class count {} must be at least 2", self.classes));
        }
        if self.head.is_binary() && self.classes != 2 {
            return invalid(format!("{} head requires 2 classes, got {}", self.head, self.classes));
        }
        match &self.trunk {
            Trunk::None => {}
            Trunk::Fc { hidden } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return invalid(format!("fc hidden dims {hidden:?} must be non-empty and positive"));
                }
            }
            Trunk::Highway { hidden } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return invalid(format!("highway dims {hidden:?} must be non-empty and positive"));
                }
                if hidden.iter().any(|&h| h != hidden[0]) {
                    return invalid(format!("highway layers must be square, got dims {hidden:?}"));
                }
            }
            Trunk::Cnn { blocks } => {
                if blocks.is_empty() {
                    return invalid("cnn trunk needs at least one conv block".into());
                }
                if !(2..=3).contains(&self.input_shape.len()) {
                    return invalid(format!(
                        "cnn trunk needs a [h, w] or [ch, h, w] input, got {:?}",
                        self.input_shape
                    ));
                }
                let (_, mut h, mut w) = self.image_dims();
                for b in blocks {
                    if b.kernels == 0 || b.size == 0 || b.size % 2 == 0 {
                        return invalid(format!("conv block {b} needs positive kernels and an odd size"));
                    }
                    if b.pool > 1 {
                        if b.pool > h || b.pool > w {
                            return invalid(format!("pool {} larger than feature map {h}x{w}", b.pool));
                        }
                        h = (h - b.pool) / b.pool + 1;
                        w = (w - b.pool) / b.pool + 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// `(channels, height, width)` of a CNN input.
    pub(crate) fn image_dims(&self) -> (usize, usize, usize) {
        match self.input_shape[..] {
            [h, w] => (1, h, w),
            [c, h, w] => (c, h, w),
            _ => panic!("not an image shape: {:?}", self.input_shape),
        }
    }

    /// Canonical `key = value` text, one key per line in a fixed order.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let mut out = format!("trunk = {}\n", self.trunk.kind());
        match &self.trunk {
            Trunk::Fc { hidden } | Trunk::Highway { hidden } => {
                out += &format!("hidden = {}\n", join(hidden));
            }
            Trunk::Cnn { blocks } => {
                let b: Vec<String> = blocks.iter().map(|b| b.to_string()).collect();
                out += &format!("conv = {}\n", b.join(","));
            }
            Trunk::None => {}
        }
        out += &format!("activation = {}\n", self.activation);
        out += &format!("head = {}\n", self.head);
        out += &format!("input = {}\n", join(&self.input_shape));
        out += &format!("classes = {}\n", self.classes);
        out += &format!("seed = {}\n", self.seed);
        out
    }

    /// Parses the form written by [`Self::to_text`]. Unknown or repeated
    /// keys are errors.
    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut fields: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidSpec(format!("line `{line}` is not key = value")))?;
            let key = k.trim().to_string();
            if fields.iter().any(|(existing, _)| *existing == key) {
                return Err(ModelError::InvalidSpec(format!("duplicate key `{key}`")));
            }
            fields.push((key, v.trim().to_string()));
        }
        let get = |key: &str| fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let need = |key: &str| get(key).ok_or_else(|| ModelError::InvalidSpec(format!("missing key `{key}`")));
        for (k, _) in &fields {
            if !["trunk", "hidden", "conv", "activation", "head", "input", "classes", "seed"]
                .contains(&k.as_str())
            {
                return Err(ModelError::InvalidSpec(format!("unknown key `{k}`")));
            }
        }

        let trunk = match need("trunk")? {
            "none" => Trunk::None,
            "fc" => Trunk::Fc {
                hidden: parse_dims(need("hidden")?)?,
            },
            "highway" => Trunk::Highway {
                hidden: parse_dims(need("hidden")?)?,
            },
            "cnn" => Trunk::Cnn {
                blocks: need("conv")?
                    .split(',')
                    .map(|b| b.trim().parse())
                    .collect::<Result<_, _>>()?,
            },
            other => return Err(ModelError::InvalidSpec(format!("unknown trunk `{other}`"))),
        };
        let spec = ModelSpec {
            trunk,
            activation: get("activation")
                .unwrap_or("relu")
                .parse()
                .map_err(ModelError::InvalidSpec)?,
            head: need("head")?.parse()?,
            input_shape: parse_dims(need("input")?)?,
            classes: parse_num(need("classes")?, "classes")?,
            seed: parse_num(get("seed").unwrap_or("0"), "seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_num<T: FromStr>(s: &str, key: &str) -> Result<T, ModelError> {
    s.parse()
        .map_err(|_| ModelError::InvalidSpec(format!("`{s}` is not a valid {key}")))
}

pub(crate) fn parse_dims(s: &str) -> Result<Vec<usize>, ModelError> {
    s.split(',')
        .map(|d| parse_num(d.trim(), "dimension"))
        .collect()
}
