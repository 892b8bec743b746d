//! Named architectures: `FC-MC1`, `HW-IFFNN-BC`, `CNN-MC3`, `LR`, `SR`, ...
//!
//! The `*2` variants widen the base trunk and the `*3` variants add one
//! layer, in both cases sized so the parameter count lands as close as an
//! integer width allows to the interpretable variant of the same family.

use std::fmt;
use std::str::FromStr;

use super::spec::{ConvBlock, HeadKind, ModelSpec, Trunk};
use super::{spec_param_count, ModelError};
use crate::autodiff::Activation;

/// Default hidden width of the fully connected and highway trunks.
pub const DEFAULT_WIDTH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Fc,
    Highway,
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Bc1,
    Bc2,
    Bc3,
    IffnnBc,
    Mc1,
    Mc2,
    Mc3,
    IffnnMc,
}

impl Variant {
    fn head(self) -> HeadKind {
        match self {
            Variant::Bc1 | Variant::Bc2 | Variant::Bc3 => HeadKind::PlainBc,
            Variant::IffnnBc => HeadKind::IffnnBc,
            Variant::Mc1 | Variant::Mc2 | Variant::Mc3 => HeadKind::PlainMc,
            Variant::IffnnMc => HeadKind::IffnnMc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantName {
    /// Logistic regression.
    Lr,
    /// Softmax regression.
    Sr,
    Net(Family, Variant),
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantName::Lr => f.write_str("LR"),
            VariantName::Sr => f.write_str("SR"),
            VariantName::Net(family, variant) => {
                let fam = match family {
                    Family::Fc => "FC",
                    Family::Highway => "HW",
                    Family::Cnn => "CNN",
                };
                let var = match variant {
                    Variant::Bc1 => "BC1",
                    Variant::Bc2 => "BC2",
                    Variant::Bc3 => "BC3",
                    Variant::IffnnBc => "IFFNN-BC",
                    Variant::Mc1 => "MC1",
                    Variant::Mc2 => "MC2",
                    Variant::Mc3 => "MC3",
                    Variant::IffnnMc => "IFFNN-MC",
                };
                write!(f, "{fam}-{var}")
            }
        }
    }
}

impl FromStr for VariantName {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        match upper.as_str() {
            "LR" => return Ok(VariantName::Lr),
            "SR" => return Ok(VariantName::Sr),
            _ => {}
        }
        let bad = || ModelError::InvalidSpec(format!("unknown model name `{s}`"));
        let (fam, var) = upper.split_once('-').ok_or_else(bad)?;
        let family = match fam {
            "FC" => Family::Fc,
            "HW" => Family::Highway,
            "CNN" => Family::Cnn,
            _ => return Err(bad()),
        };
        let variant = match var {
            "BC1" => Variant::Bc1,
            "BC2" => Variant::Bc2,
            "BC3" => Variant::Bc3,
            "IFFNN-BC" => Variant::IffnnBc,
            "MC1" => Variant::Mc1,
            "MC2" => Variant::Mc2,
            "MC3" => Variant::Mc3,
            "IFFNN-MC" => Variant::IffnnMc,
            _ => return Err(bad()),
        };
        Ok(VariantName::Net(family, variant))
    }
}

fn trunk_of(family: Family, size: usize, extra_layer: bool) -> Trunk {
    match family {
        Family::Fc => Trunk::Fc {
            hidden: vec![size; if extra_layer { 3 } else { 2 }],
        },
        Family::Highway => Trunk::Highway {
            hidden: vec![size; if extra_layer { 3 } else { 2 }],
        },
        Family::Cnn => {
            let mut blocks = vec![
                ConvBlock { kernels: size, size: 3, pool: 2 },
                ConvBlock { kernels: 2 * size, size: 3, pool: 2 },
            ];
            if extra_layer {
                blocks.push(ConvBlock { kernels: 2 * size, size: 3, pool: 1 });
            }
            Trunk::Cnn { blocks }
        }
    }
}

fn base_size(family: Family) -> usize {
    match family {
        Family::Fc | Family::Highway => DEFAULT_WIDTH,
        Family::Cnn => 16,
    }
}

/// Smallest-error integer size for a monotone parameter-count function.
fn fit_size(target: usize, count: impl Fn(usize) -> usize) -> usize {
    let mut hi = 1;
    while count(hi) < target {
        hi *= 2;
    }
    let mut lo = hi / 2;
    // invariant: count(lo) < target <= count(hi), or lo == 0
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if count(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo >= 1 && target - count(lo) <= count(hi) - target {
        lo
    } else {
        hi
    }
}

impl VariantName {
    pub fn spec(&self, input_shape: &[usize], classes: usize, seed: u64) -> Result<ModelSpec, ModelError> {
        let make = |trunk: Trunk, head: HeadKind| ModelSpec {
            trunk,
            activation: Activation::Relu,
            head,
            input_shape: input_shape.to_vec(),
            classes,
            seed,
        };
        let spec = match *self {
            VariantName::Lr => make(Trunk::None, HeadKind::PlainBc),
            VariantName::Sr => make(Trunk::None, HeadKind::PlainMc),
            VariantName::Net(family, variant) => {
                let head = variant.head();
                match variant {
                    Variant::Bc1 | Variant::Mc1 | Variant::IffnnBc | Variant::IffnnMc => {
                        make(trunk_of(family, base_size(family), false), head)
                    }
                    Variant::Bc2 | Variant::Bc3 | Variant::Mc2 | Variant::Mc3 => {
                        let iffnn_head = if head.is_binary() {
                            HeadKind::IffnnBc
                        } else {
                            HeadKind::IffnnMc
                        };
                        let reference = make(trunk_of(family, base_size(family), false), iffnn_head);
                        reference.validate()?;
                        let target = spec_param_count(&reference);
                        let extra = matches!(variant, Variant::Bc3 | Variant::Mc3);
                        let size = fit_size(target, |s| {
                            spec_param_count(&make(trunk_of(family, s, extra), head))
                        });
                        make(trunk_of(family, size, extra), head)
                    }
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for name in ["LR", "SR", "FC-MC1", "HW-IFFNN-BC", "CNN-MC3", "FC-BC2"] {
            let parsed: VariantName = name.parse().unwrap();
            assert_eq!(parsed.to_string(), name);
        }
        assert!("RESNET-MC1".parse::<VariantName>().is_err());
    }

    #[test]
    fn fit_size_picks_nearest() {
        assert_eq!(fit_size(100, |s| s * s), 10);
        assert_eq!(fit_size(110, |s| s * s), 10);
        assert_eq!(fit_size(111, |s| s * s), 11);
        assert_eq!(fit_size(1, |s| s), 1);
    }

    #[test]
    fn binary_variants_need_two_classes() {
        let name: VariantName = "FC-BC2".parse().unwrap();
        assert!(name.spec(&[784], 10, 0).is_err());
        assert!(VariantName::Lr.spec(&[784], 10, 0).is_err());
    }
}
