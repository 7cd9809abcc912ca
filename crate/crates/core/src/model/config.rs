use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
    Res2Net,
    SeRes2Net,
}

/// One residual block as written in a stage bracket.
///
/// `width` is the bracket number. Basic blocks use it as their 3x3 width;
/// bottleneck-style blocks expand their output to `expansion * width`.
/// Res2Net blocks run `scale` groups of `group_width` channels through the
/// 3x3 hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub width: usize,
    pub group_width: usize,
    pub scale: usize,
    pub stride: usize,
    pub se_reduction: usize,
    pub expansion: usize,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, width: usize) -> Self {
        Self {
            kind,
            width,
            group_width: (width / 2).max(1),
            scale: 4,
            stride: 1,
            se_reduction: 16,
            expansion: 4,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_scale(mut self, scale: usize) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_group_width(mut self, group_width: usize) -> Self {
        self.group_width = group_width;
        self
    }

    pub fn with_se_reduction(mut self, r: usize) -> Self {
        self.se_reduction = r;
        self
    }

    pub fn is_multi_scale(&self) -> bool {
        matches!(self.kind, BlockKind::Res2Net | BlockKind::SeRes2Net)
    }

    /// Channels between the leading and trailing 1x1 convs.
    pub fn inner_channels(&self) -> usize {
        match self.kind {
            BlockKind::Basic | BlockKind::Bottleneck => self.width,
            BlockKind::Res2Net | BlockKind::SeRes2Net => self.group_width * self.scale,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            BlockKind::Basic => self.width,
            _ => self.width * self.expansion,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.width == 0 || self.stride == 0 {
            return bad(format!(
                "block width {} and stride {} must be positive",
                self.width, self.stride
            ));
        }
        if self.kind != BlockKind::Basic && self.expansion == 0 {
            return bad("expansion must be positive".into());
        }
        if self.is_multi_scale() {
            if self.scale < 2 {
                return bad(format!("multi-scale block needs scale >= 2, got {}", self.scale));
            }
            if self.group_width == 0 {
                return bad("group width must be positive".into());
            }
        }
        if self.kind == BlockKind::SeRes2Net {
            let c = self.out_channels();
            if self.se_reduction == 0 || !c.is_multiple_of(self.se_reduction) {
                return bad(format!(
                    "SE reduction {} does not divide {c} output channels",
                    self.se_reduction
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConv {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub convs: Vec<StemConv>,
    pub max_pool: Option<PoolSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub repeats: usize,
    /// First block of the stage; later blocks reuse it with stride 1.
    pub block: BlockSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "i")]
    I,
    #[serde(rename = "ii")]
    II,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Resnet50,
    Res2net50,
    SeRes2net50,
}

/// One of the six reduced architectures, e.g. `se-res2net50-ii`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Arch {
    pub family: Family,
    pub variant: Variant,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::new(Family::Resnet50, Variant::I),
        Arch::new(Family::Resnet50, Variant::II),
        Arch::new(Family::Res2net50, Variant::I),
        Arch::new(Family::Res2net50, Variant::II),
        Arch::new(Family::SeRes2net50, Variant::I),
        Arch::new(Family::SeRes2net50, Variant::II),
    ];

    pub const fn new(family: Family, variant: Variant) -> Self {
        Self { family, variant }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fam = match self.family {
            Family::Resnet50 => "resnet50",
            Family::Res2net50 => "res2net50",
            Family::SeRes2net50 => "se-res2net50",
        };
        let var = match self.variant {
            Variant::I => "i",
            Variant::II => "ii",
        };
        write!(f, "{fam}-{var}")
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arch::ALL
            .into_iter()
            .find(|a| a.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<String> = Arch::ALL.iter().map(|a| a.to_string()).collect();
                ModelError::Config(format!(
                    "unknown architecture `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

impl Serialize for Arch {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Arch {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub in_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub classes: usize,
    pub bn_eps: f32,
    pub bn_momentum: f32,
}

/// Stage brackets and repeats shared by all six columns (Conv2..Conv5).
const STAGES: [(usize, usize); 4] = [(4, 3), (8, 4), (16, 6), (32, 3)];
const STEM_CHANNELS: usize = 16;

impl ModelConfig {
    pub fn from_arch(arch: Arch) -> Self {
        let conv = |kernel, stride| StemConv {
            kernel,
            channels: STEM_CHANNELS,
            stride,
        };
        let stem = match (arch.family, arch.variant) {
            (Family::Resnet50, _) => StemSpec {
                convs: vec![conv(7, 2)],
                max_pool: Some(PoolSpec { size: 3, stride: 2 }),
            },
            (_, Variant::I) => StemSpec {
                convs: vec![conv(3, 1), conv(3, 1), conv(3, 1)],
                max_pool: None,
            },
            (_, Variant::II) => StemSpec {
                convs: vec![conv(3, 1), conv(3, 1), conv(3, 2)],
                max_pool: None,
            },
        };
        let kind = match arch.family {
            Family::Resnet50 => BlockKind::Basic,
            Family::Res2net50 => BlockKind::Res2Net,
            Family::SeRes2net50 => BlockKind::SeRes2Net,
        };
        let keep = match arch.variant {
            Variant::I => 4,
            Variant::II => 3,
        };
        let stages = STAGES[..keep]
            .iter()
            .enumerate()
            .map(|(i, &(width, repeats))| StageSpec {
                repeats,
                block: BlockSpec::new(kind, width).with_stride(if i == 0 { 1 } else { 2 }),
            })
            .collect();
        Self {
            name: arch.to_string(),
            in_channels: 1,
            stem,
            stages,
            classes: 2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.in_channels == 0 || self.classes < 2 {
            return bad(format!(
                "need >= 1 input channel and >= 2 classes, got {}/{}",
                self.in_channels, self.classes
            ));
        }
        if self.stem.convs.is_empty() {
            return bad("stem has no convolutions".into());
        }
        for c in &self.stem.convs {
            if c.kernel == 0 || c.kernel % 2 == 0 || c.channels == 0 || c.stride == 0 {
                return bad(format!("invalid stem conv {c:?}"));
            }
        }
        if let Some(p) = self.stem.max_pool {
            if p.size < 2 || p.stride == 0 {
                return bad(format!("invalid stem pooling {p:?}"));
            }
        }
        if self.stages.is_empty() {
            return bad("stage list is empty".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.repeats == 0 {
                return bad(format!("stage {i} has zero repeats"));
            }
            s.block
                .validate()
                .map_err(|e| ModelError::Config(format!("stage {i}: {e}")))?;
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch norm eps must be positive and momentum in [0, 1]".into());
        }
        Ok(())
    }
}
