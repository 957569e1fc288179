//! Residual network topologies: the 18/34-layer basic-block and 50-layer
//! bottleneck presets, plus arbitrary stage layouts for small experiments.

use polypforge_nn::layers::{BatchNorm2d, Conv2d, Linear};
use polypforge_nn::{Graph, Init, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassifierError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// `Standard`: 7×7 stride-2 convolution and 3×3 stride-2 max pool (for
/// 224-pixel inputs). `Compact`: a single 3×3 stride-1 convolution, for
/// small tiles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    #[default]
    Standard,
    Compact,
}

/// Serializable architecture descriptor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetArch {
    pub block: BlockKind,
    /// Blocks per stage; stage `i` has width `base_width · 2^i`.
    pub layers: Vec<usize>,
    pub base_width: usize,
    pub stem: StemKind,
    pub num_classes: usize,
}

impl ResNetArch {
    pub fn preset(depth: u32, num_classes: usize, base_width: usize, stem: StemKind) -> Result<Self> {
        let (block, layers) = match depth {
            18 => (BlockKind::Basic, vec![2, 2, 2, 2]),
            34 => (BlockKind::Basic, vec![3, 4, 6, 3]),
            50 => (BlockKind::Bottleneck, vec![3, 4, 6, 3]),
            other => return Err(ClassifierError::UnsupportedDepth(other)),
        };
        Ok(ResNetArch { block, layers, base_width, stem, num_classes })
    }

    pub fn feature_width(&self) -> usize {
        self.base_width * (1 << (self.layers.len() - 1)) * self.block.expansion()
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let init = Init::HeNormal { fan: cout * k * k };
        let conv = Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, k / 2, false, init, rng)?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), cout)?;
        Ok(ConvBn { conv, bn })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        Ok(self.bn.forward(g, y)?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    convs: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl Block {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

/// Parameter handles of a residual network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ResNet {
    pub arch: ResNetArch,
    stem: ConvBn,
    blocks: Vec<Block>,
    fc: Linear,
}

impl ResNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(arch: &ResNetArch, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        if arch.layers.is_empty() || arch.base_width == 0 || arch.num_classes < 2 {
            return Err(ClassifierError::InvalidConfig {
                field: "architecture".into(),
                message: "need at least one stage, positive width and two classes".into(),
            });
        }
        let w0 = arch.base_width;
        let stem = match arch.stem {
            StemKind::Standard => ConvBn::new(store, "stem", 3, w0, 7, 2, rng)?,
            StemKind::Compact => ConvBn::new(store, "stem", 3, w0, 3, 1, rng)?,
        };
        let exp = arch.block.expansion();
        let mut blocks = Vec::new();
        let mut cin = w0;
        for (s, &n) in arch.layers.iter().enumerate() {
            let width = w0 << s;
            let cout = width * exp;
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("layer{}.{b}", s + 1);
                let convs = match arch.block {
                    BlockKind::Basic => vec![
                        ConvBn::new(store, &format!("{name}.a"), cin, width, 3, stride, rng)?,
                        ConvBn::new(store, &format!("{name}.b"), width, width, 3, 1, rng)?,
                    ],
                    BlockKind::Bottleneck => vec![
                        ConvBn::new(store, &format!("{name}.a"), cin, width, 1, 1, rng)?,
                        ConvBn::new(store, &format!("{name}.b"), width, width, 3, stride, rng)?,
                        ConvBn::new(store, &format!("{name}.c"), width, cout, 1, 1, rng)?,
                    ],
                };
                let shortcut = if stride != 1 || cin != cout {
                    Some(ConvBn::new(store, &format!("{name}.down"), cin, cout, 1, stride, rng)?)
                } else {
                    None
                };
                blocks.push(Block { convs, shortcut });
                cin = cout;
            }
        }
        let fc = Linear::new(store, "fc", cin, arch.num_classes, rng)?;
        Ok(ResNet { arch: arch.clone(), stem, blocks, fc })
    }

    /// Logits `[N, num_classes]` for a `[N, 3, H, W]` batch.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(g, x)?;
        h = g.relu(h);
        if self.arch.stem == StemKind::Standard {
            h = g.max_pool2d(h, 3, 2, 1)?;
        }
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        let pooled = g.global_avg_pool(h)?;
        Ok(self.fc.forward(g, pooled)?)
    }
}
