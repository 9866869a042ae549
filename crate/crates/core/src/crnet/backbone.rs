//! ResNet feature extractor with torchvision parameter names.

use candle_core::Tensor;

use super::layers::{max_pool_3x3_s2, BatchNorm, Conv2d, ConvSpec, Init};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    Basic,
    Bottleneck,
}

fn layout(depth: usize) -> Result<(BlockKind, [usize; 4])> {
    Ok(match depth {
        18 => (BlockKind::Basic, [2, 2, 2, 2]),
        34 => (BlockKind::Basic, [3, 4, 6, 3]),
        50 => (BlockKind::Bottleneck, [3, 4, 6, 3]),
        101 => (BlockKind::Bottleneck, [3, 4, 23, 3]),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unsupported backbone depth {other} (expected 18, 34, 50 or 101)"
            )))
        }
    })
}

/// Output channels of the four stages for a given depth and stem width
/// (64 for the standard networks).
pub fn stage_channels(depth: usize, width: usize) -> Result<[usize; 4]> {
    let (kind, _) = layout(depth)?;
    let expansion = if kind == BlockKind::Bottleneck { 4 } else { 1 };
    Ok([1, 2, 4, 8].map(|m| m * width * expansion))
}

#[derive(Debug, Clone)]
struct Residual {
    convs: Vec<(Conv2d, BatchNorm)>,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Residual {
    fn new(init: &mut Init, name: &str, kind: BlockKind, cin: usize, planes: usize, stride: usize) -> Result<Self> {
        let specs: Vec<ConvSpec> = match kind {
            BlockKind::Basic => vec![
                ConvSpec::new(cin, planes, 3).stride(stride),
                ConvSpec::new(planes, planes, 3),
            ],
            BlockKind::Bottleneck => vec![
                ConvSpec::new(cin, planes, 1),
                ConvSpec::new(planes, planes, 3).stride(stride),
                ConvSpec::new(planes, planes * 4, 1),
            ],
        };
        let cout = specs.last().expect("non-empty").cout;
        let mut convs = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let conv = Conv2d::new(init, &format!("{name}.conv{}", i + 1), spec)?;
            let bn = BatchNorm::new(init, &format!("{name}.bn{}", i + 1), spec.cout)?;
            convs.push((conv, bn));
        }
        let downsample = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(init, &format!("{name}.downsample.0"), ConvSpec::new(cin, cout, 1).stride(stride).padding(0))?,
                BatchNorm::new(init, &format!("{name}.downsample.1"), cout)?,
            ))
        } else {
            None
        };
        Ok(Residual { convs, downsample })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        let last = self.convs.len() - 1;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            y = bn.forward(&conv.forward(&y)?, train)?;
            if i != last {
                y = y.relu()?;
            }
        }
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct ResNet {
    conv1: Conv2d,
    bn1: BatchNorm,
    stages: [Vec<Residual>; 4],
    channels: [usize; 4],
}

impl ResNet {
    pub fn new(init: &mut Init, prefix: &str, depth: usize, width: usize) -> Result<Self> {
        let (kind, counts) = layout(depth)?;
        let expansion = if kind == BlockKind::Bottleneck { 4 } else { 1 };
        let conv1 = Conv2d::new(init, &format!("{prefix}.conv1"), ConvSpec::new(3, width, 7).stride(2).padding(3))?;
        let bn1 = BatchNorm::new(init, &format!("{prefix}.bn1"), width)?;
        let mut cin = width;
        let mut stages: [Vec<Residual>; 4] = Default::default();
        for (s, &count) in counts.iter().enumerate() {
            let planes = width << s;
            for i in 0..count {
                let stride = if i == 0 && s > 0 { 2 } else { 1 };
                let name = format!("{prefix}.layer{}.{i}", s + 1);
                stages[s].push(Residual::new(init, &name, kind, cin, planes, stride)?);
                cin = planes * expansion;
            }
        }
        Ok(ResNet {
            conv1,
            bn1,
            stages,
            channels: stage_channels(depth, width)?,
        })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    /// Features at strides 4, 8, 16 and 32.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<[Tensor; 4]> {
        let stem = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let mut y = max_pool_3x3_s2(&stem)?;
        let mut feats: Vec<Tensor> = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(&y, train)?;
            }
            feats.push(y.clone());
        }
        Ok(feats.try_into().expect("four stages"))
    }
}
