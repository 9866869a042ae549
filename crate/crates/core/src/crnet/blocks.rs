//! Decoder blocks: LFE, LCE, LCC, LSR, AGE and the fusion convolution.

use candle_core::Tensor;
use candle_nn::ops::sigmoid;

use super::layers::{
    activate, channel_concat, mean_keepdim, upsample_like, Act, BatchNorm, Conv2d, ConvBn, ConvSpec, Init,
};
use crate::resample::adaptive_avg_pool;
use crate::Result;

/// Low-level feature extractor: coordinate-attention style gating from
/// row and column averages.
#[derive(Debug, Clone)]
pub struct Lfe {
    squeeze: ConvBn,
    gate_h: Conv2d,
    gate_w: Conv2d,
}

impl Lfe {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let mid = (channels / 32).max(8);
        Ok(Lfe {
            squeeze: ConvBn::new(init, &format!("{name}.squeeze"), ConvSpec::new(channels, mid, 1).bias(), Act::Swish)?,
            gate_h: Conv2d::new(init, &format!("{name}.gate_h"), ConvSpec::new(mid, channels, 1).bias())?,
            gate_w: Conv2d::new(init, &format!("{name}.gate_w"), ConvSpec::new(mid, channels, 1).bias())?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        // (B, C, H, 1) and (B, C, W, 1) descriptors stacked along the pooled axis
        let rows = mean_keepdim(x, 3)?;
        let cols = mean_keepdim(x, 2)?.transpose(2, 3)?;
        let joint = self.squeeze.forward(&Tensor::cat(&[&rows, &cols], 2)?, train)?;
        let gh = sigmoid(&self.gate_h.forward(&joint.narrow(2, 0, h)?)?)?;
        let gw = sigmoid(&self.gate_w.forward(&joint.narrow(2, h, w)?.transpose(2, 3)?)?)?;
        Ok(x.broadcast_mul(&gh)?.broadcast_mul(&gw)?)
    }
}

/// Local-context contrast extractor: a plain 3×3 receptor minus a dilated
/// one, each gated by its own LFE.
#[derive(Debug, Clone)]
pub struct Lce {
    local: Conv2d,
    local_lfe: Lfe,
    context: Conv2d,
    context_lfe: Lfe,
    bn: BatchNorm,
}

impl Lce {
    pub fn new(init: &mut Init, name: &str, channels: usize, dilation: usize) -> Result<Self> {
        Ok(Lce {
            local: Conv2d::new(init, &format!("{name}.local"), ConvSpec::new(channels, channels, 3).bias())?,
            local_lfe: Lfe::new(init, &format!("{name}.local_lfe"), channels)?,
            context: Conv2d::new(
                init,
                &format!("{name}.context"),
                ConvSpec::new(channels, channels, 3).dilation(dilation).padding(dilation).bias(),
            )?,
            context_lfe: Lfe::new(init, &format!("{name}.context_lfe"), channels)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let local = self.local_lfe.forward(&self.local.forward(x)?, train)?;
        let context = self.context_lfe.forward(&self.context.forward(x)?, train)?;
        Ok(self.bn.forward(&(local - context)?, train)?.relu()?)
    }
}

/// Local-context contrasted module: channel reduction then two LCEs at
/// different context dilations, concatenated.
#[derive(Debug, Clone)]
pub struct Lcc {
    reduce: ConvBn,
    lces: Vec<Lce>,
}

impl Lcc {
    pub fn new(init: &mut Init, name: &str, cin: usize, channels: usize, dilations: &[usize]) -> Result<Self> {
        let reduce = ConvBn::new(init, &format!("{name}.reduce"), ConvSpec::new(cin, channels, 1), Act::Relu)?;
        let lces = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| Lce::new(init, &format!("{name}.lce{i}"), channels, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Lcc { reduce, lces })
    }

    pub fn out_channels(&self, channels: usize) -> usize {
        channels * self.lces.len()
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let reduced = self.reduce.forward(x, train)?;
        let parts = self
            .lces
            .iter()
            .map(|l| l.forward(&reduced, train))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 1)?)
    }
}

/// Logical semantic relation module: four branches of growing receptive
/// field, merged and added to a 1×1 residual.
#[derive(Debug, Clone)]
pub struct Lsr {
    branches: Vec<Vec<ConvBn>>,
    merge: ConvBn,
    residual: Conv2d,
}

impl Lsr {
    pub fn new(init: &mut Init, name: &str, cin: usize, channels: usize) -> Result<Self> {
        let c = channels;
        let dilated = ConvSpec::new(c, c, 3).dilation(7).padding(7);
        let wide = ConvSpec::new(c, c, 7);
        let entry = ConvSpec::new(cin, c, 1);
        let plans: [Vec<ConvSpec>; 4] = [
            vec![entry],
            vec![entry, wide, dilated],
            vec![entry, wide, wide, dilated],
            vec![entry, wide, wide, dilated],
        ];
        let mut branches = Vec::with_capacity(4);
        for (b, plan) in plans.iter().enumerate() {
            let last = plan.len() - 1;
            let branch = plan
                .iter()
                .enumerate()
                .map(|(i, &spec)| {
                    let act = if i == last { Act::None } else { Act::Gelu };
                    ConvBn::new(init, &format!("{name}.branch{b}.{i}"), spec, act)
                })
                .collect::<Result<Vec<_>>>()?;
            branches.push(branch);
        }
        Ok(Lsr {
            branches,
            merge: ConvBn::new(init, &format!("{name}.merge"), ConvSpec::new(4 * c, c, 3), Act::None)?,
            residual: Conv2d::new(init, &format!("{name}.residual"), ConvSpec::new(cin, c, 1))?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let mut y = x.clone();
            for layer in branch {
                y = layer.forward(&y, train)?;
            }
            outs.push(y);
        }
        let merged = self.merge.forward(&Tensor::cat(&outs, 1)?, train)?;
        activate(&(merged + self.residual.forward(x)?)?, Act::Gelu)
    }
}

pub const AGE_BINS: [usize; 4] = [1, 2, 3, 6];

/// Auxiliary global extractor: pyramid pooling over the last stage.
#[derive(Debug, Clone)]
pub struct Age {
    levels: Vec<ConvBn>,
    project: ConvBn,
}

impl Age {
    pub fn new(init: &mut Init, name: &str, cin: usize, channels: usize) -> Result<Self> {
        let reduced = (cin / 4).max(1);
        let levels = AGE_BINS
            .iter()
            .map(|bin| ConvBn::new(init, &format!("{name}.pool{bin}"), ConvSpec::new(cin, reduced, 1), Act::Gelu))
            .collect::<Result<Vec<_>>>()?;
        let project = ConvBn::new(
            init,
            &format!("{name}.project"),
            ConvSpec::new(cin + 4 * reduced, channels, 1),
            Act::Gelu,
        )?;
        Ok(Age { levels, project })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut parts = vec![x.clone()];
        for (bin, level) in AGE_BINS.iter().zip(&self.levels) {
            let pooled = adaptive_avg_pool(x, *bin, *bin)?;
            parts.push(upsample_like(&level.forward(&pooled, train)?, x)?);
        }
        self.project.forward(&Tensor::cat(&parts, 1)?, train)
    }
}

/// Concatenate a fine tensor with a coarse one upsampled to its size, then
/// 1×1 conv + BN + ReLU.
#[derive(Debug, Clone)]
pub struct Fuse {
    conv: ConvBn,
}

impl Fuse {
    pub fn new(init: &mut Init, name: &str, cin: usize, channels: usize) -> Result<Self> {
        Ok(Fuse {
            conv: ConvBn::new(init, name, ConvSpec::new(cin, channels, 1), Act::Relu)?,
        })
    }

    pub fn forward(&self, fine: &Tensor, coarse: &Tensor, train: bool) -> Result<Tensor> {
        let up = upsample_like(coarse, fine)?;
        self.conv.forward(&channel_concat(&[fine, &up])?, train)
    }
}

/// Stand-in for an ablated block: 1×1 conv + BN + ReLU to the width the
/// block would have produced.
#[derive(Debug, Clone)]
pub struct Projection {
    conv: ConvBn,
}

impl Projection {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Projection {
            conv: ConvBn::new(init, name, ConvSpec::new(cin, cout, 1), Act::Relu)?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.conv.forward(x, train)
    }
}
