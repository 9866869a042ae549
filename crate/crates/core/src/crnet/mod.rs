//! The contrast-and-relation network.
//!
//! Wiring, with `f1..f4` the backbone stages at strides 4/8/16/32:
//!
//! ```text
//! Fc0 = LCC(f1)   Fc1 = LCC(f2)   Fs0 = LSR(f3)   Fs1 = LSR(f4)   Fsg = AGE(f4)
//! Fl1 = fuse(Fs1, Fsg)            Fl0 = fuse(Fs0, up(Fs1))
//! Fo0 = fuse(Fc0, up(Fl0))        Fo1 = fuse(Fc1, up(Fl1))
//! feature = fuse(Fo0, up(Fo1))
//! out0 = 3x3(feature)   out1..4 = 1x1(Fc0), 1x1(Fc1), 1x1(Fl0), 1x1(Fl1)
//! ```
//!
//! Every head's logits are resized to the input size before the sigmoid.

mod backbone;
mod blocks;
mod layers;

pub use backbone::{stage_channels, ResNet};
pub use blocks::{Age, Fuse, Lcc, Lce, Lfe, Lsr, Projection, AGE_BINS};
pub use layers::{activate, Act, BatchNorm, Conv2d, ConvBn, ConvSpec, Init, ParamStore, BN_EPS, BN_MOMENTUM};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::ops::sigmoid;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::MIN_SIDE;
use crate::resample::{resize_bilinear, resize_plane};
use crate::{Error, Result};

/// Per-channel RGB statistics of the backbone's pretraining corpus.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrNetConfig {
    pub depth: usize,
    /// Stem width of the backbone; pretrained weights need 64.
    pub width: usize,
    pub pretrained: Option<PathBuf>,
    pub channels: usize,
    pub lce_dilations: Vec<usize>,
    pub input_size: usize,
    pub seed: u64,
    pub use_age: bool,
    pub use_lcc: bool,
    pub use_lsr: bool,
}

impl Default for CrNetConfig {
    fn default() -> Self {
        CrNetConfig {
            depth: 50,
            width: 64,
            pretrained: None,
            channels: 64,
            lce_dilations: vec![4, 8],
            input_size: 320,
            seed: 0,
            use_age: true,
            use_lcc: true,
            use_lsr: true,
        }
    }
}

/// Module combinations of the architecture ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    BackboneOnly,
    WithAge,
    WithAgeLcc,
    WithAgeLsr,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::BackboneOnly,
        Ablation::WithAge,
        Ablation::WithAgeLcc,
        Ablation::WithAgeLsr,
        Ablation::Full,
    ];

    /// `(use_age, use_lcc, use_lsr)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Ablation::BackboneOnly => (false, false, false),
            Ablation::WithAge => (true, false, false),
            Ablation::WithAgeLcc => (true, true, false),
            Ablation::WithAgeLsr => (true, false, true),
            Ablation::Full => (true, true, true),
        }
    }
}

impl CrNetConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        (self.use_age, self.use_lcc, self.use_lsr) = ablation.flags();
        self
    }

    pub fn validate(&self, top_channels: Option<usize>) -> Result<()> {
        stage_channels(self.depth, self.width)?;
        if self.width == 0 {
            return Err(Error::InvalidConfig("backbone width must be positive".into()));
        }
        if self.pretrained.is_some() && self.width != 64 {
            return Err(Error::InvalidConfig(format!(
                "pretrained backbones have width 64, config asks for {}",
                self.width
            )));
        }
        if self.lce_dilations.is_empty() || self.lce_dilations.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "LCE dilations must be positive and non-empty: {:?}",
                self.lce_dilations
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidConfig("decoder channels must be positive".into()));
        }
        if let Some(n) = top_channels {
            if self.channels < n {
                return Err(Error::InvalidConfig(format!(
                    "decoder channels {} fewer than the {n} significant channels",
                    self.channels
                )));
            }
        }
        if self.input_size < MIN_SIDE {
            return Err(Error::InvalidConfig(format!(
                "input size {} below the {MIN_SIDE}px minimum",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum ContrastPath {
    Lcc(Lcc),
    Plain(Projection),
}

impl ContrastPath {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            ContrastPath::Lcc(m) => m.forward(x, train),
            ContrastPath::Plain(m) => m.forward(x, train),
        }
    }
}

#[derive(Debug, Clone)]
enum SemanticPath {
    Lsr(Lsr),
    Plain(Projection),
}

impl SemanticPath {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            SemanticPath::Lsr(m) => m.forward(x, train),
            SemanticPath::Plain(m) => m.forward(x, train),
        }
    }
}

#[derive(Debug, Clone)]
enum GlobalPath {
    Age(Age),
    Plain(Projection),
}

impl GlobalPath {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            GlobalPath::Age(m) => m.forward(x, train),
            GlobalPath::Plain(m) => m.forward(x, train),
        }
    }
}

/// Five probability maps at input resolution plus the stride-4
/// pre-prediction feature map.
#[derive(Debug, Clone)]
pub struct NetworkOutputs {
    /// `out0..out4`, each `(B, 1, H, W)` in `[0, 1]`.
    pub maps: Vec<Tensor>,
    /// `(B, C, H/4, W/4)`.
    pub feature: Tensor,
}

impl NetworkOutputs {
    pub fn main(&self) -> &Tensor {
        &self.maps[0]
    }

    /// Detached feature maps resized to `(height, width)`, one per image.
    pub fn feature_maps(&self, height: usize, width: usize) -> Result<Vec<Array3<f32>>> {
        let (b, c, fh, fw) = self.feature.dims4()?;
        let data = self.feature.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let plane = fh * fw;
        Ok((0..b)
            .map(|i| {
                let mut out = Array3::<f32>::zeros((c, height, width));
                for k in 0..c {
                    let start = (i * c + k) * plane;
                    let src = ndarray::ArrayView2::from_shape((fh, fw), &data[start..start + plane]).expect("plane shape");
                    out.index_axis_mut(ndarray::Axis(0), k).assign(&resize_plane(src, height, width));
                }
                out
            })
            .collect())
    }
}

#[derive(Debug)]
pub struct CrNet {
    config: CrNetConfig,
    store: ParamStore,
    backbone: ResNet,
    contrast: [ContrastPath; 2],
    semantic: [SemanticPath; 2],
    global: GlobalPath,
    fuse_l1: Fuse,
    fuse_l0: Fuse,
    fuse_out0: Fuse,
    fuse_out1: Fuse,
    fuse_feature: Fuse,
    head0: Conv2d,
    aux_heads: [Conv2d; 4],
}

impl CrNet {
    /// Seeded random initialization, then the pretrained backbone if one is
    /// configured.
    pub fn new(config: CrNetConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate(None)?;
        let mut store = ParamStore::new(dtype, device.clone());
        let c = config.channels;
        let stages = stage_channels(config.depth, config.width)?;
        let mut init = Init::new(&mut store, config.seed);
        let backbone = ResNet::new(&mut init, "backbone", config.depth, config.width)?;
        let contrast_width = c * config.lce_dilations.len();
        let contrast = [0, 1].map(|i| -> Result<ContrastPath> {
            let name = format!("lcc{i}");
            Ok(if config.use_lcc {
                ContrastPath::Lcc(Lcc::new(&mut init, &name, stages[i], c, &config.lce_dilations)?)
            } else {
                ContrastPath::Plain(Projection::new(&mut init, &name, stages[i], contrast_width)?)
            })
        });
        let [c0, c1] = contrast;
        let contrast = [c0?, c1?];
        let semantic = [2, 3].map(|i| -> Result<SemanticPath> {
            let name = format!("lsr{}", i - 2);
            Ok(if config.use_lsr {
                SemanticPath::Lsr(Lsr::new(&mut init, &name, stages[i], c)?)
            } else {
                SemanticPath::Plain(Projection::new(&mut init, &name, stages[i], c)?)
            })
        });
        let [s0, s1] = semantic;
        let semantic = [s0?, s1?];
        let global = if config.use_age {
            GlobalPath::Age(Age::new(&mut init, "age", stages[3], c)?)
        } else {
            GlobalPath::Plain(Projection::new(&mut init, "age", stages[3], c)?)
        };
        let fuse_l1 = Fuse::new(&mut init, "fuse_l1", 2 * c, c)?;
        let fuse_l0 = Fuse::new(&mut init, "fuse_l0", 2 * c, c)?;
        let fuse_out0 = Fuse::new(&mut init, "fuse_out0", contrast_width + c, c)?;
        let fuse_out1 = Fuse::new(&mut init, "fuse_out1", contrast_width + c, c)?;
        let fuse_feature = Fuse::new(&mut init, "fuse_feature", 2 * c, c)?;
        let head0 = Conv2d::new(&mut init, "head0", ConvSpec::new(c, 1, 3).bias())?;
        let aux_in = [contrast_width, contrast_width, c, c];
        let aux_heads = [0, 1, 2, 3].map(|i| Conv2d::new(&mut init, &format!("head{}", i + 1), ConvSpec::new(aux_in[i], 1, 1).bias()));
        let [a1, a2, a3, a4] = aux_heads;
        let aux_heads = [a1?, a2?, a3?, a4?];
        drop(init);

        let net = CrNet {
            config,
            store,
            backbone,
            contrast,
            semantic,
            global,
            fuse_l1,
            fuse_l0,
            fuse_out0,
            fuse_out1,
            fuse_feature,
            head0,
            aux_heads,
        };
        if let Some(path) = net.config.pretrained.clone() {
            net.load_backbone(&path)?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &CrNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &ResNet {
        &self.backbone
    }

    /// Loads torchvision ResNet weights from a safetensors file. Keys may
    /// carry a `backbone.` prefix or none; every backbone tensor must be
    /// present. Returns the number of tensors loaded.
    pub fn load_backbone(&self, path: &Path) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, self.store.device())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut missing = Vec::new();
        let mut loaded = 0;
        let names: Vec<String> = self
            .store
            .params()
            .iter()
            .map(|(n, _)| n.clone())
            .chain(self.store.buffers().iter().map(|(n, _)| n.clone()))
            .filter(|n| n.starts_with("backbone."))
            .collect();
        for name in names {
            let bare = name.trim_start_matches("backbone.");
            match tensors.get(&name).or_else(|| tensors.get(bare)) {
                Some(t) => {
                    self.store.assign(&name, t)?;
                    loaded += 1;
                }
                None => missing.push(name),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "{} is missing {} backbone tensors, e.g. {:?}",
                path.display(),
                missing.len(),
                &missing[..missing.len().min(5)]
            )));
        }
        Ok(loaded)
    }

    /// Normalizes an RGB batch in `[0, 1]` with the backbone statistics.
    fn normalize(&self, images: &Tensor) -> Result<Tensor> {
        let device = self.store.device();
        let dtype = self.store.dtype();
        let mean = Tensor::new(&IMAGENET_MEAN, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        Ok(images.to_dtype(dtype)?.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Forward pass on a `(B, 3, H, W)` batch in `[0, 1]`. `train` selects
    /// batch statistics (and updates running statistics) in batch norm.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<NetworkOutputs> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::InvalidImage(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{h}x{w} input is smaller than the {MIN_SIDE}px minimum"
            )));
        }
        let x = self.normalize(images)?;
        let [f1, f2, f3, f4] = self.backbone.forward(&x, train)?;
        let fc0 = self.contrast[0].forward(&f1, train)?;
        let fc1 = self.contrast[1].forward(&f2, train)?;
        let fs0 = self.semantic[0].forward(&f3, train)?;
        let fs1 = self.semantic[1].forward(&f4, train)?;
        let fsg = self.global.forward(&f4, train)?;
        let fl1 = self.fuse_l1.forward(&fs1, &fsg, train)?;
        let fl0 = self.fuse_l0.forward(&fs0, &fs1, train)?;
        let fo0 = self.fuse_out0.forward(&fc0, &fl0, train)?;
        let fo1 = self.fuse_out1.forward(&fc1, &fl1, train)?;
        let feature = self.fuse_feature.forward(&fo0, &fo1, train)?;

        let logits = [
            self.head0.forward(&feature)?,
            self.aux_heads[0].forward(&fc0)?,
            self.aux_heads[1].forward(&fc1)?,
            self.aux_heads[2].forward(&fl0)?,
            self.aux_heads[3].forward(&fl1)?,
        ];
        let maps = logits
            .iter()
            .map(|l| Ok(sigmoid(&resize_bilinear(l, h, w)?)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(NetworkOutputs { maps, feature })
    }

    /// Names of all parameters, in creation order.
    pub fn param_names(&self) -> Vec<String> {
        self.store.params().iter().map(|(n, _)| n.clone()).collect()
    }

    /// Sanity check that parameter and buffer names are unique.
    pub fn check_names(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self
            .store
            .params()
            .iter()
            .map(|(n, _)| n)
            .chain(self.store.buffers().iter().map(|(n, _)| n))
        {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate tensor name `{name}`")));
            }
        }
        Ok(())
    }
}
