//! Training losses and their composition.
//!
//! Every loss takes probability maps shaped `(B, 1, H, W)` and returns a
//! scalar tensor, averaged per image and then over the batch. Masks,
//! kernels and thresholds derived from predictions are computed on detached
//! values, so gradients only flow through the probabilities themselves.

mod affinity;
mod consistency;
mod semantic;

pub use affinity::{context_affinity_loss, disagreement, visual_kernel, AffinityKernel};
pub use consistency::{
    binary_entropy, binary_entropy_map, cv_loss, iv_loss, map_tensor, pce_loss, rcv_loss, ssim_map,
};
pub use semantic::{
    boundary_regions, channel_significance, select_significant_channels, semantic_guide,
    semantic_kernel, semantic_significance_loss, Block, SemanticGuide,
};

use candle_core::{Shape, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{Image, ScribbleMap};
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// SSIM versus absolute-difference blend in the cross-view term.
    pub alpha: f64,
    /// Reliability bias between the two views.
    pub gamma: f64,
    pub w_iv: f64,
    pub entropy_threshold: f64,
    pub kernel_window: usize,
    pub sigma_s: f64,
    pub sigma_c: f64,
    pub top_channels: usize,
    pub block_size: usize,
    pub boundary_fraction: f64,
    pub fg_conf: f64,
    pub bg_conf: f64,
    pub w_ss_max: f64,
    pub w_ss_ramp_epochs: usize,
    pub iv_start_epoch: usize,
    /// Weights of the four auxiliary outputs.
    pub beta: [f64; 4],
    pub use_pce: bool,
    pub use_cv: bool,
    pub use_iv: bool,
    pub use_ca: bool,
    pub use_ss: bool,
    pub use_aux: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.85,
            gamma: 0.3,
            w_iv: 0.05,
            entropy_threshold: 0.5,
            kernel_window: 5,
            sigma_s: 6.0,
            sigma_c: 0.1,
            top_channels: 16,
            block_size: 20,
            boundary_fraction: 0.3,
            fg_conf: 0.8,
            bg_conf: 0.2,
            w_ss_max: 0.3,
            w_ss_ramp_epochs: 50,
            iv_start_epoch: 100,
            beta: [0.3; 4],
            use_pce: true,
            use_cv: true,
            use_iv: true,
            use_ca: true,
            use_ss: true,
            use_aux: true,
        }
    }
}

impl LossConfig {
    /// Only partial cross-entropy on the main output.
    pub fn pce_only() -> Self {
        LossConfig {
            use_cv: false,
            use_iv: false,
            use_ca: false,
            use_ss: false,
            use_aux: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.kernel_window < 3 || self.kernel_window % 2 == 0 {
            return bad(format!("kernel_window {} must be odd and at least 3", self.kernel_window));
        }
        for (name, v) in [
            ("entropy_threshold", self.entropy_threshold),
            ("boundary_fraction", self.boundary_fraction),
            ("fg_conf", self.fg_conf),
            ("bg_conf", self.bg_conf),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} outside (0, 1)"));
            }
        }
        if !(self.sigma_s > 0.0 && self.sigma_c > 0.0) {
            return bad("kernel bandwidths must be positive".into());
        }
        if self.block_size == 0 || self.top_channels == 0 {
            return bad("block_size and top_channels must be positive".into());
        }
        if self.w_iv < 0.0 || self.w_ss_max < 0.0 || self.beta.iter().any(|b| *b < 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// Semantic significance weight: a linear ramp to `w_ss_max`.
    pub fn w_ss(&self, epoch: usize) -> f64 {
        if self.w_ss_ramp_epochs == 0 {
            return self.w_ss_max;
        }
        self.w_ss_max * (epoch as f64 / self.w_ss_ramp_epochs as f64).min(1.0)
    }
}

/// Component values of one loss evaluation. `iv` and `ss` include their
/// weights; `aux` holds the unweighted auxiliary sums.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pce: f64,
    pub cv: f64,
    pub rcv: f64,
    pub iv: f64,
    pub ca: f64,
    pub ss: f64,
    pub aux: [f64; 4],
    pub total: f64,
    pub w_ss: f64,
}

/// Main prediction aligned into the transformed view, the prediction on the
/// transformed image, and the pixels where the alignment is defined.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub aligned: Tensor,
    pub transformed: Tensor,
    pub valid: Array2<bool>,
}

/// Everything the total loss needs for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    /// Five probability maps at input resolution, main output first.
    pub outputs: &'a [Tensor],
    /// Detached pre-prediction features per image at input resolution.
    pub features: &'a [Array3<f32>],
    pub scribbles: &'a [ScribbleMap],
    pub images: &'a [Image],
    pub view: Option<&'a ViewPair>,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

pub(crate) fn host_tensor<S: Into<Shape>>(data: Vec<f64>, shape: S, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, like.device())?.to_dtype(like.dtype())?)
}

pub(crate) fn zero_like(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

/// `(B, 1, H, W)` tensor to one `H × W` f64 array per image.
pub fn predictions_host(pred: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (b, _, h, w) = pred.dims4()?;
    let data = pred.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(data
        .chunks(h * w)
        .take(b)
        .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("chunk matches shape"))
        .collect())
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Auxiliary loss of one side output: partial cross-entropy, context
/// affinity and inside-view consistency, each subject to its toggle.
pub fn aux_loss(pred: &Tensor, scribbles: &[ScribbleMap], kernel: &AffinityKernel, cfg: &LossConfig, epoch: usize) -> Result<Tensor> {
    let mut acc = zero_like(pred)?;
    if cfg.use_pce {
        acc = (acc + pce_loss(pred, scribbles)?)?;
    }
    if cfg.use_ca {
        acc = (acc + kernel.loss(pred)?)?;
    }
    if cfg.use_iv {
        acc = (acc + iv_loss(pred, cfg, epoch)?)?;
    }
    Ok(acc)
}

/// Full training objective: partial cross-entropy, reliable cross-view and
/// inside-view consistency, context affinity and semantic significance on
/// the main output, plus weighted auxiliary losses on the side outputs.
/// Disabled components contribute exactly zero.
pub fn total_loss(inputs: &LossInputs, cfg: &LossConfig) -> Result<LossOutput> {
    let outputs = inputs.outputs;
    if outputs.len() != 5 {
        return Err(Error::InvalidConfig(format!("expected 5 outputs, got {}", outputs.len())));
    }
    let main = &outputs[0];
    let epoch = inputs.epoch;
    let mut breakdown = LossBreakdown {
        w_ss: if cfg.use_ss { cfg.w_ss(epoch) } else { 0.0 },
        ..Default::default()
    };
    let mut total = zero_like(main)?;

    if cfg.use_pce {
        let t = pce_loss(main, inputs.scribbles)?;
        breakdown.pce = scalar(&t)?;
        total = (total + t)?;
    }
    if cfg.use_cv {
        let view = inputs
            .view
            .ok_or_else(|| Error::InvalidConfig("cross-view loss enabled without a view pair".into()))?;
        breakdown.cv = scalar(&cv_loss(&view.aligned, &view.transformed, &view.valid, cfg.alpha)?)?;
        let t = rcv_loss(&view.aligned, &view.transformed, &view.valid, cfg.alpha, cfg.gamma)?;
        breakdown.rcv = scalar(&t)?;
        total = (total + t)?;
    }
    if cfg.use_iv {
        let t = iv_loss(main, cfg, epoch)?;
        breakdown.iv = scalar(&t)?;
        total = (total + t)?;
    }
    let kernel = if cfg.use_ca {
        Some(AffinityKernel::new(inputs.images, cfg, main)?)
    } else {
        None
    };
    if let Some(kernel) = &kernel {
        let t = kernel.loss(main)?;
        breakdown.ca = scalar(&t)?;
        total = (total + t)?;
    }
    if cfg.use_ss {
        let t = semantic_significance_loss(main, inputs.features, inputs.scribbles, cfg, epoch)?;
        breakdown.ss = scalar(&t)?;
        total = (total + t)?;
    }
    if cfg.use_aux {
        let local;
        let kernel = match &kernel {
            Some(k) => k,
            None => {
                local = AffinityKernel::new(inputs.images, cfg, main)?;
                &local
            }
        };
        for (k, out) in outputs[1..].iter().enumerate() {
            let t = aux_loss(out, inputs.scribbles, kernel, cfg, epoch)?;
            breakdown.aux[k] = scalar(&t)?;
            total = (total + t.affine(cfg.beta[k], 0.0)?)?;
        }
    }
    breakdown.total = scalar(&total)?;
    Ok(LossOutput { total, breakdown })
}
