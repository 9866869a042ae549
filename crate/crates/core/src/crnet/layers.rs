//! Parameter storage and the handful of layers the network is built from.
//!
//! Convolutions are lowered to im2col + matmul. The unfold is a custom op
//! whose gradient is the matching fold, so both passes stay on matrix
//! products.

use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::resample::resize_bilinear;
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Named trainable parameters plus non-trainable buffers (batch-norm
/// running statistics), in creation order.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Arc<Mutex<Tensor>>)>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        ParamStore {
            dtype,
            device,
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Arc<Mutex<Tensor>>)] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn buffer(&self, name: &str) -> Option<Tensor> {
        self.buffers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.lock().expect("buffer lock").clone())
    }

    #[cfg(test)]
    pub(crate) fn push_for_test(&mut self, name: &str, var: Var) {
        self.params.push((name.to_string(), var));
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites a parameter or buffer with `value` (shape must match).
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?.to_device(&self.device)?;
        if let Some(var) = self.param(name) {
            if var.dims() != value.dims() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, checkpoint holds {:?}",
                    var.dims(),
                    value.dims()
                )));
            }
            var.set(&value)?;
            return Ok(());
        }
        if let Some((_, buf)) = self.buffers.iter().find(|(n, _)| n == name) {
            let mut guard = buf.lock().expect("buffer lock");
            if guard.dims() != value.dims() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, checkpoint holds {:?}",
                    guard.dims(),
                    value.dims()
                )));
            }
            *guard = value;
            return Ok(());
        }
        Err(Error::Checkpoint(format!("unknown tensor `{name}`")))
    }
}

/// Deterministic parameter factory: every draw comes from one seeded
/// stream in construction order.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.params.push((name, var.clone()));
        Ok(var)
    }

    /// He-normal init with fan-out, as used for ReLU networks.
    pub fn kaiming(&mut self, name: String, shape: &[usize]) -> Result<Var> {
        let fan_out = shape[0] * shape[2..].iter().product::<usize>();
        let std = (2.0 / fan_out as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.push(name, data, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.push(name, vec![value; n], shape)
    }

    pub fn buffer(&mut self, name: String, len: usize, value: f64) -> Result<Arc<Mutex<Tensor>>> {
        let t = Tensor::full(value, len, &self.store.device)?.to_dtype(self.store.dtype)?;
        let buf = Arc::new(Mutex::new(t));
        self.store.buffers.push((name, buf.clone()));
        Ok(buf)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

/// Geometry of a square convolution window over a `(B, C, H, W)` input.
#[derive(Debug, Clone, Copy)]
struct Window {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn new(dims: (usize, usize, usize, usize), k: usize, stride: usize, padding: usize, dilation: usize) -> Result<Self> {
        let (b, c, h, w) = dims;
        let span = dilation * (k - 1) + 1;
        let out = |side: usize| {
            (side + 2 * padding)
                .checked_sub(span)
                .map(|v| v / stride + 1)
                .ok_or_else(|| Error::InvalidConfig(format!("{h}x{w} input too small for kernel span {span}")))
        };
        Ok(Window {
            b,
            c,
            h,
            w,
            k,
            stride,
            padding,
            dilation,
            oh: out(h)?,
            ow: out(w)?,
        })
    }

    fn rows(&self) -> usize {
        self.k * self.k * self.c
    }

    /// Calls `f(input_index, column_index)` for every in-bounds tap.
    /// Columns are laid out `(B, k·k·C, OH·OW)`, tap-major and channel-minor.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n = self.oh * self.ow;
        for bi in 0..self.b {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    for ci in 0..self.c {
                        let row = (ky * self.k + kx) * self.c + ci;
                        let col_base = (bi * self.rows() + row) * n;
                        let in_base = (bi * self.c + ci) * self.h * self.w;
                        for oy in 0..self.oh {
                            let y = (oy * self.stride + ky * self.dilation) as isize - self.padding as isize;
                            if y < 0 || y >= self.h as isize {
                                continue;
                            }
                            let in_row = in_base + y as usize * self.w;
                            for ox in 0..self.ow {
                                let x = (ox * self.stride + kx * self.dilation) as isize - self.padding as isize;
                                if x >= 0 && x < self.w as isize {
                                    f(in_row + x as usize, col_base + oy * self.ow + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Copy + Default>(&self, input: &[T]) -> Vec<T> {
        let mut cols = vec![T::default(); self.b * self.rows() * self.oh * self.ow];
        self.for_each(|i, j| cols[j] = input[i]);
        cols
    }

    fn col2im<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.b * self.c * self.h * self.w];
        self.for_each(|i, j| out[i] += cols[j]);
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &candle_core::Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous tensor"),
    }
}

/// Unfolds convolution windows into columns; the gradient folds them back.
struct Im2Col(Window);

impl candle_core::CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let w = self.0;
        let out = match storage {
            S::F32(d) => S::F32(w.im2col(contiguous_slice(d, layout)?)),
            S::F64(d) => S::F64(w.im2col(contiguous_slice(d, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, (w.b, w.rows(), w.oh * w.ow).into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

struct Col2Im(Window);

impl candle_core::CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let w = self.0;
        let out = match storage {
            S::F32(d) => S::F32(w.col2im(contiguous_slice(d, layout)?)),
            S::F64(d) => S::F64(w.col2im(contiguous_slice(d, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, (w.b, w.c, w.h, w.w).into()))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    spec: ConvSpec,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, spec: ConvSpec) -> Result<Self> {
        let weight = init.kaiming(format!("{name}.weight"), &[spec.cout, spec.cin, spec.kernel, spec.kernel])?;
        let bias = if spec.bias {
            Some(init.constant(format!("{name}.bias"), &[spec.cout], 0.0)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, spec })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.spec;
        let (b, cin, h, w) = x.dims4()?;
        if cin != s.cin {
            return Err(Error::InvalidConfig(format!("conv expects {} channels, got {cin}", s.cin)));
        }
        let (cols, oh, ow) = if s.kernel == 1 && s.padding == 0 && s.stride == 1 {
            (x.reshape((b, cin, h * w))?, h, w)
        } else {
            let win = Window::new((b, cin, h, w), s.kernel, s.stride, s.padding, s.dilation)?;
            (x.contiguous()?.apply_op1(Im2Col(win))?, win.oh, win.ow)
        };
        // (Cout, kh, kw, Cin) matches the tap-major, channel-minor column order
        let wmat = self
            .weight
            .as_tensor()
            .permute((0, 2, 3, 1))?
            .reshape((s.cout, s.kernel * s.kernel * cin))?;
        let mut y = wmat.broadcast_matmul(&cols)?;
        if let Some(bias) = &self.bias {
            y = y.broadcast_add(&bias.as_tensor().reshape((1, s.cout, 1))?)?;
        }
        Ok(y.reshape((b, s.cout, oh, ow))?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Var,
    bias: Var,
    running_mean: Arc<Mutex<Tensor>>,
    running_var: Arc<Mutex<Tensor>>,
    channels: usize,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            weight: init.constant(format!("{name}.weight"), &[channels], 1.0)?,
            bias: init.constant(format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: init.buffer(format!("{name}.running_mean"), channels, 0.0)?,
            running_var: init.buffer(format!("{name}.running_var"), channels, 1.0)?,
            channels,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    /// Batch statistics (and a running-stat update) when `train`, running
    /// statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let shape = (1, self.channels, 1, 1);
        if c != self.channels {
            return Err(Error::InvalidConfig(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let (mean, var) = if train {
            let n = b * h * w;
            let mean = (x.sum_keepdim(0)?.sum_keepdim(2)?.sum_keepdim(3)? / n as f64)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = (centered.sqr()?.sum_keepdim(0)?.sum_keepdim(2)?.sum_keepdim(3)? / n as f64)?;
            {
                let mean_d = mean.detach().flatten_all()?;
                let var_d = var.detach().flatten_all()?;
                let unbiased = if n > 1 { (var_d * (n as f64 / (n - 1) as f64))? } else { var_d };
                let mut rm = self.running_mean.lock().expect("buffer lock");
                *rm = ((&*rm * (1.0 - BN_MOMENTUM))? + (mean_d * BN_MOMENTUM)?)?;
                let mut rv = self.running_var.lock().expect("buffer lock");
                *rv = ((&*rv * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
            }
            (mean, var)
        } else {
            let rm = self.running_mean.lock().expect("buffer lock").reshape(shape)?;
            let rv = self.running_var.lock().expect("buffer lock").reshape(shape)?;
            (rm, rv)
        };
        let inv_std = (var + BN_EPS)?.sqrt()?.recip()?;
        let scale = inv_std.broadcast_mul(&self.weight.as_tensor().reshape(shape)?)?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape(shape)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    None,
    Relu,
    Gelu,
    Swish,
}

pub fn activate(x: &Tensor, act: Act) -> Result<Tensor> {
    Ok(match act {
        Act::None => x.clone(),
        Act::Relu => x.relu()?,
        Act::Gelu => x.gelu_erf()?,
        Act::Swish => (x * candle_nn::ops::sigmoid(x)?)?,
    })
}

/// Convolution followed by batch norm and an activation.
#[derive(Debug, Clone)]
pub struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
    act: Act,
}

impl ConvBn {
    pub fn new(init: &mut Init, name: &str, spec: ConvSpec, act: Act) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::new(init, &format!("{name}.conv"), spec)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), spec.cout)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        activate(&self.bn.forward(&self.conv.forward(x)?, train)?, self.act)
    }
}

/// 3×3 stride-2 max pooling with one pixel of zero padding; only valid on
/// non-negative inputs (it follows a ReLU).
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let win = Window::new(x.dims4()?, 3, 2, 1, 1)?;
    let cols = x.contiguous()?.apply_op1(Im2Col(win))?;
    Ok(cols
        .reshape((win.b, 9, win.c, win.oh, win.ow))?
        .max(1)?)
}

/// Bilinear resize of `x` to the spatial size of `target` (no-op when equal).
pub fn upsample_like(x: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = target.dims4()?;
    let (_, _, xh, xw) = x.dims4()?;
    if (h, w) == (xh, xw) {
        return Ok(x.clone());
    }
    resize_bilinear(x, h, w)
}

/// Mean over one spatial axis, keeping it as size 1.
pub fn mean_keepdim(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    Ok((x.sum_keepdim(dim)? / n as f64)?)
}

pub(crate) fn channel_concat(parts: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(parts, 1)?)
}
