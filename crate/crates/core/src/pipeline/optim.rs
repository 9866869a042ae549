use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::crnet::ParamStore;
use crate::{Error, Result};

/// SGD with momentum and coupled weight decay:
/// `g ← ∇ + λθ`, `v ← μv + g` (`v ← g` on the first update), `θ ← θ − ηv`.
#[derive(Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: vec![None; store.params().len()],
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (slot, (_, var)) in self.velocity.iter_mut().zip(store.params()) {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = grad.detach();
            if self.weight_decay != 0.0 {
                g = (g + var.as_tensor().detach().affine(self.weight_decay, 0.0)?)?;
            }
            let v = match slot.take() {
                Some(prev) if self.momentum != 0.0 => (prev.affine(self.momentum, 0.0)? + g)?,
                _ => g,
            };
            let updated = (var.as_tensor().detach() - v.affine(lr, 0.0)?)?;
            var.set(&updated)?;
            *slot = Some(v);
        }
        Ok(())
    }

    /// Momentum buffers by parameter name (only those already populated).
    pub fn state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        store
            .params()
            .iter()
            .zip(&self.velocity)
            .filter_map(|((name, _), v)| v.as_ref().map(|v| (name.clone(), v.clone())))
            .collect()
    }

    /// Restores one momentum buffer.
    pub fn set_state(&mut self, store: &ParamStore, name: &str, value: Tensor) -> Result<()> {
        let idx = store
            .params()
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("momentum for unknown parameter `{name}`")))?;
        let var = &store.params()[idx].1;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!("momentum `{name}` has the wrong shape")));
        }
        self.velocity[idx] = Some(value.to_dtype(var.dtype())?);
        Ok(())
    }
}
