//! Neural-network primitives: convolutions, normalization, resampling,
//! filtering, softmax and affine layers.

mod activation;
mod conv;
mod filter;
mod norm;
mod pool;
mod resize;

pub use activation::{cross_entropy, linear, log_softmax, softmax, Linear};
pub use conv::{conv2d, conv_transpose2d, Conv2d, Conv2dParams};
pub use filter::{filter_axis, gaussian_blur3x3, gaussian_filter, gaussian_kernel1d, reflect_index, SpatialAxis};
pub use norm::{batch_norm2d, BatchNorm2d, BatchNorm2dParams, NormMode};
pub use pool::max_pool2d;
pub use resize::{bilinear_resize, nearest_upsample};

use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    /// Trainable, updated by the optimizer.
    Param,
    /// Persistent state that is not trained (e.g. running statistics).
    Buffer,
}

/// A named, mutable reference to one tensor of a module.
pub struct Slot<'a, T: Element> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    pub kind: SlotKind,
}

/// Anything owning named tensors.
pub trait Module<T: Element> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<Slot<'a, T>>);

    fn all_slots(&mut self) -> Vec<Slot<'_, T>> {
        let mut out = Vec::new();
        self.slots("", &mut out);
        out
    }

    fn parameter_count(&mut self) -> usize {
        self.all_slots().iter().filter(|s| s.kind == SlotKind::Param).map(|s| s.tensor.numel()).sum()
    }

    fn zero_grad(&mut self) {
        for s in self.all_slots() {
            s.tensor.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push_param<'a, T: Element>(out: &mut Vec<Slot<'a, T>>, prefix: &str, name: &str, t: &'a mut Tensor<T>) {
    out.push(Slot { name: join(prefix, name), tensor: t, kind: SlotKind::Param });
}

pub(crate) fn push_buffer<'a, T: Element>(out: &mut Vec<Slot<'a, T>>, prefix: &str, name: &str, t: &'a mut Tensor<T>) {
    out.push(Slot { name: join(prefix, name), tensor: t, kind: SlotKind::Buffer });
}

/// Copies every slot of `module` into `out` under its slot name.
pub fn module_to_container<T: Element>(module: &mut dyn Module<T>, out: &mut crate::container::Container) -> crate::Result<()> {
    for s in module.all_slots() {
        out.insert(&s.name, s.tensor)?;
    }
    Ok(())
}

/// Replaces every slot of `module` with the same-named, same-shaped tensor
/// from `c`. Parameters come back as trainable leaves, buffers as constants.
pub fn load_module_from_container<T: Element>(module: &mut dyn Module<T>, c: &crate::container::Container) -> crate::Result<()> {
    for s in module.all_slots() {
        let t = c.get_shaped::<T>(&s.name, s.tensor.shape())?;
        *s.tensor = t.with_requires_grad(s.kind == SlotKind::Param);
    }
    Ok(())
}
