//! Trainable estimators: parameter storage, layers with exact backward
//! passes, the U-Net, low-rank adapters, AdamW and checkpoints.

mod checkpoint;
pub mod layers;
mod optim;
mod params;
mod real;
mod unet;

pub use checkpoint::{AdapterMeta, Checkpoint, CheckpointMeta, OptimizerMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::Tensor;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use real::Real;
pub use unet::{sinusoidal_embedding, Tape, TrainMode, UNetConfig, VelocityModel};

/// Gradients of a scalar loss `L(y)` of one forward pass, given `dL/dy`.
pub fn loss_gradient<T: Real>(
    model: &VelocityModel<T>,
    x: &Tensor<T>,
    t: f64,
    cond: Option<usize>,
    loss: impl Fn(&Tensor<T>) -> (T, Tensor<T>),
) -> crate::Result<(T, Grads<T>)> {
    let (y, tape) = model.forward_tape(x, t, cond)?;
    let (value, dy) = loss(&y);
    let mut grads = model.zero_grads();
    model.backward(&tape, &dy, &mut grads, false);
    Ok((value, grads))
}
