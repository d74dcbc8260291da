//! Minimal differentiable tensor engine.
//!
//! Forward operators are recorded on a [`Tape`]; calling [`Tape::backward`]
//! replays the record in exact reverse execution order and accumulates
//! gradients into the [`Parameter`]s of a [`ParamStore`]. The only optimizer
//! is SGD with momentum, which is all the training protocol uses.
//!
//! A tape and the store it was recorded against are confined to one worker at
//! a time; distinct models may train concurrently without shared state.

mod tape;
mod tensor;

pub use tape::{softmax_rows, NodeId, Tape};
pub use tensor::Tensor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: non-finite value produced by {op}")]
    Numeric { op: &'static str },
    #[error("computation record is stale: parameters changed since the forward pass")]
    StaleRecord,
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
}

/// A trainable tensor with its gradient and momentum buffers.
///
/// The gradient and velocity always share the value's shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Self {
            name,
            value,
            grad,
            velocity,
        }
    }
}

/// Per-channel running statistics for one batch-norm layer.
///
/// Not trainable: updated by exponential moving average during train-mode
/// forward passes and read back in eval mode.
#[derive(Debug, Clone)]
pub struct BnRunning {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot(pub(crate) usize);

/// Handle to a batch-norm running-stats entry inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnSlot(pub(crate) usize);

/// Owns every parameter and batch-norm state of one model.
///
/// The version counter increments whenever parameter values change, so a tape
/// recorded before an optimizer step refuses to run backward afterwards.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    bn: Vec<BnRunning>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Slot {
        self.params.push(Parameter::new(name.into(), value));
        Slot(self.params.len() - 1)
    }

    pub fn add_bn(&mut self, name: impl Into<String>, channels: usize) -> BnSlot {
        self.bn.push(BnRunning {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        BnSlot(self.bn.len() - 1)
    }

    pub fn param(&self, slot: Slot) -> &Parameter {
        &self.params[slot.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn bn(&self, slot: BnSlot) -> &BnRunning {
        &self.bn[slot.0]
    }

    pub fn bn_mut(&mut self, slot: BnSlot) -> &mut BnRunning {
        &mut self.bn[slot.0]
    }

    pub fn bn_states(&self) -> &[BnRunning] {
        &self.bn
    }

    pub fn slot_by_name(&self, name: &str) -> Option<Slot> {
        self.params.iter().position(|p| p.name == name).map(Slot)
    }

    pub fn bn_slot_by_name(&self, name: &str) -> Option<BnSlot> {
        self.bn.iter().position(|b| b.name == name).map(BnSlot)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Total scalar count across parameter values (gradients and momentum
    /// buffers excluded, batch-norm running stats excluded).
    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(
        &mut self,
        slot: Slot,
        delta: &Tensor,
    ) -> Result<(), EngineError> {
        self.params[slot.0].grad.add_assign(delta)
    }

    /// One SGD-with-momentum update: `v <- mu*v - lr*g; p <- p + v`.
    ///
    /// With `momentum = 0` this reduces exactly to plain SGD.
    pub fn sgd_momentum_step(&mut self, learning_rate: f64, momentum: f64) {
        for p in &mut self.params {
            let g = p.grad.data();
            let v = p.velocity.data_mut();
            for (vi, gi) in v.iter_mut().zip(g.iter()) {
                *vi = momentum * *vi - learning_rate * *gi;
            }
            let v = p.velocity.data();
            let val = p.value.data_mut();
            for (pi, vi) in val.iter_mut().zip(v.iter()) {
                *pi += *vi;
            }
        }
        self.version += 1;
    }

    /// Replaces a parameter's value (checkpoint restore). Shape must match.
    pub fn set_value(&mut self, slot: Slot, value: Tensor) -> Result<(), EngineError> {
        let p = &mut self.params[slot.0];
        if p.value.shape() != value.shape() {
            return Err(EngineError::Shape(format!(
                "parameter {} has shape {:?}, checkpoint entry has {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        self.version += 1;
        Ok(())
    }

    pub fn set_bn_state(
        &mut self,
        slot: BnSlot,
        mean: Vec<f64>,
        var: Vec<f64>,
    ) -> Result<(), EngineError> {
        let b = &mut self.bn[slot.0];
        if mean.len() != b.mean.len() || var.len() != b.var.len() {
            return Err(EngineError::Shape(format!(
                "batch-norm state {} has {} channels, checkpoint entry has {}/{}",
                b.name,
                b.mean.len(),
                mean.len(),
                var.len()
            )));
        }
        b.mean = mean;
        b.var = var;
        Ok(())
    }
}

/// Glorot-uniform initialization: `U(-a, a)` with `a = sqrt(6/(fan_in+fan_out))`.
pub fn glorot_uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape, data).expect("shape/product mismatch in init")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn momentum_step_matches_hand_recurrence() {
        // p=1.0, g=0.5, v=0, lr=0.01, mu=0.9: first step is vanilla SGD.
        let mut store = ParamStore::new();
        let slot = store.add("p", Tensor::scalar(1.0));
        store.params[slot.0].grad = Tensor::scalar(0.5);
        store.sgd_momentum_step(0.01, 0.9);
        assert_eq!(store.param(slot).velocity.data()[0], -0.005);
        assert_eq!(store.param(slot).value.data()[0], 0.995);

        // Second step with the same gradient.
        store.params[slot.0].grad = Tensor::scalar(0.5);
        store.sgd_momentum_step(0.01, 0.9);
        let v = store.param(slot).velocity.data()[0];
        let p = store.param(slot).value.data()[0];
        assert!((v - (-0.0095)).abs() < 1e-15);
        assert!((p - 0.9855).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let slot = store.add("p", Tensor::scalar(2.0));
        store.sgd_momentum_step(0.01, 0.9);
        assert_eq!(store.param(slot).value.data()[0], 2.0);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut store = ParamStore::new();
        let slot = store.add("p", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        store.params[slot.0].grad = Tensor::new(&[2], vec![0.25, -1.0]).unwrap();
        store.sgd_momentum_step(0.1, 0.0);
        assert_eq!(
            store.param(slot).value.data(),
            &[1.0 - 0.1 * 0.25, -2.0 + 0.1]
        );
    }

    #[test]
    fn step_bumps_version_and_zero_grads_does_not() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(0.0));
        let v0 = store.version();
        store.zero_grads();
        assert_eq!(store.version(), v0);
        store.sgd_momentum_step(0.01, 0.9);
        assert_eq!(store.version(), v0 + 1);
    }

    #[test]
    fn glorot_bounds_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = glorot_uniform(&mut rng, &[40, 50], 40, 50);
        let a = (6.0_f64 / 90.0).sqrt();
        assert!(t.iter().all(|v| v.abs() < a));
        // Deterministic given the seed.
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let t2 = glorot_uniform(&mut rng2, &[40, 50], 40, 50);
        assert_eq!(t, t2);
    }
}
