//! The five classifier architectures, built over the autodiff engine for any
//! (channel count, window length).
//!
//! All layer sizes live in the builder functions below so tests can compute
//! parameter counts independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{
    glorot_uniform, BnSlot, EngineError, NodeId, ParamStore, Slot, Tape, Tensor,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model spec: {0}")]
    Spec(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Mlp,
    Cnn,
    CnnLstm,
    ResNet1d,
    ResNet18,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Mlp,
        ModelKind::Cnn,
        ModelKind::CnnLstm,
        ModelKind::ResNet1d,
        ModelKind::ResNet18,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Cnn => "cnn",
            ModelKind::CnnLstm => "cnn_lstm",
            ModelKind::ResNet1d => "resnet1d",
            ModelKind::ResNet18 => "resnet18",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(ModelKind::Mlp),
            "cnn" => Ok(ModelKind::Cnn),
            "cnn_lstm" => Ok(ModelKind::CnnLstm),
            "resnet1d" => Ok(ModelKind::ResNet1d),
            "resnet18" => Ok(ModelKind::ResNet18),
            other => Err(ModelError::Spec(format!(
                "unknown model kind {other:?} (expected mlp, cnn, cnn_lstm, resnet1d, or resnet18)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub window_length: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone)]
enum Layer {
    Flatten,
    Dense {
        w: Slot,
        b: Slot,
    },
    Relu,
    Conv {
        w: Slot,
        b: Slot,
        stride: usize,
    },
    Pad {
        left: usize,
        right: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    BatchNorm {
        gamma: Slot,
        beta: Slot,
        state: BnSlot,
    },
    TimeMajor,
    Lstm {
        w_ih: Slot,
        w_hh: Slot,
        b: Slot,
    },
    Residual {
        main: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

/// Shape of the value flowing between layers during construction.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Flow {
    /// [batch, channels, time]
    Seq { channels: usize, len: usize },
    /// [batch, time, channels] (LSTM input)
    TimeMajor { channels: usize, len: usize },
    /// [batch, dim]
    Flat { dim: usize },
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
    counter: usize,
    flow: Flow,
}

impl Builder {
    fn new(spec: &ModelSpec, seed: u64) -> Builder {
        Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            counter: 0,
            flow: Flow::Seq {
                channels: spec.in_channels,
                len: spec.window_length,
            },
        }
    }

    fn next_id(&mut self, kind: &str) -> String {
        let id = format!("{kind}{}", self.counter);
        self.counter += 1;
        id
    }

    fn seq(&self) -> Result<(usize, usize), ModelError> {
        match self.flow {
            Flow::Seq { channels, len } => Ok((channels, len)),
            other => Err(ModelError::Spec(format!(
                "layer needs a [batch, channels, time] input, flow is {other:?}"
            ))),
        }
    }

    fn flatten(&mut self) -> Result<Layer, ModelError> {
        let (c, t) = self.seq()?;
        self.flow = Flow::Flat { dim: c * t };
        Ok(Layer::Flatten)
    }

    fn dense(&mut self, out: usize) -> Result<Layer, ModelError> {
        let dim = match self.flow {
            Flow::Flat { dim } => dim,
            other => {
                return Err(ModelError::Spec(format!(
                    "dense needs a flat input, flow is {other:?}"
                )))
            }
        };
        let id = self.next_id("dense");
        let w = self.store.add(
            format!("{id}.w"),
            glorot_uniform(&mut self.rng, &[dim, out], dim, out),
        );
        let b = self.store.add(format!("{id}.b"), Tensor::zeros(&[out]));
        self.flow = Flow::Flat { dim: out };
        Ok(Layer::Dense { w, b })
    }

    fn conv(&mut self, c_out: usize, kernel: usize, stride: usize) -> Result<Layer, ModelError> {
        let (c_in, len) = self.seq()?;
        if len < kernel {
            return Err(ModelError::Spec(format!(
                "window too short: conv kernel {kernel} over {len} samples"
            )));
        }
        let id = self.next_id("conv");
        let w = self.store.add(
            format!("{id}.w"),
            glorot_uniform(
                &mut self.rng,
                &[c_out, c_in, kernel],
                c_in * kernel,
                c_out * kernel,
            ),
        );
        let b = self.store.add(format!("{id}.b"), Tensor::zeros(&[c_out]));
        self.flow = Flow::Seq {
            channels: c_out,
            len: (len - kernel) / stride + 1,
        };
        Ok(Layer::Conv { w, b, stride })
    }

    fn pad(&mut self, left: usize, right: usize) -> Result<Layer, ModelError> {
        let (c, t) = self.seq()?;
        self.flow = Flow::Seq {
            channels: c,
            len: t + left + right,
        };
        Ok(Layer::Pad { left, right })
    }

    fn max_pool(&mut self, kernel: usize, stride: usize) -> Result<Layer, ModelError> {
        let (c, len) = self.seq()?;
        if len < kernel {
            return Err(ModelError::Spec(format!(
                "window too short: max pool kernel {kernel} over {len} samples"
            )));
        }
        self.flow = Flow::Seq {
            channels: c,
            len: (len - kernel) / stride + 1,
        };
        Ok(Layer::MaxPool { kernel, stride })
    }

    fn global_avg_pool(&mut self) -> Result<Layer, ModelError> {
        let (c, _) = self.seq()?;
        self.flow = Flow::Flat { dim: c };
        Ok(Layer::GlobalAvgPool)
    }

    fn batch_norm(&mut self) -> Result<Layer, ModelError> {
        let (c, _) = self.seq()?;
        let id = self.next_id("bn");
        let gamma = self
            .store
            .add(format!("{id}.gamma"), Tensor::filled(&[c], 1.0));
        let beta = self.store.add(format!("{id}.beta"), Tensor::zeros(&[c]));
        let state = self.store.add_bn(id, c);
        Ok(Layer::BatchNorm { gamma, beta, state })
    }

    fn time_major(&mut self) -> Result<Layer, ModelError> {
        let (c, t) = self.seq()?;
        self.flow = Flow::TimeMajor {
            channels: c,
            len: t,
        };
        Ok(Layer::TimeMajor)
    }

    fn lstm(&mut self, hidden: usize) -> Result<Layer, ModelError> {
        let (input, len) = match self.flow {
            Flow::TimeMajor { channels, len } => (channels, len),
            other => {
                return Err(ModelError::Spec(format!(
                    "lstm needs a time-major input, flow is {other:?}"
                )))
            }
        };
        if len == 0 {
            return Err(ModelError::Spec("lstm over an empty sequence".into()));
        }
        let id = self.next_id("lstm");
        let w_ih = self.store.add(
            format!("{id}.w_ih"),
            glorot_uniform(&mut self.rng, &[input, 4 * hidden], input, 4 * hidden),
        );
        let w_hh = self.store.add(
            format!("{id}.w_hh"),
            glorot_uniform(&mut self.rng, &[hidden, 4 * hidden], hidden, 4 * hidden),
        );
        // Forget-gate bias starts at 1 so early training does not flush the
        // cell state; gate order is input, forget, cell, output.
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = self.store.add(format!("{id}.b"), bias);
        self.flow = Flow::Flat { dim: hidden };
        Ok(Layer::Lstm { w_ih, w_hh, b })
    }

    /// Basic residual block: two padded k3 convolutions with batch norm, a
    /// projection shortcut when shape changes, ReLU after the join.
    fn res_block(&mut self, c_out: usize, stride: usize) -> Result<Layer, ModelError> {
        let entry = self.flow;
        let (c_in, _) = self.seq()?;
        let main = vec![
            self.pad(1, 1)?,
            self.conv(c_out, 3, stride)?,
            self.batch_norm()?,
            Layer::Relu,
            self.pad(1, 1)?,
            self.conv(c_out, 3, 1)?,
            self.batch_norm()?,
        ];
        let main_exit = self.flow;
        let shortcut = if stride != 1 || c_in != c_out {
            self.flow = entry;
            let s = vec![self.conv(c_out, 1, stride)?, self.batch_norm()?];
            if self.flow != main_exit {
                return Err(ModelError::Spec(format!(
                    "residual branches disagree: {main_exit:?} vs {:?}",
                    self.flow
                )));
            }
            s
        } else {
            Vec::new()
        };
        self.flow = main_exit;
        Ok(Layer::Residual { main, shortcut })
    }
}

/// A built architecture: its parameter store plus the layer program the
/// forward pass interprets.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    layers: Vec<Layer>,
}

impl Model {
    /// Builds an initialized model; identical (spec, seed) gives identical
    /// parameters.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model, ModelError> {
        if spec.in_channels == 0 || spec.window_length == 0 {
            return Err(ModelError::Spec(
                "in_channels and window_length must be >= 1".into(),
            ));
        }
        if spec.n_classes < 2 {
            return Err(ModelError::Spec("need at least 2 classes".into()));
        }
        let mut b = Builder::new(&spec, seed);
        let n = spec.n_classes;
        let mut layers = Vec::new();
        match spec.kind {
            ModelKind::Mlp => {
                layers.push(b.flatten()?);
                layers.push(b.dense(256)?);
                layers.push(Layer::Relu);
                layers.push(b.dense(128)?);
                layers.push(Layer::Relu);
                layers.push(b.dense(n)?);
            }
            ModelKind::Cnn => {
                layers.push(b.conv(64, 7, 2)?);
                layers.push(Layer::Relu);
                layers.push(b.conv(64, 5, 1)?);
                layers.push(Layer::Relu);
                layers.push(b.conv(128, 3, 1)?);
                layers.push(Layer::Relu);
                layers.push(b.global_avg_pool()?);
                layers.push(b.dense(n)?);
            }
            ModelKind::CnnLstm => {
                layers.push(b.conv(64, 7, 2)?);
                layers.push(Layer::Relu);
                layers.push(b.conv(64, 5, 2)?);
                layers.push(Layer::Relu);
                layers.push(b.time_major()?);
                layers.push(b.lstm(128)?);
                layers.push(b.dense(n)?);
            }
            ModelKind::ResNet1d => {
                layers.push(b.conv(64, 7, 2)?);
                layers.push(b.batch_norm()?);
                layers.push(Layer::Relu);
                layers.push(b.res_block(64, 1)?);
                layers.push(b.res_block(128, 2)?);
                layers.push(b.global_avg_pool()?);
                layers.push(b.dense(n)?);
            }
            ModelKind::ResNet18 => {
                layers.push(b.conv(64, 7, 2)?);
                layers.push(b.batch_norm()?);
                layers.push(Layer::Relu);
                layers.push(b.max_pool(3, 2)?);
                for width in [64, 128, 256, 512] {
                    layers.push(b.res_block(width, 2)?);
                    layers.push(b.res_block(width, 1)?);
                }
                layers.push(b.global_avg_pool()?);
                layers.push(b.dense(n)?);
            }
        }
        Ok(Model {
            spec,
            store: b.store,
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn count_params(&self) -> usize {
        self.store.count_scalars()
    }

    /// Records a forward pass onto a fresh tape and returns it with the
    /// logits node, for the caller to attach a loss and run backward.
    pub fn forward(
        &mut self,
        batch: &Tensor,
        training: bool,
    ) -> Result<(Tape, NodeId), ModelError> {
        if batch.rank() != 3
            || batch.dim(1) != self.spec.in_channels
            || batch.dim(2) != self.spec.window_length
        {
            return Err(ModelError::Shape(format!(
                "batch {:?} does not match spec [B, {}, {}]",
                batch.shape(),
                self.spec.in_channels,
                self.spec.window_length
            )));
        }
        if batch.dim(0) == 0 {
            return Err(ModelError::Shape("empty batch".into()));
        }
        let Model { store, layers, .. } = self;
        let mut tape = Tape::new(store);
        let x = tape.input(batch.clone())?;
        let logits = apply(&mut tape, x, layers, store, training)?;
        Ok((tape, logits))
    }

    /// Eval-mode logits for a batch.
    pub fn logits(&mut self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let (tape, out) = self.forward(batch, false)?;
        Ok(tape.value(out).clone())
    }
}

fn apply(
    tape: &mut Tape,
    mut x: NodeId,
    layers: &[Layer],
    store: &mut ParamStore,
    training: bool,
) -> Result<NodeId, EngineError> {
    for layer in layers {
        x = match layer {
            Layer::Flatten => {
                let v = tape.value(x);
                let (batch, rest) = (v.dim(0), v.len() / v.dim(0));
                tape.reshape(x, &[batch, rest])?
            }
            Layer::Dense { w, b } => {
                let w = tape.param(store, *w)?;
                let b = tape.param(store, *b)?;
                tape.dense(x, w, b)?
            }
            Layer::Relu => tape.relu(x)?,
            Layer::Conv { w, b, stride } => {
                let w = tape.param(store, *w)?;
                let b = tape.param(store, *b)?;
                tape.conv1d(x, w, b, *stride)?
            }
            Layer::Pad { left, right } => tape.pad1d(x, *left, *right)?,
            Layer::MaxPool { kernel, stride } => tape.max_pool1d(x, *kernel, *stride)?,
            Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
            Layer::BatchNorm { gamma, beta, state } => {
                let gamma = tape.param(store, *gamma)?;
                let beta = tape.param(store, *beta)?;
                tape.batch_norm(x, gamma, beta, store, *state, training)?
            }
            Layer::TimeMajor => tape.swap_axes12(x)?,
            Layer::Lstm { w_ih, w_hh, b } => {
                let w_ih = tape.param(store, *w_ih)?;
                let w_hh = tape.param(store, *w_hh)?;
                let b = tape.param(store, *b)?;
                tape.lstm(x, w_ih, w_hh, b)?
            }
            Layer::Residual { main, shortcut } => {
                let m = apply(tape, x, main, store, training)?;
                let s = if shortcut.is_empty() {
                    x
                } else {
                    apply(tape, x, shortcut, store, training)?
                };
                let joined = tape.add(m, s)?;
                tape.relu(joined)?
            }
        };
    }
    Ok(x)
}
