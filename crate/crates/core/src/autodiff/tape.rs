use super::{BnSlot, EngineError, ParamStore, Slot, Tensor};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`]. Only valid for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct LstmCache {
    /// Hidden states h_0..h_T, each [B,H]. h_0 is zero.
    hs: Vec<Tensor>,
    /// Cell states c_0..c_T, each [B,H]. c_0 is zero.
    cs: Vec<Tensor>,
    /// Per step: input, forget, cell-candidate and output gate activations.
    gates: Vec<[Tensor; 4]>,
}

enum Op {
    Input,
    Param {
        slot: Slot,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    Pad1d {
        x: NodeId,
        left: usize,
    },
    Relu {
        x: NodeId,
    },
    MaxPool1d {
        x: NodeId,
        /// Flattened input index of the (first) maximum per output element.
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
        training: bool,
    },
    Lstm {
        x: NodeId,
        w_ih: NodeId,
        w_hh: NodeId,
        b: NodeId,
        cache: LstmCache,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SwapAxes12 {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
}

/// Record of one forward computation.
///
/// Every operator appends the node it produced; `backward` walks the record
/// in exact reverse order, accumulating gradients per node and transferring
/// parameter gradients into the store with `+=`. A tape is bound to the
/// store version it was created against and refuses to run backward once an
/// optimizer step has moved the parameters.
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Tensor>>,
    store_version: u64,
}

impl Tape {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            store_version: store.version(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    /// `None` before `backward` runs or when no gradient reached the node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId, EngineError> {
        if !value.all_finite() {
            return Err(EngineError::Numeric { op: name });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(value);
        self.ops.push(op);
        Ok(id)
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId, EngineError> {
        self.push(value, Op::Input, "input")
    }

    /// Copies a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore, slot: Slot) -> Result<NodeId, EngineError> {
        if store.version() != self.store_version {
            return Err(EngineError::StaleRecord);
        }
        self.push(store.param(slot).value.clone(), Op::Param { slot }, "param")
    }

    /// `y = x W + b` with `x` [B,I], `w` [I,O], `b` [O].
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let (xv, wv, bv) = (&self.nodes[x.0], &self.nodes[w.0], &self.nodes[b.0]);
        if xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 {
            return Err(EngineError::Shape(format!(
                "dense expects x[B,I] w[I,O] b[O], got {:?} {:?} {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (batch, in_dim) = (xv.dim(0), xv.dim(1));
        let (w_in, out_dim) = (wv.dim(0), wv.dim(1));
        if in_dim != w_in || bv.dim(0) != out_dim {
            return Err(EngineError::Shape(format!(
                "dense dimension mismatch: x {:?} w {:?} b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; batch * out_dim];
        for row in out.chunks_mut(out_dim) {
            row.copy_from_slice(bv.data());
        }
        matmul_nn_acc(&mut out, xv.data(), batch, in_dim, wv.data(), out_dim);
        let y = Tensor::new(&[batch, out_dim], out)?;
        self.push(y, Op::Dense { x, w, b }, "dense")
    }

    /// Valid (no padding) 1-d convolution over the trailing axis.
    ///
    /// `x` [B,C_in,T], `w` [C_out,C_in,K], `b` [C_out]; the output length is
    /// `(T - K) / stride + 1`, so `T >= K` is required.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    ) -> Result<NodeId, EngineError> {
        let (xv, wv, bv) = (&self.nodes[x.0], &self.nodes[w.0], &self.nodes[b.0]);
        if stride == 0 {
            return Err(EngineError::Shape("conv1d stride must be >= 1".into()));
        }
        if xv.rank() != 3 || wv.rank() != 3 || bv.rank() != 1 {
            return Err(EngineError::Shape(format!(
                "conv1d expects x[B,C,T] w[O,C,K] b[O], got {:?} {:?} {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (batch, c_in, t_len) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (c_out, w_cin, kernel) = (wv.dim(0), wv.dim(1), wv.dim(2));
        if w_cin != c_in || bv.dim(0) != c_out {
            return Err(EngineError::Shape(format!(
                "conv1d dimension mismatch: x {:?} w {:?} b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        if t_len < kernel {
            return Err(EngineError::Shape(format!(
                "conv1d input length {t_len} shorter than kernel {kernel}"
            )));
        }
        let t_out = (t_len - kernel) / stride + 1;
        let mut out = vec![0.0; batch * c_out * t_out];
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        for bi in 0..batch {
            for (co, &bias) in bd.iter().enumerate() {
                let o_base = (bi * c_out + co) * t_out;
                out[o_base..o_base + t_out].fill(bias);
                for ci in 0..c_in {
                    let x_base = (bi * c_in + ci) * t_len;
                    let w_base = (co * c_in + ci) * kernel;
                    for to in 0..t_out {
                        let start = x_base + to * stride;
                        let mut acc = 0.0;
                        for k in 0..kernel {
                            acc += xd[start + k] * wd[w_base + k];
                        }
                        out[o_base + to] += acc;
                    }
                }
            }
        }
        let y = Tensor::new(&[batch, c_out, t_out], out)?;
        self.push(y, Op::Conv1d { x, w, b, stride }, "conv1d")
    }

    /// Zero-pads the trailing axis of `x` [B,C,T] by `left` and `right`.
    pub fn pad1d(&mut self, x: NodeId, left: usize, right: usize) -> Result<NodeId, EngineError> {
        let xv = &self.nodes[x.0];
        if xv.rank() != 3 {
            return Err(EngineError::Shape(format!(
                "pad1d expects x[B,C,T], got {:?}",
                xv.shape()
            )));
        }
        let (batch, channels, t_len) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let t_out = t_len + left + right;
        let mut out = vec![0.0; batch * channels * t_out];
        for bc in 0..batch * channels {
            let src = &xv.data()[bc * t_len..(bc + 1) * t_len];
            out[bc * t_out + left..bc * t_out + left + t_len].copy_from_slice(src);
        }
        let y = Tensor::new(&[batch, channels, t_out], out)?;
        self.push(y, Op::Pad1d { x, left }, "pad1d")
    }

    /// `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        let y = Tensor::new(
            self.nodes[x.0].shape(),
            self.nodes[x.0].iter().map(|v| v.max(0.0)).collect(),
        )?;
        self.push(y, Op::Relu { x }, "relu")
    }

    /// Max pooling over the trailing axis of `x` [B,C,T]. Ties resolve to the
    /// earliest position.
    pub fn max_pool1d(
        &mut self,
        x: NodeId,
        kernel: usize,
        stride: usize,
    ) -> Result<NodeId, EngineError> {
        let xv = &self.nodes[x.0];
        if stride == 0 || kernel == 0 {
            return Err(EngineError::Shape(
                "max_pool1d kernel and stride must be >= 1".into(),
            ));
        }
        if xv.rank() != 3 {
            return Err(EngineError::Shape(format!(
                "max_pool1d expects x[B,C,T], got {:?}",
                xv.shape()
            )));
        }
        let (batch, channels, t_len) = (xv.dim(0), xv.dim(1), xv.dim(2));
        if t_len < kernel {
            return Err(EngineError::Shape(format!(
                "max_pool1d input length {t_len} shorter than kernel {kernel}"
            )));
        }
        let t_out = (t_len - kernel) / stride + 1;
        let mut out = vec![0.0; batch * channels * t_out];
        let mut argmax = vec![0usize; batch * channels * t_out];
        let xd = xv.data();
        for bc in 0..batch * channels {
            let base = bc * t_len;
            for to in 0..t_out {
                let start = base + to * stride;
                let mut best = xd[start];
                let mut best_at = start;
                for k in 1..kernel {
                    if xd[start + k] > best {
                        best = xd[start + k];
                        best_at = start + k;
                    }
                }
                out[bc * t_out + to] = best;
                argmax[bc * t_out + to] = best_at;
            }
        }
        let y = Tensor::new(&[batch, channels, t_out], out)?;
        self.push(y, Op::MaxPool1d { x, argmax }, "max_pool1d")
    }

    /// Mean over the trailing axis: [B,C,T] -> [B,C].
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        let xv = &self.nodes[x.0];
        if xv.rank() != 3 {
            return Err(EngineError::Shape(format!(
                "global_avg_pool expects x[B,C,T], got {:?}",
                xv.shape()
            )));
        }
        let (batch, channels, t_len) = (xv.dim(0), xv.dim(1), xv.dim(2));
        if t_len == 0 {
            return Err(EngineError::Shape("global_avg_pool over empty axis".into()));
        }
        let mut out = vec![0.0; batch * channels];
        for (bc, o) in out.iter_mut().enumerate() {
            let seg = &xv.data()[bc * t_len..(bc + 1) * t_len];
            *o = seg.iter().sum::<f64>() / t_len as f64;
        }
        let y = Tensor::new(&[batch, channels], out)?;
        self.push(y, Op::GlobalAvgPool { x }, "global_avg_pool")
    }

    /// Batch normalization over [B,C,T] with per-channel statistics.
    ///
    /// Training mode normalizes with biased batch statistics over the B*T
    /// slots of each channel and folds them into the store's running
    /// estimates with momentum 0.1. Eval mode normalizes with the running
    /// estimates and nothing is updated.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        store: &mut ParamStore,
        bn: BnSlot,
        training: bool,
    ) -> Result<NodeId, EngineError> {
        let (xv, gv, bv) = (&self.nodes[x.0], &self.nodes[gamma.0], &self.nodes[beta.0]);
        if xv.rank() != 3 || gv.rank() != 1 || bv.rank() != 1 {
            return Err(EngineError::Shape(format!(
                "batch_norm expects x[B,C,T] gamma[C] beta[C], got {:?} {:?} {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let (batch, channels, t_len) = (xv.dim(0), xv.dim(1), xv.dim(2));
        if gv.dim(0) != channels || bv.dim(0) != channels {
            return Err(EngineError::Shape(format!(
                "batch_norm channel mismatch: x {:?} gamma {:?} beta {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        if store.bn(bn).mean.len() != channels {
            return Err(EngineError::Shape(format!(
                "batch_norm running state has {} channels, input has {channels}",
                store.bn(bn).mean.len()
            )));
        }
        let n = batch * t_len;
        if training && n == 0 {
            return Err(EngineError::Shape("batch_norm over empty batch".into()));
        }
        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut sum = 0.0;
                for bi in 0..batch {
                    let base = (bi * channels + c) * t_len;
                    sum += xv.data()[base..base + t_len].iter().sum::<f64>();
                }
                mean[c] = sum / n as f64;
                let mut sq = 0.0;
                for bi in 0..batch {
                    let base = (bi * channels + c) * t_len;
                    for v in &xv.data()[base..base + t_len] {
                        let d = v - mean[c];
                        sq += d * d;
                    }
                }
                var[c] = sq / n as f64;
            }
            let running = store.bn_mut(bn);
            for c in 0..channels {
                running.mean[c] = (1.0 - BN_MOMENTUM) * running.mean[c] + BN_MOMENTUM * mean[c];
                running.var[c] = (1.0 - BN_MOMENTUM) * running.var[c] + BN_MOMENTUM * var[c];
            }
            (mean, var)
        } else {
            let running = store.bn(bn);
            (running.mean.clone(), running.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let xv_ref = &self.nodes[x.0];
        let (gd, bd) = (self.nodes[gamma.0].data(), self.nodes[beta.0].data());
        for bi in 0..batch {
            for c in 0..channels {
                let base = (bi * channels + c) * t_len;
                for t in 0..t_len {
                    let h = (xv_ref.data()[base + t] - mean[c]) * inv_std[c];
                    xhat[base + t] = h;
                    out[base + t] = gd[c] * h + bd[c];
                }
            }
        }
        let xhat = Tensor::new(xv_ref.shape(), xhat)?;
        let y = Tensor::new(xv_ref.shape(), out)?;
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            "batch_norm",
        )
    }

    /// Single-layer LSTM over `x` [B,T,I]; returns the final hidden state
    /// [B,H].
    ///
    /// Weights: `w_ih` [I,4H], `w_hh` [H,4H], `b` [4H], with the gate blocks
    /// ordered input, forget, cell, output. Initial hidden and cell states
    /// are zero. An empty time axis is an error.
    pub fn lstm(
        &mut self,
        x: NodeId,
        w_ih: NodeId,
        w_hh: NodeId,
        b: NodeId,
    ) -> Result<NodeId, EngineError> {
        let (xv, wi, wh, bv) = (
            &self.nodes[x.0],
            &self.nodes[w_ih.0],
            &self.nodes[w_hh.0],
            &self.nodes[b.0],
        );
        if xv.rank() != 3 || wi.rank() != 2 || wh.rank() != 2 || bv.rank() != 1 {
            return Err(EngineError::Shape(format!(
                "lstm expects x[B,T,I] w_ih[I,4H] w_hh[H,4H] b[4H], got {:?} {:?} {:?} {:?}",
                xv.shape(),
                wi.shape(),
                wh.shape(),
                bv.shape()
            )));
        }
        let (batch, t_len, in_dim) = (xv.dim(0), xv.dim(1), xv.dim(2));
        if t_len == 0 {
            return Err(EngineError::Shape("lstm over an empty sequence".into()));
        }
        let hidden = wh.dim(0);
        let g4 = 4 * hidden;
        if wi.dim(0) != in_dim || wi.dim(1) != g4 || wh.dim(1) != g4 || bv.dim(0) != g4 {
            return Err(EngineError::Shape(format!(
                "lstm weight mismatch: x {:?} w_ih {:?} w_hh {:?} b {:?}",
                xv.shape(),
                wi.shape(),
                wh.shape(),
                bv.shape()
            )));
        }
        let mut hs = vec![Tensor::zeros(&[batch, hidden])];
        let mut cs = vec![Tensor::zeros(&[batch, hidden])];
        let mut gates = Vec::with_capacity(t_len);
        let (xd, wid, whd, bd) = (xv.data(), wi.data(), wh.data(), bv.data());
        for t in 0..t_len {
            // z = x_t W_ih + h_{t-1} W_hh + b, one row of x per batch element.
            let mut z = vec![0.0; batch * g4];
            for (bi, row) in z.chunks_mut(g4).enumerate() {
                row.copy_from_slice(bd);
                let x_row = &xd[(bi * t_len + t) * in_dim..(bi * t_len + t + 1) * in_dim];
                matmul_nn_acc(row, x_row, 1, in_dim, wid, g4);
                let h_row = &hs[t].data()[bi * hidden..(bi + 1) * hidden];
                matmul_nn_acc(row, h_row, 1, hidden, whd, g4);
            }
            let mut gi = vec![0.0; batch * hidden];
            let mut gf = vec![0.0; batch * hidden];
            let mut gg = vec![0.0; batch * hidden];
            let mut go = vec![0.0; batch * hidden];
            let mut c_t = vec![0.0; batch * hidden];
            let mut h_t = vec![0.0; batch * hidden];
            for bi in 0..batch {
                for h in 0..hidden {
                    let zb = bi * g4;
                    let i = sigmoid(z[zb + h]);
                    let f = sigmoid(z[zb + hidden + h]);
                    let g = z[zb + 2 * hidden + h].tanh();
                    let o = sigmoid(z[zb + 3 * hidden + h]);
                    let idx = bi * hidden + h;
                    let c = f * cs[t].data()[idx] + i * g;
                    gi[idx] = i;
                    gf[idx] = f;
                    gg[idx] = g;
                    go[idx] = o;
                    c_t[idx] = c;
                    h_t[idx] = o * c.tanh();
                }
            }
            let shape = [batch, hidden];
            gates.push([
                Tensor::new(&shape, gi)?,
                Tensor::new(&shape, gf)?,
                Tensor::new(&shape, gg)?,
                Tensor::new(&shape, go)?,
            ]);
            cs.push(Tensor::new(&shape, c_t)?);
            hs.push(Tensor::new(&shape, h_t)?);
        }
        let y = hs[t_len].clone();
        self.push(
            y,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                cache: LstmCache { hs, cs, gates },
            },
            "lstm",
        )
    }

    /// Mean softmax cross-entropy over the batch; `logits` [B,C], one label
    /// per row. Returns a scalar node.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, EngineError> {
        let lv = &self.nodes[logits.0];
        if lv.rank() != 2 {
            return Err(EngineError::Shape(format!(
                "softmax_cross_entropy expects logits[B,C], got {:?}",
                lv.shape()
            )));
        }
        let (batch, classes) = (lv.dim(0), lv.dim(1));
        if batch == 0 {
            return Err(EngineError::Shape(
                "softmax_cross_entropy over an empty batch".into(),
            ));
        }
        if labels.len() != batch {
            return Err(EngineError::Shape(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        for &label in labels {
            if label >= classes {
                return Err(EngineError::LabelRange { label, classes });
            }
        }
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &lv.data()[bi * classes..(bi + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let y = Tensor::scalar(loss / batch as f64);
        self.push(
            y,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Elementwise sum of two nodes with identical shapes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, EngineError> {
        let (av, bv) = (&self.nodes[a.0], &self.nodes[b.0]);
        if av.shape() != bv.shape() {
            return Err(EngineError::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let y = Tensor::new(
            av.shape(),
            av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect(),
        )?;
        self.push(y, Op::Add { a, b }, "add")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, EngineError> {
        let y = self.nodes[x.0].reshaped(shape)?;
        self.push(y, Op::Reshape { x }, "reshape")
    }

    /// [B,C,T] -> [B,T,C].
    pub fn swap_axes12(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        let xv = &self.nodes[x.0];
        if xv.rank() != 3 {
            return Err(EngineError::Shape(format!(
                "swap_axes12 expects a rank-3 tensor, got {:?}",
                xv.shape()
            )));
        }
        let (batch, c, t) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            for ci in 0..c {
                for ti in 0..t {
                    out[(bi * t + ti) * c + ci] = xv.data()[(bi * c + ci) * t + ti];
                }
            }
        }
        let y = Tensor::new(&[batch, t, c], out)?;
        self.push(y, Op::SwapAxes12 { x }, "swap_axes12")
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, EngineError> {
        let y = Tensor::scalar(self.nodes[x.0].iter().sum());
        self.push(y, Op::SumAll { x }, "sum_all")
    }

    /// Reverse pass from a scalar `loss` node.
    ///
    /// Walks the record backwards, accumulating per-node gradients, and adds
    /// parameter gradients into the store (`+=`, so minibatch accumulation
    /// works by just not zeroing). Fails if the store's parameters have
    /// changed since the tape was created.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<(), EngineError> {
        if store.version() != self.store_version {
            return Err(EngineError::StaleRecord);
        }
        if self.nodes[loss.0].len() != 1 {
            return Err(EngineError::Shape(format!(
                "backward target must be scalar, got {:?}",
                self.nodes[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.nodes[loss.0].shape(), vec![1.0])?);

        for (idx, op) in self.ops.iter().enumerate().rev() {
            let gy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match op {
                Op::Input => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Param { slot } => {
                    store.accumulate_grad(*slot, &gy)?;
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (&self.nodes[x.0], &self.nodes[w.0]);
                    let (batch, in_dim) = (xv.dim(0), xv.dim(1));
                    let out_dim = wv.dim(1);
                    let mut dx = vec![0.0; batch * in_dim];
                    matmul_nt_acc(&mut dx, gy.data(), batch, out_dim, wv.data(), in_dim);
                    let mut dw = vec![0.0; in_dim * out_dim];
                    matmul_tn_acc(&mut dw, xv.data(), in_dim, batch, gy.data(), out_dim);
                    let mut db = vec![0.0; out_dim];
                    for row in gy.data().chunks(out_dim) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                    accumulate(&mut grads, *w, Tensor::new(wv.shape(), dw)?);
                    accumulate(&mut grads, *b, Tensor::new(&[out_dim], db)?);
                }
                Op::Conv1d { x, w, b, stride } => {
                    let (xv, wv) = (&self.nodes[x.0], &self.nodes[w.0]);
                    let (batch, c_in, t_len) = (xv.dim(0), xv.dim(1), xv.dim(2));
                    let (c_out, _, kernel) = (wv.dim(0), wv.dim(1), wv.dim(2));
                    let t_out = gy.dim(2);
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    let mut db = vec![0.0; c_out];
                    let (xd, wd, gd) = (xv.data(), wv.data(), gy.data());
                    for bi in 0..batch {
                        for (co, dbc) in db.iter_mut().enumerate() {
                            let o_base = (bi * c_out + co) * t_out;
                            for to in 0..t_out {
                                let g = gd[o_base + to];
                                *dbc += g;
                                for ci in 0..c_in {
                                    let x_base = (bi * c_in + ci) * t_len + to * stride;
                                    let w_base = (co * c_in + ci) * kernel;
                                    for k in 0..kernel {
                                        dx[x_base + k] += g * wd[w_base + k];
                                        dw[w_base + k] += g * xd[x_base + k];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                    accumulate(&mut grads, *w, Tensor::new(wv.shape(), dw)?);
                    accumulate(&mut grads, *b, Tensor::new(&[c_out], db)?);
                }
                Op::Pad1d { x, left } => {
                    let xv = &self.nodes[x.0];
                    let (batch, channels, t_len) = (xv.dim(0), xv.dim(1), xv.dim(2));
                    let t_out = gy.dim(2);
                    let mut dx = vec![0.0; xv.len()];
                    for bc in 0..batch * channels {
                        let src = &gy.data()[bc * t_out + left..bc * t_out + left + t_len];
                        dx[bc * t_len..(bc + 1) * t_len].copy_from_slice(src);
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0];
                    let dx: Vec<f64> = xv
                        .iter()
                        .zip(gy.iter())
                        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::MaxPool1d { x, argmax } => {
                    let xv = &self.nodes[x.0];
                    let mut dx = vec![0.0; xv.len()];
                    for (src, g) in argmax.iter().zip(gy.iter()) {
                        dx[*src] += g;
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::GlobalAvgPool { x } => {
                    let xv = &self.nodes[x.0];
                    let t_len = xv.dim(2);
                    let mut dx = vec![0.0; xv.len()];
                    for (bc, g) in gy.iter().enumerate() {
                        let share = g / t_len as f64;
                        dx[bc * t_len..(bc + 1) * t_len].fill(share);
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    training,
                } => {
                    let xv = &self.nodes[x.0];
                    let (batch, channels, t_len) = (xv.dim(0), xv.dim(1), xv.dim(2));
                    let gd = self.nodes[gamma.0].data();
                    let n = (batch * t_len) as f64;
                    let mut dgamma = vec![0.0; channels];
                    let mut dbeta = vec![0.0; channels];
                    for bi in 0..batch {
                        for c in 0..channels {
                            let base = (bi * channels + c) * t_len;
                            for t in 0..t_len {
                                dgamma[c] += gy.data()[base + t] * xhat.data()[base + t];
                                dbeta[c] += gy.data()[base + t];
                            }
                        }
                    }
                    let mut dx = vec![0.0; xv.len()];
                    if *training {
                        // dx = inv_std/N * gamma * (N*dy - sum(dy) - xhat*sum(dy*xhat))
                        for bi in 0..batch {
                            for c in 0..channels {
                                let base = (bi * channels + c) * t_len;
                                for t in 0..t_len {
                                    let g = gy.data()[base + t];
                                    dx[base + t] = gd[c] * inv_std[c] / n
                                        * (n * g - dbeta[c] - xhat.data()[base + t] * dgamma[c]);
                                }
                            }
                        }
                    } else {
                        for bi in 0..batch {
                            for c in 0..channels {
                                let base = (bi * channels + c) * t_len;
                                for t in 0..t_len {
                                    dx[base + t] = gy.data()[base + t] * gd[c] * inv_std[c];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                    accumulate(&mut grads, *gamma, Tensor::new(&[channels], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(&[channels], dbeta)?);
                }
                Op::Lstm {
                    x,
                    w_ih,
                    w_hh,
                    b,
                    cache,
                } => {
                    let xv = &self.nodes[x.0];
                    let (batch, t_len, in_dim) = (xv.dim(0), xv.dim(1), xv.dim(2));
                    let wi = &self.nodes[w_ih.0];
                    let wh = &self.nodes[w_hh.0];
                    let hidden = wh.dim(0);
                    let g4 = 4 * hidden;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dwi = vec![0.0; wi.len()];
                    let mut dwh = vec![0.0; wh.len()];
                    let mut db = vec![0.0; g4];
                    let mut dh = gy.data().to_vec();
                    let mut dc = vec![0.0; batch * hidden];
                    for t in (0..t_len).rev() {
                        let [gi, gf, gg, go] = &cache.gates[t];
                        let c_new = cache.cs[t + 1].data();
                        let c_old = cache.cs[t].data();
                        let mut dz = vec![0.0; batch * g4];
                        for bi in 0..batch {
                            for h in 0..hidden {
                                let idx = bi * hidden + h;
                                let tc = c_new[idx].tanh();
                                let o = go.data()[idx];
                                let dcell = dc[idx] + dh[idx] * o * (1.0 - tc * tc);
                                let i = gi.data()[idx];
                                let f = gf.data()[idx];
                                let g = gg.data()[idx];
                                let zb = bi * g4;
                                dz[zb + h] = dcell * g * i * (1.0 - i);
                                dz[zb + hidden + h] = dcell * c_old[idx] * f * (1.0 - f);
                                dz[zb + 2 * hidden + h] = dcell * i * (1.0 - g * g);
                                dz[zb + 3 * hidden + h] = dh[idx] * tc * o * (1.0 - o);
                                dc[idx] = dcell * f;
                            }
                        }
                        for bi in 0..batch {
                            let z_row = &dz[bi * g4..(bi + 1) * g4];
                            let x_row = &xv.data()
                                [(bi * t_len + t) * in_dim..(bi * t_len + t + 1) * in_dim];
                            let h_row = &cache.hs[t].data()[bi * hidden..(bi + 1) * hidden];
                            matmul_nt_acc(
                                &mut dx[(bi * t_len + t) * in_dim..(bi * t_len + t + 1) * in_dim],
                                z_row,
                                1,
                                g4,
                                wi.data(),
                                in_dim,
                            );
                            matmul_tn_acc(&mut dwi, x_row, in_dim, 1, z_row, g4);
                            matmul_tn_acc(&mut dwh, h_row, hidden, 1, z_row, g4);
                            for (d, z) in db.iter_mut().zip(z_row) {
                                *d += z;
                            }
                        }
                        let mut dh_prev = vec![0.0; batch * hidden];
                        matmul_nt_acc(&mut dh_prev, &dz, batch, g4, wh.data(), hidden);
                        dh = dh_prev;
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                    accumulate(&mut grads, *w_ih, Tensor::new(wi.shape(), dwi)?);
                    accumulate(&mut grads, *w_hh, Tensor::new(wh.shape(), dwh)?);
                    accumulate(&mut grads, *b, Tensor::new(&[g4], db)?);
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let batch = probs.dim(0);
                    let classes = probs.dim(1);
                    let scale = gy.data()[0] / batch as f64;
                    let mut dl = probs.data().to_vec();
                    for (bi, &label) in labels.iter().enumerate() {
                        dl[bi * classes + label] -= 1.0;
                    }
                    for v in dl.iter_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(probs.shape(), dl)?);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy.clone());
                }
                Op::Reshape { x } => {
                    let dx = gy.reshaped(self.nodes[x.0].shape())?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::SwapAxes12 { x } => {
                    let xv = &self.nodes[x.0];
                    let (batch, c, t) = (xv.dim(0), xv.dim(1), xv.dim(2));
                    let mut dx = vec![0.0; xv.len()];
                    for bi in 0..batch {
                        for ci in 0..c {
                            for ti in 0..t {
                                dx[(bi * c + ci) * t + ti] = gy.data()[(bi * t + ti) * c + ci];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                Op::SumAll { x } => {
                    let xv = &self.nodes[x.0];
                    accumulate(&mut grads, *x, Tensor::filled(xv.shape(), gy.data()[0]));
                }
            }
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta).expect("gradient shape mismatch"),
        slot => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a [B,C] tensor, stabilized by the row maximum.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (batch, classes) = (logits.dim(0), logits.dim(1));
    let mut out = vec![0.0; batch * classes];
    for bi in 0..batch {
        let row = &logits.data()[bi * classes..(bi + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[bi * classes..(bi + 1) * classes];
        let mut sum = 0.0;
        for (dst, v) in o.iter_mut().zip(row) {
            *dst = (v - m).exp();
            sum += *dst;
        }
        for dst in o.iter_mut() {
            *dst /= sum;
        }
    }
    Tensor::new(logits.shape(), out).expect("softmax shape")
}

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_nn_acc(out: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b^T, with b stored [n,k]
fn matmul_nt_acc(out: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m,n] += a^T * b, with a stored [k,m] and b stored [k,n]
fn matmul_tn_acc(out: &mut [f64], a: &[f64], m: usize, k: usize, b: &[f64], n: usize) {
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
