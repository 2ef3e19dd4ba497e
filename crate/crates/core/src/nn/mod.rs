//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Batches are row-major: one sample per row. A layer with weights
//! `W` of shape `[n_out × n_in]` maps a batch `X` (`[batch × n_in]`) to
//! `Z = X·Wᵀ (+ b)` and `H = g(Z)`.

mod loss;
mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{xavier_init, Matrix, Rng};

pub use loss::{masked_bce_loss, sigmoid, softmax_ce_loss, Loss};
pub use optim::{Optimizer, OptimizerKind, OptimizerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Weights (`[n_out × n_in]`), optional bias and activation of one dense layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
    pub activation: Activation,
}

impl LayerParams {
    pub fn new(weights: Matrix, bias: Option<Vec<f64>>, activation: Activation) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weights.rows() {
                return Err(Error::shape(
                    "LayerParams::new",
                    format!("bias of length {} for {} outputs", b.len(), weights.rows()),
                ));
            }
        }
        Ok(LayerParams {
            weights,
            bias,
            activation,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

/// Everything backward needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// `z^l` per layer.
    pub pre: Vec<Matrix>,
    /// `h^l = g(z^l)` per layer; the last entry holds the logits.
    pub post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.post.last().expect("a network has at least one layer")
    }

    pub fn depth(&self) -> usize {
        self.post.len()
    }

    /// Input to layer `l`.
    pub fn layer_input(&self, l: usize) -> &Matrix {
        if l == 0 {
            &self.input
        } else {
            &self.post[l - 1]
        }
    }
}

/// Gradients of a batch loss.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Option<Vec<f64>>>,
    /// `dL/dh^l` for every layer, one row per sample. The last entry is
    /// `dL/dlogits`.
    pub outputs: Vec<Matrix>,
}

impl GradientBundle {
    /// Flattened gradients in the same order as [`Network::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            if let Some(b) = b {
                out.push(b.as_slice());
            }
        }
        out
    }
}

pub fn forward(layers: &[LayerParams], x: &Matrix) -> Result<ForwardTrace> {
    if layers.is_empty() {
        return Err(Error::Config("forward: network has no layers".into()));
    }
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let input = if l == 0 { x } else { &post[l - 1] };
        if input.cols() != layer.fan_in() {
            return Err(Error::shape(
                "forward",
                format!("layer {l} expects {} inputs, got {}", layer.fan_in(), input.cols()),
            ));
        }
        let mut z = input.matmul_transb(&layer.weights)?;
        if let Some(b) = &layer.bias {
            for i in 0..z.rows() {
                for (zi, bi) in z.row_mut(i).iter_mut().zip(b) {
                    *zi += bi;
                }
            }
        }
        let mut h = z.clone();
        for v in h.as_mut_slice() {
            *v = layer.activation.apply(*v);
        }
        pre.push(z);
        post.push(h);
    }
    Ok(ForwardTrace {
        input: x.clone(),
        pre,
        post,
    })
}

/// Reverse-mode gradients for a batch, given `dL/dlogits`.
pub fn backward(layers: &[LayerParams], trace: &ForwardTrace, d_logits: &Matrix) -> Result<GradientBundle> {
    let depth = layers.len();
    if trace.depth() != depth {
        return Err(Error::shape(
            "backward",
            format!("trace of depth {} for {depth} layers", trace.depth()),
        ));
    }
    if d_logits.shape() != trace.logits().shape() {
        return Err(Error::shape(
            "backward",
            format!(
                "upstream gradient {:?} vs logits {:?}",
                d_logits.shape(),
                trace.logits().shape()
            ),
        ));
    }
    for (l, layer) in layers.iter().enumerate() {
        if trace.pre[l].cols() != layer.fan_out() || trace.layer_input(l).cols() != layer.fan_in() {
            return Err(Error::shape("backward", format!("trace does not match layer {l}")));
        }
    }

    let mut weights = vec![Matrix::zeros(0, 0); depth];
    let mut biases = vec![None; depth];
    let mut outputs = vec![Matrix::zeros(0, 0); depth];
    let mut d_h = d_logits.clone();
    for l in (0..depth).rev() {
        let layer = &layers[l];
        let mut d_z = d_h.clone();
        if layer.activation != Activation::Identity {
            for (g, &z) in d_z.as_mut_slice().iter_mut().zip(trace.pre[l].as_slice()) {
                *g *= layer.activation.derivative(z);
            }
        }
        weights[l] = d_z.matmul_transa(trace.layer_input(l))?;
        if layer.bias.is_some() {
            let mut db = vec![0.0; layer.fan_out()];
            for row in d_z.row_iter() {
                for (acc, g) in db.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            biases[l] = Some(db);
        }
        let next = if l > 0 { Some(d_z.matmul(&layer.weights)?) } else { None };
        outputs[l] = d_h;
        if let Some(n) = next {
            d_h = n;
        } else {
            break;
        }
    }
    Ok(GradientBundle {
        weights,
        biases,
        outputs,
    })
}

/// Index of the largest entry per row; ties resolve to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<u8> {
    m.row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

/// Shuffles `indices` and cuts them into batches of at most `batch_size`.
pub fn minibatches(indices: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order = indices.to_vec();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// A plain stack of dense layers: ReLU hidden layers, identity output.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<LayerParams>,
}

impl Network {
    /// Xavier-initialized network `input → hidden… → outputs`. Biases start at zero.
    pub fn xavier(input: usize, hidden: &[usize], outputs: usize, bias: bool, rng: &mut Rng) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(outputs);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| LayerParams {
                weights: xavier_init(rng, w[0], w[1]),
                bias: bias.then(|| vec![0.0; w[1]]),
                activation: if l == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Network { layers }
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardTrace> {
        forward(&self.layers, x)
    }

    pub fn backward(&self, trace: &ForwardTrace, d_logits: &Matrix) -> Result<GradientBundle> {
        backward(&self.layers, trace, d_logits)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<u8>> {
        Ok(argmax_rows(self.forward(x)?.logits()))
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            out.push(layer.weights.as_mut_slice());
            if let Some(b) = &mut layer.bias {
                out.push(b.as_mut_slice());
            }
        }
        out
    }

    /// One forward/backward/update step on a batch; returns the batch loss.
    pub fn train_step(&mut self, x: &Matrix, targets: &[u8], loss: &Loss, opt: &mut Optimizer) -> Result<f64> {
        let trace = self.forward(x)?;
        let (value, d_logits) = loss.evaluate(trace.logits(), targets)?;
        let grads = self.backward(&trace, &d_logits)?;
        opt.step(&mut self.param_slices_mut(), &grads.slices())?;
        Ok(value)
    }

    /// Shuffled minibatch training over `indices` of `(images, labels)`.
    /// Returns the mean batch loss of the final epoch (NaN if `epochs == 0`).
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        &mut self,
        images: &Matrix,
        labels: &[u8],
        indices: &[usize],
        loss: &Loss,
        epochs: usize,
        batch_size: usize,
        opt: &mut Optimizer,
        rng: &mut Rng,
    ) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::Data("cannot train on an empty index set".into()));
        }
        let mut last = f64::NAN;
        for _ in 0..epochs {
            let mut total = 0.0;
            let batches = minibatches(indices, batch_size, rng);
            for batch in &batches {
                let x = images.select_rows(batch);
                let y: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
                total += self.train_step(&x, &y, loss, opt)?;
            }
            last = total / batches.len() as f64;
        }
        Ok(last)
    }
}
