//! Gradient correlation subspace learning.
//!
//! Lifecycle of a [`GcslModel`]:
//!
//! 1. Task 0 trains every parameter ([`GcslModel::train_task`]).
//! 2. [`GcslModel::end_task`] merges the session's deltas into the frozen
//!    weights, measures the gradient correlation matrix of each hidden layer
//!    on the finished task and stores the eigenbasis for the next session.
//! 3. [`GcslModel::begin_task`] opens a later session: hidden layer `l`
//!    trains a fresh delta `T` of shape `[n × n_{l-1}]` and computes with
//!    `W_frozen + Vᵀ·T`. The output layer always trains directly.

use serde::{Deserialize, Serialize};

use crate::data::TaskView;
use crate::error::{Error, Result};
use crate::linalg::{eigh_symmetric, xavier_init, Matrix, Rng, DEFAULT_EIGH_TOL};
use crate::nn::{
    argmax_rows, backward, forward, masked_bce_loss, minibatches, Activation, ForwardTrace, LayerParams, Loss, Network,
    Optimizer, OptimizerSpec,
};

/// Batch size used for the correlation pass.
pub const CORRELATION_BATCH: usize = 128;

/// Which end of the spectrum the subspace is taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigenSelection {
    #[default]
    Smallest,
    Largest,
}

/// Running sum of per-sample outer products `g·gᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationAccumulator {
    sum: Matrix,
    count: usize,
}

impl CorrelationAccumulator {
    pub fn new(width: usize) -> Self {
        CorrelationAccumulator {
            sum: Matrix::zeros(width, width),
            count: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.sum.rows()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sum(&self) -> &Matrix {
        &self.sum
    }

    /// Adds one outer product per row of `grads` (`[batch × n_l]`).
    pub fn accumulate(&mut self, grads: &Matrix) -> Result<()> {
        if grads.cols() != self.width() {
            return Err(Error::shape(
                "accumulate_correlation",
                format!("gradient width {} for a layer of width {}", grads.cols(), self.width()),
            ));
        }
        let outer = grads.matmul_transa(grads)?;
        self.sum.add_assign(&outer)?;
        self.count += grads.rows();
        Ok(())
    }

    pub fn merge(&mut self, other: &CorrelationAccumulator) -> Result<()> {
        self.sum.add_assign(&other.sum)?;
        self.count += other.count;
        Ok(())
    }

    pub fn mean(&self) -> Result<Matrix> {
        if self.count == 0 {
            return Err(Error::State("correlation accumulator holds no samples".into()));
        }
        Ok(self.sum.scale(1.0 / self.count as f64))
    }
}

/// Selected orthonormal eigenvectors (rows) of a layer's correlation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceBasis {
    /// `[n × n_l]`.
    pub basis: Matrix,
    /// Ascending, paired with the rows of `basis`.
    pub eigenvalues: Vec<f64>,
}

impl SubspaceBasis {
    pub fn new(basis: Matrix, eigenvalues: Vec<f64>) -> Result<Self> {
        if basis.rows() != eigenvalues.len() {
            return Err(Error::shape(
                "subspace_basis",
                format!("{} basis rows, {} eigenvalues", basis.rows(), eigenvalues.len()),
            ));
        }
        Ok(SubspaceBasis { basis, eigenvalues })
    }

    pub fn n(&self) -> usize {
        self.basis.rows()
    }

    pub fn width(&self) -> usize {
        self.basis.cols()
    }

    /// The first `n` rows.
    pub fn truncated(&self, n: usize) -> Result<SubspaceBasis> {
        if n > self.n() {
            return Err(Error::State(format!(
                "requested a subspace of size {n} but only {} eigenvectors were stored",
                self.n()
            )));
        }
        let rows: Vec<usize> = (0..n).collect();
        Ok(SubspaceBasis {
            basis: self.basis.select_rows(&rows),
            eigenvalues: self.eigenvalues[..n].to_vec(),
        })
    }

    /// `Vᵀ·V`, the orthogonal projector onto the span (`[n_l × n_l]`).
    pub fn projector(&self) -> Matrix {
        self.basis.matmul_transa(&self.basis).expect("shapes agree")
    }

    /// `max |(I − VᵀV)·Δ|` for a weight change `Δ` of shape `[n_l × n_{l-1}]`.
    pub fn residual(&self, delta: &Matrix) -> Result<f64> {
        let projected = self.projector().matmul(delta)?;
        Ok(delta.max_abs_diff(&projected))
    }

    /// `max |V·Vᵀ − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        self.basis
            .matmul_transb(&self.basis)
            .expect("shapes agree")
            .max_abs_diff(&Matrix::identity(self.n()))
    }
}

/// Eigenbasis of the accumulator's mean matrix restricted to `n` vectors.
pub fn extract_basis(acc: &CorrelationAccumulator, n: usize, selection: EigenSelection) -> Result<SubspaceBasis> {
    let width = acc.width();
    if n > width {
        return Err(Error::Config(format!("subspace size {n} exceeds layer width {width}")));
    }
    let eig = eigh_symmetric(&acc.mean()?, DEFAULT_EIGH_TOL)?;
    let rows: Vec<usize> = match selection {
        EigenSelection::Smallest => (0..n).collect(),
        EigenSelection::Largest => (width - n..width).collect(),
    };
    Ok(SubspaceBasis {
        basis: eig.eigenvectors.select_rows(&rows),
        eigenvalues: rows.iter().map(|&i| eig.eigenvalues[i]).collect(),
    })
}

/// One hidden layer of a [`GcslModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct GcslLayerState {
    /// Merged weights of all finished tasks.
    pub frozen: LayerParams,
    /// Basis stored by the last `end_task`.
    pub basis: Option<SubspaceBasis>,
    /// Basis in use by the open session; `None` when the layer is frozen.
    pub active: Option<SubspaceBasis>,
    /// `[n × n_{l-1}]`.
    pub trainable: Option<Matrix>,
    /// Length `n`, present when the layer has a bias.
    pub trainable_bias: Option<Vec<f64>>,
}

impl GcslLayerState {
    fn plain(frozen: LayerParams) -> Self {
        GcslLayerState {
            frozen,
            basis: None,
            active: None,
            trainable: None,
            trainable_bias: None,
        }
    }

    /// `frozen + Vᵀ·trainable`, or the frozen weights when no delta is attached.
    pub fn effective(&self) -> LayerParams {
        let (Some(v), Some(t)) = (&self.active, &self.trainable) else {
            return self.frozen.clone();
        };
        let delta = v.basis.matmul_transa(t).expect("delta shape checked at begin_task");
        let weights = self
            .frozen
            .weights
            .add(&delta)
            .expect("delta shape checked at begin_task");
        let bias = match (&self.frozen.bias, &self.trainable_bias) {
            (Some(b), Some(tb)) => {
                let mut out = b.clone();
                for (k, &c) in tb.iter().enumerate() {
                    for (o, &vk) in out.iter_mut().zip(v.basis.row(k)) {
                        *o += vk * c;
                    }
                }
                Some(out)
            }
            (b, _) => b.clone(),
        };
        LayerParams {
            weights,
            bias,
            activation: self.frozen.activation,
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable.as_ref().map_or(0, |t| t.rows() * t.cols()) + self.trainable_bias.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    /// A session is open: task 0 trains everything, later tasks train deltas.
    Training,
    Idle,
}

/// A ReLU MLP trained task by task under subspace confinement.
#[derive(Clone, Debug)]
pub struct GcslModel {
    hidden: Vec<GcslLayerState>,
    output: LayerParams,
    task_index: usize,
    phase: Phase,
    selection: EigenSelection,
    optimizer: Option<Optimizer>,
}

impl GcslModel {
    /// Xavier-initialized model with an open task-0 session.
    pub fn new(input: usize, hidden: &[usize], outputs: usize, bias: bool, rng: &mut Rng) -> Self {
        let mut layers = Network::xavier(input, hidden, outputs, bias, rng).layers;
        let output = layers.pop().expect("network always has an output layer");
        GcslModel {
            hidden: layers.into_iter().map(GcslLayerState::plain).collect(),
            output,
            task_index: 0,
            phase: Phase::Training,
            selection: EigenSelection::Smallest,
            optimizer: None,
        }
    }

    /// Reassembles an idle model between tasks, e.g. from a checkpoint.
    pub fn from_parts(
        hidden: Vec<LayerParams>,
        bases: Vec<Option<SubspaceBasis>>,
        output: LayerParams,
        task_index: usize,
    ) -> Result<Self> {
        if hidden.len() != bases.len() {
            return Err(Error::shape(
                "gcsl_model",
                format!("{} hidden layers, {} bases", hidden.len(), bases.len()),
            ));
        }
        let mut fan_in = hidden.first().map_or(output.fan_in(), LayerParams::fan_in);
        for (l, (layer, basis)) in hidden.iter().zip(&bases).enumerate() {
            if layer.fan_in() != fan_in {
                return Err(Error::shape("gcsl_model", format!("layer {l} does not chain")));
            }
            if let Some(b) = basis {
                if b.width() != layer.fan_out() {
                    return Err(Error::shape(
                        "gcsl_model",
                        format!("basis width {} for layer {l} of width {}", b.width(), layer.fan_out()),
                    ));
                }
            }
            fan_in = layer.fan_out();
        }
        if output.fan_in() != fan_in || output.activation != Activation::Identity {
            return Err(Error::shape("gcsl_model", "output layer does not chain"));
        }
        let hidden = hidden
            .into_iter()
            .zip(bases)
            .map(|(frozen, basis)| GcslLayerState {
                basis,
                ..GcslLayerState::plain(frozen)
            })
            .collect();
        Ok(GcslModel {
            hidden,
            output,
            task_index,
            phase: Phase::Idle,
            selection: EigenSelection::Smallest,
            optimizer: None,
        })
    }

    pub fn with_selection(mut self, selection: EigenSelection) -> Self {
        self.selection = selection;
        self
    }

    pub fn selection(&self) -> EigenSelection {
        self.selection
    }

    /// Number of completed tasks.
    pub fn task_index(&self) -> usize {
        self.task_index
    }

    pub fn is_training(&self) -> bool {
        self.phase == Phase::Training
    }

    pub fn hidden(&self) -> &[GcslLayerState] {
        &self.hidden
    }

    pub fn output(&self) -> &LayerParams {
        &self.output
    }

    /// Input width followed by every layer's output width.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.hidden.first().map_or(self.output.fan_in(), |h| h.frozen.fan_in())];
        w.extend(self.hidden.iter().map(|h| h.frozen.fan_out()));
        w.push(self.output.fan_out());
        w
    }

    /// Frozen hidden layers plus the output layer.
    pub fn merged_layers(&self) -> Vec<LayerParams> {
        let mut out: Vec<LayerParams> = self.hidden.iter().map(|h| h.frozen.clone()).collect();
        out.push(self.output.clone());
        out
    }

    /// Layers as the open session computes them.
    pub fn effective_layers(&self) -> Vec<LayerParams> {
        let mut out: Vec<LayerParams> = self.hidden.iter().map(GcslLayerState::effective).collect();
        out.push(self.output.clone());
        out
    }

    /// Parameters the open session optimizes.
    pub fn trainable_param_count(&self) -> usize {
        let hidden: usize = if self.task_index == 0 {
            self.hidden.iter().map(|h| h.frozen.param_count()).sum()
        } else {
            self.hidden.iter().map(GcslLayerState::trainable_param_count).sum()
        };
        hidden + self.output.param_count()
    }

    pub fn effective_forward(&self, x: &Matrix) -> Result<ForwardTrace> {
        if !self.is_training() {
            return Err(Error::State("effective_forward needs an open training session".into()));
        }
        forward(&self.effective_layers(), x)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<u8>> {
        Ok(argmax_rows(forward(&self.effective_layers(), x)?.logits()))
    }

    /// Starts session `k ≥ 1` with `per_layer_n[l]` trainable directions per hidden layer.
    pub fn begin_task(&mut self, per_layer_n: &[usize], rng: &mut Rng) -> Result<()> {
        if self.is_training() {
            return Err(Error::State("begin_task called while a session is open".into()));
        }
        if self.task_index == 0 {
            return Err(Error::State("task 0 session is opened by GcslModel::new".into()));
        }
        if per_layer_n.len() != self.hidden.len() {
            return Err(Error::Config(format!(
                "{} subspace sizes for {} hidden layers",
                per_layer_n.len(),
                self.hidden.len()
            )));
        }
        for (l, (&n, layer)) in per_layer_n.iter().zip(&self.hidden).enumerate() {
            if n > layer.frozen.fan_out() {
                return Err(Error::Config(format!(
                    "subspace size {n} exceeds width {} of hidden layer {l}",
                    layer.frozen.fan_out()
                )));
            }
            if n > 0 && layer.basis.is_none() {
                return Err(Error::State(format!("hidden layer {l} has no stored basis")));
            }
        }
        let mut sessions = Vec::with_capacity(self.hidden.len());
        for (&n, layer) in per_layer_n.iter().zip(&self.hidden) {
            if n == 0 {
                sessions.push(None);
                continue;
            }
            let basis = layer.basis.as_ref().expect("checked above").truncated(n)?;
            let trainable = xavier_init(rng, layer.frozen.fan_in(), n);
            let bias = layer.frozen.bias.as_ref().map(|_| vec![0.0; n]);
            sessions.push(Some((basis, trainable, bias)));
        }
        for (layer, session) in self.hidden.iter_mut().zip(sessions) {
            if let Some((basis, trainable, bias)) = session {
                layer.active = Some(basis);
                layer.trainable = Some(trainable);
                layer.trainable_bias = bias;
            }
        }
        self.optimizer = None;
        self.phase = Phase::Training;
        Ok(())
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let first_task = self.task_index == 0;
        let mut out = Vec::new();
        for layer in &mut self.hidden {
            if first_task {
                out.push(layer.frozen.weights.as_mut_slice());
                if let Some(b) = &mut layer.frozen.bias {
                    out.push(b.as_mut_slice());
                }
            } else if let Some(t) = &mut layer.trainable {
                out.push(t.as_mut_slice());
                if let Some(b) = &mut layer.trainable_bias {
                    out.push(b.as_mut_slice());
                }
            }
        }
        out.push(self.output.weights.as_mut_slice());
        if let Some(b) = &mut self.output.bias {
            out.push(b.as_mut_slice());
        }
        out
    }

    /// Loss and gradients of the session parameters, in optimizer order.
    pub fn session_gradients(&self, x: &Matrix, targets: &[u8], loss: &Loss) -> Result<(f64, Vec<Vec<f64>>)> {
        if !self.is_training() {
            return Err(Error::State("no open training session".into()));
        }
        let layers = self.effective_layers();
        let trace = forward(&layers, x)?;
        let (value, d_logits) = loss.evaluate(trace.logits(), targets)?;
        let grads = backward(&layers, &trace, &d_logits)?;
        let first_task = self.task_index == 0;
        let mut out = Vec::new();
        for (l, layer) in self.hidden.iter().enumerate() {
            if first_task {
                out.push(grads.weights[l].as_slice().to_vec());
                if let Some(b) = &grads.biases[l] {
                    out.push(b.clone());
                }
            } else if let (Some(v), Some(_)) = (&layer.active, &layer.trainable) {
                // dL/dT = V · dL/dW_eff
                out.push(v.basis.matmul(&grads.weights[l])?.into_vec());
                if layer.trainable_bias.is_some() {
                    let db = grads.biases[l].as_ref().expect("bias present in effective layer");
                    out.push(v.basis.row_iter().map(|row| crate::linalg::dot(row, db)).collect());
                }
            }
        }
        let last = self.hidden.len();
        out.push(grads.weights[last].as_slice().to_vec());
        if let Some(b) = &grads.biases[last] {
            out.push(b.clone());
        }
        Ok((value, out))
    }

    /// Shuffled minibatch training on the session's task with masked BCE.
    /// Returns the mean batch loss of the last epoch (NaN for zero epochs).
    pub fn train_task(
        &mut self,
        data: &TaskView<'_>,
        epochs: usize,
        batch_size: usize,
        spec: &OptimizerSpec,
        rng: &mut Rng,
    ) -> Result<f64> {
        if !self.is_training() {
            return Err(Error::State("train_task needs an open session".into()));
        }
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty task".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        spec.validate()?;
        let loss = Loss::MaskedBce(data.classes.to_vec());
        let mut opt = self.optimizer.take().unwrap_or_else(|| Optimizer::new(*spec));
        let mut last = f64::NAN;
        let result = (|| {
            for _ in 0..epochs {
                let batches = minibatches(data.indices, batch_size, rng);
                let mut total = 0.0;
                for batch in &batches {
                    let (x, y) = data.batch(batch);
                    let (value, grads) = self.session_gradients(&x, &y, &loss)?;
                    if !value.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite loss {value} in task {}",
                            self.task_index
                        )));
                    }
                    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
                    opt.step(&mut self.param_slices_mut(), &grad_refs)?;
                    total += value;
                }
                last = total / batches.len() as f64;
            }
            Ok(())
        })();
        self.optimizer = Some(opt);
        result.map(|()| last)
    }

    /// Folds the session's deltas into the frozen weights, closes the session
    /// and stores bases of size `per_layer_n_next` measured on `data`.
    /// Returns the accumulators that produced them.
    pub fn end_task(
        &mut self,
        data: &TaskView<'_>,
        per_layer_n_next: &[usize],
        sample_limit: Option<usize>,
    ) -> Result<Vec<CorrelationAccumulator>> {
        if !self.is_training() {
            return Err(Error::State("end_task called without an open session".into()));
        }
        if per_layer_n_next.len() != self.hidden.len() {
            return Err(Error::Config(format!(
                "{} subspace sizes for {} hidden layers",
                per_layer_n_next.len(),
                self.hidden.len()
            )));
        }
        for (l, (&n, layer)) in per_layer_n_next.iter().zip(&self.hidden).enumerate() {
            if n > layer.frozen.fan_out() {
                return Err(Error::Config(format!(
                    "subspace size {n} exceeds width {} of hidden layer {l}",
                    layer.frozen.fan_out()
                )));
            }
        }
        self.merge();
        let accs = compute_correlation_pass(self, data, sample_limit)?;
        let mut bases = Vec::with_capacity(accs.len());
        for (acc, &n) in accs.iter().zip(per_layer_n_next) {
            bases.push(extract_basis(acc, n, self.selection)?);
        }
        for (layer, basis) in self.hidden.iter_mut().zip(bases) {
            layer.basis = Some(basis);
        }
        self.task_index += 1;
        Ok(accs)
    }

    fn merge(&mut self) {
        for layer in &mut self.hidden {
            layer.frozen = layer.effective();
            layer.active = None;
            layer.trainable = None;
            layer.trainable_bias = None;
        }
        self.optimizer = None;
        self.phase = Phase::Idle;
    }
}

/// Per-sample gradient correlation of every hidden layer on `data`, using
/// the merged weights and masked BCE over `data.classes`.
pub fn compute_correlation_pass(
    model: &GcslModel,
    data: &TaskView<'_>,
    sample_limit: Option<usize>,
) -> Result<Vec<CorrelationAccumulator>> {
    let limit = sample_limit.unwrap_or(usize::MAX).min(data.len());
    if limit == 0 {
        return Err(Error::Data("correlation pass over an empty dataset".into()));
    }
    let layers = model.merged_layers();
    let mut accs: Vec<CorrelationAccumulator> = model
        .hidden
        .iter()
        .map(|h| CorrelationAccumulator::new(h.frozen.fan_out()))
        .collect();
    for chunk in data.indices[..limit].chunks(CORRELATION_BATCH) {
        let (x, y) = data.batch(chunk);
        let trace = forward(&layers, &x)?;
        let (_, d_logits) = masked_bce_loss(trace.logits(), &y, data.classes)?;
        // undo the batch mean so each row is that sample's own gradient
        let d_logits = d_logits.scale(chunk.len() as f64);
        let grads = backward(&layers, &trace, &d_logits)?;
        for (acc, g) in accs.iter_mut().zip(&grads.outputs) {
            acc.accumulate(g)?;
        }
    }
    Ok(accs)
}
