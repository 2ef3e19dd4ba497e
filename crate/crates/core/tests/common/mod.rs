#![allow(dead_code)]

use std::path::PathBuf;

use gcsl_core::data::{Dataset, DatasetPair, Split};
use gcsl_core::experiments::{load_dataset, DatasetKind, DATA_DIR_ENV};
use gcsl_core::nn::{Activation, LayerParams, Loss};
use gcsl_core::{GcslModel, Matrix, OptimizerSpec, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn load(kind: DatasetKind) -> DatasetPair {
    let root = data_root();
    load_dataset(&root, kind).unwrap_or_else(|e| {
        panic!(
            "{e}\nset {DATA_DIR_ENV} or run scripts/fetch_data.sh to populate {}",
            root.display()
        )
    })
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect(),
    )
    .unwrap()
}

/// Weights as nested rows plus bias, decoupled from the crate's types.
#[derive(Clone, Debug)]
pub struct OracleLayer {
    pub w: Vec<Vec<f64>>,
    pub b: Option<Vec<f64>>,
    pub relu: bool,
}

impl OracleLayer {
    pub fn from_params(p: &LayerParams) -> Self {
        OracleLayer {
            w: p.weights.row_iter().map(<[f64]>::to_vec).collect(),
            b: p.bias.clone(),
            relu: p.activation == Activation::Relu,
        }
    }
}

/// Per-neuron forward; returns logits and the ReLU on/off pattern.
pub fn oracle_forward(layers: &[OracleLayer], x: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let mut h = x.to_vec();
    let mut mask = Vec::new();
    for layer in layers {
        let mut next = Vec::with_capacity(layer.w.len());
        for (j, row) in layer.w.iter().enumerate() {
            let mut z = layer.b.as_ref().map_or(0.0, |b| b[j]);
            for (k, &wk) in row.iter().enumerate() {
                z += wk * h[k];
            }
            if layer.relu {
                mask.push(z > 0.0);
                next.push(z.max(0.0));
            } else {
                next.push(z);
            }
        }
        h = next;
    }
    (h, mask)
}

pub fn oracle_loss(logits: &[Vec<f64>], targets: &[u8], loss: &Loss) -> f64 {
    let mut total = 0.0;
    let mut terms = 0usize;
    for (z, &t) in logits.iter().zip(targets) {
        match loss {
            Loss::MaskedBce(active) => {
                for &c in active {
                    let p = 1.0 / (1.0 + (-z[c as usize]).exp());
                    let y = if c == t { 1.0 } else { 0.0 };
                    total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                    terms += 1;
                }
            }
            Loss::SoftmaxCe => {
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - z[t as usize];
                terms += 1;
            }
        }
    }
    total / terms as f64
}

/// Loss over a batch plus the concatenated ReLU pattern of every sample.
pub fn oracle_batch(layers: &[OracleLayer], x: &Matrix, targets: &[u8], loss: &Loss) -> (f64, Vec<bool>) {
    let mut logits = Vec::new();
    let mut mask = Vec::new();
    for row in x.row_iter() {
        let (z, m) = oracle_forward(layers, row);
        logits.push(z);
        mask.extend(m);
    }
    (oracle_loss(&logits, targets, loss), mask)
}

/// Worst relative error over all parameters plus the number skipped
/// because a step of ±h flipped a ReLU.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.worst = self.worst.max(other.worst);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Below this magnitude central differences at `FD_STEP` resolve only
/// about 1e-11 absolute, so errors are measured against it instead.
pub const FD_SCALE_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_SCALE_FLOOR)
}

/// Central differences of `f` over `params[i]` for every `i`, compared with `analytic[i]`.
pub fn check_params(params: &mut [f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> (f64, Vec<bool>)) -> FdReport {
    assert_eq!(params.len(), analytic.len());
    let (_, base_mask) = f(params);
    let mut report = FdReport::default();
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + FD_STEP;
        let (plus, mask_p) = f(params);
        params[i] = orig - FD_STEP;
        let (minus, mask_m) = f(params);
        params[i] = orig;
        if mask_p != base_mask || mask_m != base_mask {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        report.worst = report.worst.max(relative_error(analytic[i], numeric));
        report.checked += 1;
    }
    report
}

fn random_layers(rng: &mut Rng, widths: &[usize], bias: bool) -> Vec<LayerParams> {
    let last = widths.len() - 2;
    widths
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            LayerParams::new(
                random_matrix(rng, w[1], w[0], -1.0, 1.0),
                bias.then(|| (0..w[1]).map(|_| rng.uniform_range(-0.5, 0.5)).collect()),
                if l == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            )
            .unwrap()
        })
        .collect()
}

/// Full-network gradient check for instance `seed` under `loss`.
pub fn network_instance(seed: u64, loss_kind: &str) -> FdReport {
    let mut rng = Rng::new(seed);
    let input = 5 + (seed % 4) as usize;
    let widths = [input, 6, 5, 10];
    let bias = seed % 2 == 0;
    let layers = random_layers(&mut rng, &widths, bias);
    let batch = 3;
    let x = random_matrix(&mut rng, batch, input, 0.0, 1.0);
    let (loss, targets) = match loss_kind {
        "bce" => {
            let a = (seed % 5) as u8 * 2;
            let active = vec![a, a + 1];
            let targets = (0..batch).map(|i| active[i % 2]).collect::<Vec<u8>>();
            (Loss::MaskedBce(active), targets)
        }
        _ => (
            Loss::SoftmaxCe,
            (0..batch).map(|i| ((seed as usize + 3 * i) % 10) as u8).collect(),
        ),
    };
    let trace = gcsl_core::nn::forward(&layers, &x).unwrap();
    let (_, d_logits) = loss.evaluate(trace.logits(), &targets).unwrap();
    let grads = gcsl_core::nn::backward(&layers, &trace, &d_logits).unwrap();

    let oracle: Vec<OracleLayer> = layers.iter().map(OracleLayer::from_params).collect();
    let mut report = FdReport::default();
    for l in 0..layers.len() {
        let mut w: Vec<f64> = layers[l].weights.as_slice().to_vec();
        let cols = layers[l].fan_in();
        let r = check_params(&mut w, grads.weights[l].as_slice(), |p| {
            let mut o = oracle.clone();
            o[l].w = p.chunks(cols).map(<[f64]>::to_vec).collect();
            oracle_batch(&o, &x, &targets, &loss)
        });
        report.merge(r);
        if let (Some(b), Some(gb)) = (&layers[l].bias, &grads.biases[l]) {
            let mut b = b.clone();
            let r = check_params(&mut b, gb, |p| {
                let mut o = oracle.clone();
                o[l].b = Some(p.to_vec());
                oracle_batch(&o, &x, &targets, &loss)
            });
            report.merge(r);
        }
    }
    report
}

/// Gradient check of the session parameters (trainable deltas and output
/// layer) of a model in its second task.
pub fn gcsl_instance(seed: u64) -> FdReport {
    let mut rng = Rng::new(seed);
    let input = 6;
    let bias = seed % 2 == 1;
    let n_samples = 24;
    let labels: Vec<u8> = (0..n_samples).map(|i| (i % 4) as u8).collect();
    let images = random_matrix(&mut rng, n_samples, input, 0.0, 1.0);
    let data = Dataset::new(images, labels, Split::Train).unwrap();
    let first = data.indices_with_labels(&[0, 1]);
    let second = data.indices_with_labels(&[2, 3]);

    let mut model = GcslModel::new(input, &[7, 5], 10, bias, &mut rng);
    let v0 = data.view(&first, &[0, 1]);
    model.train_task(&v0, 2, 4, &OptimizerSpec::sgd(0.3), &mut rng).unwrap();
    let sizes = [1 + (seed % 7) as usize, 1 + (seed % 5) as usize];
    model.end_task(&v0, &sizes, None).unwrap();
    model.begin_task(&sizes, &mut rng).unwrap();
    model
        .train_task(&data.view(&second, &[2, 3]), 1, 4, &OptimizerSpec::sgd(0.3), &mut rng)
        .unwrap();

    let x = random_matrix(&mut rng, 3, input, 0.0, 1.0);
    let targets = [2u8, 3, 2];
    let loss = Loss::MaskedBce(vec![2, 3]);
    let (_, grads) = model.session_gradients(&x, &targets, &loss).unwrap();

    // independent composite oracle: W = F + Vᵀ T built entry by entry
    struct Hidden {
        frozen: Vec<Vec<f64>>,
        frozen_b: Option<Vec<f64>>,
        v: Vec<Vec<f64>>,
        t: Vec<f64>,
        tb: Option<Vec<f64>>,
    }
    let hidden: Vec<Hidden> = model
        .hidden()
        .iter()
        .map(|h| {
            let v = h.active.as_ref().unwrap();
            Hidden {
                frozen: h.frozen.weights.row_iter().map(<[f64]>::to_vec).collect(),
                frozen_b: h.frozen.bias.clone(),
                v: v.basis.row_iter().map(<[f64]>::to_vec).collect(),
                t: h.trainable.as_ref().unwrap().as_slice().to_vec(),
                tb: h.trainable_bias.clone(),
            }
        })
        .collect();
    let output = OracleLayer::from_params(model.output());
    let build = |hidden: &[Hidden], output: &OracleLayer| -> Vec<OracleLayer> {
        let mut layers = Vec::new();
        for h in hidden {
            let n_in = h.frozen[0].len();
            let n = h.v.len();
            let mut w = h.frozen.clone();
            for (i, row) in w.iter_mut().enumerate() {
                for (j, wij) in row.iter_mut().enumerate() {
                    for k in 0..n {
                        *wij += h.v[k][i] * h.t[k * n_in + j];
                    }
                }
            }
            let b = h.frozen_b.as_ref().map(|fb| {
                let tb = h.tb.as_ref().unwrap();
                fb.iter()
                    .enumerate()
                    .map(|(i, &bi)| bi + (0..n).map(|k| h.v[k][i] * tb[k]).sum::<f64>())
                    .collect()
            });
            layers.push(OracleLayer { w, b, relu: true });
        }
        layers.push(output.clone());
        layers
    };

    let mut report = FdReport::default();
    let mut g = grads.iter();
    let mut hidden = hidden;
    for l in 0..hidden.len() {
        let mut t = hidden[l].t.clone();
        let r = check_params(&mut t, g.next().unwrap(), |p| {
            let saved = std::mem::replace(&mut hidden[l].t, p.to_vec());
            let out = oracle_batch(&build(&hidden, &output), &x, &targets, &loss);
            hidden[l].t = saved;
            out
        });
        report.merge(r);
        if let Some(tb) = hidden[l].tb.clone() {
            let mut tb = tb;
            let r = check_params(&mut tb, g.next().unwrap(), |p| {
                let saved = hidden[l].tb.replace(p.to_vec());
                let out = oracle_batch(&build(&hidden, &output), &x, &targets, &loss);
                hidden[l].tb = saved;
                out
            });
            report.merge(r);
        }
    }
    let cols = output.w[0].len();
    let mut w: Vec<f64> = output.w.iter().flatten().copied().collect();
    let r = check_params(&mut w, g.next().unwrap(), |p| {
        let mut o = output.clone();
        o.w = p.chunks(cols).map(<[f64]>::to_vec).collect();
        oracle_batch(&build(&hidden, &o), &x, &targets, &loss)
    });
    report.merge(r);
    if let Some(b) = &output.b {
        let mut b = b.clone();
        let r = check_params(&mut b, g.next().unwrap(), |p| {
            let mut o = output.clone();
            o.b = Some(p.to_vec());
            oracle_batch(&build(&hidden, &o), &x, &targets, &loss)
        });
        report.merge(r);
    }
    assert!(g.next().is_none(), "unexpected extra gradient tensors");
    report
}
