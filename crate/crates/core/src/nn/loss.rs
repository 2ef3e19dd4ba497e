use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Which objective a training session minimizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Sigmoid BCE restricted to the listed labels.
    MaskedBce(Vec<u8>),
    SoftmaxCe,
}

impl Loss {
    pub fn evaluate(&self, logits: &Matrix, targets: &[u8]) -> Result<(f64, Matrix)> {
        match self {
            Loss::MaskedBce(active) => masked_bce_loss(logits, targets, active),
            Loss::SoftmaxCe => softmax_ce_loss(logits, targets),
        }
    }
}

/// Binary cross-entropy over the `active` logits only.
///
/// Each active label `c` is an independent sigmoid unit with target
/// `y_c = [target == c]`. The loss is averaged over samples × active labels.
/// Gradient entries for inactive logits are exactly `0.0`.
pub fn masked_bce_loss(logits: &Matrix, targets: &[u8], active: &[u8]) -> Result<(f64, Matrix)> {
    check_batch("masked_bce_loss", logits, targets)?;
    if active.is_empty() {
        return Err(Error::Config("masked_bce_loss: empty active label set".into()));
    }
    let classes = logits.cols();
    for (i, &c) in active.iter().enumerate() {
        if c as usize >= classes {
            return Err(Error::Config(format!(
                "masked_bce_loss: active label {c} outside {classes} logits"
            )));
        }
        if active[..i].contains(&c) {
            return Err(Error::Config(format!("masked_bce_loss: label {c} listed twice")));
        }
    }
    if let Some(t) = targets.iter().find(|t| !active.contains(t)) {
        return Err(Error::Data(format!(
            "target label {t} is not among the active labels {active:?}"
        )));
    }

    let norm = (targets.len() * active.len()) as f64;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    let mut total = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        let row = logits.row(i);
        let g = grad.row_mut(i);
        for &c in active {
            let z = row[c as usize];
            let y = if target == c { 1.0 } else { 0.0 };
            // -[y ln σ(z) + (1-y) ln(1-σ(z))] without overflow
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            g[c as usize] = (sigmoid(z) - y) / norm;
        }
    }
    Ok((total / norm, grad))
}

/// Mean softmax cross-entropy over all logits.
pub fn softmax_ce_loss(logits: &Matrix, targets: &[u8]) -> Result<(f64, Matrix)> {
    check_batch("softmax_ce_loss", logits, targets)?;
    let classes = logits.cols();
    if let Some(t) = targets.iter().find(|&&t| t as usize >= classes) {
        return Err(Error::Data(format!("target label {t} outside {classes} classes")));
    }
    let batch = targets.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    let mut total = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_norm = max + sum.ln();
        total += log_norm - row[target as usize];
        for (c, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[c] - log_norm).exp();
            let y = if c == target as usize { 1.0 } else { 0.0 };
            *g = (p - y) / batch;
        }
    }
    Ok((total / batch, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_batch(op: &'static str, logits: &Matrix, targets: &[u8]) -> Result<()> {
    if logits.rows() != targets.len() {
        return Err(Error::shape(
            op,
            format!("{} logit rows for {} targets", logits.rows(), targets.len()),
        ));
    }
    if targets.is_empty() {
        return Err(Error::Data(format!("{op}: empty batch")));
    }
    Ok(())
}
