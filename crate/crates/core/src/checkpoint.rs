//! Binary checkpoints of an idle [`GcslModel`].
//!
//! All integers are little-endian; floats are stored as their IEEE-754 bit
//! patterns, so a round trip is bit-exact.
//!
//! ```text
//! magic        8 bytes  "GCSLCKPT"
//! version      u32      currently 1
//! task_index   u64      completed tasks
//! depth        u32      number of weight layers, output included
//! widths       u64 × (depth + 1)
//! has_bias     u8
//! per hidden layer:
//!     weights  f64 × (n_out · n_in), row-major
//!     bias     f64 × n_out            (if has_bias)
//!     has_basis u8
//!     n         u64                   (if has_basis)
//!     eigenvalues f64 × n
//!     basis     f64 × (n · n_out), row-major
//! output layer:
//!     weights, bias as above
//! checksum     u64      FNV-1a over every preceding byte
//! ```

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gcsl::{GcslModel, SubspaceBasis};
use crate::linalg::Matrix;
use crate::nn::{Activation, LayerParams, Network};

pub const MAGIC: &[u8; 8] = b"GCSLCKPT";
pub const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Serializes an idle model.
pub fn encode(model: &GcslModel) -> Result<Vec<u8>> {
    if model.is_training() {
        return Err(Error::State(
            "cannot checkpoint a model with an open training session".into(),
        ));
    }
    let widths = model.widths();
    let has_bias = model.output().bias.is_some();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.task_index() as u64).to_le_bytes());
    out.extend_from_slice(&((widths.len() - 1) as u32).to_le_bytes());
    for &w in &widths {
        out.extend_from_slice(&(w as u64).to_le_bytes());
    }
    out.push(u8::from(has_bias));
    let put = |out: &mut Vec<u8>, values: &[f64]| {
        for v in values {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    };
    let put_layer = |out: &mut Vec<u8>, layer: &LayerParams| -> Result<()> {
        if layer.bias.is_some() != has_bias {
            return Err(Error::Checkpoint("layers disagree on bias presence".into()));
        }
        put(out, layer.weights.as_slice());
        if let Some(b) = &layer.bias {
            put(out, b);
        }
        Ok(())
    };
    for layer in model.hidden() {
        put_layer(&mut out, &layer.frozen)?;
        match &layer.basis {
            Some(b) => {
                out.push(1);
                out.extend_from_slice(&(b.n() as u64).to_le_bytes());
                put(&mut out, &b.eigenvalues);
                put(&mut out, b.basis.as_slice());
            }
            None => out.push(0),
        }
    }
    put_layer(&mut out, model.output())?;
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated checkpoint while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn size(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible {what} {v}")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("implausible size for {what}")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
}

/// Parses a checkpoint into an idle model.
pub fn decode(bytes: &[u8]) -> Result<GcslModel> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint(
            "checksum mismatch: file is truncated or corrupt".into(),
        ));
    }
    let task_index = r.size("task index")?;
    let depth = r.u32("depth")? as usize;
    if depth == 0 || depth > 1024 {
        return Err(Error::Checkpoint(format!("implausible depth {depth}")));
    }
    let widths = (0..=depth).map(|_| r.size("width")).collect::<Result<Vec<_>>>()?;
    let has_bias = match r.u8("bias flag")? {
        0 => false,
        1 => true,
        f => return Err(Error::Checkpoint(format!("bad bias flag {f}"))),
    };
    let read_layer = |r: &mut Reader, l: usize, activation| -> Result<LayerParams> {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let weights = Matrix::from_vec(n_out, n_in, r.f64s(n_out * n_in, "weights")?)?;
        let bias = if has_bias { Some(r.f64s(n_out, "bias")?) } else { None };
        LayerParams::new(weights, bias, activation)
    };
    let mut hidden = Vec::with_capacity(depth - 1);
    let mut bases = Vec::with_capacity(depth - 1);
    for l in 0..depth - 1 {
        hidden.push(read_layer(&mut r, l, Activation::Relu)?);
        let basis = match r.u8("basis flag")? {
            0 => None,
            1 => {
                let n = r.size("basis size")?;
                let width = widths[l + 1];
                if n > width {
                    return Err(Error::Checkpoint(format!("basis of size {n} for width {width}")));
                }
                let eigenvalues = r.f64s(n, "eigenvalues")?;
                let basis = Matrix::from_vec(n, width, r.f64s(n * width, "basis")?)?;
                Some(SubspaceBasis::new(basis, eigenvalues)?)
            }
            f => return Err(Error::Checkpoint(format!("bad basis flag {f}"))),
        };
        bases.push(basis);
    }
    let output = read_layer(&mut r, depth - 1, Activation::Identity)?;
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }
    GcslModel::from_parts(hidden, bases, output, task_index)
}

pub fn save(model: &GcslModel, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<GcslModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Wraps a plain network as an idle model without bases.
pub fn from_network(net: &Network, tasks_completed: usize) -> Result<GcslModel> {
    let mut layers = net.layers.clone();
    let output = layers
        .pop()
        .ok_or_else(|| Error::Config("network has no layers".into()))?;
    let bases = vec![None; layers.len()];
    GcslModel::from_parts(layers, bases, output, tasks_completed)
}

/// Human-readable description of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSummary {
    pub task_index: usize,
    pub widths: Vec<usize>,
    pub bias: bool,
    /// Per hidden layer: basis size and eigenvalue range.
    pub bases: Vec<Option<(usize, f64, f64)>>,
}

impl CheckpointSummary {
    pub fn of(model: &GcslModel) -> Self {
        CheckpointSummary {
            task_index: model.task_index(),
            widths: model.widths(),
            bias: model.output().bias.is_some(),
            bases: model
                .hidden()
                .iter()
                .map(|h| {
                    h.basis.as_ref().map(|b| {
                        let lo = b.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = b.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        (b.n(), lo, hi)
                    })
                })
                .collect(),
        }
    }
}

impl fmt::Display for CheckpointSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: Vec<String> = self
            .bases
            .iter()
            .map(|b| b.map_or("-".to_string(), |(n, _, _)| n.to_string()))
            .collect();
        writeln!(f, "task={}, bases=[{}]", self.task_index, sizes.join(", "))?;
        writeln!(f, "widths: {:?}", self.widths)?;
        writeln!(f, "bias: {}", self.bias)?;
        for (l, b) in self.bases.iter().enumerate() {
            match b {
                Some((0, _, _)) => writeln!(f, "layer {}: empty basis", l + 1)?,
                Some((n, lo, hi)) => writeln!(f, "layer {}: n={n}, eigenvalues in [{lo:.6e}, {hi:.6e}]", l + 1)?,
                None => writeln!(f, "layer {}: no basis", l + 1)?,
            }
        }
        Ok(())
    }
}
