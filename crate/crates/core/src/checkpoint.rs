//! Binary network checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "BLKO" | version u16 | layer count u16
//! per layer:
//!   tag u8 | d_in u32 | d_out u32 | k u32
//!   dense (0):       W (d_out*d_in f64) | bias (d_out f64)
//!   blockout (1):    shared_in u8 | W_tilde | bias | [theta_in (d_in*k)] | theta_out (d_out*k)
//!   relu (2), softmax-loss (3): no payload
//!   standardize (4): mean (d_in f64) | std (d_in f64)
//! ```
//!
//! `theta_in` is present only when `shared_in == 0`. Floats are stored raw, so
//! a save/load round trip is bit-exact. Optimizer state is not stored.

use std::path::Path;

use crate::blockout::{BlockoutLayer, ClusterParams, InputClusters};
use crate::error::{Error, Result};
use crate::network::{DenseLayer, Layer, Mode, Network, Standardize};
use crate::tensor::DenseMatrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BLKO";
pub const CHECKPOINT_VERSION: u16 = 1;

const TAG_DENSE: u8 = 0;
const TAG_BLOCKOUT: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_SOFTMAX: u8 = 3;
const TAG_STANDARDIZE: u8 = 4;

pub fn encode_checkpoint(net: &Network) -> Result<Vec<u8>> {
    let count = u16::try_from(net.layers().len())
        .map_err(|_| Error::InvalidArgument("too many layers for a checkpoint".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for layer in net.layers() {
        let (tag, k) = match layer {
            Layer::Dense(_) => (TAG_DENSE, 0),
            Layer::Blockout(b) => (TAG_BLOCKOUT, b.k()),
            Layer::Relu { .. } => (TAG_RELU, 0),
            Layer::SoftmaxLoss { .. } => (TAG_SOFTMAX, 0),
            Layer::Standardize(_) => (TAG_STANDARDIZE, 0),
        };
        out.push(tag);
        for dim in [layer.d_in(), layer.d_out(), k] {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        match layer {
            Layer::Dense(d) => {
                put_floats(&mut out, d.weights.as_slice());
                put_floats(&mut out, &d.bias);
            }
            Layer::Blockout(b) => {
                out.push(u8::from(!b.owns_input_clusters()));
                put_floats(&mut out, b.weights_tilde().as_slice());
                put_floats(&mut out, b.bias());
                if let InputClusters::Owned(c) = b.clusters_in() {
                    put_floats(&mut out, c.logits().as_slice());
                }
                put_floats(&mut out, b.clusters_out().logits().as_slice());
            }
            Layer::Standardize(s) => {
                put_floats(&mut out, &s.mean);
                put_floats(&mut out, &s.std);
            }
            Layer::Relu { .. } | Layer::SoftmaxLoss { .. } => {}
        }
    }
    Ok(out)
}

fn put_floats(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    decode_checkpoint(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(self.err(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4")) as usize)
    }

    fn floats(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let n_bytes = count
            .checked_mul(8)
            .ok_or_else(|| self.err(format!("{what} is too large")))?;
        let raw = self.take(n_bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<DenseMatrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.err(format!("{what} is too large")))?;
        DenseMatrix::from_vec(rows, cols, self.floats(n, what)?)
    }
}

/// Parses a checkpoint. The result is in [`Mode::Infer`]; malformed input
/// yields [`Error::Parse`] with the byte offset of the problem.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected \"BLKO\""));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 2;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u16("layer count")?;
    let mut layers = Vec::with_capacity(count as usize);
    for i in 0..count {
        let layer_start = r.pos;
        let tag = r.u8("layer tag")?;
        let d_in = r.u32("d_in")?;
        let d_out = r.u32("d_out")?;
        let k = r.u32("k")?;
        let layer = match tag {
            TAG_DENSE => {
                let weights = r.matrix(d_out, d_in, "dense weights")?;
                let bias = r.floats(d_out, "dense bias")?;
                Layer::Dense(DenseLayer { weights, bias })
            }
            TAG_BLOCKOUT => {
                let shared = match r.u8("shared flag")? {
                    0 => false,
                    1 => true,
                    other => {
                        r.pos -= 1;
                        return Err(r.err(format!("invalid shared flag {other}")));
                    }
                };
                if k == 0 {
                    r.pos = layer_start;
                    return Err(r.err(format!("layer {i}: blockout layer with k = 0")));
                }
                let weights = r.matrix(d_out, d_in, "blockout weights")?;
                let bias = r.floats(d_out, "blockout bias")?;
                let clusters_in = if shared {
                    InputClusters::SharedWithPrevious
                } else {
                    InputClusters::Owned(ClusterParams::from_logits(r.matrix(
                        d_in,
                        k,
                        "input logits",
                    )?))
                };
                let clusters_out =
                    ClusterParams::from_logits(r.matrix(d_out, k, "output logits")?);
                Layer::Blockout(BlockoutLayer::from_parts(
                    weights,
                    bias,
                    clusters_out,
                    clusters_in,
                )?)
            }
            TAG_RELU | TAG_SOFTMAX if d_in != d_out => {
                r.pos = layer_start;
                return Err(r.err(format!(
                    "layer {i}: activation with d_in {d_in} != d_out {d_out}"
                )));
            }
            TAG_RELU => Layer::Relu { width: d_in },
            TAG_SOFTMAX => Layer::SoftmaxLoss { classes: d_in },
            TAG_STANDARDIZE => {
                let mean = r.floats(d_in, "standardize mean")?;
                let std = r.floats(d_in, "standardize std")?;
                Layer::Standardize(Standardize { mean, std })
            }
            other => {
                r.pos = layer_start;
                return Err(r.err(format!("layer {i}: unknown layer tag {other}")));
            }
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut net = Network::from_layers(layers).map_err(|e| Error::Parse {
        offset: bytes.len() as u64,
        detail: format!("inconsistent network: {e}"),
    })?;
    net.set_mode(Mode::Infer);
    Ok(net)
}
