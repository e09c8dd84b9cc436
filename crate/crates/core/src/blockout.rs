//! Blockout layers: dense layers whose weights are masked by cluster
//! membership.
//!
//! Each side of a layer (its input nodes and its output nodes) carries a
//! `d x k` matrix of cluster memberships. During training a binary assignment
//! `C` is drawn per node and cluster from `P = logistic(theta)`; the weight
//! connecting input `s` to output `t` survives with factor
//! `(1/k) * #{clusters containing both s and t}`:
//!
//! ```text
//! W = (1/k) * W_tilde ⊙ (C_out · C_inᵀ)
//! ```
//!
//! At inference the assignments are replaced by their expectations, which by
//! independence of the two sides is `(1/k) * W_tilde ⊙ (P_out · P_inᵀ)`.
//!
//! When two Blockout layers are stacked (with only an activation between
//! them), the nodes between them form one interface: the upper layer does not
//! own an input-side [`ClusterParams`] and instead reads the lower layer's
//! output-side one. See [`InputClusters`].

use crate::error::{domain, Error, Result};
use crate::rng::RngStream;
use crate::tensor::{logistic_derivative, DenseMatrix};

/// Cluster logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` after every
/// optimizer step so that `logistic'` stays away from underflow.
pub const LOGIT_CLAMP: f64 = 8.0;

/// Membership logits of one set of nodes, plus the assignment drawn for the
/// current iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    logits: DenseMatrix,
    assignment: Option<(u64, DenseMatrix)>,
}

impl ClusterParams {
    /// `nodes x k` logits at zero, i.e. every membership probability is 0.5.
    pub fn new(nodes: usize, k: usize) -> Self {
        Self::from_logits(DenseMatrix::zeros(nodes, k))
    }

    pub fn from_logits(logits: DenseMatrix) -> Self {
        Self {
            logits,
            assignment: None,
        }
    }

    pub fn nodes(&self) -> usize {
        self.logits.rows()
    }

    pub fn k(&self) -> usize {
        self.logits.cols()
    }

    pub fn logits(&self) -> &DenseMatrix {
        &self.logits
    }

    /// Direct access to the logits. Infinite values are allowed and pin the
    /// corresponding probability at exactly 0 or 1.
    pub fn logits_mut(&mut self) -> &mut DenseMatrix {
        &mut self.logits
    }

    pub fn probabilities(&self) -> DenseMatrix {
        self.logits.logistic()
    }

    /// Draws `C ~ Bernoulli(P)` for iteration `epoch`. Drawing twice for the
    /// same epoch is a logic error: the interface is shared by both adjacent
    /// layers and must see a single sample.
    pub fn draw(&mut self, epoch: u64, rng: &mut RngStream) -> Result<&DenseMatrix> {
        if matches!(self.assignment, Some((e, _)) if e == epoch) {
            return Err(Error::Logic(format!(
                "cluster assignment already drawn for iteration {epoch}"
            )));
        }
        let c = self.probabilities().bernoulli_sample(rng)?;
        self.assignment = Some((epoch, c));
        Ok(&self.assignment.as_ref().expect("just set").1)
    }

    /// Installs an externally chosen assignment for `epoch` (soft training
    /// uses `C := P`).
    pub fn set_assignment(&mut self, epoch: u64, c: DenseMatrix) -> Result<()> {
        if c.shape() != self.logits.shape() {
            return Err(Error::Shape {
                op: "set_assignment",
                left: self.logits.shape(),
                right: c.shape(),
            });
        }
        self.assignment = Some((epoch, c));
        Ok(())
    }

    /// The assignment for `epoch`; errors if none was drawn for it.
    pub fn assignment(&self, epoch: u64) -> Result<&DenseMatrix> {
        match &self.assignment {
            Some((e, c)) if *e == epoch => Ok(c),
            Some((e, _)) => Err(Error::Logic(format!(
                "stale cluster assignment: drawn for iteration {e}, requested {epoch}"
            ))),
            None => Err(Error::Logic("no cluster assignment drawn".into())),
        }
    }

    /// Clamps every logit into `[-LOGIT_CLAMP, LOGIT_CLAMP]`.
    pub fn clamp(&mut self) {
        for v in self.logits.as_mut_slice() {
            *v = v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        }
    }
}

/// Where a layer's input-side cluster memberships live.
#[derive(Debug, Clone, PartialEq)]
pub enum InputClusters {
    Owned(ClusterParams),
    /// The input nodes are the output nodes of the preceding Blockout layer,
    /// whose output-side parameters are used.
    SharedWithPrevious,
}

pub(crate) type ParamSlicesMut<'a> = (
    &'a mut [f64],
    &'a mut [f64],
    Option<&'a mut [f64]>,
    &'a mut [f64],
);

#[derive(Debug, Clone, PartialEq)]
pub struct BlockoutLayer {
    k: usize,
    weights_tilde: DenseMatrix,
    bias: Vec<f64>,
    clusters_out: ClusterParams,
    clusters_in: InputClusters,
}

/// Values cached by a training forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct LayerForwardState {
    pub epoch: u64,
    pub input: DenseMatrix,
    pub c_out: DenseMatrix,
    pub c_in: DenseMatrix,
    pub mask: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct BlockoutGrads {
    pub weights_tilde: DenseMatrix,
    pub bias: Vec<f64>,
    /// `dL/dC_out`, `d_out x k`.
    pub c_out: DenseMatrix,
    /// `dL/dC_in`, `d_in x k`.
    pub c_in: DenseMatrix,
    /// `dL/dx`, `d_in x batch`.
    pub delta_prev: DenseMatrix,
}

/// `(1/k) * C_out · C_inᵀ`, requiring binary assignments.
///
/// Entry `(t, s)` is the number of clusters holding both output node `t` and
/// input node `s`, divided by `k`.
pub fn build_mask(c_out: &DenseMatrix, c_in: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    if !c_out.is_binary() || !c_in.is_binary() {
        return Err(domain("build_mask", "cluster assignments must be 0 or 1"));
    }
    membership_mask(c_out, c_in, k)
}

/// Same product as [`build_mask`] for arbitrary real memberships; with
/// probabilities this is the expected mask.
pub fn membership_mask(m_out: &DenseMatrix, m_in: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    if k == 0 || m_out.cols() != k || m_in.cols() != k {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must equal the column count of both memberships ({} and {})",
            m_out.cols(),
            m_in.cols()
        )));
    }
    let k = k as f64;
    Ok(m_out.matmul_transposed(m_in)?.map(|v| v / k))
}

/// `dL/dP = dL/dC ⊙ C`: clusters not drawn this iteration get no gradient.
pub fn prob_gradient(grad_c: &DenseMatrix, c: &DenseMatrix) -> Result<DenseMatrix> {
    if !c.is_binary() {
        return Err(domain("prob_gradient", "assignment must be binary"));
    }
    grad_c.hadamard(c)
}

/// Chains `dL/dP` through `P = logistic(theta)`.
pub fn logit_gradient(grad_p: &DenseMatrix, logits: &DenseMatrix) -> Result<DenseMatrix> {
    grad_p.hadamard(&logits.map(logistic_derivative))
}

impl BlockoutLayer {
    /// A layer owning both of its cluster-parameter sides.
    pub fn init(d_in: usize, d_out: usize, k: usize, rng: &mut RngStream) -> Result<Self> {
        Self::init_with_input(d_in, d_out, k, true, rng)
    }

    /// A layer whose input nodes are shared with the preceding Blockout layer.
    pub fn init_shared(d_in: usize, d_out: usize, k: usize, rng: &mut RngStream) -> Result<Self> {
        Self::init_with_input(d_in, d_out, k, false, rng)
    }

    fn init_with_input(
        d_in: usize,
        d_out: usize,
        k: usize,
        owns_input: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::InvalidArgument(
                "layer dimensions must be positive".into(),
            ));
        }
        if k < 1 || k > d_in.max(d_out) {
            return Err(Error::InvalidArgument(format!(
                "cluster count k = {k} must lie in [1, {}]",
                d_in.max(d_out)
            )));
        }
        let weights_tilde = DenseMatrix::gaussian(d_out, d_in, (2.0 / d_in as f64).sqrt(), rng);
        let clusters_in = if owns_input {
            InputClusters::Owned(ClusterParams::new(d_in, k))
        } else {
            InputClusters::SharedWithPrevious
        };
        Ok(Self {
            k,
            weights_tilde,
            bias: vec![0.0; d_out],
            clusters_out: ClusterParams::new(d_out, k),
            clusters_in,
        })
    }

    /// Assembles a layer from raw parts (used by checkpoint loading).
    pub fn from_parts(
        weights_tilde: DenseMatrix,
        bias: Vec<f64>,
        clusters_out: ClusterParams,
        clusters_in: InputClusters,
    ) -> Result<Self> {
        let (d_out, d_in) = weights_tilde.shape();
        let k = clusters_out.k();
        if bias.len() != d_out || clusters_out.nodes() != d_out {
            return Err(Error::InvalidArgument(format!(
                "output side mismatch: weights have {d_out} rows, bias {}, clusters {}",
                bias.len(),
                clusters_out.nodes()
            )));
        }
        if let InputClusters::Owned(c) = &clusters_in {
            if c.nodes() != d_in || c.k() != k {
                return Err(Error::InvalidArgument(format!(
                    "input clusters are {}x{}, expected {d_in}x{k}",
                    c.nodes(),
                    c.k()
                )));
            }
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        Ok(Self {
            k,
            weights_tilde,
            bias,
            clusters_out,
            clusters_in,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_in(&self) -> usize {
        self.weights_tilde.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weights_tilde.rows()
    }

    pub fn weights_tilde(&self) -> &DenseMatrix {
        &self.weights_tilde
    }

    pub fn weights_tilde_mut(&mut self) -> &mut DenseMatrix {
        &mut self.weights_tilde
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn clusters_out(&self) -> &ClusterParams {
        &self.clusters_out
    }

    pub fn clusters_out_mut(&mut self) -> &mut ClusterParams {
        &mut self.clusters_out
    }

    pub fn clusters_in(&self) -> &InputClusters {
        &self.clusters_in
    }

    pub fn clusters_in_mut(&mut self) -> &mut InputClusters {
        &mut self.clusters_in
    }

    /// `(W_tilde, bias, theta_in if owned, theta_out)` as disjoint slices.
    pub(crate) fn param_slices_mut(&mut self) -> ParamSlicesMut<'_> {
        let theta_in = match &mut self.clusters_in {
            InputClusters::Owned(c) => Some(c.logits.as_mut_slice()),
            InputClusters::SharedWithPrevious => None,
        };
        (
            self.weights_tilde.as_mut_slice(),
            &mut self.bias,
            theta_in,
            self.clusters_out.logits.as_mut_slice(),
        )
    }

    pub fn owns_input_clusters(&self) -> bool {
        matches!(self.clusters_in, InputClusters::Owned(_))
    }

    fn owned_input(&self, shared: Option<&DenseMatrix>) -> Result<()> {
        match (&self.clusters_in, shared) {
            (InputClusters::Owned(_), None) | (InputClusters::SharedWithPrevious, Some(_)) => {
                Ok(())
            }
            (InputClusters::Owned(_), Some(_)) => Err(Error::Logic(
                "layer owns its input clusters; no shared input may be passed".into(),
            )),
            (InputClusters::SharedWithPrevious, None) => Err(Error::Logic(
                "layer shares its input clusters but none were supplied".into(),
            )),
        }
    }

    /// Training forward pass with hard sampling.
    ///
    /// Draws `C_out` (and `C_in` when owned) for `epoch`; a shared layer takes
    /// the lower layer's already drawn output assignment as `shared_in`.
    pub fn forward_train(
        &mut self,
        x: &DenseMatrix,
        shared_in: Option<&DenseMatrix>,
        epoch: u64,
        rng: &mut RngStream,
    ) -> Result<(DenseMatrix, LayerForwardState)> {
        self.owned_input(shared_in)?;
        let c_out = self.clusters_out.draw(epoch, rng)?.clone();
        let c_in = match (&mut self.clusters_in, shared_in) {
            (InputClusters::Owned(c), _) => c.draw(epoch, rng)?.clone(),
            (InputClusters::SharedWithPrevious, Some(c)) => c.clone(),
            (InputClusters::SharedWithPrevious, None) => unreachable!("checked above"),
        };
        self.forward_with_assignments(x, c_out, c_in, epoch)
    }

    /// Forward pass with explicit (not necessarily binary) assignments.
    pub fn forward_with_assignments(
        &self,
        x: &DenseMatrix,
        c_out: DenseMatrix,
        c_in: DenseMatrix,
        epoch: u64,
    ) -> Result<(DenseMatrix, LayerForwardState)> {
        if c_out.shape() != (self.d_out(), self.k) || c_in.shape() != (self.d_in(), self.k) {
            return Err(Error::Shape {
                op: "blockout assignments",
                left: c_out.shape(),
                right: c_in.shape(),
            });
        }
        let mask = membership_mask(&c_out, &c_in, self.k)?;
        let weights = self.weights_tilde.hadamard(&mask)?;
        let mut out = weights.matmul(x)?;
        out.add_row_bias(&self.bias)?;
        let state = LayerForwardState {
            epoch,
            input: x.clone(),
            c_out,
            c_in,
            mask,
        };
        Ok((out, state))
    }

    /// `(1/k) * W_tilde ⊙ (P_out · P_inᵀ)`.
    pub fn inference_weights(&self, shared_in: Option<&DenseMatrix>) -> Result<DenseMatrix> {
        self.owned_input(shared_in)?;
        let p_out = self.clusters_out.probabilities();
        let p_in = match (&self.clusters_in, shared_in) {
            (InputClusters::Owned(c), _) => c.probabilities(),
            (_, Some(p)) => p.clone(),
            _ => unreachable!("checked above"),
        };
        self.weights_tilde
            .hadamard(&membership_mask(&p_out, &p_in, self.k)?)
    }

    /// Deterministic inference pass using the expected mask. A shared layer
    /// takes the lower layer's output probabilities as `shared_in`.
    pub fn forward_infer(
        &self,
        x: &DenseMatrix,
        shared_in: Option<&DenseMatrix>,
    ) -> Result<DenseMatrix> {
        let mut out = self.inference_weights(shared_in)?.matmul(x)?;
        out.add_row_bias(&self.bias)?;
        Ok(out)
    }

    /// Gradients of the loss given `delta = dL/d(output)` for the batch.
    ///
    /// The loss is already a batch mean, so `delta` carries the `1/B` factor
    /// and the weight gradient is the plain sum `delta · xᵀ`.
    pub fn backward(&self, delta: &DenseMatrix, state: LayerForwardState) -> Result<BlockoutGrads> {
        if delta.rows() != self.d_out() || delta.cols() != state.input.cols() {
            return Err(Error::Shape {
                op: "blockout backward",
                left: delta.shape(),
                right: (self.d_out(), state.input.cols()),
            });
        }
        let inv_k = 1.0 / self.k as f64;
        let grad_w = delta.matmul_transposed(&state.input)?;
        let weights_tilde = grad_w.hadamard(&state.mask)?;
        let weighted = self.weights_tilde.hadamard(&grad_w)?;
        let c_out = weighted.matmul(&state.c_in)?.scale(inv_k);
        let c_in = weighted.transpose().matmul(&state.c_out)?.scale(inv_k);
        let weights = self.weights_tilde.hadamard(&state.mask)?;
        let delta_prev = weights.transpose().matmul(delta)?;
        Ok(BlockoutGrads {
            weights_tilde,
            bias: delta.row_sums(),
            c_out,
            c_in,
            delta_prev,
        })
    }
}
