//! Layer stacks, the softmax cross-entropy loss and the forward/backward
//! passes through a whole network.
//!
//! Activations are stored one example per column (`features x batch`).
//!
//! Blockout layers are wired into *cluster interfaces*: every set of nodes
//! that carries cluster memberships gets one interface id. A Blockout layer
//! directly above another Blockout layer (only activations between them)
//! reuses the lower layer's output interface for its input, so the two layers
//! see the same sampled assignment and both contribute to its gradient.

use serde::{Deserialize, Serialize};

use crate::blockout::{
    logit_gradient, prob_gradient, BlockoutLayer, ClusterParams, InputClusters, LayerForwardState,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::DenseMatrix;

/// Fully connected layer without masking.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    /// He-style Gaussian weights with standard deviation `sqrt(2 / d_in)`.
    pub fn init(d_in: usize, d_out: usize, rng: &mut RngStream) -> Self {
        Self {
            weights: DenseMatrix::gaussian(d_out, d_in, (2.0 / d_in as f64).sqrt(), rng),
            bias: vec![0.0; d_out],
        }
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = self.weights.matmul(x)?;
        out.add_row_bias(&self.bias)?;
        Ok(out)
    }
}

/// Fixed per-feature affine map `(x - mean) / std`; not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardize {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardize {
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.mean.len() {
            return Err(Error::Shape {
                op: "standardize",
                left: x.shape(),
                right: (self.mean.len(), 1),
            });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            let (m, s) = (self.mean[r], self.std[r]);
            for v in out.row_mut(r) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Standardize(Standardize),
    Dense(DenseLayer),
    Blockout(BlockoutLayer),
    Relu { width: usize },
    SoftmaxLoss { classes: usize },
}

impl Layer {
    pub fn d_in(&self) -> usize {
        match self {
            Layer::Standardize(s) => s.mean.len(),
            Layer::Dense(d) => d.weights.cols(),
            Layer::Blockout(b) => b.d_in(),
            Layer::Relu { width } => *width,
            Layer::SoftmaxLoss { classes } => *classes,
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Layer::Standardize(s) => s.mean.len(),
            Layer::Dense(d) => d.weights.rows(),
            Layer::Blockout(b) => b.d_out(),
            Layer::Relu { width } => *width,
            Layer::SoftmaxLoss { classes } => *classes,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Layer::Standardize(_) => "standardize",
            Layer::Dense(_) => "dense",
            Layer::Blockout(_) => "blockout",
            Layer::Relu { .. } => "relu",
            Layer::SoftmaxLoss { .. } => "softmax-loss",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Infer,
}

/// How cluster assignments are produced during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMode {
    /// No sampling: `C := P` in training as well as inference; the logits
    /// receive the exact gradient of that deterministic relaxation.
    SoftLearned,
    /// Sample `C ~ Bernoulli(P)` with the logits frozen.
    HardFixed,
    /// Sample `C ~ Bernoulli(P)` and learn the logits.
    HardLearned,
}

impl ClusterMode {
    pub fn samples(self) -> bool {
        !matches!(self, ClusterMode::SoftLearned)
    }

    pub fn learns_clusters(self) -> bool {
        !matches!(self, ClusterMode::HardFixed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Logit,
}

/// Where a cluster interface's parameters live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterfaceOwner {
    pub layer: usize,
    /// `true` for the owning layer's input side.
    pub input_side: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockoutWiring {
    layer: usize,
    in_iface: usize,
    out_iface: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    mode: Mode,
    interfaces: Vec<InterfaceOwner>,
    wiring: Vec<BlockoutWiring>,
}

enum LayerCache {
    None,
    Input(DenseMatrix),
    Blockout(LayerForwardState),
    Relu(DenseMatrix),
}

/// Everything a training forward pass leaves behind for `backward`.
pub struct ForwardTrace {
    epoch: u64,
    caches: Vec<LayerCache>,
}

/// Gradients of the loss for every trainable parameter, in the order of
/// [`Network::params`], plus `dL/dC` for every cluster interface.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Vec<f64>>,
    pub assignments: Vec<DenseMatrix>,
}

pub fn softmax_columns(logits: &DenseMatrix) -> DenseMatrix {
    let mut probs = logits.clone();
    for c in 0..logits.cols() {
        let col = logits.column(c);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (r, e) in exps.iter().enumerate() {
            probs[(r, c)] = e / total;
        }
    }
    probs
}

/// Mean negative log-likelihood over the batch and its gradient
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    let (classes, batch) = logits.shape();
    if labels.len() != batch {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = DenseMatrix::zeros(classes, batch);
    let mut loss = 0.0;
    for (c, &label) in labels.iter().enumerate() {
        let col = logits.column(c);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_total = col.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_total - col[label];
        for (r, v) in col.iter().enumerate() {
            grad[(r, c)] = (v - log_total).exp();
        }
        grad[(label, c)] -= 1.0;
    }
    let inv_batch = 1.0 / batch as f64;
    Ok((loss * inv_batch, grad.scale(inv_batch)))
}

/// Builder for a layer stack starting from an input width.
#[derive(Debug)]
pub struct NetworkBuilder<'a> {
    width: usize,
    layers: Vec<Layer>,
    rng: &'a mut RngStream,
    error: Option<Error>,
}

impl<'a> NetworkBuilder<'a> {
    pub fn standardize(mut self, mean: Vec<f64>, std: Vec<f64>) -> Self {
        if mean.len() != self.width || std.len() != self.width {
            self.fail(format!(
                "standardize needs {} means and stds, got {} and {}",
                self.width,
                mean.len(),
                std.len()
            ));
        } else {
            self.layers
                .push(Layer::Standardize(Standardize { mean, std }));
        }
        self
    }

    pub fn dense(mut self, d_out: usize) -> Self {
        let layer = DenseLayer::init(self.width, d_out, self.rng);
        self.layers.push(Layer::Dense(layer));
        self.width = d_out;
        self
    }

    /// Adds a Blockout layer. If the previous linear layer is also Blockout
    /// (with the same `k`), the input interface is shared with it.
    pub fn blockout(mut self, d_out: usize, k: usize) -> Self {
        let shares = match self
            .layers
            .iter()
            .rev()
            .find(|l| !matches!(l, Layer::Relu { .. }))
        {
            Some(Layer::Blockout(prev)) => {
                if prev.k() != k {
                    self.fail(format!(
                        "adjacent blockout layers must use the same k ({} vs {k})",
                        prev.k()
                    ));
                    return self;
                }
                true
            }
            _ => false,
        };
        let layer = if shares {
            BlockoutLayer::init_shared(self.width, d_out, k, self.rng)
        } else {
            BlockoutLayer::init(self.width, d_out, k, self.rng)
        };
        match layer {
            Ok(l) => {
                self.layers.push(Layer::Blockout(l));
                self.width = d_out;
            }
            Err(e) => self.error = self.error.take().or(Some(e)),
        }
        self
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu { width: self.width });
        self
    }

    pub fn softmax_loss(mut self) -> Result<Network> {
        if let Some(e) = self.error {
            return Err(e);
        }
        self.layers.push(Layer::SoftmaxLoss {
            classes: self.width,
        });
        Network::from_layers(self.layers)
    }

    fn fail(&mut self, msg: String) {
        if self.error.is_none() {
            self.error = Some(Error::InvalidArgument(msg));
        }
    }
}

impl Network {
    pub fn builder(input_dim: usize, rng: &mut RngStream) -> NetworkBuilder<'_> {
        NetworkBuilder {
            width: input_dim,
            layers: Vec::new(),
            rng,
            error: None,
        }
    }

    /// `input -> hidden... -> classes` with ReLU between linear layers. The
    /// last `blockout_layers` linear layers are Blockout layers with `k`
    /// clusters, the rest are dense.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        blockout_layers: usize,
        k: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let widths: Vec<usize> = hidden.iter().copied().chain([classes]).collect();
        if blockout_layers > widths.len() {
            return Err(Error::InvalidArgument(format!(
                "{blockout_layers} blockout layers requested but the network has {} linear layers",
                widths.len()
            )));
        }
        let first_blockout = widths.len() - blockout_layers;
        let mut b = Network::builder(input_dim, rng);
        for (i, &w) in widths.iter().enumerate() {
            if i > 0 {
                b = b.relu();
            }
            b = if i >= first_blockout {
                b.blockout(w, k)
            } else {
                b.dense(w)
            };
        }
        b.softmax_loss()
    }

    /// Validates and wires a layer list. Networks start in [`Mode::Train`].
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        match layers.last() {
            Some(Layer::SoftmaxLoss { .. }) => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "network must end in a softmax-loss layer".into(),
                ))
            }
        }
        let terminal = layers
            .iter()
            .filter(|l| matches!(l, Layer::SoftmaxLoss { .. }))
            .count();
        if terminal != 1 {
            return Err(Error::InvalidArgument(format!(
                "exactly one softmax-loss layer allowed, found {terminal}"
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} ({}) outputs {} but layer {} ({}) expects {}",
                    pair[0].name(),
                    pair[0].d_out(),
                    i + 1,
                    pair[1].name(),
                    pair[1].d_in()
                )));
            }
        }

        let mut interfaces = Vec::new();
        let mut wiring = Vec::new();
        let mut last_linear: Option<(usize, bool)> = None;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Blockout(b) => {
                    let in_iface = match b.clusters_in() {
                        InputClusters::Owned(_) => {
                            interfaces.push(InterfaceOwner {
                                layer: i,
                                input_side: true,
                            });
                            interfaces.len() - 1
                        }
                        InputClusters::SharedWithPrevious => {
                            let prev: Option<&BlockoutWiring> = match last_linear {
                                Some((_, true)) => wiring.last(),
                                _ => None,
                            };
                            let prev = prev.ok_or_else(|| {
                                Error::InvalidArgument(format!(
                                    "blockout layer {i} shares its input clusters but does not follow a blockout layer"
                                ))
                            })?;
                            let Layer::Blockout(p) = &layers[prev.layer] else {
                                unreachable!()
                            };
                            if p.k() != b.k() {
                                return Err(Error::InvalidArgument(format!(
                                    "blockout layers {} and {i} share nodes but use k = {} and {}",
                                    prev.layer,
                                    p.k(),
                                    b.k()
                                )));
                            }
                            prev.out_iface
                        }
                    };
                    interfaces.push(InterfaceOwner {
                        layer: i,
                        input_side: false,
                    });
                    wiring.push(BlockoutWiring {
                        layer: i,
                        in_iface,
                        out_iface: interfaces.len() - 1,
                    });
                    last_linear = Some((i, true));
                }
                Layer::Dense(_) | Layer::Standardize(_) => last_linear = Some((i, false)),
                Layer::Relu { .. } | Layer::SoftmaxLoss { .. } => {}
            }
        }
        Ok(Self {
            layers,
            mode: Mode::Train,
            interfaces,
            wiring,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, Layer::d_out)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Owners of every cluster interface, in interface-id order.
    pub fn interfaces(&self) -> &[InterfaceOwner] {
        &self.interfaces
    }

    pub fn has_blockout(&self) -> bool {
        !self.wiring.is_empty()
    }

    /// Interface ids `(input, output)` of each Blockout layer, keyed by the
    /// layer index.
    pub fn blockout_interfaces(&self) -> Vec<(usize, usize, usize)> {
        self.wiring
            .iter()
            .map(|w| (w.layer, w.in_iface, w.out_iface))
            .collect()
    }

    pub fn cluster_params(&self, iface: usize) -> &ClusterParams {
        let owner = self.interfaces[iface];
        let Layer::Blockout(b) = &self.layers[owner.layer] else {
            unreachable!("interface owners are blockout layers")
        };
        if owner.input_side {
            match b.clusters_in() {
                InputClusters::Owned(c) => c,
                InputClusters::SharedWithPrevious => unreachable!(),
            }
        } else {
            b.clusters_out()
        }
    }

    pub fn cluster_params_mut(&mut self, iface: usize) -> &mut ClusterParams {
        let owner = self.interfaces[iface];
        let Layer::Blockout(b) = &mut self.layers[owner.layer] else {
            unreachable!("interface owners are blockout layers")
        };
        if owner.input_side {
            match b.clusters_in_mut() {
                InputClusters::Owned(c) => c,
                InputClusters::SharedWithPrevious => unreachable!(),
            }
        } else {
            b.clusters_out_mut()
        }
    }

    /// `P` of every interface, in interface-id order.
    pub fn probabilities(&self) -> Vec<DenseMatrix> {
        (0..self.interfaces.len())
            .map(|i| self.cluster_params(i).probabilities())
            .collect()
    }

    /// Trainable parameter blocks in canonical order: per layer, dense
    /// `W, b`; blockout `W_tilde, b, theta_in (if owned), theta_out`.
    pub fn params(&self) -> Vec<(ParamKind, usize, &[f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    out.push((ParamKind::Weight, i, d.weights.as_slice()));
                    out.push((ParamKind::Bias, i, d.bias.as_slice()));
                }
                Layer::Blockout(b) => {
                    out.push((ParamKind::Weight, i, b.weights_tilde().as_slice()));
                    out.push((ParamKind::Bias, i, b.bias()));
                    if let InputClusters::Owned(c) = b.clusters_in() {
                        out.push((ParamKind::Logit, i, c.logits().as_slice()));
                    }
                    out.push((ParamKind::Logit, i, b.clusters_out().logits().as_slice()));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable counterpart of [`Network::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(ParamKind, usize, &mut [f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    out.push((ParamKind::Weight, i, d.weights.as_mut_slice()));
                    out.push((ParamKind::Bias, i, d.bias.as_mut_slice()));
                }
                Layer::Blockout(b) => {
                    let (weights, bias, theta_in, theta_out) = b.param_slices_mut();
                    out.push((ParamKind::Weight, i, weights));
                    out.push((ParamKind::Bias, i, bias));
                    if let Some(t) = theta_in {
                        out.push((ParamKind::Logit, i, t));
                    }
                    out.push((ParamKind::Logit, i, theta_out));
                }
                _ => {}
            }
        }
        out
    }

    /// Produces this iteration's assignment for every interface: a Bernoulli
    /// draw in hard modes, `P` itself in soft mode. Each interface is drawn
    /// exactly once, however many layers read it.
    pub fn draw_assignments(
        &mut self,
        epoch: u64,
        cluster_mode: ClusterMode,
        rng: &mut RngStream,
    ) -> Result<Vec<DenseMatrix>> {
        let mut out = Vec::with_capacity(self.interfaces.len());
        for i in 0..self.interfaces.len() {
            let params = self.cluster_params_mut(i);
            let c = if cluster_mode.samples() {
                params.draw(epoch, rng)?.clone()
            } else {
                let p = params.probabilities();
                params.set_assignment(epoch, p.clone())?;
                p
            };
            out.push(c);
        }
        Ok(out)
    }

    /// Training-mode forward pass with the given per-interface assignments.
    /// Returns the logits (input of the softmax-loss layer).
    pub fn forward_train(
        &self,
        x: &DenseMatrix,
        assignments: &[DenseMatrix],
        epoch: u64,
    ) -> Result<(DenseMatrix, ForwardTrace)> {
        if assignments.len() != self.interfaces.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} cluster assignments, got {}",
                self.interfaces.len(),
                assignments.len()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        let mut wiring = self.wiring.iter();
        for layer in &self.layers {
            match layer {
                Layer::Standardize(s) => {
                    act = s.forward(&act)?;
                    caches.push(LayerCache::None);
                }
                Layer::Dense(d) => {
                    let out = d.forward(&act)?;
                    caches.push(LayerCache::Input(std::mem::replace(&mut act, out)));
                }
                Layer::Blockout(b) => {
                    let w = wiring.next().expect("wiring covers every blockout layer");
                    let (out, state) = b.forward_with_assignments(
                        &act,
                        assignments[w.out_iface].clone(),
                        assignments[w.in_iface].clone(),
                        epoch,
                    )?;
                    act = out;
                    caches.push(LayerCache::Blockout(state));
                }
                Layer::Relu { .. } => {
                    act = act.map(|v| v.max(0.0));
                    caches.push(LayerCache::Relu(act.clone()));
                }
                Layer::SoftmaxLoss { .. } => caches.push(LayerCache::None),
            }
        }
        Ok((act, ForwardTrace { epoch, caches }))
    }

    /// Back-propagates `grad_logits` through the trace. Logit gradients are
    /// left at zero; `assignments` holds `dL/dC` summed over every layer that
    /// reads each interface.
    pub fn backward(&self, trace: ForwardTrace, grad_logits: &DenseMatrix) -> Result<Gradients> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::Logic("forward trace does not match network".into()));
        }
        let mut assignments: Vec<DenseMatrix> = (0..self.interfaces.len())
            .map(|i| {
                let p = self.cluster_params(i);
                DenseMatrix::zeros(p.nodes(), p.k())
            })
            .collect();
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        let mut delta = grad_logits.clone();
        let mut wiring = self.wiring.iter().rev();
        for (i, (layer, cache)) in self.layers.iter().zip(trace.caches).enumerate().rev() {
            match (layer, cache) {
                (Layer::SoftmaxLoss { .. }, _) | (Layer::Standardize(_), _) => {}
                (Layer::Relu { .. }, LayerCache::Relu(out)) => {
                    for (d, o) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                        if *o <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                (Layer::Dense(d), LayerCache::Input(input)) => {
                    let gw = delta.matmul_transposed(&input)?;
                    per_layer[i] = vec![gw.into_vec(), delta.row_sums()];
                    delta = d.weights.transpose().matmul(&delta)?;
                }
                (Layer::Blockout(b), LayerCache::Blockout(state)) => {
                    if state.epoch != trace.epoch {
                        return Err(Error::Logic(format!("stale forward state for layer {i}")));
                    }
                    let w = wiring.next().expect("wiring covers every blockout layer");
                    let g = b.backward(&delta, state)?;
                    assignments[w.out_iface].add_assign(&g.c_out)?;
                    assignments[w.in_iface].add_assign(&g.c_in)?;
                    let mut blocks = vec![g.weights_tilde.into_vec(), g.bias];
                    if b.owns_input_clusters() {
                        blocks.push(vec![0.0; b.d_in() * b.k()]);
                    }
                    blocks.push(vec![0.0; b.d_out() * b.k()]);
                    per_layer[i] = blocks;
                    delta = g.delta_prev;
                }
                (l, _) => {
                    return Err(Error::Logic(format!(
                        "missing forward state for layer {i} ({})",
                        l.name()
                    )))
                }
            }
        }
        Ok(Gradients {
            params: per_layer.into_iter().flatten().collect(),
            assignments,
        })
    }

    /// Fills the logit gradients from `dL/dC`.
    ///
    /// Hard modes mask by the sampled assignment (`dL/dP = dL/dC ⊙ C`); soft
    /// mode uses `dL/dP = dL/dC` since `C = P` there. Both are then chained
    /// through the logistic.
    pub fn chain_logit_gradients(
        &self,
        grads: &mut Gradients,
        assignments: &[DenseMatrix],
        cluster_mode: ClusterMode,
    ) -> Result<()> {
        let mut iface_to_block = vec![0usize; self.interfaces.len()];
        let mut block = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(_) => block += 2,
                Layer::Blockout(b) => {
                    block += 2;
                    let w = self
                        .wiring
                        .iter()
                        .find(|w| w.layer == i)
                        .expect("wired blockout layer");
                    if b.owns_input_clusters() {
                        iface_to_block[w.in_iface] = block;
                        block += 1;
                    }
                    iface_to_block[w.out_iface] = block;
                    block += 1;
                }
                _ => {}
            }
        }
        for (iface, grad_c) in grads.assignments.iter().enumerate() {
            let grad_p = if cluster_mode.samples() {
                prob_gradient(grad_c, &assignments[iface])?
            } else {
                grad_c.clone()
            };
            let grad_theta = logit_gradient(&grad_p, self.cluster_params(iface).logits())?;
            grads.params[iface_to_block[iface]] = grad_theta.into_vec();
        }
        Ok(())
    }

    /// Loss with every interface's assignment fixed to the given (possibly
    /// real-valued) matrices.
    pub fn loss_with_assignments(
        &self,
        x: &DenseMatrix,
        labels: &[usize],
        assignments: &[DenseMatrix],
    ) -> Result<f64> {
        let (logits, _) = self.forward_train(x, assignments, 0)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    /// Loss, logits and all parameter gradients for fixed assignments.
    pub fn gradients_with_assignments(
        &self,
        x: &DenseMatrix,
        labels: &[usize],
        assignments: &[DenseMatrix],
        cluster_mode: ClusterMode,
    ) -> Result<(f64, DenseMatrix, Gradients)> {
        let (logits, trace) = self.forward_train(x, assignments, 0)?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
        let mut grads = self.backward(trace, &grad_logits)?;
        self.chain_logit_gradients(&mut grads, assignments, cluster_mode)?;
        Ok((loss, logits, grads))
    }

    /// Deterministic inference pass; Blockout layers use expected masks.
    pub fn forward_infer(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut act = x.clone();
        let mut last_p_out: Option<DenseMatrix> = None;
        for layer in &self.layers {
            act = match layer {
                Layer::Standardize(s) => s.forward(&act)?,
                Layer::Dense(d) => d.forward(&act)?,
                Layer::Blockout(b) => {
                    let shared = match b.clusters_in() {
                        InputClusters::Owned(_) => None,
                        InputClusters::SharedWithPrevious => last_p_out.as_ref(),
                    };
                    let out = b.forward_infer(&act, shared)?;
                    last_p_out = Some(b.clusters_out().probabilities());
                    out
                }
                Layer::Relu { .. } => act.map(|v| v.max(0.0)),
                Layer::SoftmaxLoss { .. } => act,
            };
        }
        Ok(act)
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        Ok(self.forward_infer(x)?.argmax_per_col())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = DenseMatrix::filled(5, 3, 0.7);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_true_class_has_vanishing_loss() {
        let mut logits = DenseMatrix::zeros(3, 1);
        logits[(1, 0)] = 60.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(31);
        let logits = DenseMatrix::gaussian(4, 3, 1.5, &mut rng);
        let labels = [2, 0, 3];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = logits.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (softmax_cross_entropy(&plus, &labels).unwrap().0
                - softmax_cross_entropy(&minus, &labels).unwrap().0)
                / (2.0 * h);
            let g = grad.as_slice()[i];
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3), "{fd} vs {g}");
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = DenseMatrix::zeros(3, 1);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn builder_wires_shared_interfaces() {
        let mut rng = RngStream::new(1);
        let net = Network::mlp(6, &[8, 8], 4, 2, 2, &mut rng).unwrap();
        // dense, relu, blockout(owned in), relu, blockout(shared), softmax
        assert_eq!(net.interfaces().len(), 3);
        assert_eq!(net.blockout_interfaces(), vec![(2, 0, 1), (4, 1, 2)]);
        let Layer::Blockout(upper) = &net.layers()[4] else {
            panic!()
        };
        assert!(!upper.owns_input_clusters());
    }

    #[test]
    fn chain_mismatch_is_rejected() {
        let mut rng = RngStream::new(1);
        let layers = vec![
            Layer::Dense(DenseLayer::init(3, 4, &mut rng)),
            Layer::Relu { width: 5 },
            Layer::SoftmaxLoss { classes: 5 },
        ];
        assert!(Network::from_layers(layers).is_err());
        let layers = vec![Layer::Dense(DenseLayer::init(3, 4, &mut rng))];
        assert!(Network::from_layers(layers).is_err());
    }

    #[test]
    fn adjacent_blockout_layers_need_equal_k() {
        let mut rng = RngStream::new(1);
        let err = Network::builder(4, &mut rng)
            .blockout(6, 2)
            .relu()
            .blockout(3, 3)
            .softmax_loss();
        assert!(err.is_err());
    }

    #[test]
    fn params_and_params_mut_agree() {
        let mut rng = RngStream::new(2);
        let mut net = Network::mlp(5, &[6, 6], 3, 2, 2, &mut rng).unwrap();
        let shapes: Vec<(ParamKind, usize, usize)> = net
            .params()
            .iter()
            .map(|(k, l, s)| (*k, *l, s.len()))
            .collect();
        let shapes_mut: Vec<(ParamKind, usize, usize)> = net
            .params_mut()
            .iter()
            .map(|(k, l, s)| (*k, *l, s.len()))
            .collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(shapes.iter().filter(|s| s.0 == ParamKind::Logit).count(), 3);
    }

    #[test]
    fn backward_without_matching_trace_fails() {
        let mut rng = RngStream::new(2);
        let net = Network::mlp(3, &[4], 2, 1, 1, &mut rng).unwrap();
        let other = Network::mlp(3, &[4, 4], 2, 0, 1, &mut rng).unwrap();
        let x = DenseMatrix::ones(3, 2);
        let (_, trace) = other.forward_train(&x, &[], 0).unwrap();
        assert!(net.backward(trace, &DenseMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn soft_mode_draws_probabilities() {
        let mut rng = RngStream::new(2);
        let mut net = Network::mlp(3, &[4], 2, 2, 2, &mut rng).unwrap();
        let a = net
            .draw_assignments(0, ClusterMode::SoftLearned, &mut rng)
            .unwrap();
        assert!(a.iter().all(|m| m.as_slice().iter().all(|&v| v == 0.5)));
        let a = net
            .draw_assignments(1, ClusterMode::HardLearned, &mut rng)
            .unwrap();
        assert!(a.iter().all(DenseMatrix::is_binary));
    }
}
