#![allow(dead_code)]
//! Oracles shared by the integration tests and the acceptance suite.
//!
//! Gradient checks compare central finite differences with analytic
//! gradients, holding the cluster assignments fixed.
//!
//! For logits under hard sampling the loss is not a differentiable function
//! of `θ`; what is checked is the path the estimator differentiates. With the
//! drawn `C` fixed, substituting `C_eff(θ) = C + C ⊙ (σ(θ) - σ(θ₀))` leaves
//! the forward value unchanged at `θ₀` and has derivative
//! `dL/dC ⊙ C ⊙ σ'(θ)`, which is the analytic logit gradient. In soft mode
//! `C = σ(θ)` exactly.

use blockout::blockout::{BlockoutLayer, InputClusters};
use blockout::network::{ClusterMode, Layer, Network, ParamKind};
use blockout::rng::RngStream;
use blockout::tensor::{logistic, DenseMatrix};

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Single,
    Stacked,
    DenseThenStacked,
}

pub struct Case {
    pub net: Network,
    x: DenseMatrix,
    labels: Vec<usize>,
    base_assignments: Vec<DenseMatrix>,
    base_logits: Vec<DenseMatrix>,
    pub mode: ClusterMode,
}

pub fn make_case(index: u64) -> Case {
    let mut rng = RngStream::new(1000 + index);
    let mut pick = |lo: usize, hi: usize| lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize;
    let k = [1, 2, 4][index as usize % 3];
    let shape = [Shape::Single, Shape::Stacked, Shape::DenseThenStacked][(index / 3) as usize % 3];
    let mode = if index.is_multiple_of(2) {
        ClusterMode::HardLearned
    } else {
        ClusterMode::SoftLearned
    };
    let d_in = pick(k.max(2), 16);
    let hidden = pick(k.max(2), 16);
    let classes = pick(2, 6);
    let batch = pick(1, 8);

    let mut rng = RngStream::new(2000 + index);
    let builder = Network::builder(d_in, &mut rng);
    let mut net = match shape {
        Shape::Single => builder.blockout(classes, k),
        Shape::Stacked => builder.blockout(hidden, k).relu().blockout(classes, k),
        Shape::DenseThenStacked => builder
            .dense(hidden)
            .relu()
            .blockout(hidden, k)
            .relu()
            .blockout(classes, k),
    }
    .softmax_loss()
    .unwrap();

    for i in 0..net.interfaces().len() {
        for v in net.cluster_params_mut(i).logits_mut().as_mut_slice() {
            *v = 1.5 * rng.standard_normal();
        }
    }
    for (kind, _, p) in net.params_mut() {
        if kind == ParamKind::Bias {
            for v in p.iter_mut() {
                *v = 0.1 * rng.standard_normal();
            }
        }
    }
    let base_assignments = net.draw_assignments(0, mode, &mut rng).unwrap();
    let base_logits = (0..net.interfaces().len())
        .map(|i| net.cluster_params(i).logits().clone())
        .collect();
    let x = DenseMatrix::gaussian(d_in, batch, 1.0, &mut rng);
    let labels = (0..batch)
        .map(|_| (rng.next_u64() % classes as u64) as usize)
        .collect();
    Case {
        net,
        x,
        labels,
        base_assignments,
        base_logits,
        mode,
    }
}

/// Assignments as a function of the network's current logits.
fn assignments_for(case: &Case, net: &Network) -> Vec<DenseMatrix> {
    (0..net.interfaces().len())
        .map(|i| {
            let theta = net.cluster_params(i).logits();
            match case.mode {
                ClusterMode::SoftLearned => theta.map(logistic),
                _ => {
                    let c = &case.base_assignments[i];
                    let shift = theta
                        .map(logistic)
                        .sub(&case.base_logits[i].map(logistic))
                        .unwrap();
                    c.add(&c.hadamard(&shift).unwrap()).unwrap()
                }
            }
        })
        .collect()
}

fn loss_at(case: &Case, net: &Network) -> f64 {
    net.loss_with_assignments(&case.x, &case.labels, &assignments_for(case, net))
        .unwrap()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Returns the worst relative error per parameter kind and the number of
/// checked entries.
pub fn check(case: &mut Case) -> ([f64; 3], usize) {
    let (_, _, grads) = case
        .net
        .gradients_with_assignments(&case.x, &case.labels, &case.base_assignments, case.mode)
        .unwrap();
    let kinds: Vec<ParamKind> = case.net.params().iter().map(|(k, _, _)| *k).collect();
    let sizes: Vec<usize> = case.net.params().iter().map(|(_, _, p)| p.len()).collect();
    let mut worst = [0.0f64; 3];
    let mut checked = 0;
    for (block, (&kind, &size)) in kinds.iter().zip(&sizes).enumerate() {
        for j in 0..size {
            let original = case.net.params()[block].2[j];
            let mut net = case.net.clone();
            net.params_mut()[block].2[j] = original + H;
            let plus = loss_at(case, &net);
            net.params_mut()[block].2[j] = original - H;
            let minus = loss_at(case, &net);
            let numeric = (plus - minus) / (2.0 * H);
            let err = relative_error(grads.params[block][j], numeric);
            let slot = match kind {
                ParamKind::Weight => 0,
                ParamKind::Bias => 1,
                ParamKind::Logit => 2,
            };
            worst[slot] = worst[slot].max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Rebuilds the upper layer of a stacked pair with its own copy of the shared
/// logits, so the two layers read separate interfaces.
pub fn split_shared_interface(net: &Network) -> Network {
    let mut layers = net.layers().to_vec();
    let (lower_idx, upper_idx) = {
        let b = net.blockout_interfaces();
        (b[0].0, b[1].0)
    };
    let lower_out = match &layers[lower_idx] {
        Layer::Blockout(b) => b.clusters_out().clone(),
        _ => unreachable!(),
    };
    if let Layer::Blockout(upper) = &layers[upper_idx] {
        assert!(!upper.owns_input_clusters());
        layers[upper_idx] = Layer::Blockout(
            BlockoutLayer::from_parts(
                upper.weights_tilde().clone(),
                upper.bias().to_vec(),
                upper.clusters_out().clone(),
                InputClusters::Owned(lower_out),
            )
            .unwrap(),
        );
    }
    Network::from_layers(layers).unwrap()
}

pub fn random_binary(rows: usize, cols: usize, rng: &mut RngStream) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| f64::from(rng.next_u64() & 1 == 1))
}

/// Entry (t, s) evaluated one cluster at a time.
pub fn brute_force_mask(c_out: &DenseMatrix, c_in: &DenseMatrix, k: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(c_out.rows(), c_in.rows());
    for t in 0..c_out.rows() {
        for s in 0..c_in.rows() {
            let mut shared = 0u32;
            for l in 0..k {
                if c_out[(t, l)] == 1.0 && c_in[(s, l)] == 1.0 {
                    shared += 1;
                }
            }
            m[(t, s)] = f64::from(shared) / k as f64;
        }
    }
    m
}

/// Largest `|MC mean - inference output| / standard error` over the outputs
/// of one random single-layer configuration.
pub fn monte_carlo_worst_z(config: u64, samples: u64) -> f64 {
    let mut rng = RngStream::new(400 + config);
    let d_in = 2 + (rng.next_u64() % 5) as usize;
    let d_out = 2 + (rng.next_u64() % 4) as usize;
    let k = 1 + (rng.next_u64() % 3) as usize;
    let mut layer = BlockoutLayer::init(d_in, d_out, k, &mut rng).unwrap();
    for v in layer.clusters_out_mut().logits_mut().as_mut_slice() {
        *v = rng.standard_normal();
    }
    if let InputClusters::Owned(c) = layer.clusters_in_mut() {
        for v in c.logits_mut().as_mut_slice() {
            *v = rng.standard_normal();
        }
    }
    let x = DenseMatrix::gaussian(d_in, 1, 1.0, &mut rng);
    let expected = layer.forward_infer(&x, None).unwrap();

    let mut sum = vec![0.0; d_out];
    let mut sum_sq = vec![0.0; d_out];
    for epoch in 0..samples {
        let (out, _) = layer.forward_train(&x, None, epoch, &mut rng).unwrap();
        for (i, v) in out.as_slice().iter().enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let n = samples as f64;
    (0..d_out)
        .map(|i| {
            let mean = sum[i] / n;
            let var = (sum_sq[i] / n - mean * mean) * n / (n - 1.0);
            (mean - expected.as_slice()[i]).abs() / (var / n).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Largest deviation of the inference weight scale from `p²` when every
/// probability equals `p`.
pub fn shared_probability_scale_error(p: f64, k: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed);
    let theta = (p / (1.0 - p)).ln();
    let mut layer = BlockoutLayer::init(6, 5, k, &mut rng).unwrap();
    layer
        .clusters_out_mut()
        .logits_mut()
        .as_mut_slice()
        .fill(theta);
    if let InputClusters::Owned(c) = layer.clusters_in_mut() {
        c.logits_mut().as_mut_slice().fill(theta);
    }
    let w = layer.inference_weights(None).unwrap();
    w.as_slice()
        .iter()
        .zip(layer.weights_tilde().as_slice())
        .map(|(a, b)| (a / b - p * p).abs())
        .fold(0.0, f64::max)
}
