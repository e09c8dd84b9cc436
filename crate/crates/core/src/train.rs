//! Momentum SGD over sampled architectures, plus evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::network::{softmax_cross_entropy, ClusterMode, Gradients, Mode, Network, ParamKind};
use crate::rng::RngStream;
use crate::tensor::DenseMatrix;

/// Stream ids forked from the run seed.
pub const SAMPLING_STREAM: u64 = 1;
pub const BATCH_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative step decay applied every `decay_interval` iterations.
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Step-size multiplier for cluster logits relative to weights.
    pub theta_lr_multiplier: f64,
    /// Record every `P` matrix each `snapshot_interval` iterations (and at
    /// the start and end of training).
    pub snapshot_interval: u64,
    /// Evaluate on the held-out set every `eval_interval` iterations (and at
    /// the end). Zero disables periodic evaluation.
    pub eval_interval: u64,
    pub cluster_mode: ClusterMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            decay_factor: 0.5,
            decay_interval: 1000,
            momentum: 0.9,
            batch_size: 64,
            iterations: 2000,
            seed: 0,
            theta_lr_multiplier: 1.0,
            snapshot_interval: 100,
            eval_interval: 100,
            cluster_mode: ClusterMode::HardLearned,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if self.decay_interval == 0 {
            return bad("decay_interval must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.theta_lr_multiplier >= 0.0 && self.theta_lr_multiplier.is_finite()) {
            return bad("theta_lr_multiplier must be finite and >= 0");
        }
        if self.snapshot_interval == 0 {
            return bad("snapshot_interval must be positive");
        }
        Ok(())
    }

    /// Step-decayed learning rate for iteration `t` (0-based).
    pub fn learning_rate_at(&self, t: u64) -> f64 {
        self.learning_rate * self.decay_factor.powi((t / self.decay_interval) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub accuracy: f64,
}

/// `P` of one cluster interface at one iteration. The iteration index is the
/// timestamp; wall-clock time is not recorded so logs stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: u64,
    pub layer: usize,
    pub probabilities: DenseMatrix,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub iterations: Vec<IterationRecord>,
    pub evals: Vec<EvalRecord>,
    pub snapshots: Vec<Snapshot>,
}

impl TrainingLog {
    pub fn snapshot(&mut self, iteration: u64, net: &Network) {
        for (layer, probabilities) in net.probabilities().into_iter().enumerate() {
            self.snapshots.push(Snapshot {
                iteration,
                layer,
                probabilities,
            });
        }
    }

    pub fn last_eval(&self) -> Option<f64> {
        self.evals.last().map(|e| e.accuracy)
    }
}

/// SGD with classical momentum: `v <- mu v - lr g; p <- p + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: net
                .params()
                .iter()
                .map(|(_, _, p)| vec![0.0; p.len()])
                .collect(),
        }
    }

    /// Applies one update. Logits use `lr * theta_multiplier` and are skipped
    /// when `update_logits` is false; every interface is clamped afterwards.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &Gradients,
        lr: f64,
        theta_multiplier: f64,
        update_logits: bool,
    ) -> Result<()> {
        let mut params = net.params_mut();
        if params.len() != grads.params.len() || params.len() != self.velocity.len() {
            return Err(Error::Logic(
                "gradient layout does not match network parameters".into(),
            ));
        }
        for ((kind, _, p), (g, v)) in params
            .iter_mut()
            .zip(grads.params.iter().zip(self.velocity.iter_mut()))
        {
            let rate = match kind {
                ParamKind::Logit if !update_logits => continue,
                ParamKind::Logit => lr * theta_multiplier,
                ParamKind::Weight | ParamKind::Bias => lr,
            };
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v - rate * g;
                *p += *v;
            }
        }
        drop(params);
        if update_logits {
            for i in 0..net.interfaces().len() {
                net.cluster_params_mut(i).clamp();
            }
        }
        Ok(())
    }
}

/// Owns the optimizer state and the cluster-sampling stream for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    sgd: Sgd,
    sampling: RngStream,
    iteration: u64,
}

impl Trainer {
    pub fn new(net: &Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sampling = RngStream::new(config.seed).fork(SAMPLING_STREAM);
        Ok(Self {
            sgd: Sgd::new(net, config.momentum),
            config,
            sampling,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// One forward/backward/update cycle on a mini-batch; returns the batch
    /// loss and appends it to `log`.
    pub fn train_iteration(
        &mut self,
        net: &mut Network,
        x: &DenseMatrix,
        labels: &[usize],
        log: &mut TrainingLog,
    ) -> Result<f64> {
        if net.mode() != Mode::Train {
            return Err(Error::Logic("train_iteration requires train mode".into()));
        }
        let t = self.iteration;
        let mode = self.config.cluster_mode;
        let assignments = net.draw_assignments(t, mode, &mut self.sampling)?;
        let (logits, trace) = net.forward_train(x, &assignments, t)?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
        let mut grads = net.backward(trace, &grad_logits)?;
        net.chain_logit_gradients(&mut grads, &assignments, mode)?;
        if !loss.is_finite() {
            let (layer, max_abs_grad) = largest_gradient(net, &grads);
            return Err(Error::NonFiniteLoss {
                iteration: t,
                layer,
                max_abs_grad,
            });
        }
        let predictions = logits.argmax_per_col();
        let correct = predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        self.sgd.step(
            net,
            &grads,
            self.config.learning_rate_at(t),
            self.config.theta_lr_multiplier,
            mode.learns_clusters(),
        )?;
        log.iterations.push(IterationRecord {
            iteration: t,
            loss,
            train_accuracy: correct as f64 / labels.len() as f64,
        });
        self.iteration += 1;
        Ok(loss)
    }
}

fn largest_gradient(net: &Network, grads: &Gradients) -> (usize, f64) {
    let mut best = (0, 0.0f64);
    for ((_, layer, _), g) in net.params().iter().zip(&grads.params) {
        for v in g {
            let a = if v.is_nan() { f64::INFINITY } else { v.abs() };
            if a > best.1 {
                best = (*layer, a);
            }
        }
    }
    best
}

/// Runs `config.iterations` iterations over shuffled mini-batches of `train`.
///
/// Snapshots every `P` before the first update and after every
/// `snapshot_interval` updates (snapshot iterations count completed updates).
/// Evaluates on `eval` (if given) every `eval_interval` iterations and at the
/// end; eval records carry the 0-based index of the iteration just run, the
/// same index as the matching [`IterationRecord`].
pub fn train(
    net: &mut Network,
    train: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainingLog> {
    if config.batch_size > train.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds dataset size {}",
            config.batch_size,
            train.len()
        )));
    }
    if train.dim() != net.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} features, network expects {}",
            train.dim(),
            net.input_dim()
        )));
    }
    let mut trainer = Trainer::new(net, config.clone())?;
    let mut batches = BatchIterator::new(
        train,
        config.batch_size,
        RngStream::new(config.seed).fork(BATCH_STREAM),
    )?;
    let mut log = TrainingLog::default();
    net.set_mode(Mode::Train);
    log.snapshot(0, net);
    for t in 0..config.iterations {
        let batch = batches.next_batch();
        trainer.train_iteration(net, &batch.features, &batch.labels, &mut log)?;
        let done = t + 1;
        if done % config.snapshot_interval == 0 || done == config.iterations {
            log.snapshot(done, net);
        }
        if let Some(eval) = eval {
            let periodic = config.eval_interval > 0 && done % config.eval_interval == 0;
            if periodic || done == config.iterations {
                net.set_mode(Mode::Infer);
                let accuracy = evaluate(net, eval)?;
                net.set_mode(Mode::Train);
                log.evals.push(EvalRecord {
                    iteration: t,
                    accuracy,
                });
            }
        }
    }
    Ok(log)
}

/// Fraction of examples whose argmax prediction equals the label, using the
/// inference pass. The network must be in [`Mode::Infer`].
///
/// Work is split into contiguous shards across available threads; shard
/// counts are summed in shard order.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if net.mode() != Mode::Infer {
        return Err(Error::Logic("evaluate requires infer mode".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    if data.dim() != net.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} features, network expects {}",
            data.dim(),
            net.input_dim()
        )));
    }
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(data.len());
    let shard = data.len().div_ceil(workers);
    let count_shard = |start: usize| -> Result<usize> {
        let end = (start + shard).min(data.len());
        let mut correct = 0;
        // Bounded chunks keep peak memory small for large sets.
        for chunk_start in (start..end).step_by(512) {
            let idx: Vec<usize> = (chunk_start..(chunk_start + 512).min(end)).collect();
            let preds = net.predict(&data.columns(&idx))?;
            correct += preds
                .iter()
                .zip(&idx)
                .filter(|(p, &i)| **p == data.labels[i])
                .count();
        }
        Ok(correct)
    };
    let counts: Vec<Result<usize>> = if workers <= 1 {
        vec![count_shard(0)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| s.spawn(move || count_shard(w * shard)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / data.len() as f64)
}
