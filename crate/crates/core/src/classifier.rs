//! Softmax classifiers: the frozen reference `C*` and the learnable `C`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DcaError, Result};
use crate::metrics;
use crate::nn::checkpoint::{self, CheckpointMeta, ModelKind};
use crate::nn::{Activation, AdamConfig, Mlp, ParamTape};
use crate::rng;
use crate::synthdata::{Codec, Dataset};
use crate::vector::{argmax, softmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierNetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ClassifierNetConfig {
    fn default() -> Self {
        Self { hidden: Vec::new(), activation: Activation::Silu }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// L2 penalty `½·wd·‖θ‖²` added to the mean batch loss.
    pub weight_decay: f64,
    /// Std of Gaussian jitter added to every training input. Widening the
    /// classes this way keeps the decision boundaries where they are but stops
    /// well-separated data from leaving the boundary directions unconstrained.
    pub input_noise: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 60, lr: 3e-3, batch: 64, weight_decay: 0.0, input_noise: 3.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    net: Mlp,
    num_classes: usize,
    frozen: bool,
    pub meta: TrainingMeta,
}

/// Forward pass results needed by the SDE drift.
#[derive(Debug, Clone)]
pub struct BoundaryEval {
    /// `P(· | decode(z))`.
    pub probs: Vec<f64>,
    /// Latent-space gradient of `log P(y'|x) − log P(y|x)`.
    pub grad: Vec<f64>,
}

impl Classifier {
    pub fn new(net: Mlp, num_classes: usize, meta: TrainingMeta) -> Result<Self> {
        if net.time_embed().is_some() {
            return Err(DcaError::ArchitectureMismatch("classifiers take no timestep".into()));
        }
        check_dim(num_classes, net.output_dim())?;
        if num_classes < 2 {
            return Err(DcaError::InvalidArgument("a classifier needs ≥ 2 classes".into()));
        }
        Ok(Self { net, num_classes, frozen: false, meta })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Mutable copy sharing the architecture and parameters.
    pub fn thawed_copy(&self) -> Self {
        Self { frozen: false, ..self.clone() }
    }

    pub fn params_mut(&mut self) -> Result<&mut [f64]> {
        if self.frozen {
            Err(DcaError::Frozen)
        } else {
            Ok(self.net.params_mut())
        }
    }

    pub fn checksum(&self) -> u64 {
        self.net.checksum()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(x, None)
    }

    /// Max-subtracted softmax of the logits.
    pub fn class_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Argmax class; exact ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    fn check_pair(&self, y: usize, y_prime: usize) -> Result<()> {
        if y == y_prime {
            return Err(DcaError::SameClass(y));
        }
        if y >= self.num_classes || y_prime >= self.num_classes {
            return Err(DcaError::InvalidArgument(format!(
                "class pair ({y}, {y_prime}) outside 0..{}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Probabilities at `decode(z)` and the pulled-back boundary gradient.
    ///
    /// Softmax log-ratios equal logit differences, so the gradient is taken
    /// of `logit_{y'} − logit_y` directly.
    pub fn boundary_eval(&self, codec: &Codec, z: &[f64], y: usize, y_prime: usize) -> Result<BoundaryEval> {
        self.check_pair(y, y_prime)?;
        let x = codec.decode(z)?;
        let trace = self.net.trace(&x, None)?;
        let mut cot = vec![0.0; self.num_classes];
        cot[y_prime] = 1.0;
        cot[y] = -1.0;
        let gx = self.net.backward_from(&trace, &cot, None)?;
        Ok(BoundaryEval { probs: softmax(trace.output()), grad: codec.pullback(&gx)? })
    }

    /// `∇_z (log P(y'|D(z)) − log P(y|D(z)))` for a frozen classifier.
    pub fn boundary_grad(&self, codec: &Codec, z: &[f64], y: usize, y_prime: usize) -> Result<Vec<f64>> {
        if !self.frozen {
            return Err(DcaError::Precondition("boundary gradients come from a frozen classifier".into()));
        }
        Ok(self.boundary_eval(codec, z, y, y_prime)?.grad)
    }

    pub fn to_checkpoint(&self, config_hash: Option<String>) -> Result<Vec<u8>> {
        let mut meta = CheckpointMeta::for_net(ModelKind::Classifier, &self.net, self.meta.seed);
        meta.num_classes = Some(self.num_classes);
        meta.frozen = Some(self.frozen);
        meta.epochs = Some(self.meta.epochs);
        meta.val_accuracy = self.meta.val_accuracy;
        meta.config_hash = config_hash;
        checkpoint::encode(&meta, self.net.params())
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, CheckpointMeta)> {
        let (meta, params) = checkpoint::decode(bytes)?;
        if meta.kind != ModelKind::Classifier {
            return Err(DcaError::Checkpoint("not a classifier checkpoint".into()));
        }
        let k = meta
            .num_classes
            .ok_or_else(|| DcaError::Checkpoint("classifier checkpoint lacks num_classes".into()))?;
        let net = checkpoint::to_mlp(&meta, params)?;
        let info = TrainingMeta { seed: meta.seed, epochs: meta.epochs.unwrap_or(0), val_accuracy: meta.val_accuracy };
        let mut c = Self::new(net, k, info)?;
        c.frozen = meta.frozen.unwrap_or(false);
        Ok((c, meta))
    }
}

/// Cross-entropy training with Adam on shuffled minibatches.
pub fn train_classifier(
    train: &Dataset,
    val: Option<&Dataset>,
    net_cfg: &ClassifierNetConfig,
    cfg: &ClassifierTrainConfig,
) -> Result<Classifier> {
    let k = train.num_classes;
    if k < 2 {
        return Err(DcaError::DegenerateDataset("fewer than two classes".into()));
    }
    if let Some(missing) = (0..k).find(|c| train.points.iter().all(|p| p.label != *c)) {
        return Err(DcaError::DegenerateDataset(format!("class {missing} absent from train split")));
    }
    if cfg.batch == 0 {
        return Err(DcaError::InvalidArgument("batch must be ≥ 1".into()));
    }
    if !(cfg.input_noise >= 0.0 && cfg.input_noise.is_finite()) {
        return Err(DcaError::InvalidArgument("input_noise must be finite and ≥ 0".into()));
    }
    let net = Mlp::new(
        train.dim,
        &net_cfg.hidden,
        k,
        net_cfg.activation,
        None,
        rng::derive_seed(cfg.seed, "classifier-init", 0),
    )?;
    let mut clf = Classifier::new(net, k, TrainingMeta { seed: cfg.seed, epochs: cfg.epochs, val_accuracy: None })?;
    let mut tape = ParamTape::new(clf.net.num_params());
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut x = vec![0.0; train.dim];
    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut rng::stream(cfg.seed, "classifier-epoch", epoch as u64), &mut order);
        let mut jitter = rng::stream(cfg.seed, "classifier-jitter", epoch as u64);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let inv = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                let p = &train.points[i];
                x.copy_from_slice(&p.z);
                if cfg.input_noise > 0.0 {
                    for v in &mut x {
                        *v += cfg.input_noise * rng::normal(&mut jitter);
                    }
                }
                let trace = clf.net.trace(&x, None)?;
                let probs = softmax(trace.output());
                loss -= probs[p.label].max(f64::MIN_POSITIVE).ln() * inv;
                let mut cot: Vec<f64> = probs.iter().map(|q| q * inv).collect();
                cot[p.label] -= inv;
                clf.net.backward_from(&trace, &cot, Some(&mut tape.grad))?;
            }
            if !loss.is_finite() {
                return Err(DcaError::NonFiniteLoss { iteration: epoch * order.len() + b, loss });
            }
            if cfg.weight_decay > 0.0 {
                for (g, p) in tape.grad.iter_mut().zip(clf.net.params()) {
                    *g += cfg.weight_decay * p;
                }
            }
            tape.adam_step(clf.net.params_mut(), &adam)?;
        }
    }
    let eval = val.unwrap_or(train);
    clf.meta.val_accuracy = Some(metrics::accuracy(&clf, eval)?);
    Ok(clf)
}
