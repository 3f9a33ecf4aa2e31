//! Optimizers, truncated back-propagation through time and evaluation.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{build_vocab, encode_stream, make_batches, CorpusSplits, Vocab};
use crate::distill::{kd_penalty_tape, DataCovariance, DistillConfig, DistillMode, TeacherWeights};
use crate::error::{Error, Result};
use crate::nn::{forward_tape, time_major, FrozenModel, Gate, LmState, ModelConfig, TTLstmModel};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

fn default_lr() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    1
}
fn default_clip() -> f64 {
    5.0
}
fn default_lr_decay() -> f64 {
    0.5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Global gradient-norm clip.
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// Factor applied to the learning rate when validation perplexity stalls.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Caps the number of training windows per epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_windows: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub distill: DistillConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr: default_lr(),
            epochs: default_epochs(),
            clip: default_clip(),
            lr_decay: default_lr_decay(),
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            max_windows: None,
            seed: 0,
            distill: DistillConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::config("clip must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay must lie in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::config("invalid Adam hyperparameters"));
        }
        if self.max_windows == Some(0) {
            return Err(Error::config("max_windows must be positive"));
        }
        self.distill.validate()
    }
}

fn default_max_vocab() -> usize {
    10_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Vocabulary cap including the two reserved tokens.
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            max_vocab: default_max_vocab(),
        }
    }
}

/// Contents of a `--config` file. `model.vocab_size` is replaced by the size
/// of the vocabulary built from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

/// Encoded corpus splits sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Option<Vec<usize>>,
    pub test: Option<Vec<usize>>,
}

impl Corpus {
    /// Builds the vocabulary from the training split.
    pub fn build(splits: &CorpusSplits, max_vocab: usize) -> Result<Self> {
        let vocab = build_vocab(&splits.train, max_vocab)?;
        Ok(Self::with_vocab(splits, vocab))
    }

    pub fn with_vocab(splits: &CorpusSplits, vocab: Vocab) -> Self {
        let enc = |t: &Option<String>| t.as_ref().map(|t| encode_stream(t, &vocab));
        Self {
            train: encode_stream(&splits.train, &vocab),
            valid: enc(&splits.valid),
            test: enc(&splits.test),
            vocab,
        }
    }
}

/// Teacher weights plus, for activation distillation, the factors `C` with
/// `S = C C^T` for the `W_x` and `W_h` inputs.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub weights: TeacherWeights,
    pub factors: Option<(Matrix, Matrix)>,
}

impl Teacher {
    pub fn new(weights: TeacherWeights, covariances: Option<(&DataCovariance, &DataCovariance)>) -> Self {
        Self {
            weights,
            factors: covariances.map(|(x, h)| (x.factor(), h.factor())),
        }
    }

    fn factor(&self, gate: Gate) -> Option<&Matrix> {
        self.factors.as_ref().map(|(x, h)| match gate {
            Gate::X => x,
            Gate::H => h,
        })
    }
}

/// Statistics of one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub train_perplexity: f64,
    pub valid_perplexity: Option<f64>,
    /// Mean distillation penalty per window.
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation perplexity, or the last epoch's
    /// when there is no validation split.
    pub model: TTLstmModel,
    pub best_epoch: usize,
    pub epochs: Vec<EpochReport>,
}

/// SGD or Adam over every parameter of a store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies the accumulated gradients of `model`.
    pub fn step(&mut self, model: &mut TTLstmModel, lr: f64) {
        let params = model.params_mut();
        if self.kind == OptimizerKind::Adam && self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let wd = self.weight_decay;
        for (k, p) in params.iter_mut().enumerate() {
            let grad = p.grad.data().to_vec();
            let value = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in value.iter_mut().zip(&grad) {
                        *w -= lr * (g + wd * *w);
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - self.beta1.powi(self.t);
                    let c2 = 1.0 - self.beta2.powi(self.t);
                    for (i, (w, g)) in value.iter_mut().zip(&grad).enumerate() {
                        let g = g + wd * *w;
                        let m = &mut self.m[k][i];
                        let v = &mut self.v[k][i];
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Rescales gradients to global norm at most `clip`; returns the norm before
/// clipping.
pub fn clip_gradients(model: &mut TTLstmModel, clip: f64) -> f64 {
    let norm = model
        .params()
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let scale = clip / norm;
        for p in model.params_mut().iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Perplexity of `ids` read as one lane in windows of `unroll` steps, with
/// the state carried across windows and the final partial window included.
pub fn evaluate(model: &FrozenModel, ids: &[usize], unroll: usize) -> Result<f64> {
    if ids.len() < 2 || unroll == 0 {
        return Err(Error::domain("evaluation needs at least two tokens"));
    }
    let mut state = LmState::zeros(1, model.hidden);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + unroll).min(ids.len() - 1);
        let inputs = ndarray::Array2::from_shape_vec((1, end - start), ids[start..end].to_vec())
            .expect("length matches");
        let (logits, next) = model.forward_window(inputs.view(), &state)?;
        let (_, nll) = crate::autograd::softmax_nll(&logits, &ids[start + 1..end + 1])?;
        total += nll * (end - start) as f64;
        count += end - start;
        state = next;
        start = end;
    }
    Ok((total / count as f64).exp())
}

/// One optimization step on a window; returns `(cross entropy, penalty)`.
fn train_window(
    model: &mut TTLstmModel,
    inputs: ndarray::ArrayView2<usize>,
    targets: ndarray::ArrayView2<usize>,
    state: &mut LmState,
    teacher: Option<&Teacher>,
    distill: &DistillConfig,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let fwd = forward_tape(model, &mut tape, inputs, state)?;
    let ce = tape.softmax_cross_entropy(fwd.logits, &time_major(targets))?;
    let ce_value = tape.scalar(ce);
    let mut loss = ce;
    let mut penalty = 0.0;
    if let (Some(teacher), false) = (teacher, distill.is_inactive()) {
        for gate in [Gate::X, Gate::H] {
            let w = fwd.cell.prepared(gate).weight(&mut tape)?;
            let factor = match distill.mode {
                DistillMode::Kda => Some(
                    teacher
                        .factor(gate)
                        .ok_or_else(|| Error::config("activation distillation needs covariances"))?,
                ),
                _ => None,
            };
            let pen = kd_penalty_tape(&mut tape, w, teacher.weights.weight(gate), factor, distill.lambda)?;
            penalty += tape.scalar(pen);
            loss = tape.add(loss, pen)?;
        }
    }
    let total = tape.scalar(loss);
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss became {total}")));
    }
    let grads = tape.backward(loss, 1.0)?;
    model.params_mut().zero_grads();
    model.params_mut().accumulate(&tape, &grads);
    *state = fwd.state;
    Ok((ce_value, penalty))
}

/// Trains `model` with truncated back-propagation through time over
/// `config.unroll`-step windows, halving the learning rate whenever the
/// validation perplexity fails to improve.
pub fn train_model(
    mut model: TTLstmModel,
    train_ids: &[usize],
    valid_ids: Option<&[usize]>,
    cfg: &TrainConfig,
    teacher: Option<&Teacher>,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(t) = teacher {
        t.weights.check_compatible(&model)?;
    }
    if !cfg.distill.is_inactive() && teacher.is_none() {
        return Err(Error::config("distillation needs a teacher"));
    }
    let (batch, unroll) = (model.config().batch, model.config().unroll);
    let stream = make_batches(train_ids, batch, unroll)?;
    let windows = cfg.max_windows.map_or(stream.window_count(), |m| m.min(stream.window_count()));
    let mut opt = Optimizer::new(cfg);
    let mut lr = cfg.lr;
    let mut best: Option<(f64, usize, TTLstmModel)> = None;
    let mut reports = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut state = LmState::zeros(batch, model.config().hidden);
        let (mut ce_sum, mut pen_sum) = (0.0, 0.0);
        for k in 0..windows {
            let w = stream.window(k).expect("window in range");
            let (ce, pen) = train_window(&mut model, w.inputs.view(), w.targets.view(), &mut state, teacher, &cfg.distill)?;
            let norm = clip_gradients(&mut model, cfg.clip);
            opt.step(&mut model, lr);
            debug!("epoch {epoch} window {k}: ce {ce:.4} penalty {pen:.3e} grad norm {norm:.3}");
            ce_sum += ce;
            pen_sum += pen;
        }
        let valid_perplexity = match valid_ids {
            Some(ids) => Some(evaluate(&model.freeze()?, ids, unroll)?),
            None => None,
        };
        let report = EpochReport {
            epoch,
            lr,
            train_perplexity: (ce_sum / windows as f64).exp(),
            valid_perplexity,
            penalty: pen_sum / windows as f64,
        };
        info!(
            "epoch {epoch}: lr {lr} train ppl {:.3} valid ppl {:?}",
            report.train_perplexity, report.valid_perplexity
        );
        on_epoch(&report);
        let score = valid_perplexity.unwrap_or(f64::NEG_INFINITY);
        if !score.is_finite() && valid_perplexity.is_some() {
            return Err(Error::Numeric(format!("validation perplexity became {score}")));
        }
        match &best {
            Some((b, _, _)) if valid_perplexity.is_some() && score >= *b => lr *= cfg.lr_decay,
            _ => best = Some((score, epoch, model.clone())),
        }
        reports.push(report);
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        epochs: reports,
    })
}

/// Perplexity over the training layout of `ids` (contiguous lanes, full
/// windows, carried state) without updating the model.
pub fn stream_perplexity(model: &TTLstmModel, ids: &[usize]) -> Result<f64> {
    let frozen = model.freeze()?;
    let (batch, unroll) = (model.config().batch, model.config().unroll);
    let stream = make_batches(ids, batch, unroll)?;
    let mut state = LmState::zeros(batch, model.config().hidden);
    let mut total = 0.0;
    for w in stream.iter() {
        let (logits, next) = frozen.forward_window(w.inputs.view(), &state)?;
        let (_, nll) = crate::autograd::softmax_nll(&logits, &time_major(w.targets.view()))?;
        total += nll;
        state = next;
    }
    Ok((total / stream.window_count() as f64).exp())
}
