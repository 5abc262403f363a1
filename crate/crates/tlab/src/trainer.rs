//! Mini-batch gradient training over utterance datasets, plus the
//! synthetic tasks used to exercise the whole pipeline end to end.
//!
//! Training is deterministic for a fixed configuration: parameter
//! initialization, epoch shuffling, and batch order all derive from the
//! config seed, and per-batch gradients are reduced in index order even
//! though per-utterance passes run on the rayon pool. Thread count
//! therefore changes wall time, never results.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use ndarray::Array2;

use crate::dataset::{Dataset, Utterance};
use crate::losses::{standard_normal, LossConfig};
use crate::scorer::{init_parameters, model_loss, ModelConfig, ModelParameters, UtteranceScorer};
use crate::search::greedy_search;
use crate::{Error, Label, Result};

/// Procedurally generated dataset families.
///
/// Both present each source symbol as a block of identical one-hot frames,
/// so the mapping is learnable by a small model from scratch:
///
/// * `Copy` — each symbol spans two frames and is emitted once; output
///   length is half the frame count.
/// * `Repeat2` — each symbol spans three frames and is emitted twice in a
///   row, so a third of the frames must emit and every emitting frame in a
///   perfect alignment carries a two-label burst somewhere nearby; useful
///   for exercising multi-expansion decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    Copy,
    Repeat2,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Repeat2 => "repeat2",
        }
    }

    /// Frames per source symbol.
    fn frames_per_symbol(self) -> usize {
        match self {
            SyntheticTask::Copy => 2,
            SyntheticTask::Repeat2 => 3,
        }
    }

    /// Emitted labels per source symbol.
    fn labels_per_symbol(self) -> usize {
        match self {
            SyntheticTask::Copy => 1,
            SyntheticTask::Repeat2 => 2,
        }
    }
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "repeat2" => Ok(SyntheticTask::Repeat2),
            other => Err(Error::Config(format!(
                "unknown task {other:?}; expected copy or repeat2"
            ))),
        }
    }
}

/// Generates a synthetic dataset. Features are one-hot indicators of the
/// current symbol (`input_dim = vocab`) with optional additive Gaussian
/// noise of the given standard deviation. Symbol counts per utterance are
/// drawn uniformly from `symbols_min..=symbols_max`.
pub fn gen_synthetic(
    task: SyntheticTask,
    count: usize,
    vocab: Label,
    symbols_min: usize,
    symbols_max: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one utterance".into()));
    }
    if vocab == 0 {
        return Err(Error::Config("vocabulary must contain at least one label".into()));
    }
    if symbols_min == 0 || symbols_min > symbols_max {
        return Err(Error::Config(format!(
            "bad symbol range {symbols_min}..={symbols_max}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise must be finite and >= 0, got {noise}")));
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let input_dim = vocab as usize;
    let mut utterances = Vec::with_capacity(count);
    for _ in 0..count {
        let s_len = rng.gen_range(symbols_min..=symbols_max);
        let symbols: Vec<Label> = (0..s_len).map(|_| rng.gen_range(1..=vocab)).collect();

        let t_len = s_len * task.frames_per_symbol();
        let mut features = Array2::zeros((t_len, input_dim));
        for (si, &sym) in symbols.iter().enumerate() {
            for f in 0..task.frames_per_symbol() {
                features[(si * task.frames_per_symbol() + f, (sym - 1) as usize)] = 1.0;
            }
        }
        if noise > 0.0 {
            for v in features.iter_mut() {
                *v += noise * standard_normal(&mut rng);
            }
        }

        let mut labels = Vec::with_capacity(s_len * task.labels_per_symbol());
        for &sym in &symbols {
            for _ in 0..task.labels_per_symbol() {
                labels.push(sym);
            }
        }
        utterances.push(Utterance { features, labels });
    }
    Dataset::new(input_dim, vocab, utterances)
}

/// Parameter-update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Stochastic gradient descent with classical momentum.
    Sgd { momentum: f64 },
    /// Adam with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub optimizer: OptimizerKind,
    /// Fraction of the dataset (taken from the end) held out for accuracy
    /// tracking. When the resulting holdout is empty, accuracy is measured
    /// on the training utterances instead.
    pub holdout_frac: f64,
    /// Stop as soon as holdout accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            clip_norm: Some(5.0),
            optimizer: OptimizerKind::adam(),
            holdout_frac: 0.1,
            target_accuracy: None,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::Config(format!(
                "holdout fraction must be in [0, 1), got {}",
                self.holdout_frac
            )));
        }
        Ok(())
    }
}

/// Optimizer slot variables, shaped like the parameters they update.
struct OptState {
    kind: OptimizerKind,
    step: u64,
    m: ModelParameters,
    v: ModelParameters,
}

impl OptState {
    fn new(kind: OptimizerKind, params: &ModelParameters) -> Self {
        Self {
            kind,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    fn apply(&mut self, params: &mut ModelParameters, grads: &ModelParameters, lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((_, mut vel), (_, g)) in
                    self.m.tensors_mut().into_iter().zip(grads.tensors())
                {
                    for (ve, &ge) in vel.iter_mut().zip(g.iter()) {
                        *ve = momentum * *ve + ge;
                    }
                }
                for ((_, mut p), (_, vel)) in
                    params.tensors_mut().into_iter().zip(self.m.tensors())
                {
                    for (pe, &ve) in p.iter_mut().zip(vel.iter()) {
                        *pe -= lr * ve;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (((_, mut m), (_, mut v)), (_, g)) in self
                    .m
                    .tensors_mut()
                    .into_iter()
                    .zip(self.v.tensors_mut())
                    .zip(grads.tensors())
                {
                    for ((me, ve), &ge) in m.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                        *me = beta1 * *me + (1.0 - beta1) * ge;
                        *ve = beta2 * *ve + (1.0 - beta2) * ge * ge;
                    }
                }
                for (((_, mut p), (_, m)), (_, v)) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(self.m.tensors())
                    .zip(self.v.tensors())
                {
                    for ((pe, &me), &ve) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                        *pe -= lr * (me / bc1) / ((ve / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// One epoch's summary row.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss over training utterances seen this epoch.
    pub mean_loss: f64,
    /// Exact-sequence-match rate of greedy decoding on the holdout set.
    pub holdout_accuracy: f64,
    pub seconds: f64,
}

/// Finished training run.
pub struct TrainReport {
    pub params: ModelParameters,
    pub logs: Vec<EpochLog>,
    /// Holdout accuracy after the final epoch.
    pub final_accuracy: f64,
}

/// Fraction of utterances whose greedy decode reproduces the reference
/// labels exactly.
pub fn sequence_accuracy(
    model: &ModelConfig,
    params: &ModelParameters,
    utterances: &[Utterance],
) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::Config("accuracy over an empty set is undefined".into()));
    }
    let matches: Result<Vec<bool>> = utterances
        .par_iter()
        .map(|utt| {
            let scorer = UtteranceScorer::new(model, params, &utt.features.view())?;
            let report = greedy_search(&scorer);
            Ok(report.nbest[0].labels == utt.labels)
        })
        .collect();
    let matches = matches?;
    Ok(matches.iter().filter(|&&hit| hit).count() as f64 / matches.len() as f64)
}

/// Trains a fresh model on the dataset and reports per-epoch progress.
pub fn train(model: &ModelConfig, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    model.validate()?;
    cfg.validate()?;
    data.validate()?;
    if data.input_dim != model.input_dim {
        return Err(Error::Contract(format!(
            "dataset features are {}-dimensional, model expects {}",
            data.input_dim, model.input_dim
        )));
    }
    if data.vocab != model.vocab {
        return Err(Error::Contract(format!(
            "dataset vocabulary is {}, model expects {}",
            data.vocab, model.vocab
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("training needs at least one utterance".into()));
    }

    let n_hold = (data.len() as f64 * cfg.holdout_frac) as usize;
    let (train_set, holdout) = data.utterances.split_at(data.len() - n_hold);
    if train_set.is_empty() {
        return Err(Error::Config("holdout fraction leaves no training data".into()));
    }
    let eval_set = if holdout.is_empty() { train_set } else { holdout };

    let mut params = init_parameters(model, cfg.seed)?;
    let mut opt = OptState::new(cfg.optimizer, &params);
    let mut rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::new();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            let results: Result<Vec<(f64, ModelParameters)>> = chunk
                .par_iter()
                .map(|&i| {
                    let utt = &train_set[i];
                    let (breakdown, grads) =
                        model_loss(model, &params, &utt.features.view(), &utt.labels, &cfg.loss)?;
                    Ok((breakdown.total, grads))
                })
                .collect();
            let results = results?;

            // Index-order reduction keeps the update bit-reproducible.
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_grads = params.zeros_like();
            for (loss, grads) in &results {
                loss_sum += loss;
                batch_grads.scaled_add(scale, grads);
            }
            if let Some(max_norm) = cfg.clip_norm {
                batch_grads.clip_global_norm(max_norm);
            }
            opt.apply(&mut params, &batch_grads, cfg.lr);
        }

        let holdout_accuracy = sequence_accuracy(model, &params, eval_set)?;
        logs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            holdout_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
        if cfg.target_accuracy.is_some_and(|t| holdout_accuracy >= t) {
            break;
        }
    }

    let final_accuracy = logs.last().map_or(0.0, |l| l.holdout_accuracy);
    Ok(TrainReport {
        params,
        logs,
        final_accuracy,
    })
}

/// Loss-weight ablation ladder used by training comparisons: from the full
/// objective down to the bare transducer loss.
pub fn ablation_recipe() -> Vec<(&'static str, LossConfig)> {
    let full = LossConfig::default();
    vec![
        ("full", full),
        (
            "no_kl",
            LossConfig {
                lambda_symm_kl: 0.0,
                ..full
            },
        ),
        (
            "no_kl_no_aux",
            LossConfig {
                lambda_symm_kl: 0.0,
                lambda_aux_trans: 0.0,
                ..full
            },
        ),
        (
            "ctc_only",
            LossConfig {
                lambda_aux_trans: 0.0,
                lambda_symm_kl: 0.0,
                lambda_lm: 0.0,
                ..full
            },
        ),
        ("vanilla", LossConfig::vanilla()),
    ]
}
