//! Label-side language models for shallow fusion.
//!
//! A fusion model scores label continuations only — blank is a property of
//! the acoustic alignment, so fusion never touches it and the LM state
//! advances exactly when a label is emitted. Scores are log-probabilities
//! normalized over the `vocab` labels; the search multiplies them by the
//! fusion weight and adds them to label transitions.

use ndarray::Array1;

use crate::math::log_softmax;
use crate::scorer::{decode_step, start_state, DecoderState, ModelConfig, ModelParameters};
use crate::{Label, Result};

/// Label-sequence prior used during beam search.
///
/// The state is an opaque vector owned by the caller; `start` produces the
/// empty-prefix state, `label_log_probs` scores every next label (index
/// `k - 1` holds label `k`), and `advance` consumes an emitted label.
/// Implementations are immutable scorers (all mutation lives in the state
/// vectors), so one instance can serve utterances decoded in parallel.
pub trait FusionLm: Send + Sync {
    fn vocab(&self) -> Label;
    fn start(&self) -> Array1<f64>;
    fn label_log_probs(&self, state: &Array1<f64>) -> Array1<f64>;
    fn advance(&self, state: &Array1<f64>, label: Label) -> Array1<f64>;
}

/// Uniform prior: every label costs `-ln(vocab)` regardless of history.
///
/// Mostly useful for exercising the fusion plumbing — with weight `w` it
/// shifts every candidate by `w * len * ln(vocab)` without reordering
/// same-length hypotheses.
pub struct UniformLm {
    vocab: Label,
}

impl UniformLm {
    pub fn new(vocab: Label) -> Self {
        Self { vocab }
    }
}

impl FusionLm for UniformLm {
    fn vocab(&self) -> Label {
        self.vocab
    }

    fn start(&self) -> Array1<f64> {
        Array1::zeros(0)
    }

    fn label_log_probs(&self, _state: &Array1<f64>) -> Array1<f64> {
        Array1::from_elem(self.vocab as usize, -(self.vocab as f64).ln())
    }

    fn advance(&self, _state: &Array1<f64>, _label: Label) -> Array1<f64> {
        Array1::zeros(0)
    }
}

/// Recurrent label prior built from a trained model's prediction network
/// and its label head, renormalized over labels.
///
/// The head also has a blank row (it is trained with the shared output
/// layout), but a label prior must not leak mass there: the softmax runs
/// over rows `1..=vocab` only.
pub struct RecurrentLm {
    config: ModelConfig,
    params: ModelParameters,
}

impl RecurrentLm {
    pub fn new(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

impl FusionLm for RecurrentLm {
    fn vocab(&self) -> Label {
        self.config.vocab
    }

    fn start(&self) -> Array1<f64> {
        let state = start_state(&self.params);
        let (_, state) =
            decode_step(&self.params, None, &state).expect("start symbol is always valid");
        state.h
    }

    fn label_log_probs(&self, state: &Array1<f64>) -> Array1<f64> {
        let logits = state.dot(&self.params.lm_w) + &self.params.lm_b;
        let labels = logits.slice(ndarray::s![1..]).to_owned();
        log_softmax(labels.view()).expect("label prior logits are finite")
    }

    fn advance(&self, state: &Array1<f64>, label: Label) -> Array1<f64> {
        let wrapped = DecoderState { h: state.clone() };
        let (_, next) = decode_step(&self.params, Some(label), &wrapped)
            .expect("search labels stay within the vocabulary");
        next.h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::init_parameters;

    fn lm_fixture() -> RecurrentLm {
        let config = ModelConfig::small(3, 4);
        let params = init_parameters(&config, 77).unwrap();
        RecurrentLm::new(config, params).unwrap()
    }

    #[test]
    fn uniform_rows_are_flat_and_normalized() {
        let lm = UniformLm::new(5);
        let row = lm.label_log_probs(&lm.start());
        assert_eq!(row.len(), 5);
        for &v in row.iter() {
            assert!((v - (-(5.0f64).ln())).abs() < 1e-15);
        }
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recurrent_rows_are_normalized_over_labels() {
        let lm = lm_fixture();
        let mut state = lm.start();
        for label in [2, 1, 4] {
            let row = lm.label_log_probs(&state);
            assert_eq!(row.len(), 4);
            let total: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            state = lm.advance(&state, label);
        }
    }

    #[test]
    fn recurrent_scores_depend_on_history() {
        let lm = lm_fixture();
        let start = lm.start();
        let after_1 = lm.advance(&start, 1);
        let after_3 = lm.advance(&start, 3);
        let row_1 = lm.label_log_probs(&after_1);
        let row_3 = lm.label_log_probs(&after_3);
        let diff: f64 = (&row_1 - &row_3).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-8, "distinct histories should score differently");
    }
}
