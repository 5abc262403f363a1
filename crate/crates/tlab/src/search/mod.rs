//! Beam search strategies over transducer scorers.
//!
//! All strategies speak to the model through [`SearchScorer`], which exposes
//! per-frame joint log-probabilities and an incrementally-steppable decoder.
//! [`LatticeScorer`] adapts a bare [`PosteriorLattice`] to the same
//! interface so searches can run against hand-built tables in tests and
//! oracle suites.
//!
//! Scores are log-probabilities throughout. Ties are broken the same way
//! everywhere: higher score first, then shorter label sequence, then
//! lexicographically smaller labels — so a fixed instance always decodes to
//! the same report.

mod alsd;
mod auto_step;
mod default;
mod fusion;
mod greedy;
mod nsc;
mod tsd;

pub use alsd::alsd_search;
pub use auto_step::{estimate_auto_nstep, merge_histograms, DEFAULT_COVERAGE};
pub use default::beam_search;
pub use fusion::{FusionLm, RecurrentLm, UniformLm};
pub use greedy::greedy_search;
pub use nsc::nsc_search;
pub use tsd::tsd_search;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::Array1;

use crate::losses::PosteriorLattice;
use crate::math::log_add;
use crate::{Error, Label, Result};

/// Incremental scoring interface consumed by every search strategy.
///
/// Implementations must be deterministic and stateless across calls: many
/// decodes may run concurrently against one shared scorer. Labels passed to
/// `step`/`batch_step` are always in `1..=vocab`; violations are programmer
/// error and may panic.
pub trait SearchScorer {
    /// Decoder state after consuming some label prefix.
    type State: Clone;

    /// Number of input frames `T`.
    fn t_len(&self) -> usize;

    /// Label vocabulary size `V` (blank excluded).
    fn vocab(&self) -> u32;

    /// Decoder output and state for the empty prefix (start symbol consumed).
    fn start(&self) -> (Array1<f64>, Self::State);

    /// Advances the decoder by one label.
    fn step(&self, label: Label, state: &Self::State) -> (Array1<f64>, Self::State);

    /// Advances many decoder states at once; the vectorization point.
    fn batch_step(&self, labels: &[Label], states: &[&Self::State]) -> Vec<(Array1<f64>, Self::State)> {
        labels
            .iter()
            .zip(states)
            .map(|(&label, state)| self.step(label, state))
            .collect()
    }

    /// Joint log-probabilities over `V + 1` symbols at frame `t` (0-based)
    /// for a decoder output.
    fn log_probs(&self, t: usize, dec_out: &Array1<f64>) -> Array1<f64>;
}

/// A [`SearchScorer`] whose scores come straight out of a posterior lattice:
/// the joint distribution depends only on `(t, labels emitted)`.
///
/// The lattice may carry more rows than any target; searches walking past
/// the last row are clamped to it (tests construct lattices whose last row
/// grounds all label mass so this never matters in practice).
pub struct LatticeScorer<'a> {
    lattice: &'a PosteriorLattice,
}

impl<'a> LatticeScorer<'a> {
    pub fn new(lattice: &'a PosteriorLattice) -> Self {
        Self { lattice }
    }
}

impl SearchScorer for LatticeScorer<'_> {
    type State = usize;

    fn t_len(&self) -> usize {
        self.lattice.t_len()
    }

    fn vocab(&self) -> u32 {
        self.lattice.vocab()
    }

    fn start(&self) -> (Array1<f64>, usize) {
        (Array1::zeros(1), 0)
    }

    fn step(&self, _label: Label, state: &usize) -> (Array1<f64>, usize) {
        let u = state + 1;
        (Array1::from_elem(1, u as f64), u)
    }

    fn log_probs(&self, t: usize, dec_out: &Array1<f64>) -> Array1<f64> {
        let u = (dec_out[0] as usize).min(self.lattice.u_rows() - 1);
        let symbols = self.lattice.vocab() as usize + 1;
        Array1::from_iter((0..symbols).map(|k| self.lattice.logp(t, u, k as Label)))
    }
}

/// Shallow-fusion configuration: an external language model and its weight.
pub struct Fusion<'a> {
    pub lm: &'a dyn FusionLm,
    pub weight: f64,
}

/// Search parameters shared by all beam strategies. Fields irrelevant to a
/// strategy are ignored by it.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    /// Beam width `N_bs`.
    pub beam: usize,
    /// Number of hypotheses to return.
    pub nbest: usize,
    /// Maximum output length for the length-synchronous search.
    pub u_max: usize,
    /// Expansion rounds per frame for the time-synchronous search.
    pub max_sym_exp: usize,
    /// Expansion rounds per frame for the constrained search.
    pub n_step: usize,
    /// Estimated typical expansion count; changes only the final blank
    /// transition of the constrained search.
    pub auto_n_step: usize,
    /// Prefix-window width for constrained-search score accumulation.
    pub prefix_alpha: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            nbest: 1,
            u_max: 50,
            max_sym_exp: 2,
            n_step: 1,
            auto_n_step: 1,
            prefix_alpha: 2,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.nbest == 0 {
            return Err(Error::Config("nbest must be at least 1".into()));
        }
        if self.max_sym_exp == 0 {
            return Err(Error::Config("max_sym_exp must be at least 1".into()));
        }
        if self.n_step == 0 || self.auto_n_step == 0 {
            return Err(Error::Config("n_step and auto_n_step must be at least 1".into()));
        }
        if self.prefix_alpha < 2 {
            return Err(Error::Config("prefix_alpha must be at least 2".into()));
        }
        Ok(())
    }
}

/// One scored candidate in a search beam.
#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    pub labels: Vec<Label>,
    /// Log-probability mass accumulated along the explored alignments.
    pub score: f64,
    /// Cached decoder output for this label prefix.
    pub dec_out: Array1<f64>,
    pub state: S,
    /// Frame index (0-based) at which each label was emitted.
    pub timesteps: Vec<usize>,
    /// Fusion LM state, present only when fusion is active.
    pub lm_state: Option<Array1<f64>>,
    /// Per-label fused LM score increments (weight already applied).
    pub lm_log: Vec<f64>,
}

impl<S> Hypothesis<S> {
    /// Canonical hypothesis ordering: score (descending, exact float
    /// compare), then length, then lexicographic labels.
    pub fn order(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.labels.len().cmp(&other.labels.len()))
            .then_with(|| self.labels.cmp(&other.labels))
    }
}

pub(crate) fn sort_hypotheses<S>(hyps: &mut [Hypothesis<S>]) {
    hyps.sort_by(|a, b| a.order(b));
}

/// Merges hypotheses sharing a label sequence: scores log-sum, and the
/// decoder state, alignment, and LM state of the best-scoring member are
/// kept. Output comes back in canonical order regardless of input order.
pub fn recombine<S: Clone>(hyps: Vec<Hypothesis<S>>) -> Vec<Hypothesis<S>> {
    let mut groups: BTreeMap<Vec<Label>, Hypothesis<S>> = BTreeMap::new();
    for hyp in hyps {
        match groups.get_mut(&hyp.labels) {
            None => {
                groups.insert(hyp.labels.clone(), hyp);
            }
            Some(kept) => {
                let merged = log_add(kept.score, hyp.score);
                // Representative: higher own score; equal scores fall back to
                // the lexicographically earlier alignment so that input order
                // never shows through.
                let replace = match hyp.score.total_cmp(&kept.score) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => hyp.timesteps < kept.timesteps,
                };
                if replace {
                    let mut hyp = hyp;
                    hyp.score = merged;
                    *kept = hyp;
                } else {
                    kept.score = merged;
                }
            }
        }
    }
    let mut out: Vec<Hypothesis<S>> = groups.into_values().collect();
    sort_hypotheses(&mut out);
    out
}

/// One returned candidate of a decode.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub labels: Vec<Label>,
    pub score: f64,
}

/// Result of one utterance decode, with instrumentation.
#[derive(Debug, Clone)]
pub struct DecodeReport {
    pub strategy: &'static str,
    /// Best-first candidates, at most `nbest`, no duplicate label sequences.
    pub nbest: Vec<ScoredSequence>,
    /// Joint-network evaluations (one per `(frame, decoder output)` pair).
    pub joint_calls: u64,
    /// Decoder-step evaluations; a batched call of size `n` counts `n`.
    pub decoder_calls: u64,
    pub wall_time_s: f64,
    /// Timesteps emitting exactly `n` labels in the best hypothesis'
    /// alignment, including `n = 0`.
    pub expansion_histogram: BTreeMap<usize, u64>,
    /// Set when the search ran out of steps with no finished hypothesis and
    /// returned partials.
    pub incomplete: bool,
}

/// Joint/decoder call counters threaded through a search.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Instrument {
    pub joint_calls: u64,
    pub decoder_calls: u64,
}

/// Histogram of per-frame label emissions for one alignment.
pub(crate) fn expansion_histogram(timesteps: &[usize], t_len: usize) -> BTreeMap<usize, u64> {
    let mut per_frame = vec![0usize; t_len];
    for &t in timesteps {
        per_frame[t] += 1;
    }
    let mut hist = BTreeMap::new();
    for n in per_frame {
        *hist.entry(n).or_insert(0) += 1;
    }
    hist
}

/// Working hypothesis of the step-synchronous searches. Created by a label
/// extension with `pending` set, in which case `dec_out`, `state`, and
/// `lm_state` still belong to the parent; [`resolve_pending`] advances the
/// survivors of a pruning pass in one batched decoder call.
#[derive(Clone)]
pub(crate) struct SyncHyp<S> {
    pub labels: Vec<Label>,
    pub score: f64,
    pub timesteps: Vec<usize>,
    pub dec_out: Array1<f64>,
    pub state: S,
    pub lm_state: Option<Array1<f64>>,
    pub pending: Option<Label>,
}

pub(crate) fn sync_order<S>(a: &SyncHyp<S>, b: &SyncHyp<S>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.labels.len().cmp(&b.labels.len()))
        .then_with(|| a.labels.cmp(&b.labels))
        .then_with(|| a.timesteps.cmp(&b.timesteps))
}

/// Merges a hypothesis into a per-sequence map: scores log-sum, and the
/// higher-scoring member (ties: lexicographically earlier alignment) stays
/// as representative. Both members describe the same label sequence, so
/// their resolved decoder states are interchangeable.
pub(crate) fn merge_sync<S>(map: &mut BTreeMap<Vec<Label>, SyncHyp<S>>, hyp: SyncHyp<S>) {
    match map.get_mut(&hyp.labels) {
        None => {
            map.insert(hyp.labels.clone(), hyp);
        }
        Some(kept) => {
            let merged = log_add(kept.score, hyp.score);
            let replace = match hyp.score.total_cmp(&kept.score) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => hyp.timesteps < kept.timesteps,
            };
            if replace {
                let mut hyp = hyp;
                hyp.score = merged;
                *kept = hyp;
            } else {
                kept.score = merged;
            }
        }
    }
}

/// Batch-advances every hypothesis with an owed decoder step.
pub(crate) fn resolve_pending<M: SearchScorer>(
    model: &M,
    fusion: Option<&Fusion<'_>>,
    hyps: &mut [SyncHyp<M::State>],
    instrument: &mut Instrument,
) {
    let idx: Vec<usize> = hyps
        .iter()
        .enumerate()
        .filter(|(_, h)| h.pending.is_some())
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return;
    }
    let labels: Vec<Label> = idx.iter().map(|&i| hyps[i].pending.unwrap()).collect();
    let results = {
        let states: Vec<&M::State> = idx.iter().map(|&i| &hyps[i].state).collect();
        model.batch_step(&labels, &states)
    };
    instrument.decoder_calls += idx.len() as u64;
    for (&i, (dec_out, state)) in idx.iter().zip(results) {
        let label = hyps[i].pending.take().unwrap();
        hyps[i].dec_out = dec_out;
        hyps[i].state = state;
        hyps[i].lm_state = lm_advance(fusion, &hyps[i].lm_state, label);
    }
}

/// Final candidate stripped down to what a report needs.
#[derive(Debug, Clone)]
pub(crate) struct Finished {
    pub labels: Vec<Label>,
    pub score: f64,
    pub timesteps: Vec<usize>,
}

impl<S> From<Hypothesis<S>> for Finished {
    fn from(h: Hypothesis<S>) -> Self {
        Finished {
            labels: h.labels,
            score: h.score,
            timesteps: h.timesteps,
        }
    }
}

pub(crate) fn finished_order(a: &Finished, b: &Finished) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.labels.len().cmp(&b.labels.len()))
        .then_with(|| a.labels.cmp(&b.labels))
        .then_with(|| a.timesteps.cmp(&b.timesteps))
}

/// Builds the final report: ranks the candidates, keeps `nbest`, and reads
/// the expansion histogram off the winner's alignment.
pub(crate) fn finish_report(
    strategy: &'static str,
    mut finished: Vec<Finished>,
    nbest: usize,
    t_len: usize,
    instrument: Instrument,
    started: std::time::Instant,
    incomplete: bool,
) -> DecodeReport {
    finished.sort_by(finished_order);
    let histogram = finished
        .first()
        .map(|h| expansion_histogram(&h.timesteps, t_len))
        .unwrap_or_default();
    DecodeReport {
        strategy,
        nbest: finished
            .into_iter()
            .take(nbest)
            .map(|h| ScoredSequence {
                labels: h.labels,
                score: h.score,
            })
            .collect(),
        joint_calls: instrument.joint_calls,
        decoder_calls: instrument.decoder_calls,
        wall_time_s: started.elapsed().as_secs_f64(),
        expansion_histogram: histogram,
        incomplete,
    }
}

/// Weighted LM increments for every label extension of one hypothesis
/// (index `k - 1` for label `k`), or `None` when fusion is off.
pub(crate) fn fused_row(
    fusion: Option<&Fusion<'_>>,
    lm_state: &Option<Array1<f64>>,
) -> Option<Array1<f64>> {
    fusion.map(|f| {
        let state = lm_state.as_ref().expect("fusion hypotheses carry LM state");
        f.lm.label_log_probs(state) * f.weight
    })
}

/// Advances the fusion LM state past `label`; identity when fusion is off.
pub(crate) fn lm_advance(
    fusion: Option<&Fusion<'_>>,
    lm_state: &Option<Array1<f64>>,
    label: Label,
) -> Option<Array1<f64>> {
    fusion.map(|f| {
        let state = lm_state.as_ref().expect("fusion hypotheses carry LM state");
        f.lm.advance(state, label)
    })
}

/// Named strategy selector used by the command-line tools.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Default,
    Alsd,
    Tsd,
    Nsc,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Greedy,
        Strategy::Default,
        Strategy::Alsd,
        Strategy::Tsd,
        Strategy::Nsc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Default => "default",
            Strategy::Alsd => "alsd",
            Strategy::Tsd => "tsd",
            Strategy::Nsc => "nsc",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "default" => Ok(Strategy::Default),
            "alsd" => Ok(Strategy::Alsd),
            "tsd" => Ok(Strategy::Tsd),
            "nsc" => Ok(Strategy::Nsc),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}; expected greedy, default, alsd, tsd, or nsc"
            ))),
        }
    }
}

/// Runs the selected strategy with one entry point.
pub fn decode<M: SearchScorer>(
    strategy: Strategy,
    model: &M,
    cfg: &BeamConfig,
    fusion: Option<&Fusion<'_>>,
) -> Result<DecodeReport> {
    if let Some(f) = fusion {
        if f.lm.vocab() != model.vocab() {
            return Err(Error::Config(format!(
                "fusion LM covers {} labels, model has {}",
                f.lm.vocab(),
                model.vocab()
            )));
        }
    }
    match strategy {
        Strategy::Greedy => Ok(greedy_search(model)),
        Strategy::Default => beam_search(model, cfg, fusion),
        Strategy::Alsd => alsd_search(model, cfg, fusion),
        Strategy::Tsd => tsd_search(model, cfg, fusion),
        Strategy::Nsc => nsc_search(model, cfg, fusion),
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn hyp(labels: Vec<Label>, score: f64, timesteps: Vec<usize>) -> Hypothesis<usize> {
        Hypothesis {
            labels,
            score,
            dec_out: Array1::zeros(1),
            state: 0,
            timesteps,
            lm_state: None,
            lm_log: Vec::new(),
        }
    }

    #[test]
    fn ordering_prefers_score_then_length_then_labels() {
        let mut hyps = vec![
            hyp(vec![2], -1.0, vec![0]),
            hyp(vec![1, 1], -0.5, vec![0, 0]),
            hyp(vec![1], -1.0, vec![0]),
            hyp(vec![], -0.5, vec![]),
        ];
        sort_hypotheses(&mut hyps);
        let labels: Vec<Vec<Label>> = hyps.iter().map(|h| h.labels.clone()).collect();
        assert_eq!(labels, vec![vec![], vec![1, 1], vec![1], vec![2]]);
    }

    #[test]
    fn recombine_merges_by_log_sum_exp() {
        let merged = recombine(vec![
            hyp(vec![1, 2], (0.25f64).ln(), vec![0, 1]),
            hyp(vec![1, 2], (0.25f64).ln(), vec![0, 0]),
            hyp(vec![2], (0.1f64).ln(), vec![1]),
        ]);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].labels, vec![1, 2]);
        assert!((merged[0].score - 0.5f64.ln()).abs() < 1e-12);
        // Equal member scores: the lexicographically earlier alignment wins.
        assert_eq!(merged[0].timesteps, vec![0, 0]);
    }

    #[test]
    fn recombine_is_order_independent() {
        let a = vec![
            hyp(vec![1], -0.3, vec![0]),
            hyp(vec![1], -0.9, vec![1]),
            hyp(vec![1, 2], -1.1, vec![0, 1]),
        ];
        let mut b = a.clone();
        b.reverse();
        let ra = recombine(a);
        let rb = recombine(b);
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(rb.iter()) {
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.score.to_bits(), y.score.to_bits());
            assert_eq!(x.timesteps, y.timesteps);
        }
    }

    #[test]
    fn expansion_histogram_counts_idle_frames() {
        let hist = expansion_histogram(&[1, 1, 3], 4);
        assert_eq!(hist.get(&0), Some(&2));
        assert_eq!(hist.get(&1), Some(&1));
        assert_eq!(hist.get(&2), Some(&1));
    }

    #[test]
    fn lattice_scorer_reads_rows_by_prefix_length() {
        let mut table = Array3::zeros((2, 2, 3));
        table.fill((1.0f64 / 3.0).ln());
        table[(1, 1, 0)] = 0.9f64.ln();
        let lattice = PosteriorLattice::new(table).unwrap();
        let scorer = LatticeScorer::new(&lattice);
        let (dec0, s0) = scorer.start();
        let lp0 = scorer.log_probs(0, &dec0);
        assert!((lp0[1] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        let (dec1, _) = scorer.step(2, &s0);
        let lp1 = scorer.log_probs(1, &dec1);
        assert!((lp1[0] - 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("beam".parse::<Strategy>().is_err());
    }
}
