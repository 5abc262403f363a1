//! Score-ordered beam search: per frame, repeatedly expand the best open
//! hypothesis until the closed set dominates everything still open.
//!
//! Closed hypotheses (those that took blank at the current frame) merge by
//! label sequence with log-sum scores, so a returned score is the mass of
//! every explored alignment of that sequence. A hypothesis may emit several
//! labels within one frame; the frame ends when `beam` closed candidates
//! outscore the best open one.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeMap};
use std::time::Instant;

use ndarray::Array1;

use super::{
    finish_report, fused_row, lm_advance, BeamConfig, DecodeReport, Finished, Fusion, Instrument,
    SearchScorer,
};
use crate::math::log_add;
use crate::{Label, Result};

/// Decoder resolution: hypotheses created by a label extension defer their
/// decoder step until they are popped, so pruned branches never pay it.
enum Res<S> {
    Ready { dec_out: Array1<f64>, state: S },
    Pending { parent: S, label: Label },
}

struct DHyp<S> {
    labels: Vec<Label>,
    score: f64,
    timesteps: Vec<usize>,
    res: Res<S>,
    /// Current LM state when `Ready`, the parent's when `Pending`.
    lm_state: Option<Array1<f64>>,
}

fn dhyp_order<S>(a: &DHyp<S>, b: &DHyp<S>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.labels.len().cmp(&b.labels.len()))
        .then_with(|| a.labels.cmp(&b.labels))
        .then_with(|| a.timesteps.cmp(&b.timesteps))
}

/// Max-heap adapter: the canonical best hypothesis is `Ord`-greatest.
struct HeapEntry<S>(DHyp<S>);

impl<S> PartialEq for HeapEntry<S> {
    fn eq(&self, other: &Self) -> bool {
        dhyp_order(&self.0, &other.0) == Ordering::Equal
    }
}
impl<S> Eq for HeapEntry<S> {}
impl<S> PartialOrd for HeapEntry<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<S> Ord for HeapEntry<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        dhyp_order(&other.0, &self.0)
    }
}

fn merge_closed<S>(closed: &mut BTreeMap<Vec<Label>, DHyp<S>>, hyp: DHyp<S>) {
    match closed.get_mut(&hyp.labels) {
        None => {
            closed.insert(hyp.labels.clone(), hyp);
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

pub fn beam_search<M: SearchScorer>(
    model: &M,
    cfg: &BeamConfig,
    fusion: Option<&Fusion<'_>>,
) -> Result<DecodeReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut instrument = Instrument::default();
    let vocab = model.vocab();

    let (dec_out, state) = model.start();
    instrument.decoder_calls += 1;
    let mut beam: Vec<DHyp<M::State>> = vec![DHyp {
        labels: Vec::new(),
        score: 0.0,
        timesteps: Vec::new(),
        res: Res::Ready { dec_out, state },
        lm_state: fusion.map(|f| f.lm.start()),
    }];

    // Expansions one frame may perform; generous next to any plausible
    // workload, present so a degenerate scorer terminates.
    let pop_cap = cfg.beam * (cfg.u_max + 2) * (vocab as usize + 1);

    for t in 0..model.t_len() {
        let mut open: BinaryHeap<HeapEntry<M::State>> =
            beam.drain(..).map(HeapEntry).collect();
        let mut closed: BTreeMap<Vec<Label>, DHyp<M::State>> = BTreeMap::new();
        let mut pops = 0usize;

        while let Some(HeapEntry(hyp)) = open.pop() {
            if hyp.score == f64::NEG_INFINITY {
                break;
            }
            if closed.values().filter(|c| c.score > hyp.score).count() >= cfg.beam {
                break;
            }
            pops += 1;

            let (dec_out, state, lm_state) = match hyp.res {
                Res::Ready { dec_out, state } => (dec_out, state, hyp.lm_state),
                Res::Pending { parent, label } => {
                    let (dec_out, state) = model.step(label, &parent);
                    instrument.decoder_calls += 1;
                    let lm_state = lm_advance(fusion, &hyp.lm_state, label);
                    (dec_out, state, lm_state)
                }
            };
            let lp = model.log_probs(t, &dec_out);
            instrument.joint_calls += 1;

            let blank_score = hyp.score + lp[0];
            if blank_score > f64::NEG_INFINITY {
                merge_closed(
                    &mut closed,
                    DHyp {
                        labels: hyp.labels.clone(),
                        score: blank_score,
                        timesteps: hyp.timesteps.clone(),
                        res: Res::Ready {
                            dec_out: dec_out.clone(),
                            state: state.clone(),
                        },
                        lm_state: lm_state.clone(),
                    },
                );
            }

            if hyp.labels.len() < cfg.u_max {
                let lm_incs = fused_row(fusion, &lm_state);
                for k in 1..=vocab {
                    let inc = lm_incs.as_ref().map_or(0.0, |r| r[(k - 1) as usize]);
                    let score = hyp.score + lp[k as usize] + inc;
                    // Zero-mass extensions cannot contribute anywhere.
                    if score == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut labels = hyp.labels.clone();
                    labels.push(k);
                    let mut timesteps = hyp.timesteps.clone();
                    timesteps.push(t);
                    open.push(HeapEntry(DHyp {
                        labels,
                        score,
                        timesteps,
                        res: Res::Pending {
                            parent: state.clone(),
                            label: k,
                        },
                        lm_state: lm_state.clone(),
                    }));
                }
            }

            if pops >= pop_cap {
                break;
            }
        }

        beam = closed.into_values().collect();
        beam.sort_by(dhyp_order);
        beam.truncate(cfg.beam);
    }

    let incomplete = beam.is_empty();
    let finished: Vec<Finished> = beam
        .into_iter()
        .map(|h| Finished {
            labels: h.labels,
            score: h.score,
            timesteps: h.timesteps,
        })
        .collect();
    Ok(finish_report(
        "default",
        finished,
        cfg.nbest,
        model.t_len(),
        instrument,
        started,
        incomplete,
    ))
}
