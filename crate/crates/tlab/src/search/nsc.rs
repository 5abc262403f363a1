//! Constrained search: at most `n_step` labels per frame, expanded in
//! batched rounds, with prefix mass folded into close extensions.
//!
//! Each frame starts by scoring every beam member. A hypothesis that
//! extends another beam member by fewer than `prefix_alpha` labels absorbs
//! the shorter one's mass through the connecting label posteriors at this
//! frame — the per-frame counterpart of merging alignments that emit those
//! labels here. Rounds then alternate: blank versions accumulate into the
//! carried set, label extensions are pruned to the beam and advanced with
//! one batched decoder call. After the last round the fresh extensions take
//! a closing blank so they are comparable with the carried set — unless a
//! single expansion round runs under an estimated expansion count above
//! one, in which case they stay open and the next frame continues them.
//!
//! Hypotheses keep their decoder output history; it serves the deeper
//! prefix lookups (`prefix_alpha > 2`) without recomputing the decoder.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ndarray::Array1;

use super::{
    finish_report, fused_row, lm_advance, BeamConfig, DecodeReport, Finished, Fusion, Instrument,
    SearchScorer,
};
use crate::math::log_add;
use crate::{Label, Result};

#[derive(Clone)]
struct NHyp<S> {
    labels: Vec<Label>,
    score: f64,
    timesteps: Vec<usize>,
    /// Decoder outputs along the prefix: `dec_hist[j]` has consumed `j`
    /// labels; the last entry is current.
    dec_hist: Vec<Array1<f64>>,
    state: S,
    lm_state: Option<Array1<f64>>,
    /// Weighted fusion-LM increment paid for each label (zeros without
    /// fusion); reused when suffix mass is accumulated.
    lm_incs: Vec<f64>,
}

fn nhyp_order<S>(a: &NHyp<S>, b: &NHyp<S>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.labels.len().cmp(&b.labels.len()))
        .then_with(|| a.labels.cmp(&b.labels))
        .then_with(|| a.timesteps.cmp(&b.timesteps))
}

fn merge_nsc<S>(map: &mut BTreeMap<Vec<Label>, NHyp<S>>, hyp: NHyp<S>) {
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

/// Label extension awaiting its decoder step; materialized only if it
/// survives pruning.
struct Cand {
    labels: Vec<Label>,
    score: f64,
    timesteps: Vec<usize>,
    parent: usize,
    label: Label,
    lm_inc: f64,
}

fn cand_order(a: &Cand, b: &Cand) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.labels.len().cmp(&b.labels.len()))
        .then_with(|| a.labels.cmp(&b.labels))
        .then_with(|| a.timesteps.cmp(&b.timesteps))
}

pub fn nsc_search<M: SearchScorer>(
    model: &M,
    cfg: &BeamConfig,
    fusion: Option<&Fusion<'_>>,
) -> Result<DecodeReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut instrument = Instrument::default();
    let t_len = model.t_len();
    let vocab = model.vocab();

    let (dec0, state0) = model.start();
    instrument.decoder_calls += 1;
    let mut beam: Vec<NHyp<M::State>> = vec![NHyp {
        labels: Vec::new(),
        score: 0.0,
        timesteps: Vec::new(),
        dec_hist: vec![dec0],
        state: state0,
        lm_state: fusion.map(|f| f.lm.start()),
        lm_incs: Vec::new(),
    }];

    for t in 0..t_len {
        // Shortest-first so prefix mass cascades into longer extensions.
        let mut pool = std::mem::take(&mut beam);
        pool.sort_by(|a, b| {
            a.labels
                .len()
                .cmp(&b.labels.len())
                .then_with(|| a.labels.cmp(&b.labels))
        });
        let initial: BTreeSet<Vec<Label>> = pool.iter().map(|h| h.labels.clone()).collect();
        let index: BTreeMap<Vec<Label>, usize> =
            pool.iter().enumerate().map(|(i, h)| (h.labels.clone(), i)).collect();
        let lps: Vec<Array1<f64>> = pool
            .iter()
            .map(|h| {
                instrument.joint_calls += 1;
                model.log_probs(t, h.dec_hist.last().unwrap())
            })
            .collect();

        // Boosts read the pre-merge scores: a gap-two prefix reaches its
        // descendant once through the direct pair, never a second time
        // through an intermediate that was itself boosted.
        let base: Vec<f64> = pool.iter().map(|h| h.score).collect();
        for i in 0..pool.len() {
            for j in 0..i {
                let gap = pool[i].labels.len() - pool[j].labels.len();
                if gap == 0 || gap >= cfg.prefix_alpha {
                    continue;
                }
                if !pool[i].labels.starts_with(&pool[j].labels) {
                    continue;
                }
                let mut addition = base[j];
                for m in pool[j].labels.len()..pool[i].labels.len() {
                    let label = pool[i].labels[m] as usize;
                    let lp_val = if let Some(&idx) = index.get(&pool[i].labels[..m]) {
                        lps[idx][label]
                    } else {
                        instrument.joint_calls += 1;
                        model.log_probs(t, &pool[i].dec_hist[m])[label]
                    };
                    addition += lp_val + pool[i].lm_incs[m];
                }
                pool[i].score = log_add(pool[i].score, addition);
            }
        }

        let mut carried: BTreeMap<Vec<Label>, NHyp<M::State>> = BTreeMap::new();
        let mut work = pool;
        let mut work_lps = lps;
        for round in 1..=cfg.n_step {
            for (hyp, lp) in work.iter().zip(&work_lps) {
                let blank_score = hyp.score + lp[0];
                if blank_score > f64::NEG_INFINITY {
                    merge_nsc(
                        &mut carried,
                        NHyp {
                            score: blank_score,
                            ..hyp.clone()
                        },
                    );
                }
            }

            let mut cands: Vec<Cand> = Vec::new();
            for (pi, (hyp, lp)) in work.iter().zip(&work_lps).enumerate() {
                let lm_incs = fused_row(fusion, &hyp.lm_state);
                for k in 1..=vocab {
                    let inc = lm_incs.as_ref().map_or(0.0, |r| r[(k - 1) as usize]);
                    let score = hyp.score + lp[k as usize] + inc;
                    // Zero-mass extensions cannot contribute anywhere.
                    if score == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut labels = hyp.labels.clone();
                    labels.push(k);
                    // Sequences already in the frame's starting set travel
                    // the carried path; a duplicate here would double their
                    // mass.
                    if initial.contains(&labels) {
                        continue;
                    }
                    let mut timesteps = hyp.timesteps.clone();
                    timesteps.push(t);
                    cands.push(Cand {
                        labels,
                        score,
                        timesteps,
                        parent: pi,
                        label: k,
                        lm_inc: inc,
                    });
                }
            }
            cands.sort_by(cand_order);
            cands.truncate(cfg.beam);
            if cands.is_empty() {
                break;
            }

            let labels: Vec<Label> = cands.iter().map(|c| c.label).collect();
            let stepped = {
                let states: Vec<&M::State> = cands.iter().map(|c| &work[c.parent].state).collect();
                model.batch_step(&labels, &states)
            };
            instrument.decoder_calls += cands.len() as u64;
            let mut next: Vec<NHyp<M::State>> = Vec::with_capacity(cands.len());
            for (cand, (dec_out, state)) in cands.into_iter().zip(stepped) {
                let parent = &work[cand.parent];
                let mut dec_hist = parent.dec_hist.clone();
                dec_hist.push(dec_out);
                let mut lm_incs = parent.lm_incs.clone();
                lm_incs.push(cand.lm_inc);
                next.push(NHyp {
                    labels: cand.labels,
                    score: cand.score,
                    timesteps: cand.timesteps,
                    dec_hist,
                    state,
                    lm_state: lm_advance(fusion, &parent.lm_state, cand.label),
                    lm_incs,
                });
            }

            if round < cfg.n_step {
                work_lps = next
                    .iter()
                    .map(|h| {
                        instrument.joint_calls += 1;
                        model.log_probs(t, h.dec_hist.last().unwrap())
                    })
                    .collect();
                work = next;
            } else {
                let close_out = !(cfg.n_step == 1 && cfg.auto_n_step > 1);
                if close_out {
                    for hyp in &mut next {
                        let lp = model.log_probs(t, hyp.dec_hist.last().unwrap());
                        instrument.joint_calls += 1;
                        hyp.score += lp[0];
                    }
                }
                for hyp in next {
                    if hyp.score > f64::NEG_INFINITY {
                        merge_nsc(&mut carried, hyp);
                    }
                }
            }
        }

        beam = carried.into_values().collect();
        beam.sort_by(nhyp_order);
        beam.truncate(cfg.beam);
    }

    let finished: Vec<Finished> = beam
        .into_iter()
        .map(|h| Finished {
            labels: h.labels,
            score: h.score,
            timesteps: h.timesteps,
        })
        .collect();
    Ok(finish_report(
        "nsc",
        finished,
        cfg.nbest,
        t_len,
        instrument,
        started,
        false,
    ))
}
