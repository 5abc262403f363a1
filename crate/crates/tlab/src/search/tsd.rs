//! Time-synchronous search: every frame runs a fixed number of expansion
//! rounds, so at most `max_sym_exp - 1` labels can be emitted per frame.
//!
//! Round `v` scores the current candidate set against the frame. Blank
//! extensions accumulate (merged by sequence) into the set carried to the
//! next frame; label extensions — only while rounds remain — form the next
//! round's candidates, pruned to the beam and advanced in one batched
//! decoder call. With `max_sym_exp = 1` no labels can ever be emitted and
//! the decode is empty by construction.

use std::collections::BTreeMap;
use std::time::Instant;

use super::{
    finish_report, fused_row, merge_sync, resolve_pending, sync_order, BeamConfig, DecodeReport,
    Finished, Fusion, Instrument, SearchScorer, SyncHyp,
};
use crate::{Label, Result};

pub fn tsd_search<M: SearchScorer>(
    model: &M,
    cfg: &BeamConfig,
    fusion: Option<&Fusion<'_>>,
) -> Result<DecodeReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut instrument = Instrument::default();
    let t_len = model.t_len();
    let vocab = model.vocab();

    let (dec_out, state) = model.start();
    instrument.decoder_calls += 1;
    let mut beam: Vec<SyncHyp<M::State>> = vec![SyncHyp {
        labels: Vec::new(),
        score: 0.0,
        timesteps: Vec::new(),
        dec_out,
        state,
        lm_state: fusion.map(|f| f.lm.start()),
        pending: None,
    }];

    for t in 0..t_len {
        let mut closed: BTreeMap<Vec<Label>, SyncHyp<M::State>> = BTreeMap::new();
        let mut current = beam.clone();
        for round in 1..=cfg.max_sym_exp {
            let mut expanded: Vec<SyncHyp<M::State>> = Vec::new();
            for hyp in &current {
                let lp = model.log_probs(t, &hyp.dec_out);
                instrument.joint_calls += 1;

                let blank_score = hyp.score + lp[0];
                if blank_score > f64::NEG_INFINITY {
                    merge_sync(
                        &mut closed,
                        SyncHyp {
                            score: blank_score,
                            pending: None,
                            ..hyp.clone()
                        },
                    );
                }

                if round < cfg.max_sym_exp {
                    let lm_incs = fused_row(fusion, &hyp.lm_state);
                    for k in 1..=vocab {
                        let inc = lm_incs.as_ref().map_or(0.0, |r| r[(k - 1) as usize]);
                        let score = hyp.score + lp[k as usize] + inc;
                        // A zero-mass extension can never contribute to any
                        // later sum; dropping it keeps the beam meaningful.
                        if score == f64::NEG_INFINITY {
                            continue;
                        }
                        let mut labels = hyp.labels.clone();
                        labels.push(k);
                        let mut timesteps = hyp.timesteps.clone();
                        timesteps.push(t);
                        // Children of distinct same-length parents differ in
                        // their prefix and children of different-length
                        // parents differ in length, so no merging is needed
                        // within a round.
                        expanded.push(SyncHyp {
                            labels,
                            score,
                            timesteps,
                            dec_out: hyp.dec_out.clone(),
                            state: hyp.state.clone(),
                            lm_state: hyp.lm_state.clone(),
                            pending: Some(k),
                        });
                    }
                }
            }
            if round < cfg.max_sym_exp {
                expanded.sort_by(sync_order);
                expanded.truncate(cfg.beam);
                resolve_pending(model, fusion, &mut expanded, &mut instrument);
                current = expanded;
                if current.is_empty() {
                    break;
                }
            }
        }
        beam = closed.into_values().collect();
        beam.sort_by(sync_order);
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
        "tsd",
        finished,
        cfg.nbest,
        t_len,
        instrument,
        started,
        false,
    ))
}
