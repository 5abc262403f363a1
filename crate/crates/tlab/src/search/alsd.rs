//! Alignment-length synchronous search: all hypotheses on the same total
//! step count `i = frame + labels emitted` advance together.
//!
//! A hypothesis with `u` labels sits at frame `i - u` on step `i`; a blank
//! moves it one frame right, a label keeps it on the current frame one step
//! longer. Hypotheses that take blank at the last frame are complete and
//! accumulate (merged by sequence) in the final set; everything else
//! competes for the beam per step, which keeps candidates of different
//! lengths directly comparable.

use std::collections::BTreeMap;
use std::time::Instant;

use super::{
    finish_report, fused_row, merge_sync, resolve_pending, sync_order, BeamConfig, DecodeReport,
    Finished, Fusion, Instrument, SearchScorer, SyncHyp,
};
use crate::math::log_add;
use crate::{Label, Result};

fn merge_finished(map: &mut BTreeMap<Vec<Label>, Finished>, cand: Finished) {
    match map.get_mut(&cand.labels) {
        None => {
            map.insert(cand.labels.clone(), cand);
        }
        Some(kept) => {
            let merged = log_add(kept.score, cand.score);
            let replace = match cand.score.total_cmp(&kept.score) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => cand.timesteps < kept.timesteps,
            };
            if replace {
                let mut cand = cand;
                cand.score = merged;
                *kept = cand;
            } else {
                kept.score = merged;
            }
        }
    }
}

pub fn alsd_search<M: SearchScorer>(
    model: &M,
    cfg: &BeamConfig,
    fusion: Option<&Fusion<'_>>,
) -> Result<DecodeReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut instrument = Instrument::default();
    let t_len = model.t_len();
    let vocab = model.vocab();
    // Output length cannot exceed the steps left after reserving one blank
    // per frame; clamping also bounds the step loop.
    let u_cap = cfg.u_max.min(t_len.saturating_sub(1));

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
    let mut finals: BTreeMap<Vec<Label>, Finished> = BTreeMap::new();

    for i in 1..=(t_len + u_cap) {
        let mut merged: BTreeMap<Vec<Label>, SyncHyp<M::State>> = BTreeMap::new();
        for hyp in &beam {
            let u = hyp.labels.len();
            // 1-based frame for this hypothesis on step i; beam members
            // always satisfy u <= i - 1, hyps past the last frame are done.
            let t1 = i - u;
            if t1 > t_len {
                continue;
            }
            let t0 = t1 - 1;
            let lp = model.log_probs(t0, &hyp.dec_out);
            instrument.joint_calls += 1;

            let blank = SyncHyp {
                score: hyp.score + lp[0],
                pending: None,
                ..hyp.clone()
            };
            if blank.score > f64::NEG_INFINITY {
                if t1 == t_len {
                    merge_finished(
                        &mut finals,
                        Finished {
                            labels: blank.labels.clone(),
                            score: blank.score,
                            timesteps: blank.timesteps.clone(),
                        },
                    );
                }
                merge_sync(&mut merged, blank);
            }

            if u < u_cap {
                let lm_incs = fused_row(fusion, &hyp.lm_state);
                for k in 1..=vocab {
                    let inc = lm_incs.as_ref().map_or(0.0, |r| r[(k - 1) as usize]);
                    let score = hyp.score + lp[k as usize] + inc;
                    // Zero-mass extensions are dead paths: they add nothing
                    // to any merged sum and would only crowd the beam.
                    if score == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut labels = hyp.labels.clone();
                    labels.push(k);
                    let mut timesteps = hyp.timesteps.clone();
                    timesteps.push(t0);
                    merge_sync(
                        &mut merged,
                        SyncHyp {
                            labels,
                            score,
                            timesteps,
                            dec_out: hyp.dec_out.clone(),
                            state: hyp.state.clone(),
                            lm_state: hyp.lm_state.clone(),
                            pending: Some(k),
                        },
                    );
                }
            }
        }

        let mut next: Vec<SyncHyp<M::State>> = merged.into_values().collect();
        if next.is_empty() {
            // Every continuation is dead; keep the previous step's beam so
            // a stuck decode still reports its best partials.
            break;
        }
        next.sort_by(sync_order);
        next.truncate(cfg.beam);
        beam = next;
        resolve_pending(model, fusion, &mut beam, &mut instrument);
    }

    let (finished, incomplete) = if finals.is_empty() {
        // Nothing reached the last frame with a blank; hand back the best
        // partials so the caller still sees something.
        let partials = beam
            .into_iter()
            .map(|h| Finished {
                labels: h.labels,
                score: h.score,
                timesteps: h.timesteps,
            })
            .collect();
        (partials, true)
    } else {
        (finals.into_values().collect(), false)
    };
    Ok(finish_report(
        "alsd",
        finished,
        cfg.nbest,
        t_len,
        instrument,
        started,
        incomplete,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::marginal_log_prob;
    use crate::search::testutil::lattice_from_probs;
    use crate::search::LatticeScorer;
    use ndarray::{arr1, s, Array3};

    /// T = 3, V = 2; row 2 grounds label mass so sequences stop at length 2.
    fn closed_lattice() -> crate::losses::PosteriorLattice {
        let mut probs = Array3::zeros((3, 3, 3));
        probs.slice_mut(s![0, 0, ..]).assign(&arr1(&[0.5, 0.3, 0.2]));
        probs.slice_mut(s![0, 1, ..]).assign(&arr1(&[0.4, 0.4, 0.2]));
        probs.slice_mut(s![0, 2, ..]).assign(&arr1(&[1.0, 0.0, 0.0]));
        probs.slice_mut(s![1, 0, ..]).assign(&arr1(&[0.6, 0.1, 0.3]));
        probs.slice_mut(s![1, 1, ..]).assign(&arr1(&[0.5, 0.2, 0.3]));
        probs.slice_mut(s![1, 2, ..]).assign(&arr1(&[1.0, 0.0, 0.0]));
        probs.slice_mut(s![2, 0, ..]).assign(&arr1(&[0.7, 0.2, 0.1]));
        probs.slice_mut(s![2, 1, ..]).assign(&arr1(&[0.6, 0.2, 0.2]));
        probs.slice_mut(s![2, 2, ..]).assign(&arr1(&[1.0, 0.0, 0.0]));
        lattice_from_probs(probs)
    }

    #[test]
    fn merges_alignments_of_one_sequence() {
        // T = 2, V = 1: the target [1] has exactly two alignments; the
        // search must return their combined mass.
        let mut probs = Array3::zeros((2, 2, 2));
        probs.slice_mut(s![0, 0, ..]).assign(&arr1(&[0.4, 0.6]));
        probs.slice_mut(s![0, 1, ..]).assign(&arr1(&[0.8, 0.2]));
        probs.slice_mut(s![1, 0, ..]).assign(&arr1(&[0.3, 0.7]));
        probs.slice_mut(s![1, 1, ..]).assign(&arr1(&[0.9, 0.1]));
        let lattice = lattice_from_probs(probs);
        let scorer = LatticeScorer::new(&lattice);
        let cfg = BeamConfig {
            beam: 8,
            nbest: 4,
            u_max: 1,
            ..Default::default()
        };
        let report = alsd_search(&scorer, &cfg, None).unwrap();
        let one = report.nbest.iter().find(|c| c.labels == vec![1]).unwrap();
        let exact = marginal_log_prob(&lattice, &[1]).unwrap();
        assert!((one.score - exact).abs() < 1e-9);
        assert!(!report.incomplete);
    }

    #[test]
    fn wide_beam_scores_equal_full_alignment_marginals() {
        let lattice = closed_lattice();
        let scorer = LatticeScorer::new(&lattice);
        let cfg = BeamConfig {
            beam: 32,
            nbest: 8,
            u_max: 4,
            ..Default::default()
        };
        let report = alsd_search(&scorer, &cfg, None).unwrap();
        assert!(report.nbest.len() >= 3);
        for cand in &report.nbest {
            let exact = marginal_log_prob(&lattice, &cand.labels).unwrap();
            assert!(
                (cand.score - exact).abs() < 1e-9,
                "sequence {:?}: search {} vs marginal {exact}",
                cand.labels,
                cand.score
            );
        }
    }

    #[test]
    fn length_cap_clamps_to_frames_minus_one() {
        let mut probs = Array3::zeros((2, 4, 3));
        for t in 0..2 {
            for u in 0..4 {
                probs.slice_mut(s![t, u, ..]).assign(&arr1(&[0.2, 0.5, 0.3]));
            }
        }
        let lattice = lattice_from_probs(probs);
        let scorer = LatticeScorer::new(&lattice);
        let cfg = BeamConfig {
            beam: 16,
            nbest: 16,
            u_max: 10,
            ..Default::default()
        };
        let report = alsd_search(&scorer, &cfg, None).unwrap();
        for cand in &report.nbest {
            assert!(cand.labels.len() <= 1, "cap is min(u_max, T - 1) = 1");
        }
    }

    #[test]
    fn impossible_final_blank_returns_partials() {
        let mut probs = Array3::zeros((2, 3, 3));
        for u in 0..3 {
            probs.slice_mut(s![0, u, ..]).assign(&arr1(&[0.4, 0.3, 0.3]));
            probs.slice_mut(s![1, u, ..]).assign(&arr1(&[0.0, 0.5, 0.5]));
        }
        let lattice = lattice_from_probs(probs);
        let scorer = LatticeScorer::new(&lattice);
        let cfg = BeamConfig {
            beam: 4,
            nbest: 4,
            u_max: 2,
            ..Default::default()
        };
        let report = alsd_search(&scorer, &cfg, None).unwrap();
        assert!(report.incomplete);
        assert!(!report.nbest.is_empty());
    }

    #[test]
    fn joint_calls_stay_within_the_step_budget() {
        let lattice = closed_lattice();
        let scorer = LatticeScorer::new(&lattice);
        let cfg = BeamConfig {
            beam: 2,
            nbest: 2,
            u_max: 2,
            ..Default::default()
        };
        let report = alsd_search(&scorer, &cfg, None).unwrap();
        assert!(report.joint_calls <= ((3 + 2) * 2) as u64);
    }
}
