//! Best-symbol decoding: walk the frames, emit whatever the joint ranks
//! first, move on at blank.

use std::time::Instant;

use super::{finish_report, DecodeReport, Finished, Instrument, SearchScorer};
use crate::Label;

/// Labels a frame may emit before the decode is cut off as runaway; far
/// beyond anything a sane model produces, present only so a degenerate
/// scorer cannot hang the process.
const FRAME_EMIT_CAP: usize = 10_000;

/// Single-hypothesis decode. At each frame the top-scoring symbol is taken
/// repeatedly — extending the output while it is a label, advancing to the
/// next frame once it is blank. Exact score ties prefer blank, then the
/// smallest label.
pub fn greedy_search<M: SearchScorer>(model: &M) -> DecodeReport {
    let started = Instant::now();
    let mut instrument = Instrument::default();
    let (mut dec_out, mut state) = model.start();
    instrument.decoder_calls += 1;

    let mut labels: Vec<Label> = Vec::new();
    let mut timesteps: Vec<usize> = Vec::new();
    let mut score = 0.0;
    let mut incomplete = false;

    'frames: for t in 0..model.t_len() {
        let mut emitted = 0;
        loop {
            let lp = model.log_probs(t, &dec_out);
            instrument.joint_calls += 1;
            let mut best_k = 0usize;
            for k in 1..lp.len() {
                if lp[k] > lp[best_k] {
                    best_k = k;
                }
            }
            score += lp[best_k];
            if best_k == 0 {
                break;
            }
            labels.push(best_k as Label);
            timesteps.push(t);
            let (next_out, next_state) = model.step(best_k as Label, &state);
            instrument.decoder_calls += 1;
            dec_out = next_out;
            state = next_state;
            emitted += 1;
            if emitted >= FRAME_EMIT_CAP {
                incomplete = true;
                break 'frames;
            }
        }
    }

    let finished = vec![Finished {
        labels,
        score,
        timesteps,
    }];
    finish_report("greedy", finished, 1, model.t_len(), instrument, started, incomplete)
}
